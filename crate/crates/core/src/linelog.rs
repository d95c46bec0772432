//! Line-delimited JSON files where every line carries a CRC-32 of its own
//! payload.
//!
//! A line is `{<members>,"crc":"xxxxxxxx"}\n`. The checksum covers the bytes
//! of the line that precede `,"crc":"`, i.e. the opening brace and every
//! member before the checksum. Readers accept lines in file order and stop at
//! the first line that is incomplete, fails its checksum, or is rejected by
//! the caller's validator; everything past that point is the tail.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

const CRC_KEY: &str = ",\"crc\":\"";
// `,"crc":"` + 8 hex + `"}`
const CRC_SUFFIX_LEN: usize = CRC_KEY.len() + 8 + 2;

/// Appends the checksum member to a serialized JSON object and terminates
/// the line.
pub fn seal(object_json: &str) -> String {
    debug_assert!(object_json.starts_with('{') && object_json.ends_with('}'));
    let body = &object_json[..object_json.len() - 1];
    let crc = crc32fast::hash(body.as_bytes());
    format!("{body}{CRC_KEY}{crc:08x}\"}}\n")
}

/// Checks a line (without its trailing newline).
pub fn verify(line: &str) -> bool {
    if line.len() < CRC_SUFFIX_LEN + 1 || !line.ends_with("\"}") {
        return false;
    }
    let split = line.len() - CRC_SUFFIX_LEN;
    let (body, suffix) = line.split_at(split);
    if !suffix.starts_with(CRC_KEY) {
        return false;
    }
    let hex = &suffix[CRC_KEY.len()..CRC_KEY.len() + 8];
    match u32::from_str_radix(hex, 16) {
        Ok(stored) => {
            hex.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
                && stored == crc32fast::hash(body.as_bytes())
        }
        Err(_) => false,
    }
}

/// Result of scanning a byte range of a log.
#[derive(Debug, Default)]
pub struct Scan {
    /// Accepted lines, without newlines.
    pub lines: Vec<String>,
    /// Offset just past the last accepted line.
    pub valid_end: u64,
    /// Bytes following `valid_end` that were not accepted.
    pub tail_bytes: u64,
}

/// Scans `bytes`, which start at file offset `base`. `first_index` is the
/// zero-based line number of the first line in `bytes`, passed to the
/// validator together with the line text.
pub fn scan_bytes(
    bytes: &[u8],
    base: u64,
    first_index: u64,
    validator: &dyn Fn(u64, &str) -> bool,
) -> Scan {
    let mut scan = Scan {
        valid_end: base,
        ..Scan::default()
    };
    let mut pos = 0usize;
    while let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') {
        let raw = &bytes[pos..pos + nl];
        let Ok(line) = std::str::from_utf8(raw) else {
            break;
        };
        let index = first_index + scan.lines.len() as u64;
        if !verify(line) || !validator(index, line) {
            break;
        }
        scan.lines.push(line.to_string());
        pos += nl + 1;
    }
    scan.valid_end = base + pos as u64;
    scan.tail_bytes = (bytes.len() - pos) as u64;
    scan
}

/// A checksummed log file plus its advisory lock file (`<path>.lock`).
#[derive(Debug, Clone)]
pub struct LineLog {
    path: PathBuf,
    lock_path: PathBuf,
}

/// Holds the exclusive advisory lock until dropped.
pub struct LogLock {
    file: File,
}

impl Drop for LogLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

impl LineLog {
    /// Opens (creating if needed) the log at `path`.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        OpenOptions::new().create(true).append(true).open(&path)?;
        let mut lock_name = path.as_os_str().to_owned();
        lock_name.push(".lock");
        Ok(Self {
            path,
            lock_path: PathBuf::from(lock_name),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Blocks until the cross-process write lock is held.
    pub fn lock(&self) -> io::Result<LogLock> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&self.lock_path)?;
        file.lock()?;
        Ok(LogLock { file })
    }

    pub fn len(&self) -> io::Result<u64> {
        Ok(fs::metadata(&self.path)?.len())
    }

    pub fn is_empty(&self) -> io::Result<bool> {
        Ok(self.len()? == 0)
    }

    /// Lock-free read of everything from `offset` to the current end of file.
    pub fn read_from(
        &self,
        offset: u64,
        first_index: u64,
        validator: &dyn Fn(u64, &str) -> bool,
    ) -> io::Result<Scan> {
        let mut file = File::open(&self.path)?;
        let len = file.metadata()?.len();
        if len <= offset {
            return Ok(Scan {
                valid_end: offset.min(len),
                ..Scan::default()
            });
        }
        file.seek(SeekFrom::Start(offset))?;
        let mut bytes = Vec::with_capacity((len - offset) as usize);
        file.read_to_end(&mut bytes)?;
        Ok(scan_bytes(&bytes, offset, first_index, validator))
    }

    /// Drops every byte after `valid_end`. Caller must hold the lock.
    pub fn truncate_to(&self, _guard: &LogLock, valid_end: u64) -> io::Result<()> {
        let file = OpenOptions::new().write(true).open(&self.path)?;
        file.set_len(valid_end)?;
        file.sync_all()
    }

    /// Writes one sealed line in a single append. Caller must hold the lock.
    pub fn append_line(&self, _guard: &LogLock, line: &str, durable: bool) -> io::Result<()> {
        debug_assert!(line.ends_with('\n'));
        let mut file = OpenOptions::new().append(true).open(&self.path)?;
        file.write_all(line.as_bytes())?;
        if durable {
            file.sync_data()?;
        }
        Ok(())
    }
}
