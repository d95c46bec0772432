//! Supervisor steering commands, stored in a second checksummed log beside
//! the memory log. Agents fold the log into a [`ControlState`] between
//! generations.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{now, rfc3339, validate_template, TemplateError};
use crate::linelog::{seal, LineLog, LogLock};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("control log unavailable: {0}")]
    Storage(#[from] io::Error),
    #[error("unknown agent {0}")]
    UnknownAgent(String),
    #[error("invalid seed prompt: {0}")]
    InvalidSeed(#[from] TemplateError),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("control log line {0} is not a command")]
    Malformed(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    Register { agent_id: String },
    Pause { agent_id: String },
    Resume { agent_id: String },
    Params {
        agent_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epsilon: Option<f64>,
    },
    Seed { user_template: String },
}

impl Command {
    pub fn agent_id(&self) -> Option<&str> {
        match self {
            Command::Register { agent_id }
            | Command::Pause { agent_id }
            | Command::Resume { agent_id }
            | Command::Params { agent_id, .. } => Some(agent_id),
            Command::Seed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlEntry {
    pub seq: u64,
    #[serde(flatten)]
    pub command: Command,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AgentControl {
    pub paused: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingSeed {
    pub control_seq: u64,
    pub user_template: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ControlState {
    pub agents: BTreeMap<String, AgentControl>,
    /// Every seed ever submitted, in order; agents track which they consumed.
    pub seeds: Vec<PendingSeed>,
    /// Seq of the last folded entry.
    pub last_seq: Option<u64>,
}

impl ControlState {
    pub fn apply(&mut self, entry: &ControlEntry) {
        self.last_seq = Some(entry.seq);
        match &entry.command {
            Command::Register { agent_id } => {
                self.agents.entry(agent_id.clone()).or_default();
            }
            Command::Pause { agent_id } => self.agents.entry(agent_id.clone()).or_default().paused = true,
            Command::Resume { agent_id } => self.agents.entry(agent_id.clone()).or_default().paused = false,
            Command::Params {
                agent_id,
                temperature,
                epsilon,
            } => {
                let a = self.agents.entry(agent_id.clone()).or_default();
                if temperature.is_some() {
                    a.temperature = *temperature;
                }
                if epsilon.is_some() {
                    a.epsilon = *epsilon;
                }
            }
            Command::Seed { user_template } => self.seeds.push(PendingSeed {
                control_seq: entry.seq,
                user_template: user_template.clone(),
            }),
        }
    }

    pub fn agent(&self, agent_id: &str) -> AgentControl {
        self.agents.get(agent_id).cloned().unwrap_or_default()
    }
}

/// What the supervisor gets back for a command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ack {
    /// False when the command would not change state and was not recorded.
    pub recorded: bool,
    pub control_seq: Option<u64>,
    /// Agents apply the command at their next generation boundary, i.e.
    /// after memory record `effective_after_seq` (None: before the first).
    pub effective_after_seq: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentControl>,
}

fn encode(entry: &ControlEntry) -> String {
    let mut value = serde_json::to_value(entry).expect("entry serializes");
    // Fixed member order keeps lines stable: seq, cmd, fields, created_at.
    let obj = value.as_object_mut().expect("object");
    let mut out = String::from("{");
    out.push_str(&format!("\"seq\":{}", entry.seq));
    out.push_str(&format!(",\"cmd\":{}", obj["cmd"]));
    for (k, v) in obj.iter().filter(|(k, _)| !matches!(k.as_str(), "seq" | "cmd" | "created_at")) {
        out.push_str(&format!(",{}:{v}", serde_json::Value::String(k.clone())));
    }
    out.push_str(&format!(",\"created_at\":\"{}\"}}", rfc3339(&entry.created_at)));
    seal(&out)
}

fn decode(line: &str) -> Option<ControlEntry> {
    let mut value: serde_json::Value = serde_json::from_str(line).ok()?;
    value.as_object_mut()?.remove("crc");
    serde_json::from_value(value).ok()
}

#[derive(Debug, Default)]
struct Folded {
    offset: u64,
    count: u64,
    state: ControlState,
}

/// The control log. Writes serialize under the same lock-file discipline as
/// the memory store; reads are lock-free and incremental.
#[derive(Debug)]
pub struct ControlLog {
    log: LineLog,
    folded: Mutex<Folded>,
}

impl ControlLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ControlError> {
        Ok(Self {
            log: LineLog::open(path)?,
            folded: Mutex::new(Folded::default()),
        })
    }

    pub fn path(&self) -> &Path {
        self.log.path()
    }

    /// Current folded state (picks up lines appended by other processes).
    pub fn state(&self) -> Result<ControlState, ControlError> {
        Ok(self.refresh()?.0)
    }

    pub fn entries(&self) -> Result<Vec<ControlEntry>, ControlError> {
        let scan = self.log.read_from(0, 0, &|i, l| decode(l).is_some_and(|e| e.seq == i))?;
        scan.lines
            .iter()
            .enumerate()
            .map(|(i, l)| decode(l).ok_or(ControlError::Malformed(i as u64)))
            .collect()
    }

    fn refresh(&self) -> Result<(ControlState, u64, u64), ControlError> {
        let mut folded = self.folded.lock().expect("control state poisoned");
        if self.log.len()? < folded.offset {
            *folded = Folded::default();
        }
        let scan = self
            .log
            .read_from(folded.offset, folded.count, &|i, l| decode(l).is_some_and(|e| e.seq == i))?;
        for line in &scan.lines {
            let entry = decode(line).expect("validated");
            folded.state.apply(&entry);
            folded.count += 1;
        }
        folded.offset = scan.valid_end;
        Ok((folded.state.clone(), folded.count, folded.offset))
    }

    fn append_locked(&self, guard: &LogLock, command: Command) -> Result<u64, ControlError> {
        let (_, seq, valid_end) = self.refresh()?;
        if self.log.len()? > valid_end {
            self.log.truncate_to(guard, valid_end)?;
        }
        let entry = ControlEntry {
            seq,
            command,
            created_at: now(),
        };
        self.log.append_line(guard, &encode(&entry), true)?;
        self.refresh()?;
        Ok(seq)
    }

    /// Validates and records `command` unless it is a no-op (pausing a
    /// paused agent, resuming a running one, registering a known agent).
    /// `known_agent` decides whether an agent id outside the control log
    /// exists (e.g. it has records in memory).
    pub fn submit(
        &self,
        command: Command,
        known_agent: &dyn Fn(&str) -> bool,
        effective_after_seq: Option<u64>,
    ) -> Result<Ack, ControlError> {
        match &command {
            Command::Seed { user_template } => {
                validate_template(user_template)?;
            }
            Command::Params {
                temperature,
                epsilon,
                ..
            } => {
                if temperature.is_some_and(|t| !(0.0..=2.0).contains(&t)) {
                    return Err(ControlError::InvalidParam("temperature must be in [0, 2]".into()));
                }
                if epsilon.is_some_and(|e| !(0.0..=1.0).contains(&e)) {
                    return Err(ControlError::InvalidParam("epsilon must be in [0, 1]".into()));
                }
                if temperature.is_none() && epsilon.is_none() {
                    return Err(ControlError::InvalidParam("nothing to set".into()));
                }
            }
            _ => {}
        }
        let guard = self.log.lock()?;
        let (state, _, _) = self.refresh()?;
        if let Some(id) = command.agent_id() {
            let registered = state.agents.contains_key(id);
            if !registered && !matches!(command, Command::Register { .. }) && !known_agent(id) {
                return Err(ControlError::UnknownAgent(id.to_string()));
            }
        }
        let current = command.agent_id().map(|id| state.agent(id));
        let noop = match &command {
            Command::Register { agent_id } => state.agents.contains_key(agent_id),
            Command::Pause { .. } => current.as_ref().is_some_and(|a| a.paused),
            Command::Resume { .. } => current.as_ref().is_some_and(|a| !a.paused),
            _ => false,
        };
        let agent_id = command.agent_id().map(str::to_string);
        let control_seq = if noop {
            None
        } else {
            Some(self.append_locked(&guard, command)?)
        };
        drop(guard);
        let agent = match agent_id {
            Some(id) => Some(self.state()?.agent(&id)),
            None => None,
        };
        Ok(Ack {
            recorded: control_seq.is_some(),
            control_seq,
            effective_after_seq,
            agent,
        })
    }

    pub fn register(&self, agent_id: &str) -> Result<(), ControlError> {
        self.submit(
            Command::Register {
                agent_id: agent_id.to_string(),
            },
            &|_| true,
            None,
        )
        .map(|_| ())
    }
}
