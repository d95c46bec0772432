//! Prompt embeddings, a deterministic 2-D projection, and score histograms.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::domain::ScoreRecord;

pub const EMBED_DIM: usize = 256;
pub const POWER_ITERATIONS: usize = 100;
pub const POWER_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("rows have different widths")]
    Ragged,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("bin count must be >= 1")]
    NoBins,
}

/// Turns prompt texts into fixed-width vectors. Precomputed vectors from an
/// external model can be supplied by implementing this trait.
pub trait Embedder {
    fn embed(&self, texts: &[&str]) -> Vec<Vec<f64>>;
}

/// Hashed character 3-gram term frequencies, ℓ2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct NgramEmbedder {
    pub dim: usize,
}

impl Default for NgramEmbedder {
    fn default() -> Self {
        Self { dim: EMBED_DIM }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl NgramEmbedder {
    /// Texts shorter than three characters count as a single gram; the empty
    /// text maps to the zero vector.
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let chars: Vec<char> = text.chars().collect();
        let mut bump = |gram: &[char]| {
            let s: String = gram.iter().collect();
            v[(fnv1a(s.as_bytes()) % self.dim as u64) as usize] += 1.0;
        };
        if chars.len() < 3 {
            if !chars.is_empty() {
                bump(&chars);
            }
        } else {
            chars.windows(3).for_each(&mut bump);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for NgramEmbedder {
    fn embed(&self, texts: &[&str]) -> Vec<Vec<f64>> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

pub fn embed_prompts(texts: &[&str]) -> Vec<Vec<f64>> {
    NgramEmbedder::default().embed(texts)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection {
    pub points: Vec<(f64, f64)>,
    /// All rows identical: every point sits at the origin.
    pub rank_deficient: bool,
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Leading eigenvector of the symmetric matrix `m`, kept orthogonal to
/// `against`. Zero when `m` has no energy outside `against`.
fn power_iterate(m: &[Vec<f64>], against: Option<&[f64]>) -> (Vec<f64>, f64) {
    let d = m.len();
    let orth = |v: &mut Vec<f64>| {
        if let Some(u) = against {
            let p = dot(v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
    };
    let mut v: Vec<f64> = (0..d).map(|j| 1.0 + j as f64 / d as f64).collect();
    orth(&mut v);
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let mut w = matvec(m, &v);
        orth(&mut w);
        let n = normalize(&mut w);
        if n < 1e-12 {
            return (vec![0.0; d], 0.0);
        }
        lambda = n;
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    (v, lambda)
}

fn fix_sign(v: &mut [f64]) {
    let Some(max) = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())) else {
        return;
    };
    if max < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Mean-centered projection onto the two leading principal directions.
pub fn project_2d(matrix: &[Vec<f64>]) -> Result<Projection, AnalysisError> {
    if matrix.len() < 2 {
        return Err(AnalysisError::TooFewRows { needed: 2, got: matrix.len() });
    }
    let d = matrix[0].len();
    if matrix.iter().any(|r| r.len() != d) {
        return Err(AnalysisError::Ragged);
    }
    if matrix.iter().flatten().any(|x| !x.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let n = matrix.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| matrix.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = matrix
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    if centered.iter().flatten().all(|&x| x == 0.0) {
        return Ok(Projection {
            points: vec![(0.0, 0.0); matrix.len()],
            rank_deficient: true,
            components: [vec![0.0; d], vec![0.0; d]],
            mean,
        });
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centered {
        for i in 0..d {
            if r[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    let (mut v1, l1) = power_iterate(&cov, None);
    fix_sign(&mut v1);
    for i in 0..d {
        for j in 0..d {
            cov[i][j] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut v2, _) = power_iterate(&cov, Some(&v1));
    fix_sign(&mut v2);
    let points = centered.iter().map(|r| (dot(r, &v1), dot(r, &v2))).collect();
    Ok(Projection {
        points,
        rank_deficient: false,
        components: [v1, v2],
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Equal-width bins over [min, max] of the ok scores in scope (`agent`
/// None = all agents). Bins are right-open except the last.
pub fn score_histogram(
    records: &[ScoreRecord],
    agent: Option<&str>,
    n_bins: usize,
) -> Result<Vec<Bin>, AnalysisError> {
    if n_bins == 0 {
        return Err(AnalysisError::NoBins);
    }
    let scores: Vec<f64> = records
        .iter()
        .filter(|r| r.is_ok() && agent.is_none_or(|a| r.agent_id == a))
        .map(|r| r.relative_score)
        .collect();
    Ok(histogram(&scores, n_bins))
}

pub fn histogram(scores: &[f64], n_bins: usize) -> Vec<Bin> {
    let Some(min) = scores.iter().copied().reduce(f64::min) else {
        return Vec::new();
    };
    let max = scores.iter().copied().fold(min, f64::max);
    let edges: Vec<f64> = (0..=n_bins)
        .map(|i| if i == n_bins { max } else { min + (max - min) * i as f64 / n_bins as f64 })
        .collect();
    let mut bins: Vec<Bin> = edges
        .windows(2)
        .map(|w| Bin { low: w[0], high: w[1], count: 0 })
        .collect();
    for &s in scores {
        // Interior edges at or below s pick the bin; max lands in the last.
        let idx = edges[1..n_bins].partition_point(|&e| e <= s);
        bins[idx].count += 1;
    }
    bins
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedPrompt {
    pub prompt_id: String,
    pub agent_id: String,
    pub relative_score: f64,
    pub x: f64,
    pub y: f64,
}

/// One row per distinct ok prompt, taken from its first record.
pub fn distinct_ok(records: &[ScoreRecord]) -> Vec<&ScoreRecord> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| r.is_ok() && seen.insert(r.prompt_id.as_str()))
        .collect()
}

/// Embeds and projects the distinct ok prompts. Fewer than two prompts
/// project to the origin.
pub fn project_records(records: &[ScoreRecord]) -> Vec<ProjectedPrompt> {
    let rows = distinct_ok(records);
    let texts: Vec<&str> = rows.iter().map(|r| r.prompt_text.as_str()).collect();
    let points = if rows.len() < 2 {
        vec![(0.0, 0.0); rows.len()]
    } else {
        project_2d(&embed_prompts(&texts)).expect("embeddings are well-formed").points
    };
    rows.iter()
        .zip(points)
        .map(|(r, (x, y))| ProjectedPrompt {
            prompt_id: r.prompt_id.clone(),
            agent_id: r.agent_id.clone(),
            relative_score: r.relative_score,
            x,
            y,
        })
        .collect()
}

/// `prompt_id<TAB>agent_id<TAB>score<TAB>v0..v{d-1}`.
pub fn write_embedding_tsv(path: impl AsRef<Path>, records: &[ScoreRecord]) -> io::Result<usize> {
    let rows = distinct_ok(records);
    let texts: Vec<&str> = rows.iter().map(|r| r.prompt_text.as_str()).collect();
    let matrix = embed_prompts(&texts);
    let mut out = String::from("prompt_id\tagent_id\tscore");
    for j in 0..EMBED_DIM {
        let _ = write!(out, "\tv{j}");
    }
    out.push('\n');
    for (r, v) in rows.iter().zip(&matrix) {
        let _ = write!(out, "{}\t{}\t{}", r.prompt_id, r.agent_id, r.relative_score);
        for x in v {
            let _ = write!(out, "\t{x}");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(rows.len())
}

/// `prompt_id<TAB>agent_id<TAB>score<TAB>x<TAB>y`.
pub fn write_projection_tsv(path: impl AsRef<Path>, points: &[ProjectedPrompt]) -> io::Result<()> {
    let mut out = String::from("prompt_id\tagent_id\tscore\tx\ty\n");
    for p in points {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", p.prompt_id, p.agent_id, p.relative_score, p.x, p.y);
    }
    fs::write(path, out)
}
