//! Report aggregation and JSON lines I/O.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ChairScore, EvalError, MmeScore, PopeScore};

/// Metrics of one evaluation run. Holds no wall-clock values so that two runs
/// with the same inputs serialise to the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub samples: usize,
    pub chair: Option<ChairScore>,
    pub pope: BTreeMap<String, PopeScore>,
    pub mme: Option<MmeScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub mean_ms: f64,
    pub vanilla_mean_ms: f64,
    pub relative_vs_vanilla: f64,
}

impl TimingSummary {
    pub fn new(mean_ms: f64, vanilla_mean_ms: f64) -> Self {
        let rel = if vanilla_mean_ms > 0.0 {
            mean_ms / vanilla_mean_ms
        } else {
            0.0
        };
        Self {
            mean_ms,
            vanilla_mean_ms,
            relative_vs_vanilla: rel,
        }
    }
}

/// Fixed-width plain-text table of a summary.
pub fn render_table(summary: &Summary, timing: Option<&TimingSummary>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode: {}   samples: {}", summary.mode, summary.samples);
    if let Some(c) = &summary.chair {
        let _ = writeln!(
            s,
            "CHAIR   C_S {:6.2}   C_I {:6.2}   ({} / {} captions, {} / {} objects)",
            100.0 * c.c_s,
            100.0 * c.c_i,
            c.hallucinated_sentences,
            c.total_sentences,
            c.hallucinated_objects,
            c.mentioned_objects
        );
    }
    if !summary.pope.is_empty() {
        let _ = writeln!(s, "{:<12} {:>8} {:>9} {:>8} {:>8} {:>8}", "POPE", "acc", "precision", "recall", "f1", "yes%");
        for (split, p) in &summary.pope {
            let _ = writeln!(
                s,
                "{:<12} {:>8.2} {:>9.2} {:>8.2} {:>8.2} {:>8.2}",
                split,
                100.0 * p.accuracy,
                100.0 * p.precision,
                100.0 * p.recall,
                100.0 * p.f1,
                100.0 * p.yes_ratio
            );
        }
    }
    if let Some(m) = &summary.mme {
        let _ = writeln!(
            s,
            "MME     acc {:6.2}   acc+ {:6.2}   total {:6.2}",
            m.accuracy_pct, m.accuracy_plus_pct, m.combined
        );
    }
    if let Some(t) = timing {
        let _ = writeln!(
            s,
            "time    {:.2} ms/sample   vanilla {:.2} ms   x{:.2}",
            t.mean_ms, t.vanilla_mean_ms, t.relative_vs_vanilla
        );
    }
    s
}

/// Parses one JSON value per non-empty line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut w: W) -> Result<(), EvalError> {
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| EvalError::Parse {
            line: 0,
            reason: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
