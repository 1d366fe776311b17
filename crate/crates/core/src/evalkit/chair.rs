//! Caption hallucination rates. Each caption is one sentence.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::toymodel::{mentioned_objects, ObjectClass, Token, CLASS_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScore {
    pub c_s: f64,
    pub c_i: f64,
    pub hallucinated_sentences: usize,
    pub total_sentences: usize,
    pub hallucinated_objects: usize,
    pub mentioned_objects: usize,
}

/// Caption-level input record: `{"id", "caption", "gt_objects"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
    pub gt_objects: Vec<ObjectClass>,
}

/// Object classes named in free text, in first-mention order. Words outside
/// the catalogue are ignored.
pub fn objects_in_text(text: &str) -> Vec<ObjectClass> {
    let mut out = Vec::new();
    for w in text.split(|c: char| !c.is_ascii_alphanumeric() && c != '_') {
        let w = w.to_ascii_lowercase();
        if let Some(i) = CLASS_NAMES.iter().position(|n| *n == w) {
            let o = ObjectClass::new(i).expect("catalogue index");
            if !out.contains(&o) {
                out.push(o);
            }
        }
    }
    out
}

fn score(samples: impl Iterator<Item = (Vec<ObjectClass>, Vec<ObjectClass>)>) -> Result<ChairScore, EvalError> {
    let mut s = ChairScore {
        c_s: 0.0,
        c_i: 0.0,
        hallucinated_sentences: 0,
        total_sentences: 0,
        hallucinated_objects: 0,
        mentioned_objects: 0,
    };
    for (mentioned, gt) in samples {
        let bad = mentioned.iter().filter(|o| !gt.contains(o)).count();
        s.total_sentences += 1;
        s.mentioned_objects += mentioned.len();
        s.hallucinated_objects += bad;
        if bad > 0 {
            s.hallucinated_sentences += 1;
        }
    }
    if s.total_sentences == 0 {
        return Err(EvalError::EmptyInput("chair"));
    }
    s.c_s = s.hallucinated_sentences as f64 / s.total_sentences as f64;
    s.c_i = if s.mentioned_objects == 0 {
        0.0
    } else {
        s.hallucinated_objects as f64 / s.mentioned_objects as f64
    };
    Ok(s)
}

/// CHAIR over generated token sequences and their ground-truth objects.
pub fn chair(captions: &[(Vec<Token>, Vec<ObjectClass>)]) -> Result<ChairScore, EvalError> {
    score(captions.iter().map(|(c, gt)| (mentioned_objects(c), gt.clone())))
}

/// CHAIR over text records.
pub fn chair_records(records: &[CaptionRecord]) -> Result<ChairScore, EvalError> {
    score(records.iter().map(|r| (objects_in_text(&r.caption), r.gt_objects.clone())))
}
