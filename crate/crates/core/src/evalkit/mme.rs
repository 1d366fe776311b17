//! Paired-question accuracy: each image carries exactly two yes/no questions.

use serde::{Deserialize, Serialize};

use super::{EvalError, Prediction};
use crate::toymodel::Answer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmeScore {
    pub accuracy_pct: f64,
    pub accuracy_plus_pct: f64,
    pub combined: f64,
    pub images: usize,
}

/// Accuracy over all questions, accuracy+ over images with both answers
/// right, and their sum. Replies other than yes/no are wrong.
pub fn mme_eval(pairs: &[(String, Vec<(Prediction, Answer)>)]) -> Result<MmeScore, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput("mme"));
    }
    let mut correct = 0usize;
    let mut both = 0usize;
    for (id, qs) in pairs {
        if qs.len() != 2 {
            return Err(EvalError::MmeGroupSize {
                id: id.clone(),
                count: qs.len(),
            });
        }
        let c = qs.iter().filter(|(p, l)| p.is_correct(*l)).count();
        correct += c;
        if c == 2 {
            both += 1;
        }
    }
    let acc = 100.0 * correct as f64 / (2 * pairs.len()) as f64;
    let plus = 100.0 * both as f64 / pairs.len() as f64;
    Ok(MmeScore {
        accuracy_pct: acc,
        accuracy_plus_pct: plus,
        combined: acc + plus,
        images: pairs.len(),
    })
}
