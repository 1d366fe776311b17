//! Yes/no existence scoring and the three negative-sampling splits.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::seed;
use crate::toymodel::{Answer, ObjectClass, Question, Scene};

/// A model's reply to a yes/no question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Yes,
    No,
    /// Anything that is not a plain yes or no.
    Other,
}

impl Prediction {
    /// Reads "yes"/"no" case-insensitively, ignoring surrounding punctuation.
    pub fn parse(text: &str) -> Self {
        let t = text
            .trim()
            .trim_matches(|c: char| !c.is_ascii_alphanumeric())
            .to_ascii_lowercase();
        match t.as_str() {
            "yes" => Prediction::Yes,
            "no" => Prediction::No,
            _ => Prediction::Other,
        }
    }

    pub fn from_answer(a: Option<Answer>) -> Self {
        match a {
            Some(Answer::Yes) => Prediction::Yes,
            Some(Answer::No) => Prediction::No,
            None => Prediction::Other,
        }
    }

    pub fn is_correct(self, label: Answer) -> bool {
        matches!(
            (self, label),
            (Prediction::Yes, Answer::Yes) | (Prediction::No, Answer::No)
        )
    }
}

/// Existence-level input record: `{"id", "question_type", "pred", "label"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistRecord {
    pub id: String,
    pub question_type: String,
    pub pred: String,
    pub label: Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeScore {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Binary metrics with "yes" as the positive class. Replies that are not
/// "yes" count as negative predictions.
pub fn pope_eval(answers: &[(Prediction, Answer)]) -> Result<PopeScore, EvalError> {
    if answers.is_empty() {
        return Err(EvalError::EmptyInput("pope"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, l) in answers {
        match (*p == Prediction::Yes, *l == Answer::Yes) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = answers.len() as f64;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(PopeScore {
        accuracy: (tp + tn) as f64 / n,
        precision,
        recall,
        f1,
        yes_ratio: (tp + fp) as f64 / n,
        tp,
        fp,
        tn,
        fn_,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeSplit {
    Random,
    Popular,
    Adversarial,
}

impl PopeSplit {
    pub const ALL: [PopeSplit; 3] = [PopeSplit::Random, PopeSplit::Popular, PopeSplit::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            PopeSplit::Random => "random",
            PopeSplit::Popular => "popular",
            PopeSplit::Adversarial => "adversarial",
        }
    }
}

impl std::str::FromStr for PopeSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PopeSplit::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

/// Object frequency over a dataset.
pub fn class_frequency(scenes: &[Scene]) -> BTreeMap<ObjectClass, usize> {
    let mut f: BTreeMap<ObjectClass, usize> = ObjectClass::all().map(|o| (o, 0)).collect();
    for s in scenes {
        for o in &s.objects {
            *f.get_mut(o).expect("all classes present") += 1;
        }
    }
    f
}

/// Number of scenes containing both classes.
pub fn cooccurrence(scenes: &[Scene]) -> BTreeMap<(ObjectClass, ObjectClass), usize> {
    let mut m = BTreeMap::new();
    for s in scenes {
        for a in &s.objects {
            for b in &s.objects {
                if a != b {
                    *m.entry((*a, *b)).or_insert(0) += 1;
                }
            }
        }
    }
    m
}

/// Existence questions for each scene: every present object as a "yes"
/// question and as many absent objects as "no" questions, chosen by the split.
/// Returns the scenes with their question lists replaced.
pub fn pope_questions(scenes: &[Scene], split: PopeSplit, seed: u64) -> Vec<Scene> {
    let freq = class_frequency(scenes);
    let co = cooccurrence(scenes);
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let absent: Vec<ObjectClass> = ObjectClass::all().filter(|o| !s.contains(*o)).collect();
            let k = s.objects.len().min(absent.len());
            let negatives: Vec<ObjectClass> = match split {
                PopeSplit::Random => {
                    let mut rng = seed::rng(seed::derive(&[seed, i as u64, 0x706f7065]));
                    absent.choose_multiple(&mut rng, k).copied().collect()
                }
                PopeSplit::Popular => {
                    let mut ranked = absent.clone();
                    ranked.sort_by(|a, b| freq[b].cmp(&freq[a]).then(a.cmp(b)));
                    ranked.truncate(k);
                    ranked
                }
                PopeSplit::Adversarial => {
                    let score = |o: &ObjectClass| -> usize {
                        s.objects.iter().map(|p| co.get(&(*p, *o)).copied().unwrap_or(0)).sum()
                    };
                    let mut ranked = absent.clone();
                    ranked.sort_by(|a, b| {
                        score(b).cmp(&score(a)).then(freq[b].cmp(&freq[a])).then(a.cmp(b))
                    });
                    ranked.truncate(k);
                    ranked
                }
            };
            let mut questions: Vec<Question> =
                s.objects.iter().map(|o| Question::exist(*o, Answer::Yes)).collect();
            questions.extend(negatives.into_iter().map(|o| Question::exist(o, Answer::No)));
            Scene {
                questions,
                ..s.clone()
            }
        })
        .collect()
}
