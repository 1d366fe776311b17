//! Probes that expose each failure mode on its own: token-norm skew against
//! hallucination, yes-bias on pure noise, and answer quality under attack.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::evalkit::{pope_eval, EvalError, Prediction};
use crate::numerics::{NumericsError, Tensor};
use crate::seed;
use crate::shield::{optimize_attack, CaptionAlignment, ShieldError};
use crate::toymodel::{
    answer_of, noise_image, render, Answer, ModelError, NoiseDist, ObjectClass, Prompt,
    QuestionType, Sampler, Scene, ToyModel,
};

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("all visual tokens have zero norm")]
    DegenerateVector,
    #[error("bin width must be positive, got {0}")]
    BadBinWidth(f64),
    #[error("scene {0} has no existence questions")]
    NoQuestions(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shield(#[from] ShieldError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Largest token norm over the mean token norm.
pub fn peak_to_avg(tokens: &Tensor) -> Result<f64, DiagnosticsError> {
    let norms = tokens.row_norms();
    if norms.is_empty() {
        return Err(DiagnosticsError::DegenerateVector);
    }
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    if mean == 0.0 {
        return Err(DiagnosticsError::DegenerateVector);
    }
    Ok(norms.iter().cloned().fold(0.0, f64::max) / mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub id: String,
    pub ratio: f64,
    /// Any existence question on the image answered wrongly.
    pub hallucinated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub hallucinated: usize,
    pub rate: f64,
}

fn exist_questions(scene: &Scene) -> Vec<(ObjectClass, Answer)> {
    scene
        .questions
        .iter()
        .filter(|q| q.kind == QuestionType::Exist)
        .filter_map(|q| Some((q.object?, q.label?)))
        .collect()
}

/// Vanilla answer to "is there an `o`" for given tokens.
pub fn vanilla_exists(model: &ToyModel, tokens: &Tensor, o: ObjectClass) -> Result<Prediction, ModelError> {
    let seq = model.generate(tokens, &Prompt::Exists(o), Sampler::Greedy, 2)?;
    Ok(Prediction::from_answer(answer_of(&seq)))
}

/// Peak-to-average ratio and vanilla hallucination flag for every scene.
pub fn ratio_records(
    model: &ToyModel,
    scenes: &[Scene],
    seed: u64,
) -> Result<Vec<RatioRecord>, DiagnosticsError> {
    let mut out = Vec::with_capacity(scenes.len());
    for s in scenes {
        let qs = exist_questions(s);
        if qs.is_empty() {
            return Err(DiagnosticsError::NoQuestions(s.id.clone()));
        }
        let img = render(model, s, seed::for_sample(seed, &s.id))?;
        let tok = model.encode(&img)?;
        let mut wrong = false;
        for (o, label) in qs {
            wrong |= !vanilla_exists(model, &tok, o)?.is_correct(label);
        }
        out.push(RatioRecord {
            id: s.id.clone(),
            ratio: peak_to_avg(&tok)?,
            hallucinated: wrong,
        });
    }
    Ok(out)
}

/// Groups records into half-open bins `[k w, (k + 1) w)` of the ratio.
pub fn bin_ratios(records: &[RatioRecord], width: f64) -> Result<Vec<RatioBin>, DiagnosticsError> {
    if !(width.is_finite() && width > 0.0) {
        return Err(DiagnosticsError::BadBinWidth(width));
    }
    let mut bins: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for r in records {
        let k = (r.ratio / width).floor() as i64;
        let e = bins.entry(k).or_insert((0, 0));
        e.0 += 1;
        if r.hallucinated {
            e.1 += 1;
        }
    }
    Ok(bins
        .into_iter()
        .map(|(k, (count, bad))| RatioBin {
            lo: k as f64 * width,
            hi: (k + 1) as f64 * width,
            count,
            hallucinated: bad,
            rate: bad as f64 / count as f64,
        })
        .collect())
}

/// Seed of the `t`-th noise image of a probe.
pub fn probe_seed(seed: u64, t: usize) -> u64 {
    seed::derive(&[seed, 0x70726f6265, t as u64])
}

/// For each class, how many of `trials` noise images the vanilla model says
/// contain it.
pub fn noise_probe(
    model: &ToyModel,
    classes: &[ObjectClass],
    trials: usize,
    seed: u64,
    dist: NoiseDist,
) -> Result<BTreeMap<ObjectClass, usize>, DiagnosticsError> {
    let mut counts: BTreeMap<ObjectClass, usize> = classes.iter().map(|o| (*o, 0)).collect();
    for t in 0..trials {
        let img = noise_image(model.config(), probe_seed(seed, t), dist);
        let tok = model.encode(&img)?;
        for o in classes {
            if vanilla_exists(model, &tok, *o)? == Prediction::Yes {
                *counts.get_mut(o).expect("class registered") += 1;
            }
        }
    }
    Ok(counts)
}

/// Vanilla existence F1 over `scenes` after attacks truncated at each entry of
/// `steps` (step 0 is the unperturbed image).
pub fn attack_curve(
    model: &ToyModel,
    scenes: &[Scene],
    steps: &[usize],
    lr: f64,
    seed: u64,
) -> Result<Vec<(usize, f64)>, DiagnosticsError> {
    let max = steps.iter().copied().max().unwrap_or(0);
    let mut answers: Vec<Vec<(Prediction, Answer)>> = vec![Vec::new(); steps.len()];
    for s in scenes {
        let qs = exist_questions(s);
        if qs.is_empty() {
            return Err(DiagnosticsError::NoQuestions(s.id.clone()));
        }
        let img = render(model, s, seed::for_sample(seed, &s.id))?;
        let tok = model.encode(&img)?;
        let caption = model.generate(&tok, &Prompt::Describe, Sampler::Greedy, 16)?;
        let obj = CaptionAlignment::new(model, &caption)?;
        let a = optimize_attack(&obj, &img, lr, max, steps)?;
        for (slot, (_, delta)) in a.checkpoints.iter().enumerate() {
            let adv = model.encode(&img.perturbed(delta)?)?;
            for (o, label) in &qs {
                answers[slot].push((vanilla_exists(model, &adv, *o)?, *label));
            }
        }
    }
    let mut out = Vec::with_capacity(steps.len());
    for (k, &s) in steps.iter().enumerate() {
        out.push((s, pope_eval(&answers[k])?.f1));
    }
    Ok(out)
}
