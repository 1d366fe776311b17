//! Contrastive next-token distribution with a plausibility cut.

use serde::{Deserialize, Serialize};

use super::ShieldError;
use crate::numerics::{check_finite, NumericsError};

/// Which distribution defines the plausible set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plausibility {
    /// Keep tokens with clean probability at least `beta` times the clean maximum.
    #[default]
    Clean,
    /// Apply the same cut to the contrasted distribution itself.
    Contrastive,
}

impl std::str::FromStr for Plausibility {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(Self::Clean),
            "contrastive" => Ok(Self::Contrastive),
            _ => Err(format!("unknown plausibility source {s:?}")),
        }
    }
}

/// Softmax over the entries where `keep` is set; zero elsewhere.
fn masked_softmax(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .zip(keep)
        .map(|(v, k)| if *k { (v - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `softmax((1 + alpha) * clean - alpha * adv)`, restricted to the plausible
/// set and renormalised.
pub fn contrastive_step(
    clean: &[f64],
    adv: &[f64],
    alpha: f64,
    beta: f64,
    source: Plausibility,
) -> Result<Vec<f64>, ShieldError> {
    if clean.is_empty() {
        return Err(NumericsError::Empty { op: "contrastive_step" }.into());
    }
    if clean.len() != adv.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "contrastive_step",
            left: vec![clean.len()],
            right: vec![adv.len()],
        }
        .into());
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(ShieldError::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(ShieldError::InvalidConfig(format!("beta must lie in [0, 1], got {beta}")));
    }
    check_finite("contrastive_step", clean)?;
    check_finite("contrastive_step", adv)?;
    let comb: Vec<f64> = clean
        .iter()
        .zip(adv)
        .map(|(c, a)| (1.0 + alpha) * c - alpha * a)
        .collect();
    let all = vec![true; clean.len()];
    let reference = match source {
        Plausibility::Clean => masked_softmax(clean, &all),
        Plausibility::Contrastive => masked_softmax(&comb, &all),
    };
    let top = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<bool> = reference.iter().map(|p| *p >= beta * top).collect();
    Ok(masked_softmax(&comb, &keep))
}
