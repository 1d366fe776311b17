//! Gradient-descent perturbation that pulls an image's global visual embedding
//! away from its own caption.

use super::ShieldError;
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::toymodel::{Image, ToyModel, Token};

/// A differentiable scalar objective over pixels.
pub trait AttackObjective {
    /// Loss at `pixels` and its gradient with respect to `pixels`. Inputs may
    /// lie outside `[0, 1]`; the objective is responsible for clamping.
    fn loss_and_grad(&self, pixels: &Tensor) -> Result<(f64, Tensor), ShieldError>;
}

/// Cosine between the mean visual token of `clamp(pixels)` and the caption's
/// global text embedding.
pub struct CaptionAlignment<'a> {
    model: &'a ToyModel,
    text_global: Tensor,
}

impl<'a> CaptionAlignment<'a> {
    pub fn new(model: &'a ToyModel, caption: &[Token]) -> Result<Self, ShieldError> {
        let ct = model.encode_text(caption)?;
        Ok(Self {
            model,
            text_global: Tensor::vector(ct.global)?,
        })
    }

    pub fn loss(&self, pixels: &Tensor) -> Result<f64, ShieldError> {
        let tok = self.model.encode_pixels(&pixels.clamp(0.0, 1.0))?;
        let g = tok.mean_rows()?;
        Ok(crate::numerics::cosine(&g, self.text_global.data())?)
    }
}

impl AttackObjective for CaptionAlignment<'_> {
    fn loss_and_grad(&self, pixels: &Tensor) -> Result<(f64, Tensor), ShieldError> {
        let mut tape = Tape::new();
        let x = tape.leaf(pixels.clone(), true);
        let xc = tape.clamp(x, 0.0, 1.0)?;
        let tok = self.model.encode_on_tape(&mut tape, xc)?;
        let g = tape.mean_rows(tok)?;
        let t = tape.constant(self.text_global.clone());
        let loss = tape.cosine(g, t)?;
        tape.backward(loss)?;
        let value = tape.value(loss)?.data()[0];
        let grad = tape
            .grad(x)?
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(pixels.shape().to_vec()));
        Ok((value, grad))
    }
}

/// Result of an attack run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackTensor {
    pub delta: Tensor,
    /// Loss before the first step and after each step: `steps + 1` values.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
    /// Perturbations recorded at the requested step counts, in request order.
    pub checkpoints: Vec<(usize, Tensor)>,
}

fn diverged(step: usize, e: ShieldError) -> ShieldError {
    match e {
        ShieldError::Numerics(NumericsError::NonFinite { .. }) => ShieldError::AttackDiverged { step },
        ShieldError::Model(crate::toymodel::ModelError::Numerics(NumericsError::NonFinite {
            ..
        })) => ShieldError::AttackDiverged { step },
        other => other,
    }
}

/// Plain gradient descent on `objective` starting from `delta = 0`:
/// `delta <- delta - lr * grad`, then `delta <- clamp(v + delta, 0, 1) - v`.
pub fn optimize_attack<O: AttackObjective>(
    objective: &O,
    image: &Image,
    lr: f64,
    steps: usize,
    checkpoints: &[usize],
) -> Result<AttackTensor, ShieldError> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(ShieldError::InvalidConfig(format!("attack lr must be positive, got {lr}")));
    }
    for &c in checkpoints {
        if c > steps {
            return Err(ShieldError::InvalidConfig(format!(
                "checkpoint {c} exceeds {steps} attack steps"
            )));
        }
    }
    let v = &image.pixels;
    let mut delta = Tensor::zeros(v.shape().to_vec());
    let mut trace = Vec::with_capacity(steps + 1);
    let mut saved = Vec::new();
    for step in 0..=steps {
        for &c in checkpoints {
            if c == step {
                saved.push((c, delta.clone()));
            }
        }
        let x = v.add(&delta).map_err(|e| diverged(step, e.into()))?;
        let (loss, grad) = objective.loss_and_grad(&x).map_err(|e| diverged(step, e))?;
        if !loss.is_finite() || grad.data().iter().any(|g| !g.is_finite()) {
            return Err(ShieldError::AttackDiverged { step });
        }
        trace.push(loss);
        if step == steps {
            break;
        }
        let moved = delta.sub(&grad.scale(lr)?)?;
        delta = v.add(&moved)?.clamp(0.0, 1.0).sub(v)?;
    }
    Ok(AttackTensor {
        delta,
        loss_trace: trace,
        steps,
        checkpoints: saved,
    })
}

/// Attack against the image's own caption.
pub fn optimize_caption_attack(
    model: &ToyModel,
    image: &Image,
    caption: &[Token],
    lr: f64,
    steps: usize,
) -> Result<AttackTensor, ShieldError> {
    let obj = CaptionAlignment::new(model, caption)?;
    optimize_attack(&obj, image, lr, steps, &[])
}

/// Raw visual tokens of the perturbed image, with no further processing.
pub fn adversarial_tokens(
    model: &ToyModel,
    image: &Image,
    delta: &Tensor,
) -> Result<Tensor, ShieldError> {
    Ok(model.encode(&image.perturbed(delta)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{noise_image, NoiseDist};

    struct Flat;
    impl AttackObjective for Flat {
        fn loss_and_grad(&self, pixels: &Tensor) -> Result<(f64, Tensor), ShieldError> {
            Ok((0.25, Tensor::zeros(pixels.shape().to_vec())))
        }
    }

    struct Linear(Tensor);
    impl AttackObjective for Linear {
        fn loss_and_grad(&self, pixels: &Tensor) -> Result<(f64, Tensor), ShieldError> {
            Ok((crate::numerics::dot(pixels.data(), self.0.data()), self.0.clone()))
        }
    }

    struct Exploding;
    impl AttackObjective for Exploding {
        fn loss_and_grad(&self, pixels: &Tensor) -> Result<(f64, Tensor), ShieldError> {
            Ok((f64::NAN, Tensor::zeros(pixels.shape().to_vec())))
        }
    }

    fn img() -> Image {
        noise_image(ToyModel::clean().config(), 1, NoiseDist::Uniform)
    }

    #[test]
    fn zero_gradient_leaves_delta_at_zero() {
        let a = optimize_attack(&Flat, &img(), 0.02, 5, &[]).unwrap();
        assert!(a.delta.data().iter().all(|d| *d == 0.0));
        assert_eq!(a.loss_trace, vec![0.25; 6]);
    }

    #[test]
    fn one_step_moves_against_gradient() {
        let image = img();
        let g = Tensor::full(image.pixels.shape().to_vec(), 0.5).unwrap();
        let a = optimize_attack(&Linear(g), &image, 0.02, 1, &[0, 1]).unwrap();
        for (d, v) in a.delta.data().iter().zip(image.pixels.data()) {
            let want = ((v - 0.01).clamp(0.0, 1.0)) - v;
            assert!((d - want).abs() < 1e-15);
        }
        assert_eq!(a.checkpoints.len(), 2);
        assert!(a.checkpoints[0].1.data().iter().all(|d| *d == 0.0));
        assert_eq!(a.checkpoints[1].1, a.delta);
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        assert!(matches!(
            optimize_attack(&Exploding, &img(), 0.02, 3, &[]),
            Err(ShieldError::AttackDiverged { step: 0 })
        ));
    }

    #[test]
    fn bad_lr_rejected() {
        assert!(matches!(
            optimize_attack(&Flat, &img(), 0.0, 3, &[]),
            Err(ShieldError::InvalidConfig(_))
        ));
    }

    #[test]
    fn caption_loss_matches_tape_value() {
        let m = ToyModel::clean();
        let image = img();
        let cap = crate::toymodel::tokenize("a photo of car").unwrap();
        let obj = CaptionAlignment::new(&m, &cap).unwrap();
        let (l, _) = obj.loss_and_grad(&image.pixels).unwrap();
        assert!((l - obj.loss(&image.pixels).unwrap()).abs() < 1e-14);
    }
}
