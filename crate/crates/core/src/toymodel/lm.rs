//! Rule-based language readout over visual tokens, and the decoding loop.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use super::{Answer, ModelError, ObjectClass, Token, ToyModel, NUM_CLASSES, VOCAB_SIZE};
use crate::numerics::{argmax, softmax, Tensor};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prompt {
    /// "Please describe this image."
    Describe,
    /// "Is there a {object} in the image?"
    Exists(ObjectClass),
}

impl Prompt {
    pub fn text(&self) -> String {
        match self {
            Prompt::Describe => "Please describe this image.".to_string(),
            Prompt::Exists(o) => format!("Is there a {o} in the image?"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampler {
    /// Highest probability token; ties go to the lowest id.
    #[default]
    Greedy,
    /// Ancestral sampling from a ChaCha stream with this seed.
    Seeded(u64),
}

/// Runs a decoding loop. `step` maps the current prefix to a probability
/// vector over the vocabulary. Stops after EOS or `max_len` tokens.
pub fn decode<E: From<ModelError>>(
    max_len: usize,
    sampler: Sampler,
    mut step: impl FnMut(&[Token]) -> Result<Vec<f64>, E>,
) -> Result<Vec<Token>, E> {
    let mut rng = match sampler {
        Sampler::Greedy => None,
        Sampler::Seeded(s) => Some(seed::rng(s)),
    };
    let mut out = Vec::new();
    while out.len() < max_len {
        let p = step(&out)?;
        if p.len() != VOCAB_SIZE {
            return Err(ModelError::InvalidConfig(format!(
                "step returned {} probabilities, expected {VOCAB_SIZE}",
                p.len()
            ))
            .into());
        }
        let id = match rng.as_mut() {
            None => argmax(&p).expect("vocabulary is not empty"),
            Some(r) => WeightedIndex::new(&p)
                .map_err(|e| ModelError::InvalidConfig(format!("bad distribution: {e}")))?
                .sample(r),
        };
        let t = Token::from_id(id)?;
        out.push(t);
        if t == Token::Eos {
            break;
        }
    }
    Ok(out)
}

/// The yes/no answer at the start of a generated sequence, if any.
pub fn answer_of(seq: &[Token]) -> Option<Answer> {
    match seq.first() {
        Some(Token::Yes) => Some(Answer::Yes),
        Some(Token::No) => Some(Answer::No),
        _ => None,
    }
}

impl ToyModel {
    /// Per-class describe evidence: attention by norm power, times the
    /// rectified cosine with each class prototype.
    pub fn describe_evidence(&self, tokens: &Tensor) -> Result<[f64; NUM_CLASSES], ModelError> {
        self.check_tokens(tokens)?;
        let norms = tokens.row_norms();
        let w: Vec<f64> = norms.iter().map(|n| n.powf(self.config.attention_power)).collect();
        let z: f64 = w.iter().sum();
        let mut e = [0.0; NUM_CLASSES];
        if z == 0.0 {
            return Ok(e);
        }
        for (i, (&n, &wi)) in norms.iter().zip(&w).enumerate() {
            if n == 0.0 {
                continue;
            }
            let row = tokens.row(i);
            for (o, eo) in e.iter_mut().enumerate() {
                *eo += wi / z * (row[o] / n).max(0.0);
            }
        }
        Ok(e)
    }

    /// Largest cosine with the class prototype over salient tokens.
    pub fn existence_score(&self, tokens: &Tensor, o: ObjectClass) -> Result<f64, ModelError> {
        self.check_tokens(tokens)?;
        let norms = tokens.row_norms();
        let top = norms.iter().cloned().fold(0.0, f64::max);
        if top == 0.0 {
            return Ok(0.0);
        }
        let cut = self.config.salience * top;
        Ok(norms
            .iter()
            .enumerate()
            .filter(|(_, &n)| n >= cut && n > 0.0)
            .map(|(i, &n)| tokens.row(i)[o.index()] / n)
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Next-token logits for `prompt` after `prefix`.
    pub fn lm_logits(
        &self,
        tokens: &Tensor,
        prompt: &Prompt,
        prefix: &[Token],
    ) -> Result<Vec<f64>, ModelError> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let l = cfg.control_logit;
        let mut out = vec![-l; VOCAB_SIZE];
        match prompt {
            Prompt::Exists(o) => {
                if prefix.is_empty() {
                    let m = self.existence_score(tokens, *o)?;
                    let s = cfg.exist_gain * (m - cfg.exist_threshold);
                    out[Token::Yes.id()] = s;
                    out[Token::No.id()] = -s;
                } else {
                    out[Token::Eos.id()] = l;
                }
            }
            Prompt::Describe => match prefix.last() {
                None => out[Token::A.id()] = l,
                Some(Token::A) => out[Token::Photo.id()] = l,
                Some(Token::Photo) => out[Token::Of.id()] = l,
                Some(Token::Of) | Some(Token::And) => {
                    let e = self.describe_evidence(tokens)?;
                    for o in ObjectClass::all() {
                        out[o.index()] = if prefix.contains(&Token::Object(o)) {
                            -l
                        } else {
                            cfg.describe_gain * (e[o.index()] - cfg.describe_threshold)
                        };
                    }
                    out[Token::Eos.id()] = 0.0;
                }
                Some(Token::Object(_)) => {
                    let e = self.describe_evidence(tokens)?;
                    let best = ObjectClass::all()
                        .filter(|o| !prefix.contains(&Token::Object(*o)))
                        .map(|o| e[o.index()])
                        .fold(f64::NEG_INFINITY, f64::max);
                    out[Token::And.id()] = if best.is_finite() {
                        cfg.describe_gain * (best - cfg.describe_threshold)
                    } else {
                        -l
                    };
                    out[Token::Eos.id()] = 0.0;
                }
                Some(_) => out[Token::Eos.id()] = l,
            },
        }
        Ok(out)
    }

    pub fn generate(
        &self,
        tokens: &Tensor,
        prompt: &Prompt,
        sampler: Sampler,
        max_len: usize,
    ) -> Result<Vec<Token>, ModelError> {
        decode(max_len, sampler, |prefix| {
            Ok(softmax(&self.lm_logits(tokens, prompt, prefix)?)?)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    fn scene(objs: &[(&str, (usize, usize))]) -> Scene {
        Scene {
            id: "t".into(),
            objects: objs.iter().map(|(n, _)| n.parse().unwrap()).collect(),
            layout: objs.iter().map(|(n, p)| (n.parse().unwrap(), *p)).collect(),
            questions: vec![],
        }
    }

    #[test]
    fn clean_model_describes_exactly() {
        let m = ToyModel::clean();
        let s = scene(&[("dog", (0, 0)), ("cup", (2, 3)), ("person", (3, 1))]);
        let tok = m.encode(&render(&m, &s, 1).unwrap()).unwrap();
        let cap = m.generate(&tok, &Prompt::Describe, Sampler::Greedy, 16).unwrap();
        let mut got = mentioned_objects(&cap);
        got.sort();
        let mut want = s.objects.clone();
        want.sort();
        assert_eq!(got, want);
        assert_eq!(&cap[..3], &[Token::A, Token::Photo, Token::Of]);
        assert_eq!(cap.last(), Some(&Token::Eos));
    }

    #[test]
    fn clean_model_answers_existence() {
        let m = ToyModel::clean();
        let s = scene(&[("bus", (1, 1))]);
        let tok = m.encode(&render(&m, &s, 1).unwrap()).unwrap();
        for o in ObjectClass::all() {
            let seq = m.generate(&tok, &Prompt::Exists(o), Sampler::Greedy, 4).unwrap();
            let want = if s.contains(o) { Answer::Yes } else { Answer::No };
            assert_eq!(answer_of(&seq), Some(want), "{o}");
            assert_eq!(seq.len(), 2);
        }
    }

    #[test]
    fn max_len_truncates() {
        let m = ToyModel::clean();
        let s = scene(&[("bus", (1, 1))]);
        let tok = m.encode(&render(&m, &s, 1).unwrap()).unwrap();
        let cap = m.generate(&tok, &Prompt::Describe, Sampler::Greedy, 2).unwrap();
        assert_eq!(cap, vec![Token::A, Token::Photo]);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let m = ToyModel::clean();
        let s = scene(&[("bus", (1, 1)), ("car", (0, 0))]);
        let tok = m.encode(&render(&m, &s, 1).unwrap()).unwrap();
        let a = m.generate(&tok, &Prompt::Describe, Sampler::Seeded(9), 16).unwrap();
        let b = m.generate(&tok, &Prompt::Describe, Sampler::Seeded(9), 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_token_shape_rejected() {
        let m = ToyModel::clean();
        let t = Tensor::zeros(vec![16, 8]);
        assert!(matches!(
            m.lm_logits(&t, &Prompt::Describe, &[]),
            Err(ModelError::TokenShape { .. })
        ));
    }
}
