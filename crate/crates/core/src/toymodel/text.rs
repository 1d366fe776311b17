//! Caption text encoder.

use super::{ModelError, Token, ToyModel, DIM_BACKGROUND, DIM_FUNCTION, DIM_OBJECTNESS};
use crate::numerics::Tensor;

/// Per-word embeddings (`P x dim`) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTokens {
    pub tokens: Tensor,
    pub global: Vec<f64>,
}

impl ToyModel {
    /// Embedding of a single word. Object words map onto their prototype,
    /// "photo" onto objectness with a little background, everything else onto
    /// the function-word direction.
    pub fn word_embedding(&self, t: Token) -> Vec<f64> {
        let mut e = vec![0.0; self.config.dim];
        match t {
            Token::Object(o) => e[o.index()] = 1.0,
            Token::Photo => {
                let b = self.config.photo_background;
                let n = (1.0 + b * b).sqrt();
                e[DIM_OBJECTNESS] = 1.0 / n;
                e[DIM_BACKGROUND] = b / n;
            }
            _ => e[DIM_FUNCTION] = 1.0,
        }
        e
    }

    /// Embeds a caption, dropping control tokens.
    pub fn encode_text(&self, seq: &[Token]) -> Result<CaptionTokens, ModelError> {
        let rows: Vec<Vec<f64>> = seq
            .iter()
            .filter(|t| !t.is_control())
            .map(|t| self.word_embedding(*t))
            .collect();
        if rows.is_empty() {
            return Err(ModelError::EmptyCaption);
        }
        let tokens = Tensor::from_rows(&rows)?;
        let global = tokens.mean_rows()?;
        Ok(CaptionTokens { tokens, global })
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;

    #[test]
    fn controls_are_stripped() {
        let m = ToyModel::clean();
        let a = m.encode_text(&tokenize("a photo of dog").unwrap()).unwrap();
        let mut seq = vec![Token::Bos];
        seq.extend(tokenize("a photo of dog").unwrap());
        seq.push(Token::Eos);
        let b = m.encode_text(&seq).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.shape(), &[4, 32]);
    }

    #[test]
    fn empty_caption_is_error() {
        let m = ToyModel::clean();
        assert!(matches!(
            m.encode_text(&[Token::Bos, Token::Eos]),
            Err(ModelError::EmptyCaption)
        ));
    }

    #[test]
    fn embeddings_are_unit() {
        let m = ToyModel::clean();
        for id in 0..VOCAB_SIZE {
            let t = Token::from_id(id).unwrap();
            let n = crate::numerics::l2_norm(&m.word_embedding(t));
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
