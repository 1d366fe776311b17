//! Caption-guided token reweighting.

use super::ShieldError;
use crate::numerics::{l2_norm, NumericsError, Tensor};

/// Cosine between every visual token (rows of `visual`) and every caption
/// token (rows of `caption`), as an `N x P` matrix.
pub fn similarity_matrix(visual: &Tensor, caption: &Tensor) -> Result<Tensor, ShieldError> {
    if visual.rank() != 2 || caption.rank() != 2 || visual.cols() != caption.cols() {
        return Err(NumericsError::ShapeMismatch {
            op: "similarity_matrix",
            left: visual.shape().to_vec(),
            right: caption.shape().to_vec(),
        }
        .into());
    }
    let unit = |t: &Tensor| -> Result<Tensor, ShieldError> {
        let mut data = Vec::with_capacity(t.len());
        for i in 0..t.rows() {
            let r = t.row(i);
            let n = l2_norm(r);
            if n == 0.0 {
                return Err(NumericsError::DegenerateVector { op: "similarity_matrix" }.into());
            }
            data.extend(r.iter().map(|v| v / n));
        }
        Ok(Tensor::new(t.shape().to_vec(), data)?)
    };
    Ok(unit(visual)?.matmul(&unit(caption)?.transpose()?)?)
}

/// Row maxima of the similarity matrix, min-max normalised to `[0, 1]`.
/// When every row maximum is equal the weights are all zero.
pub fn token_weights(similarity: &Tensor) -> Result<Vec<f64>, ShieldError> {
    if similarity.rank() != 2 || similarity.rows() == 0 || similarity.cols() == 0 {
        return Err(NumericsError::Empty { op: "token_weights" }.into());
    }
    let raw: Vec<f64> = (0..similarity.rows())
        .map(|i| similarity.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        Ok(raw.iter().map(|r| (r - lo) / (hi - lo)).collect())
    } else {
        Ok(vec![0.0; raw.len()])
    }
}

/// `x + x * w`, with one weight per token row.
pub fn reweight(visual: &Tensor, weights: &[f64]) -> Result<Tensor, ShieldError> {
    if visual.rank() != 2 || weights.len() != visual.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "reweight",
            left: visual.shape().to_vec(),
            right: vec![weights.len()],
        }
        .into());
    }
    let d = visual.cols();
    let data = visual
        .data()
        .iter()
        .enumerate()
        .map(|(k, x)| x + x * weights[k / d])
        .collect();
    Ok(Tensor::new(visual.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_of_identical_tokens_is_one() {
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 3.0]]).unwrap();
        let m = similarity_matrix(&v, &v).unwrap();
        assert!((m.row(0)[0] - 1.0).abs() < 1e-15);
        assert!((m.row(1)[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weights_min_max() {
        let m = Tensor::from_rows(&[vec![0.2, 0.9], vec![0.1, 0.3], vec![0.5, 0.4]]).unwrap();
        let w = token_weights(&m).unwrap();
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - (0.5 - 0.3) / (0.9 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn constant_similarity_gives_zero_weights() {
        let m = Tensor::full(vec![3, 2], 0.4).unwrap();
        assert_eq!(token_weights(&m).unwrap(), vec![0.0; 3]);
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(reweight(&v, &[0.0; 3]).unwrap(), v);
    }

    #[test]
    fn zero_token_is_degenerate() {
        let v = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            similarity_matrix(&v, &c),
            Err(ShieldError::Numerics(NumericsError::DegenerateVector { .. }))
        ));
    }

    #[test]
    fn reweight_doubles_top_token() {
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let r = reweight(&v, &[1.0, 0.0]).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 3.0, 4.0]);
    }
}
