//! Patch encoder: pixels to one token per grid cell.

use super::{Image, ModelError, ToyModel, DIM_ARTIFACT};
use crate::numerics::{Tape, Tensor, Var};

impl ToyModel {
    /// Visual tokens (`N x dim`) for an image.
    pub fn encode(&self, image: &Image) -> Result<Tensor, ModelError> {
        self.encode_pixels(&image.pixels)
    }

    pub fn encode_pixels(&self, pixels: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(pixels.clone());
        let t = self.encode_on_tape(&mut tape, x)?;
        Ok(tape.value(t)?.clone())
    }

    /// Records the encoder on `tape` so gradients can flow back to `pixels`.
    pub fn encode_on_tape(&self, tape: &mut Tape, pixels: Var) -> Result<Var, ModelError> {
        let shape = tape.value(pixels)?.shape().to_vec();
        if shape != self.image_shape() {
            return Err(ModelError::ImageShape {
                expected: self.image_shape(),
                got: shape,
            });
        }
        let cfg = &self.config;
        let n = cfg.num_tokens();
        let z = tape.gather(pixels, self.gather.clone(), vec![n, cfg.patch_len()])?;
        let z = tape.add_scalar(z, -0.5)?;

        let obj_proj = tape.constant(self.object_proj.clone());
        let po = tape.matmul(z, obj_proj)?;
        let po = tape.signed_square(po)?;
        let obj_embed = tape.constant(self.object_embed.clone());
        let mut tok = tape.matmul(po, obj_embed)?;

        let on_proj = tape.constant(self.objectness_proj.clone());
        let pon = tape.matmul(z, on_proj)?;
        let pon = tape.signed_square(pon)?;
        let on_embed = tape.constant(self.objectness_embed.clone());
        let on = tape.matmul(pon, on_embed)?;
        tok = tape.add(tok, on)?;

        let tex_proj = tape.constant(self.texture_proj.clone());
        let pb = tape.matmul(z, tex_proj)?;
        let tex_embed = tape.constant(self.texture_embed.clone());
        let tex = tape.matmul(pb, tex_embed)?;
        tok = tape.add(tok, tex)?;

        let bg = tape.constant(self.background_row.clone());
        tok = tape.add_row(tok, bg)?;

        if let Some(v) = self.injectors.vulnerability.filter(|v| v.gain > 0.0) {
            // cap * phi(po_o) * tanh(g * pv_o / cap), gated per class by the
            // class's own projection.
            let cap = cfg.vulnerability_cap;
            let v_proj = tape.constant(self.vulnerable_proj.clone());
            let pv = tape.matmul(z, v_proj)?;
            let pv = tape.scale(pv, v.gain / cap)?;
            let pv = tape.tanh(pv)?;
            let gated = tape.mul(po, pv)?;
            let gated = tape.scale(gated, cap)?;
            let class_embed = tape.constant(self.class_embed.clone());
            let extra = tape.matmul(gated, class_embed)?;
            tok = tape.add(tok, extra)?;
        }

        if let Some(s) = self.injectors.statistical.filter(|s| s.scale > 1.0) {
            let cur = tape.value(tok)?;
            let norms = cur.row_norms();
            let t = s.target.index();
            let k = (s.scale * s.scale - 1.0).sqrt();
            let gate: Vec<f64> = (0..n)
                .map(|i| {
                    let hit = norms[i] > 0.0 && cur.row(i)[t] / norms[i] >= 0.5;
                    if hit {
                        k
                    } else {
                        0.0
                    }
                })
                .collect();
            let gate = tape.constant(Tensor::new(vec![n, 1], gate)?);
            let nv = tape.row_norms(tok)?;
            let amount = tape.mul(nv, gate)?;
            let mut e = vec![0.0; cfg.dim];
            e[DIM_ARTIFACT] = 1.0;
            let e = tape.constant(Tensor::new(vec![1, cfg.dim], e)?);
            let extra = tape.matmul(amount, e)?;
            tok = tape.add(tok, extra)?;
        }

        if let Some(row) = &self.inherent_row {
            let r = tape.constant(row.clone());
            tok = tape.add_row(tok, r)?;
        }
        debug_assert_eq!(tape.value(tok)?.shape(), &[n, cfg.dim]);
        Ok(tok)
    }
}
