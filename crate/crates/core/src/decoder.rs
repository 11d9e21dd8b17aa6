//! Box prompt encoder and two-way attention mask decoder.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::nn::{grid_to_tokens, tokens_to_grid, Attention, Conv, Init, LayerNorm, Mlp};
use crate::params::{init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Inclusive pixel rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxPrompt {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize, size: usize) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate(size)?;
        Ok(b)
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if self.x0 > self.x1 || self.y0 > self.y1 {
            return Err(Error::Validation(format!("degenerate box {self:?}")));
        }
        if self.x1 >= size || self.y1 >= size {
            return Err(Error::Validation(format!("box {self:?} exceeds a {size}x{size} image")));
        }
        Ok(())
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }

    pub fn contains(&self, other: &BoxPrompt) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

/// Sinusoidal encoding of a point in `[0,1]^2`, `dim` values laid out as
/// `sin(wx) | cos(wx) | sin(wy) | cos(wy)` with geometric frequencies.
pub fn sinusoid(x: f64, y: f64, dim: usize) -> Vec<f64> {
    let f = dim / 4;
    let mut out = vec![0.0; dim];
    for k in 0..f {
        let w = PI * 32f64.powf(k as f64 / f as f64);
        out[k] = (w * x).sin();
        out[f + k] = (w * x).cos();
        out[2 * f + k] = (w * y).sin();
        out[3 * f + k] = (w * y).cos();
    }
    out
}

/// Positional encoding of every cell centre of a `side x side` grid, `[side*side, dim]`.
pub fn dense_pe(side: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(side * side * dim);
    for i in 0..side {
        for j in 0..side {
            data.extend(sinusoid((j as f64 + 0.5) / side as f64, (i as f64 + 0.5) / side as f64, dim));
        }
    }
    Tensor::new(&[side * side, dim], data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub corner_embed: ParamId,
    pub dim: usize,
    pub image_size: usize,
}

impl PromptEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize, image_size: usize) -> Result<Self> {
        let corner_embed = store.add("prompt.corner_embed", init::trunc_normal(rng, &[2, dim], 1.0))?;
        Ok(Self {
            corner_embed,
            dim,
            image_size,
        })
    }

    /// Positional part of the two corner tokens, `[2, dim]`.
    pub fn corner_pe(&self, b: &BoxPrompt) -> Result<Tensor> {
        b.validate(self.image_size)?;
        let s = self.image_size as f64;
        let mut data = sinusoid(b.x0 as f64 / s, b.y0 as f64 / s, self.dim);
        data.extend(sinusoid((b.x1 + 1) as f64 / s, (b.y1 + 1) as f64 / s, self.dim));
        Tensor::new(&[2, self.dim], data)
    }

    /// Top-left and bottom-right corner tokens, `[2, dim]`.
    pub fn encode_box(&self, tape: &mut Tape, store: &ParamStore, b: &BoxPrompt) -> Result<Var> {
        let pe = tape.constant(self.corner_pe(b)?);
        let types = tape.param(store, self.corner_embed);
        tape.add(pe, types)
    }
}

/// Full-resolution mask logits `[1, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct MaskLogits {
    pub var: Var,
    pub size: usize,
}

#[derive(Clone, Debug)]
struct TwoWayLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    image_to_token: Attention,
    norm4: LayerNorm,
}

const HEADS: usize = 4;

impl TwoWayLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Result<Self> {
        let f = Init::FanIn;
        Ok(Self {
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), d, d, HEADS, f)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            token_to_image: Attention::new(store, rng, &format!("{name}.token_to_image"), d, d / 2, HEADS, f)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, 2 * d, d, f)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d)?,
            image_to_token: Attention::new(store, rng, &format!("{name}.image_to_token"), d, d / 2, HEADS, f)?,
            norm4: LayerNorm::new(store, &format!("{name}.norm4"), d)?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var, keys: Var, qpe: Var, kpe: Var) -> Result<(Var, Var)> {
        let q = tape.add(queries, qpe)?;
        let a = self.self_attn.forward(tape, store, q, q, queries)?;
        let s = tape.add(queries, a)?;
        let queries = self.norm1.forward(tape, store, s)?;

        let q = tape.add(queries, qpe)?;
        let k = tape.add(keys, kpe)?;
        let a = self.token_to_image.forward(tape, store, q, k, keys)?;
        let s = tape.add(queries, a)?;
        let queries = self.norm2.forward(tape, store, s)?;

        let m = self.mlp.forward(tape, store, queries)?;
        let s = tape.add(queries, m)?;
        let queries = self.norm3.forward(tape, store, s)?;

        let q = tape.add(queries, qpe)?;
        let a = self.image_to_token.forward(tape, store, k, q, queries)?;
        let s = tape.add(keys, a)?;
        let keys = self.norm4.forward(tape, store, s)?;
        Ok((queries, keys))
    }
}

/// Two two-way layers, a final token-to-image attention, two 2x upscaling
/// steps fed by the stage-1/2 feature grids, and a hypernetwork that turns
/// the mask token into per-channel weights for the upscaled map.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub dim: usize,
    pub image_size: usize,
    pub grid_sides: [usize; 3],
    pub skip_dims: [usize; 2],
    pub up_dims: [usize; 2],
    mask_token: ParamId,
    layers: Vec<TwoWayLayer>,
    final_attn: Attention,
    final_norm: LayerNorm,
    up1: Conv,
    skip1: Conv,
    up0: Conv,
    skip0: Conv,
    hyper: Mlp,
}

pub const DECODER_LAYERS: usize = 2;

impl MaskDecoder {
    /// Registers `decoder.*` parameters. Skip inputs carry the teacher's
    /// stage-1 and stage-2 widths.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_dim();
        let [u0, u1] = cfg.decoder_upscale_dims;
        let dims = cfg.dims();
        let f = Init::FanIn;
        let mask_token = store.add("decoder.mask_token", init::trunc_normal(rng, &[1, d], 1.0))?;
        let layers = (0..DECODER_LAYERS)
            .map(|i| TwoWayLayer::new(store, rng, &format!("decoder.layer{i}"), d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: d,
            image_size: cfg.image_size,
            grid_sides: [cfg.grid_side(0), cfg.grid_side(1), cfg.grid_side(2)],
            skip_dims: [dims[0], dims[1]],
            up_dims: [u0, u1],
            mask_token,
            layers,
            final_attn: Attention::new(store, rng, "decoder.final_attn", d, d / 2, HEADS, f)?,
            final_norm: LayerNorm::new(store, "decoder.final_norm", d)?,
            up1: Conv::new(store, rng, "decoder.up1", d, u0, 3, f)?,
            skip1: Conv::new(store, rng, "decoder.skip1", dims[1], u0, 1, f)?,
            up0: Conv::new(store, rng, "decoder.up0", u0, u1, 3, f)?,
            skip0: Conv::new(store, rng, "decoder.skip0", dims[0], u1, 1, f)?,
            hyper: Mlp::new(store, rng, "decoder.hyper", d, d, u1, f)?,
        })
    }

    /// `embedding: [D, s2, s2]`, `skips`: stage-1 and stage-2 grids,
    /// `prompt`: `[2, D]` corner tokens.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: FeatureGrid,
        skips: [FeatureGrid; 2],
        prompt: Var,
    ) -> Result<MaskLogits> {
        let [s0, s1, s2] = self.grid_sides;
        embedding.expect_channels("decode_mask", self.dim)?;
        if embedding.height != s2 || embedding.width != s2 {
            return Err(Error::dim("decode_mask", format!("embedding grid {}x{}, expected {s2}x{s2}", embedding.height, embedding.width)));
        }
        for (i, (g, side)) in skips.iter().zip([s0, s1]).enumerate() {
            g.expect_channels("decode_mask.skip", self.skip_dims[i])?;
            if g.height != side || g.width != side {
                return Err(Error::dim("decode_mask.skip", format!("skip {i} grid {}x{}, expected {side}x{side}", g.height, g.width)));
            }
        }
        if tape.shape(prompt) != [2, self.dim] {
            return Err(Error::dim("decode_mask", format!("prompt tokens {:?}, expected [2, {}]", tape.shape(prompt), self.dim)));
        }

        let mask_token = tape.param(store, self.mask_token);
        let mut queries = tape.concat(&[mask_token, prompt], 0)?;
        let qpe = queries;
        let mut keys = grid_to_tokens(tape, embedding.var)?;
        let kpe = tape.constant(dense_pe(s2, self.dim));
        for layer in &self.layers {
            (queries, keys) = layer.forward(tape, store, queries, keys, qpe, kpe)?;
        }
        let q = tape.add(queries, qpe)?;
        let k = tape.add(keys, kpe)?;
        let a = self.final_attn.forward(tape, store, q, k, keys)?;
        let s = tape.add(queries, a)?;
        let queries = self.final_norm.forward(tape, store, s)?;
        let mask_out = tape.slice(queries, 0, 0, 1)?;

        let grid = tokens_to_grid(tape, keys, s2, s2)?;
        let up = tape.upsample2(grid)?;
        let up = self.up1.forward(tape, store, up)?;
        let sk = self.skip1.forward(tape, store, skips[1].var)?;
        let up = tape.add(up, sk)?;
        let up = tape.gelu(up);
        let up = tape.upsample2(up)?;
        let up = self.up0.forward(tape, store, up)?;
        let sk = self.skip0.forward(tape, store, skips[0].var)?;
        let up = tape.add(up, sk)?;
        let up = tape.gelu(up);

        let u1 = self.up_dims[1];
        let w = self.hyper.forward(tape, store, mask_out)?;
        let flat = tape.reshape(up, &[u1, s0 * s0])?;
        let low = tape.matmul(w, flat)?;
        let low = tape.reshape(low, &[1, s0, s0])?;
        let logits = tape.bilinear(low, self.image_size, self.image_size)?;
        Ok(MaskLogits {
            var: logits,
            size: self.image_size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn box_validation() {
        assert!(BoxPrompt::new(3, 2, 7, 5, 64).is_ok());
        assert!(BoxPrompt::new(4, 4, 4, 4, 64).is_ok());
        assert!(matches!(BoxPrompt::new(5, 2, 4, 5, 64), Err(Error::Validation(_))));
        assert!(BoxPrompt::new(0, 0, 64, 10, 64).is_err());
        assert_eq!(BoxPrompt { x0: 3, y0: 2, x1: 7, y1: 5 }.area(), 20);
    }

    #[test]
    fn corner_tokens_are_deterministic_and_distinct() {
        let mut store = ParamStore::new();
        let pe = PromptEncoder::new(&mut store, &mut rng::stream(0, "init"), 128, 64).unwrap();
        let b = BoxPrompt::new(0, 0, 63, 63, 64).unwrap();
        let mut tape = Tape::new();
        let t1 = pe.encode_box(&mut tape, &store, &b).unwrap();
        let t2 = pe.encode_box(&mut tape, &store, &b).unwrap();
        assert_eq!(tape.shape(t1), &[2, 128]);
        assert_eq!(tape.value(t1), tape.value(t2));
        let d = tape.value(t1).data();
        assert_ne!(&d[..128], &d[128..]);
    }

    #[test]
    fn sinusoid_layout() {
        let v = sinusoid(0.0, 0.0, 8);
        assert_eq!(v, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(dense_pe(4, 16).shape(), &[16, 16]);
    }
}
