//! Parameterised building blocks shared by the encoder, adapters, decoder
//! and distillation necks.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    FanIn,
    Zeros,
    /// Square identity (linear) or centre-tap identity (conv).
    Identity,
}

fn make_weight(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, how: Init) -> Result<Tensor> {
    Ok(match how {
        Init::TruncNormal(std) => init::trunc_normal(rng, shape, std),
        Init::FanIn => init::fan_in_uniform(rng, shape, fan_in),
        Init::Zeros => Tensor::zeros(shape),
        Init::Identity => identity_weight(shape)?,
    })
}

fn identity_weight(shape: &[usize]) -> Result<Tensor> {
    let mut t = Tensor::zeros(shape);
    match *shape {
        [i, o] if i == o => {
            for k in 0..i {
                t.data_mut()[k * o + k] = 1.0;
            }
        }
        [co, ci, kh, kw] if co == ci => {
            for c in 0..co {
                t.data_mut()[((c * ci + c) * kh + kh / 2) * kw + kw / 2] = 1.0;
            }
        }
        _ => {
            return Err(Error::Config(format!("identity init needs a square shape, got {shape:?}")));
        }
    }
    Ok(t)
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        how: Init,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), make_weight(rng, &[in_dim, out_dim], in_dim, how)?)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }
}

/// Square-kernel convolution with bias over `[C,H,W]` grids.
#[derive(Clone, Debug)]
pub struct Conv {
    pub k: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub size: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        size: usize,
        how: Init,
    ) -> Result<Self> {
        let shape = [out_ch, in_ch, size, size];
        let k = store.add(format!("{name}.w"), make_weight(rng, &shape, in_ch * size * size, how)?)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]))?;
        Ok(Self {
            k,
            b,
            in_ch,
            out_ch,
            size,
        })
    }

    /// Shape-preserving (stride 1, `size / 2` zero padding).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.k);
        let b = tape.param(store, self.b);
        tape.conv2d(x, k, Some(b), 1, self.size / 2, 1)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// `[C,H,W]` grid to `[H*W, C]` token rows.
pub fn grid_to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let &[c, h, w] = tape.shape(x) else {
        return Err(Error::dim("grid_to_tokens", format!("expected [C,H,W], got {:?}", tape.shape(x))));
    };
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.transpose(flat)
}

/// `[H*W, C]` token rows back to a `[C,H,W]` grid.
pub fn tokens_to_grid(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let t = tape.transpose(x)?;
    let c = tape.shape(t)[0];
    tape.reshape(t, &[c, h, w])
}

/// Multi-head scaled dot-product attention over token rows with separate
/// query/key/value projections into an `inner`-wide space.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub inner: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        inner: usize,
        heads: usize,
        how: Init,
    ) -> Result<Self> {
        if heads == 0 || inner % heads != 0 {
            return Err(Error::Config(format!("{name}: width {inner} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, inner, how)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, inner, how)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, inner, how)?,
            out: Linear::new(store, rng, &format!("{name}.out"), inner, dim, how)?,
            heads,
            inner,
        })
    }

    /// `q_in: [Nq, dim]`, `k_in`/`v_in: [Nk, dim]` -> `[Nq, dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
        let q = self.q.forward(tape, store, q_in)?;
        let k = self.k.forward(tape, store, k_in)?;
        let v = self.v.forward(tape, store, v_in)?;
        let dh = self.inner / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 1, h * dh, dh)?,
                    tape.slice(k, 1, h * dh, dh)?,
                    tape.slice(v, 1, h * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let a = tape.softmax(scores);
            heads.push(tape.matmul(a, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        self.out.forward(tape, store, merged)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, hidden: usize, out: usize, how: Init) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, how)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out, how)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn identity_initialised_layers_pass_input_through() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "t");
        let lin = Linear::new(&mut store, &mut r, "l", 4, 4, Init::Identity).unwrap();
        let conv = Conv::new(&mut store, &mut r, "c", 3, 3, 3, Init::Identity).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(init::trunc_normal(&mut r, &[2, 4], 1.0));
        let y = lin.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let g = tape.constant(init::trunc_normal(&mut r, &[3, 5, 5], 1.0));
        let z = conv.forward(&mut tape, &store, g).unwrap();
        assert_eq!(tape.value(z), tape.value(g));
    }

    #[test]
    fn grid_token_round_trip() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::new(&[2, 2, 3], (0..12).map(f64::from).collect()).unwrap());
        let t = grid_to_tokens(&mut tape, g).unwrap();
        assert_eq!(tape.shape(t), &[6, 2]);
        assert_eq!(&tape.value(t).data()[..2], &[0.0, 6.0]);
        let back = tokens_to_grid(&mut tape, t, 2, 3).unwrap();
        assert_eq!(tape.value(back), tape.value(g));
    }

    #[test]
    fn attention_with_identical_keys_averages_values() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, "t");
        let att = Attention::new(&mut store, &mut r, "a", 4, 4, 2, Init::Identity).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(init::trunc_normal(&mut r, &[3, 4], 1.0));
        let k = tape.constant(Tensor::ones(&[5, 4]));
        let v = tape.constant(init::trunc_normal(&mut r, &[5, 4], 1.0));
        let y = att.forward(&mut tape, &store, q, k, v).unwrap();
        assert_eq!(tape.shape(y), &[3, 4]);
        let vals = tape.value(v).data().to_vec();
        for c in 0..4 {
            let mean = (0..5).map(|i| vals[i * 4 + c]).sum::<f64>() / 5.0;
            for i in 0..3 {
                assert!((tape.value(y).data()[i * 4 + c] - mean).abs() < 1e-12);
            }
        }
    }
}
