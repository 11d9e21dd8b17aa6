//! Central finite-difference gradient checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub op: &'static str,
    pub seed: u64,
    /// Worst per-input relative error, see [`check`].
    pub rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.rel_error.is_finite() && self.rel_error < TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn scalarize(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let flat = tape.reshape(out, &[weights.numel()])?;
    let prod = tape.mul(flat, w)?;
    Ok(tape.sum(prod))
}

fn eval(inputs: &[Tensor], build: &Build, weights: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let l = scalarize(&mut tape, out, weights)?;
    Ok(tape.value(l).item())
}

/// Compares reverse-mode gradients of `sum(r * build(inputs))` (with a fixed
/// random projection `r`) against central differences with step [`STEP`].
///
/// For each input tensor the error is `max|analytic - numeric|` divided by
/// `max(max|numeric|, max|analytic|, 1e-8)`; the worst input is returned.
pub fn check(inputs: &[Tensor], build: &Build, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let n_out = tape.value(out).numel();
    let weights = Tensor::new(&[n_out], (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let loss = scalarize(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        let mut probe = inputs.to_vec();
        for k in 0..numeric.len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + STEP;
            let up = eval(&probe, build, &weights)?;
            probe[i].data_mut()[k] = orig - STEP;
            let down = eval(&probe, build, &weights)?;
            probe[i].data_mut()[k] = orig;
            numeric[k] = (up - down) / (2.0 * STEP);
        }
        let scale = numeric
            .iter()
            .chain(&analytic)
            .fold(1e-8_f64, |m, v| m.max(v.abs()));
        let err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(err / scale);
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

struct Case {
    op: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: fn(&mut Tape, &[Var]) -> Result<Var>,
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            op: "linear",
            inputs: |r| {
                let (m, i, o) = (dim(r, 1, 4), dim(r, 1, 8), dim(r, 1, 8));
                vec![rand_tensor(r, &[m, i], -1.0, 1.0), rand_tensor(r, &[i, o], -1.0, 1.0), rand_tensor(r, &[o], -1.0, 1.0)]
            },
            build: |t, v| t.linear(v[0], v[1], Some(v[2])),
        },
        Case {
            op: "matmul",
            inputs: |r| {
                let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 8), dim(r, 1, 8));
                vec![rand_tensor(r, &[m, k], -1.0, 1.0), rand_tensor(r, &[k, n], -1.0, 1.0)]
            },
            build: |t, v| t.matmul(v[0], v[1]),
        },
        Case {
            op: "conv2d",
            inputs: |r| {
                let (ci, co, h, w) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 3, 8), dim(r, 3, 8));
                vec![rand_tensor(r, &[ci, h, w], -1.0, 1.0), rand_tensor(r, &[co, ci, 3, 3], -1.0, 1.0), rand_tensor(r, &[co], -1.0, 1.0)]
            },
            build: |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1),
        },
        Case {
            op: "conv2d_strided",
            inputs: |r| {
                let (ci, co) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(r, &[ci, 7, 8], -1.0, 1.0), rand_tensor(r, &[co, ci, 3, 3], -1.0, 1.0)]
            },
            build: |t, v| t.conv2d(v[0], v[1], None, 2, 0, 1),
        },
        Case {
            op: "conv2d_depthwise",
            inputs: |r| {
                let c = dim(r, 1, 4);
                vec![rand_tensor(r, &[c, 8, 8], -1.0, 1.0), rand_tensor(r, &[c, 1, 3, 3], -1.0, 1.0)]
            },
            build: |t, v| {
                let c = t.shape(v[0])[0];
                t.conv2d(v[0], v[1], None, 1, 1, c)
            },
        },
        Case {
            op: "gelu",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -3.0, 3.0)]
            },
            build: |t, v| Ok(t.gelu(v[0])),
        },
        Case {
            op: "sigmoid",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -4.0, 4.0)]
            },
            build: |t, v| Ok(t.sigmoid(v[0])),
        },
        Case {
            op: "log_sigmoid",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -6.0, 6.0)]
            },
            build: |t, v| Ok(t.log_sigmoid(v[0])),
        },
        Case {
            op: "exp",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -2.0, 2.0)]
            },
            build: |t, v| Ok(t.exp(v[0])),
        },
        Case {
            op: "log",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, 0.2, 3.0)]
            },
            build: |t, v| Ok(t.log(v[0])),
        },
        Case {
            op: "powf",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, 0.1, 2.0)]
            },
            build: |t, v| Ok(t.powf(v[0], 2.0)),
        },
        Case {
            op: "add",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -1.0, 1.0), rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| t.add(v[0], v[1]),
        },
        Case {
            op: "sub",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -1.0, 1.0), rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| t.sub(v[0], v[1]),
        },
        Case {
            op: "mul",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -1.0, 1.0), rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| t.mul(v[0], v[1]),
        },
        Case {
            op: "div",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -1.0, 1.0), rand_tensor(r, &s, 0.5, 2.0)]
            },
            build: |t, v| t.div(v[0], v[1]),
        },
        Case {
            op: "add_row",
            inputs: |r| {
                let (m, n) = (dim(r, 1, 4), dim(r, 1, 8));
                vec![rand_tensor(r, &[m, n], -1.0, 1.0), rand_tensor(r, &[n], -1.0, 1.0)]
            },
            build: |t, v| t.add_row(v[0], v[1]),
        },
        Case {
            op: "scale_shift",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| {
                let s = t.scale(v[0], -1.7);
                Ok(t.add_scalar(s, 0.3))
            },
        },
        Case {
            op: "softmax",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 2, 8)];
                vec![rand_tensor(r, &s, -2.0, 2.0)]
            },
            build: |t, v| Ok(t.softmax(v[0])),
        },
        Case {
            op: "layer_norm",
            inputs: |r| {
                let (m, n) = (dim(r, 1, 4), dim(r, 2, 8));
                vec![rand_tensor(r, &[m, n], -2.0, 2.0), rand_tensor(r, &[n], 0.5, 1.5), rand_tensor(r, &[n], -1.0, 1.0)]
            },
            build: |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
        },
        Case {
            op: "sum",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| Ok(t.sum(v[0])),
        },
        Case {
            op: "mean",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| Ok(t.mean(v[0])),
        },
        Case {
            op: "mse",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -1.0, 1.0), rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| t.mse(v[0], v[1]),
        },
        Case {
            op: "reshape",
            inputs: |r| {
                let s = [dim(r, 1, 4), 2, dim(r, 1, 4)];
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| {
                let s = t.shape(v[0]).to_vec();
                let r = t.reshape(v[0], &[s[0] * 2, s[2]])?;
                Ok(t.gelu(r))
            },
        },
        Case {
            op: "transpose",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 8)];
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| t.transpose(v[0]),
        },
        Case {
            op: "concat",
            inputs: |r| {
                let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
                vec![rand_tensor(r, &[2, a, 3], -1.0, 1.0), rand_tensor(r, &[2, b, 3], -1.0, 1.0)]
            },
            build: |t, v| t.concat(&[v[0], v[1]], 1),
        },
        Case {
            op: "slice",
            inputs: |r| {
                let s = [dim(r, 1, 4), 8];
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| t.slice(v[0], 1, 2, 5),
        },
        Case {
            op: "upsample2",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4)];
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| t.upsample2(v[0]),
        },
        Case {
            op: "max_pool2",
            inputs: |r| {
                let s = [dim(r, 1, 4), 8, 8];
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| t.max_pool2(v[0]),
        },
        Case {
            op: "bilinear",
            inputs: |r| {
                let s = [dim(r, 1, 4), dim(r, 2, 4), dim(r, 2, 4)];
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| t.bilinear(v[0], 8, 7),
        },
        Case {
            op: "patchify",
            inputs: |r| {
                let s = [dim(r, 1, 4), 8, 8];
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            build: |t, v| t.patchify(v[0], 4),
        },
    ]
}

/// Names of every checked operation, in suite order.
pub fn op_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.op).collect()
}

/// Runs every operation once per seed.
pub fn run_suite(seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for case in cases() {
        for seed in seeds.clone() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (case.inputs)(&mut rng);
            let rel_error = check(&inputs, &case.build, &mut rng)?;
            out.push(CheckOutcome {
                op: case.op,
                seed,
                rel_error,
            });
        }
    }
    Ok(out)
}
