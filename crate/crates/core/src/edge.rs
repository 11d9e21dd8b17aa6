//! Edge-aware path of the hybrid adapter.
//!
//! Features are first narrowed by a 1x1 patch mixer, every channel is then
//! filtered by a fixed bank of 3x3 Sobel kernels whose responses are summed,
//! and a 1x1 channel mixer recombines the channels. A final zero-initialised
//! 1x1 up-mix returns to the stage width so the result can be added to the
//! context prompt.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::FeatureGrid;
use crate::nn::{Conv, Init};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub type Kernel = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Horizontal,
    Vertical,
    RightDiagonal,
    LeftDiagonal,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Horizontal,
        Direction::Vertical,
        Direction::RightDiagonal,
        Direction::LeftDiagonal,
    ];

    pub fn kernel(self) -> Kernel {
        match self {
            Direction::Horizontal => [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
            Direction::Vertical => [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]],
            Direction::RightDiagonal => [[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]],
            Direction::LeftDiagonal => [[-2.0, -1.0, 0.0], [-1.0, 0.0, 1.0], [0.0, 1.0, 2.0]],
        }
    }
}

/// Fixed Sobel kernels. Never registered as parameters: they enter every
/// forward pass as tape constants.
#[derive(Clone, Debug, PartialEq)]
pub struct SobelBank {
    kernels: Vec<(Direction, Kernel)>,
}

impl SobelBank {
    /// The four canonical directions.
    pub fn canonical() -> Self {
        Self::with_directions(&Direction::ALL)
    }

    pub fn with_directions(dirs: &[Direction]) -> Self {
        Self {
            kernels: dirs.iter().map(|&d| (d, d.kernel())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernels(&self) -> &[(Direction, Kernel)] {
        &self.kernels
    }

    /// Whether the bank's filters can take gradients. Always `false`.
    pub fn trainable(&self) -> bool {
        false
    }
}

/// Per-channel `sum_k conv(S_k, F^i)` with zero padding 1 (shape preserving),
/// before any channel mixing.
///
/// Every kernel is point-antisymmetric, so it is applied as two-tap
/// differences `x[i] - x[8 - i]` weighted by `S_k[i]` (a depthwise 3x3 then a
/// grouped 1x1 conv). A constant field then gives exact zeros, which a
/// mixed-sign 3x3 accumulation does not.
pub fn sobel_response(tape: &mut Tape, f: FeatureGrid, bank: &SobelBank) -> Result<FeatureGrid> {
    let c = f.channels;
    let pairs: Vec<(usize, f64)> = bank
        .kernels()
        .iter()
        .flat_map(|(_, k)| {
            let flat: [f64; 9] = std::array::from_fn(|i| k[i / 3][i % 3]);
            debug_assert!((0..9).all(|i| flat[i] == -flat[8 - i]));
            (0..9).filter(move |&i| flat[i] > 0.0).map(move |i| (i, flat[i]))
        })
        .collect();
    if pairs.is_empty() {
        let var = tape.constant(Tensor::zeros(&[c, f.height, f.width]));
        return FeatureGrid::on(tape, var);
    }
    let n = pairs.len();
    let mut diff = vec![0.0; c * n * 9];
    for ch in 0..c {
        for (j, &(i, _)) in pairs.iter().enumerate() {
            let o = (ch * n + j) * 9;
            diff[o + i] = 1.0;
            diff[o + 8 - i] = -1.0;
        }
    }
    let weights: Vec<f64> = pairs.iter().map(|&(_, w)| w).collect();
    let diff = tape.constant(Tensor::new(&[c * n, 1, 3, 3], diff)?);
    let mix = tape.constant(Tensor::new(&[c, n, 1, 1], weights.repeat(c))?);
    let d = tape.conv2d(f.var, diff, None, 1, 1, c)?;
    let var = tape.conv2d(d, mix, None, 1, 0, c)?;
    FeatureGrid::on(tape, var)
}

/// 1x1 channel reduction from the stage width to the edge width.
#[derive(Clone, Debug)]
pub struct PatchMixer {
    pub conv: Conv,
}

impl PatchMixer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, stage_dim: usize, edge_dim: usize, how: Init) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, rng, name, stage_dim, edge_dim, 1, how)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: FeatureGrid) -> Result<FeatureGrid> {
        f.expect_channels("patch_mixer", self.conv.in_ch)?;
        let v = self.conv.forward(tape, store, f.var)?;
        FeatureGrid::on(tape, v)
    }
}

/// Patch mixer, Sobel bank, intermediate channel mixer and output up-mix.
#[derive(Clone, Debug)]
pub struct EdgePath {
    pub bank: SobelBank,
    pub patch_mixer: PatchMixer,
    pub channel_mixer: Conv,
    pub up_mix: Conv,
}

impl EdgePath {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        stage_dim: usize,
        edge_dim: usize,
        bank: SobelBank,
    ) -> Result<Self> {
        Ok(Self {
            bank,
            patch_mixer: PatchMixer::new(store, rng, &format!("{prefix}.patch_mixer"), stage_dim, edge_dim, Init::FanIn)?,
            channel_mixer: Conv::new(store, rng, &format!("{prefix}.channel_mixer"), edge_dim, edge_dim, 1, Init::FanIn)?,
            up_mix: Conv::new(store, rng, &format!("{prefix}.up_mix"), edge_dim, stage_dim, 1, Init::Zeros)?,
        })
    }

    /// Sobel response of the reduced features followed by the edge-width
    /// channel mixer.
    pub fn edge_enhance(&self, tape: &mut Tape, store: &ParamStore, reduced: FeatureGrid) -> Result<FeatureGrid> {
        reduced.expect_channels("edge_enhance", self.channel_mixer.in_ch)?;
        let r = sobel_response(tape, reduced, &self.bank)?;
        let m = self.channel_mixer.forward(tape, store, r.var)?;
        FeatureGrid::on(tape, m)
    }

    /// Full path from stage-width input to stage-width edge features.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: FeatureGrid) -> Result<FeatureGrid> {
        let reduced = self.patch_mixer.forward(tape, store, f)?;
        let enhanced = self.edge_enhance(tape, store, reduced)?;
        let up = self.up_mix.forward(tape, store, enhanced.var)?;
        FeatureGrid::on(tape, up)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn any_constant_field_gives_exact_interior_zero(c in -1e6f64..1e6, ch in 1usize..4) {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::full(&[ch, 6, 7], c));
            let g = FeatureGrid::on(&tape, v).unwrap();
            let r = sobel_response(&mut tape, g, &SobelBank::canonical()).unwrap();
            let out = tape.value(r.var);
            for k in 0..ch {
                for y in 1..5 {
                    for x in 1..6 {
                        prop_assert_eq!(out.data()[(k * 6 + y) * 7 + x], 0.0);
                    }
                }
            }
        }
    }
}
