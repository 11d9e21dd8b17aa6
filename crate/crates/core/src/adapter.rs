//! Context-edge hybrid adapter.
//!
//! `h = up(GELU(down(f))) + up_mix(mix(sobel(patch_mixer(f))))`, applied to
//! a stage's feature grid. Both output projections start at zero, so a new
//! adapter contributes nothing until trained.

use serde::Serialize;

use crate::edge::{EdgePath, SobelBank};
use crate::error::Result;
use crate::grid::FeatureGrid;
use crate::nn::{grid_to_tokens, tokens_to_grid, Init, Linear};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ChAdapter {
    pub stage: usize,
    pub stage_dim: usize,
    pub adapter_dim: usize,
    pub down: Linear,
    pub up: Linear,
    /// `None` when no Sobel direction is enabled.
    pub edge: Option<EdgePath>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterOutput {
    pub h: FeatureGrid,
    pub p: FeatureGrid,
    pub f_edge: FeatureGrid,
}

impl ChAdapter {
    /// Registers `stage{stage}.adapter.*` parameters. The context and edge
    /// paths draw from separate init streams so enabling the edge path leaves
    /// the context weights unchanged.
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        stage: usize,
        stage_dim: usize,
        adapter_dim: usize,
        edge_dim: usize,
        bank: SobelBank,
    ) -> Result<Self> {
        let prefix = format!("stage{stage}.adapter");
        let rng = &mut rng::stream(seed, &format!("init:{prefix}"));
        let down = Linear::new(store, rng, &format!("{prefix}.down"), stage_dim, adapter_dim, Init::FanIn)?;
        let up = Linear::new(store, rng, &format!("{prefix}.up"), adapter_dim, stage_dim, Init::Zeros)?;
        let edge = if bank.is_empty() {
            None
        } else {
            let rng = &mut rng::stream(seed, &format!("init:{prefix}.edge"));
            Some(EdgePath::new(store, rng, &format!("{prefix}.edge"), stage_dim, edge_dim, bank)?)
        };
        Ok(Self {
            stage,
            stage_dim,
            adapter_dim,
            down,
            up,
            edge,
        })
    }

    /// Tokenwise bottleneck prompt, same shape as `f`.
    pub fn context_prompt(&self, tape: &mut Tape, store: &ParamStore, f: FeatureGrid) -> Result<FeatureGrid> {
        f.expect_channels("context_prompt", self.stage_dim)?;
        let t = grid_to_tokens(tape, f.var)?;
        let d = self.down.forward(tape, store, t)?;
        let g = tape.gelu(d);
        let u = self.up.forward(tape, store, g)?;
        let v = tokens_to_grid(tape, u, f.height, f.width)?;
        FeatureGrid::on(tape, v)
    }

    pub fn edge_path(&self, tape: &mut Tape, store: &ParamStore, f: FeatureGrid) -> Result<FeatureGrid> {
        f.expect_channels("edge_path", self.stage_dim)?;
        match &self.edge {
            Some(e) => e.forward(tape, store, f),
            None => {
                let z = tape.constant(Tensor::zeros(&[f.channels, f.height, f.width]));
                FeatureGrid::on(tape, z)
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f_in: FeatureGrid) -> Result<AdapterOutput> {
        let p = self.context_prompt(tape, store, f_in)?;
        let f_edge = self.edge_path(tape, store, f_in)?;
        let h = tape.add(p.var, f_edge.var)?;
        Ok(AdapterOutput {
            h: FeatureGrid::on(tape, h)?,
            p,
            f_edge,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

pub fn count_trainable(store: &ParamStore) -> ParamCount {
    let trainable = store.trainable_numel();
    let total = store.total_numel();
    ParamCount {
        trainable,
        total,
        ratio: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
    }
}
