//! Three-stage hierarchical transformer encoder with one hybrid adapter per
//! stage and per-stage distillation taps.

use rand_chacha::ChaCha8Rng;

use crate::adapter::ChAdapter;
use crate::config::{AdapterInput, ModelConfig};
use crate::edge::SobelBank;
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::nn::{grid_to_tokens, tokens_to_grid, Attention, Conv, Init, LayerNorm, Linear, Mlp};
use crate::params::{init, ParamId, ParamStore};
use crate::rng;
use crate::tape::{Tape, Var};

const BLOCK_STD: f64 = 0.02;

/// Name-path predicate for backbone parameters, which stay frozen while
/// adapters, necks, decoder and prompt encoder train.
pub fn is_backbone(name: &str) -> bool {
    if name.starts_with("patch_embed.") {
        return true;
    }
    match name.strip_prefix("stage").and_then(|r| r.split_once('.')) {
        Some((digits, rest)) => {
            digits.chars().all(|c| c.is_ascii_digit()) && (rest.starts_with("block") || rest.starts_with("downsample."))
        }
        None => false,
    }
}

/// Transformer block parameters only (`stage*.block*`).
pub fn is_block(name: &str) -> bool {
    is_backbone(name) && name.contains(".block")
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub patch: usize,
    pub side: usize,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let p = cfg.patch_size;
        let side = cfg.image_size / p;
        let dim = cfg.stages[0].embed_dim;
        let proj = Linear::new(store, rng, "patch_embed.proj", p * p, dim, Init::FanIn)?;
        let pos = store.add("patch_embed.pos", init::trunc_normal(rng, &[side * side, dim], BLOCK_STD))?;
        Ok(Self { proj, pos, patch: p, side })
    }

    /// `img: [1,H,W]` -> `[dim, H/p, W/p]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, img: Var) -> Result<FeatureGrid> {
        let shape = tape.shape(img).to_vec();
        if shape.len() != 3 || shape[0] != 1 || shape[1] != self.side * self.patch || shape[2] != shape[1] {
            return Err(Error::Config(format!(
                "image {shape:?} does not match the configured {0}x{0} single-channel input",
                self.side * self.patch
            )));
        }
        let patches = tape.patchify(img, self.patch)?;
        let t = self.proj.forward(tape, store, patches)?;
        let pos = tape.param(store, self.pos);
        let t = tape.add(t, pos)?;
        let g = tokens_to_grid(tape, t, self.side, self.side)?;
        FeatureGrid::on(tape, g)
    }
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        let how = Init::TruncNormal(BLOCK_STD);
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, dim, heads, how)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, how)?,
        })
    }

    /// Token rows `[N, dim]` in and out.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = self.norm1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n, n, n)?;
        let x = tape.add(x, a)?;
        let n = self.norm2.forward(tape, store, x)?;
        let m = self.mlp.forward(tape, store, n)?;
        tape.add(x, m)
    }
}

/// The four per-stage observables used for distillation.
#[derive(Clone, Copy, Debug)]
pub struct StageTaps {
    pub stage_input: FeatureGrid,
    pub block_out: FeatureGrid,
    pub adapter_out: FeatureGrid,
    pub integration: FeatureGrid,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub index: usize,
    pub dim: usize,
    pub blocks: Vec<Block>,
    pub adapter: ChAdapter,
    pub adapter_input: AdapterInput,
    /// 2x2 max-pool then 1x1 projection to the next stage's width.
    pub downsample: Option<Conv>,
}

impl Stage {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: FeatureGrid) -> Result<StageTaps> {
        x.expect_channels("stage_forward", self.dim)?;
        let mut t = grid_to_tokens(tape, x.var)?;
        for b in &self.blocks {
            t = b.forward(tape, store, t)?;
        }
        let bo = tokens_to_grid(tape, t, x.height, x.width)?;
        let block_out = FeatureGrid::on(tape, bo)?;
        let src = match self.adapter_input {
            AdapterInput::BlockInput => x,
            AdapterInput::BlockOutput => block_out,
        };
        let adapter_out = self.adapter.forward(tape, store, src)?.h;
        let sum = tape.add(block_out.var, adapter_out.var)?;
        Ok(StageTaps {
            stage_input: x,
            block_out,
            adapter_out,
            integration: FeatureGrid::on(tape, sum)?,
        })
    }

    /// Next stage's input from this stage's integration.
    pub fn downsample(&self, tape: &mut Tape, store: &ParamStore, integration: FeatureGrid) -> Result<Option<FeatureGrid>> {
        let Some(conv) = &self.downsample else {
            return Ok(None);
        };
        let pooled = tape.max_pool2(integration.var)?;
        let v = conv.forward(tape, store, pooled)?;
        FeatureGrid::on(tape, v).map(Some)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: ModelConfig,
    pub patch_embed: PatchEmbed,
    pub stages: Vec<Stage>,
}

impl Encoder {
    /// Registers `patch_embed.*` and `stage{l}.*` parameters.
    pub fn new(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut rng::stream(seed, "init:backbone");
        let patch_embed = PatchEmbed::new(store, rng, cfg)?;
        let mut stages = Vec::with_capacity(3);
        for (i, s) in cfg.stages.iter().enumerate() {
            let l = i + 1;
            let blocks = (0..s.num_blocks)
                .map(|b| Block::new(store, rng, &format!("stage{l}.block{b}"), s.embed_dim, s.num_heads, cfg.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            let bank = SobelBank::with_directions(&cfg.edge_directions);
            let adapter = ChAdapter::new(store, seed, l, s.embed_dim, cfg.adapter_dim, cfg.edge_dim(), bank)?;
            let downsample = if s.downsample {
                let next = cfg.stages[i + 1].embed_dim;
                Some(Conv::new(store, rng, &format!("stage{l}.downsample"), s.embed_dim, next, 1, Init::FanIn)?)
            } else {
                None
            };
            stages.push(Stage {
                index: l,
                dim: s.embed_dim,
                blocks,
                adapter,
                adapter_input: cfg.adapter_input,
                downsample,
            });
        }
        Ok(Self {
            config: cfg.clone(),
            patch_embed,
            stages,
        })
    }

    /// Runs all three stages and returns their taps.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, img: Var) -> Result<[StageTaps; 3]> {
        let mut x = self.patch_embed.forward(tape, store, img)?;
        let mut taps = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            let t = stage.forward(tape, store, x)?;
            taps.push(t);
            if i + 1 < self.stages.len() {
                x = stage
                    .downsample(tape, store, t.integration)?
                    .ok_or_else(|| Error::Config(format!("stage {} must downsample", i + 1)))?;
            }
        }
        Ok(taps.try_into().expect("three stages"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn backbone_predicate() {
        for n in ["patch_embed.proj.w", "stage1.block0.attn.q.w", "stage3.block1.norm2.gamma", "stage2.downsample.w"] {
            assert!(is_backbone(n), "{n}");
        }
        for n in ["stage1.adapter.down.w", "neck.proj.w", "decoder.mask_token", "prompt.corner_embed", "stagex.block0"] {
            assert!(!is_backbone(n), "{n}");
        }
        assert!(is_block("stage2.block0.mlp.fc1.b"));
        assert!(!is_block("stage2.downsample.b"));
    }

    #[test]
    fn patch_embed_shape_and_resolution_check() {
        let cfg = ModelConfig::toy_teacher();
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut store, &mut rng::stream(0, "init"), &cfg).unwrap();
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::full(&[1, 64, 64], 0.5));
        let g = pe.forward(&mut tape, &store, img).unwrap();
        assert_eq!((g.channels, g.height, g.width), (32, 16, 16));
        let bad = tape.constant(Tensor::zeros(&[1, 60, 60]));
        assert!(matches!(pe.forward(&mut tape, &store, bad), Err(Error::Config(_))));
    }

    #[test]
    fn stage_taps_are_consistent_and_fresh_adapters_vanish() {
        let cfg = ModelConfig::toy_teacher();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, 0, &cfg).unwrap();
        let mut tape = Tape::new();
        let img = tape.constant(init::trunc_normal(&mut rng::stream(1, "img"), &[1, 64, 64], 0.5));
        let taps = enc.forward(&mut tape, &store, img).unwrap();
        let expect = [(32, 16), (64, 8), (128, 4)];
        for (t, (c, s)) in taps.iter().zip(expect) {
            assert_eq!((t.integration.channels, t.integration.height, t.integration.width), (c, s, s));
            assert_eq!(tape.value(t.integration.var), tape.value(t.block_out.var));
            let (i, b, a) = (
                tape.value(t.integration.var).data(),
                tape.value(t.block_out.var).data(),
                tape.value(t.adapter_out.var).data(),
            );
            assert!(i.iter().zip(b).zip(a).all(|((i, b), a)| i - (b + a) == 0.0));
        }
    }
}
