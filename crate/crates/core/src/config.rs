//! Architecture configuration shared by teacher and student models.

use serde::{Deserialize, Serialize};

use crate::edge::Direction;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// 2x2 max-pool plus 1x1 projection to the next stage's width.
    pub downsample: bool,
}

/// Where the adapter reads its input inside a stage. Its output is always
/// added to the stage's block output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInput {
    #[default]
    BlockInput,
    BlockOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub stages: [StageConfig; 3],
    pub mlp_ratio: usize,
    pub adapter_dim: usize,
    /// Channel width of the Sobel path; defaults to `adapter_dim`.
    pub edge_dim: Option<usize>,
    /// Sobel directions summed by the edge path. Empty removes the edge path.
    pub edge_directions: Vec<Direction>,
    pub adapter_input: AdapterInput,
    /// Defaults to the last stage width.
    pub decoder_dim: Option<usize>,
    /// Channel widths of the two 2x upscaling steps in the mask decoder.
    pub decoder_upscale_dims: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy_teacher()
    }
}

fn stages(dims: [usize; 3], heads: [usize; 3]) -> [StageConfig; 3] {
    [0, 1, 2].map(|i| StageConfig {
        embed_dim: dims[i],
        num_blocks: 1,
        num_heads: heads[i],
        downsample: i < 2,
    })
}

impl ModelConfig {
    /// 64x64 input, patch 4, widths 32/64/128, adapter width 16.
    pub fn toy_teacher() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            stages: stages([32, 64, 128], [2, 2, 4]),
            mlp_ratio: 4,
            adapter_dim: 16,
            edge_dim: None,
            edge_directions: Direction::ALL.to_vec(),
            adapter_input: AdapterInput::BlockInput,
            decoder_dim: None,
            decoder_upscale_dims: [32, 16],
        }
    }

    /// Half-width student of [`toy_teacher`](Self::toy_teacher).
    pub fn toy_student() -> Self {
        Self {
            stages: stages([16, 32, 64], [2, 2, 4]),
            adapter_dim: 8,
            ..Self::toy_teacher()
        }
    }

    /// Hiera-like widths ending at 768 with the 192-wide adapter bottleneck.
    /// Reachable for parameter accounting; far too slow to train here.
    pub fn paper_scale() -> Self {
        Self {
            image_size: 1024,
            patch_size: 4,
            stages: stages([288, 576, 768], [4, 8, 12]),
            mlp_ratio: 4,
            adapter_dim: 192,
            edge_dim: None,
            edge_directions: Direction::ALL.to_vec(),
            adapter_input: AdapterInput::BlockInput,
            decoder_dim: Some(256),
            decoder_upscale_dims: [64, 32],
        }
    }

    /// Student for [`paper_scale`](Self::paper_scale): final width 128 and
    /// the adapter bottleneck scaled by the same 128/768 factor.
    pub fn paper_student() -> Self {
        Self {
            stages: stages([48, 96, 128], [2, 4, 4]),
            adapter_dim: 32,
            ..Self::paper_scale()
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.stages.map(|s| s.embed_dim)
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim.unwrap_or(self.adapter_dim)
    }

    pub fn decoder_dim(&self) -> usize {
        self.decoder_dim.unwrap_or(self.stages[2].embed_dim)
    }

    /// Token grid side of stage `l` (0-based).
    pub fn grid_side(&self, l: usize) -> usize {
        let mut side = self.image_size / self.patch_size;
        for s in &self.stages[..l] {
            if s.downsample {
                side /= 2;
            }
        }
        side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        let mut side = self.image_size / self.patch_size;
        for (l, s) in self.stages.iter().enumerate() {
            if s.embed_dim == 0 || s.num_blocks == 0 || s.num_heads == 0 {
                return bad(format!("stage {} has a zero dimension", l + 1));
            }
            if s.embed_dim % s.num_heads != 0 {
                return bad(format!("stage {} width {} not divisible by {} heads", l + 1, s.embed_dim, s.num_heads));
            }
            if l > 0 && s.embed_dim < self.stages[l - 1].embed_dim {
                return bad("stage widths must be non-decreasing".into());
            }
            if self.adapter_dim >= s.embed_dim {
                return bad(format!(
                    "adapter width {} must be below stage {} width {}",
                    self.adapter_dim,
                    l + 1,
                    s.embed_dim
                ));
            }
            if s.downsample {
                if side % 2 != 0 {
                    return bad(format!("stage {} grid {side} cannot be halved", l + 1));
                }
                side /= 2;
            }
        }
        if self.stages[2].downsample {
            return bad("the last stage does not downsample".into());
        }
        if !self.stages[0].downsample || !self.stages[1].downsample {
            return bad("stages 1 and 2 must downsample (the decoder upsamples twice)".into());
        }
        if self.adapter_dim == 0 || self.edge_dim() == 0 {
            return bad("adapter width must be positive".into());
        }
        if self.decoder_dim() % 4 != 0 {
            return bad(format!("decoder width {} must be divisible by 4", self.decoder_dim()));
        }
        let mut seen = self.edge_directions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.edge_directions.len() {
            return bad("edge directions contain duplicates".into());
        }
        Ok(())
    }
}
