//! Assembled teacher and student segmenters and their checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ModelConfig;
use crate::decoder::{BoxPrompt, MaskDecoder, MaskLogits, PromptEncoder};
use crate::distill::{DistillNecks, Level};
use crate::encoder::{is_backbone, Encoder, StageTaps};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::nn::{Conv, Init};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Anything that maps an image and a box prompt to mask logits.
pub trait MaskPredictor {
    fn image_size(&self) -> usize;

    fn logits(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, bbox: &BoxPrompt) -> Result<MaskLogits>;

    fn predict(&self, store: &ParamStore, image: &Tensor, bbox: &BoxPrompt) -> Result<Tensor> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, store, image, bbox)?;
        Ok(tape.value(l.var).clone())
    }
}

#[derive(Clone, Debug)]
pub struct SegForward {
    pub taps: [StageTaps; 3],
    pub embedding: FeatureGrid,
    pub logits: MaskLogits,
}

/// Encoder with adapters, 1x1 embedding neck, box prompt encoder and mask
/// decoder.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub neck: Conv,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
}

impl Segmenter {
    pub fn new(store: &mut ParamStore, seed: u64, cfg: &ModelConfig) -> Result<Self> {
        let encoder = Encoder::new(store, seed, cfg)?;
        Self::with_encoder(store, seed, cfg, encoder)
    }

    fn with_encoder(store: &mut ParamStore, seed: u64, cfg: &ModelConfig, encoder: Encoder) -> Result<Self> {
        let d3 = cfg.stages[2].embed_dim;
        let neck = Conv::new(store, &mut rng::stream(seed, "init:neck"), "neck.proj", d3, cfg.decoder_dim(), 1, Init::FanIn)?;
        let prompt = PromptEncoder::new(store, &mut rng::stream(seed, "init:prompt"), cfg.decoder_dim(), cfg.image_size)?;
        let decoder = MaskDecoder::new(store, &mut rng::stream(seed, "init:decoder"), cfg)?;
        Ok(Self {
            config: cfg.clone(),
            encoder,
            neck,
            prompt,
            decoder,
        })
    }

    /// Fresh model with the backbone frozen.
    pub fn build(seed: u64, cfg: &ModelConfig) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let m = Self::new(&mut store, seed, cfg)?;
        Self::freeze(&mut store);
        Ok((m, store))
    }

    /// Fine-tuning split: backbone frozen; adapters, neck, prompt encoder
    /// and decoder trainable.
    pub fn freeze(store: &mut ParamStore) {
        store.set_frozen_by(is_backbone);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, bbox: &BoxPrompt) -> Result<SegForward> {
        let img = tape.constant(image.clone());
        let taps = self.encoder.forward(tape, store, img)?;
        let e = self.neck.forward(tape, store, taps[2].integration.var)?;
        let embedding = FeatureGrid::on(tape, e)?;
        let prompt = self.prompt.encode_box(tape, store, bbox)?;
        let logits = self
            .decoder
            .forward(tape, store, embedding, [taps[0].integration, taps[1].integration], prompt)?;
        Ok(SegForward { taps, embedding, logits })
    }

    /// Encoder backbone size (patch embedding plus every stage parameter,
    /// adapters included).
    pub fn encoder_numel(store: &ParamStore) -> usize {
        store.numel_where(|n| n.starts_with("patch_embed.") || n.starts_with("stage"))
    }
}

impl MaskPredictor for Segmenter {
    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn logits(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, bbox: &BoxPrompt) -> Result<MaskLogits> {
        Ok(self.forward(tape, store, image, bbox)?.logits)
    }
}

#[derive(Clone, Debug)]
pub struct StudentForward {
    pub taps: [StageTaps; 3],
    /// Integration taps mapped to the teacher widths.
    pub bridged: [FeatureGrid; 3],
    pub logits: MaskLogits,
}

/// Narrow encoder plus distillation necks feeding frozen copies of the
/// teacher's embedding neck, prompt encoder and decoder.
#[derive(Clone, Debug)]
pub struct StudentModel {
    pub config: ModelConfig,
    pub teacher_config: ModelConfig,
    pub levels: Vec<Level>,
    pub encoder: Encoder,
    pub necks: DistillNecks,
    pub head: Segmenter,
}

impl StudentModel {
    /// Registers the student encoder, the `distill.*` necks and the
    /// teacher-shaped `neck.*`, `prompt.*`, `decoder.*` parameters.
    pub fn new(store: &mut ParamStore, seed: u64, cfg: &ModelConfig, teacher_cfg: &ModelConfig, levels: &[Level]) -> Result<Self> {
        let encoder = Encoder::new(store, seed, cfg)?;
        let necks = DistillNecks::new(store, seed, cfg.dims(), teacher_cfg.dims(), levels, Init::FanIn)?;
        // head parameters only; the teacher-width encoder is never registered here
        let mut scratch = ParamStore::new();
        let teacher_encoder = Encoder::new(&mut scratch, seed, teacher_cfg)?;
        let head = Segmenter::with_encoder(store, seed, teacher_cfg, teacher_encoder)?;
        Ok(Self {
            config: cfg.clone(),
            teacher_config: teacher_cfg.clone(),
            levels: levels.to_vec(),
            encoder,
            necks,
            head,
        })
    }

    /// Fresh student whose head is copied from the teacher.
    pub fn build(
        seed: u64,
        cfg: &ModelConfig,
        teacher: &Segmenter,
        teacher_store: &ParamStore,
        levels: &[Level],
    ) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let m = Self::new(&mut store, seed, cfg, &teacher.config, levels)?;
        let head = |n: &str| n.starts_with("neck.") || n.starts_with("prompt.") || n.starts_with("decoder.");
        let copied = store.copy_matching_from(teacher_store, head)?;
        if copied != store.iter().filter(|(_, p)| head(&p.name)).count() {
            return Err(Error::Config("teacher checkpoint lacks part of the decoder head".into()));
        }
        Self::freeze(&mut store);
        Ok((m, store))
    }

    /// Distillation split: the copied head is frozen, as are integration
    /// necks when the integration level is disabled.
    pub fn freeze(store: &mut ParamStore) {
        store.set_frozen_by(|n| n.starts_with("neck.") || n.starts_with("prompt.") || n.starts_with("decoder."));
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, bbox: &BoxPrompt) -> Result<StudentForward> {
        let img = tape.constant(image.clone());
        let taps = self.encoder.forward(tape, store, img)?;
        let mut bridged = Vec::with_capacity(3);
        for (i, t) in taps.iter().enumerate() {
            bridged.push(self.necks.get(i + 1, Level::D1)?.forward(tape, store, t.integration)?);
        }
        let bridged: [FeatureGrid; 3] = bridged.try_into().expect("three stages");
        let e = self.head.neck.forward(tape, store, bridged[2].var)?;
        let embedding = FeatureGrid::on(tape, e)?;
        let prompt = self.head.prompt.encode_box(tape, store, bbox)?;
        let logits = self
            .head
            .decoder
            .forward(tape, store, embedding, [bridged[0], bridged[1]], prompt)?;
        Ok(StudentForward { taps, bridged, logits })
    }
}

impl MaskPredictor for StudentModel {
    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn logits(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, bbox: &BoxPrompt) -> Result<MaskLogits> {
        Ok(self.forward(tape, store, image, bbox)?.logits)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelMeta {
    Teacher {
        config: ModelConfig,
    },
    Student {
        config: ModelConfig,
        teacher_config: ModelConfig,
        levels: Vec<Level>,
    },
}

pub enum LoadedModel {
    Teacher(Segmenter),
    Student(StudentModel),
}

impl LoadedModel {
    pub fn meta(&self) -> ModelMeta {
        match self {
            LoadedModel::Teacher(m) => ModelMeta::Teacher { config: m.config.clone() },
            LoadedModel::Student(m) => ModelMeta::Student {
                config: m.config.clone(),
                teacher_config: m.teacher_config.clone(),
                levels: m.levels.clone(),
            },
        }
    }
}

impl MaskPredictor for LoadedModel {
    fn image_size(&self) -> usize {
        match self {
            LoadedModel::Teacher(m) => m.image_size(),
            LoadedModel::Student(m) => m.image_size(),
        }
    }

    fn logits(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, bbox: &BoxPrompt) -> Result<MaskLogits> {
        match self {
            LoadedModel::Teacher(m) => m.logits(tape, store, image, bbox),
            LoadedModel::Student(m) => m.logits(tape, store, image, bbox),
        }
    }
}

/// Writes `params.bin`, `manifest.txt` and `model.json` into `dir`.
pub fn save_model(dir: &Path, meta: &ModelMeta, store: &ParamStore) -> Result<()> {
    checkpoint::save(store, dir)?;
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Rebuilds the model described by `model.json` and loads its parameters.
pub fn load_model(dir: &Path) -> Result<(LoadedModel, ParamStore)> {
    let text = fs::read_to_string(dir.join("model.json"))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join("model.json").display())))?;
    let meta: ModelMeta = serde_json::from_str(&text)?;
    let mut store = ParamStore::new();
    let model = match &meta {
        ModelMeta::Teacher { config } => {
            let m = Segmenter::new(&mut store, 0, config)?;
            Segmenter::freeze(&mut store);
            LoadedModel::Teacher(m)
        }
        ModelMeta::Student {
            config,
            teacher_config,
            levels,
        } => {
            let m = StudentModel::new(&mut store, 0, config, teacher_config, levels)?;
            StudentModel::freeze(&mut store);
            LoadedModel::Student(m)
        }
    };
    let records = checkpoint::read_records(dir)?;
    checkpoint::load_into(&mut store, &records)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_output_shape_and_determinism() {
        let cfg = ModelConfig::toy_teacher();
        let (m, store) = Segmenter::build(1, &cfg).unwrap();
        let img = crate::params::init::trunc_normal(&mut rng::stream(0, "img"), &[1, 64, 64], 0.3);
        let b = BoxPrompt::new(10, 12, 40, 50, 64).unwrap();
        let a = m.predict(&store, &img, &b).unwrap();
        assert_eq!(a.shape(), &[1, 64, 64]);
        assert!(a.data().iter().all(|v| v.is_finite()));
        assert_eq!(a, m.predict(&store, &img, &b).unwrap());
    }

    #[test]
    fn student_head_is_a_frozen_teacher_copy() {
        let (t, ts) = Segmenter::build(1, &ModelConfig::toy_teacher()).unwrap();
        let (_, ss) = StudentModel::build(2, &ModelConfig::toy_student(), &t, &ts, &Level::ALL).unwrap();
        for (_, p) in ss.iter().filter(|(_, p)| p.name.starts_with("decoder.")) {
            assert!(p.frozen);
            assert_eq!(p.tensor, ts.by_name(&p.name).unwrap().tensor);
        }
        assert!(ss.iter().all(|(_, p)| !p.name.starts_with("stage") || !p.frozen));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions() {
        let cfg = ModelConfig::toy_teacher();
        let (m, mut store) = Segmenter::build(4, &cfg).unwrap();
        for p in store.iter_mut().filter(|p| p.name.contains("adapter.up")) {
            p.tensor.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f64 * 0.01);
        }
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &ModelMeta::Teacher { config: cfg }, &store).unwrap();
        let (loaded, ls) = load_model(dir.path()).unwrap();
        let img = Tensor::full(&[1, 64, 64], 0.4);
        let b = BoxPrompt::new(5, 5, 30, 30, 64).unwrap();
        assert_eq!(m.predict(&store, &img, &b).unwrap(), loaded.predict(&ls, &img, &b).unwrap());
    }
}
