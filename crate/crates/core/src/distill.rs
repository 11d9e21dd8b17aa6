//! Three-level, per-stage feature distillation from a frozen teacher encoder
//! into a narrower student through trainable necks.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::MaskPair;
use crate::encoder::StageTaps;
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::model::{Segmenter, StudentModel};
use crate::nn::{Conv, Init};
use crate::optim::{Adam, ExponentialDecay};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Distillation tap level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// Integration (block output plus adapter output).
    D1,
    /// Block output.
    D2,
    /// Adapter output.
    D3,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::D1, Level::D2, Level::D3];

    pub fn tap(self, t: &StageTaps) -> FeatureGrid {
        match self {
            Level::D1 => t.integration,
            Level::D2 => t.block_out,
            Level::D3 => t.adapter_out,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Level::D1 => "d1",
            Level::D2 => "d2",
            Level::D3 => "d3",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// 3x3 conv (student width) then 1x1 conv to the teacher width, no
/// activation in between.
#[derive(Clone, Debug)]
pub struct Neck {
    pub conv3: Conv,
    pub conv1: Conv,
}

impl Neck {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, student_dim: usize, teacher_dim: usize, how: Init) -> Result<Self> {
        let rng = &mut rng::stream(seed, &format!("init:{name}"));
        Ok(Self {
            conv3: Conv::new(store, rng, &format!("{name}.conv3"), student_dim, student_dim, 3, how)?,
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), student_dim, teacher_dim, 1, how)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: FeatureGrid) -> Result<FeatureGrid> {
        f.expect_channels("neck", self.conv3.in_ch)?;
        let h = self.conv3.forward(tape, store, f.var)?;
        let o = self.conv1.forward(tape, store, h)?;
        FeatureGrid::on(tape, o)
    }
}

/// One neck per `(stage, level)`. The integration necks always exist: they
/// also bridge the student encoder to the teacher's decoder.
#[derive(Clone, Debug)]
pub struct DistillNecks {
    necks: Vec<((usize, Level), Neck)>,
}

impl DistillNecks {
    pub fn name(stage: usize, level: Level) -> String {
        format!("distill.stage{stage}.{level}")
    }

    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        student_dims: [usize; 3],
        teacher_dims: [usize; 3],
        levels: &[Level],
        how: Init,
    ) -> Result<Self> {
        let mut necks = Vec::new();
        for l in 1..=3 {
            for level in Level::ALL {
                if level == Level::D1 || levels.contains(&level) {
                    let n = Neck::new(store, seed, &Self::name(l, level), student_dims[l - 1], teacher_dims[l - 1], how)?;
                    necks.push(((l, level), n));
                }
            }
        }
        Ok(Self { necks })
    }

    pub fn get(&self, stage: usize, level: Level) -> Result<&Neck> {
        self.necks
            .iter()
            .find(|(k, _)| *k == (stage, level))
            .map(|(_, n)| n)
            .ok_or_else(|| Error::Config(format!("no neck for stage {stage} level {level}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub levels: Vec<Level>,
    pub stage_weights: [f64; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    #[serde(skip)]
    pub seed: u64,
    /// Seg-loss epochs on the copied decoder after distillation; 0 keeps it frozen.
    pub decoder_finetune_epochs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            levels: Level::ALL.to_vec(),
            stage_weights: [1.0; 3],
            epochs: 100,
            batch_size: 4,
            lr: 1e-3,
            lr_decay: 0.98,
            seed: 7,
            decoder_finetune_epochs: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("at least one distillation level must be enabled".into()));
        }
        let mut l = self.levels.clone();
        l.sort();
        l.dedup();
        if l.len() != self.levels.len() {
            return Err(Error::Config("distillation levels contain duplicates".into()));
        }
        if self.batch_size == 0 || self.lr <= 0.0 {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Enabled levels in canonical order.
    pub fn enabled(&self) -> Vec<Level> {
        Level::ALL.into_iter().filter(|l| self.levels.contains(l)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DskdTerm {
    pub stage: usize,
    pub level: Level,
    pub loss: Var,
}

/// Mean squared error between each enabled teacher tap and the necked
/// student tap, one term per `(stage, level)`.
pub fn dskd_terms(
    tape: &mut Tape,
    store: &ParamStore,
    teacher: &[StageTaps; 3],
    student: &[StageTaps; 3],
    necks: &DistillNecks,
    levels: &[Level],
) -> Result<Vec<DskdTerm>> {
    let mut out = Vec::new();
    for l in 1..=3 {
        for &level in levels {
            let t = level.tap(&teacher[l - 1]);
            let s = level.tap(&student[l - 1]);
            if tape.requires_grad(t.var) {
                return Err(Error::Contract(format!("teacher tap stage {l} level {level} is on the gradient path")));
            }
            if (t.height, t.width) != (s.height, s.width) {
                return Err(Error::dim(
                    "dskd",
                    format!("stage {l} level {level}: teacher grid {}x{} vs student {}x{}", t.height, t.width, s.height, s.width),
                ));
            }
            let necked = necks.get(l, level)?.forward(tape, store, s).map_err(|e| {
                Error::dim("dskd", format!("stage {l} level {level}: {e}"))
            })?;
            if necked.channels != t.channels {
                return Err(Error::dim(
                    "dskd",
                    format!("stage {l} level {level}: teacher {} channels vs necked student {}", t.channels, necked.channels),
                ));
            }
            out.push(DskdTerm {
                stage: l,
                level,
                loss: tape.mse(t.var, necked.var)?,
            });
        }
    }
    Ok(out)
}

/// Stage-weighted sum of the terms.
pub fn dskd_loss(tape: &mut Tape, terms: &[DskdTerm], stage_weights: [f64; 3]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for t in terms {
        let w = tape.scale(t.loss, stage_weights[t.stage - 1]);
        acc = Some(match acc {
            Some(a) => tape.add(a, w)?,
            None => w,
        });
    }
    acc.ok_or_else(|| Error::Config("no distillation terms".into()))
}

/// Teacher tap values for one image, detached from any tape.
#[derive(Clone, Debug)]
pub struct TeacherTaps {
    /// `[stage][level]`
    values: [[Tensor; 3]; 3],
}

impl TeacherTaps {
    pub fn capture(teacher: &Segmenter, store: &ParamStore, image: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let img = tape.constant(image.clone());
        let taps = teacher.encoder.forward(&mut tape, store, img)?;
        let values = taps.map(|t| Level::ALL.map(|lv| tape.value(lv.tap(&t).var).clone()));
        Ok(Self { values })
    }

    /// Re-enters the cached values as constants (block input is unused).
    pub fn on(&self, tape: &mut Tape) -> Result<[StageTaps; 3]> {
        let mut out = Vec::with_capacity(3);
        for v in &self.values {
            let g = |tape: &mut Tape, t: &Tensor| {
                let var = tape.constant(t.clone());
                FeatureGrid::on(tape, var)
            };
            let integration = g(tape, &v[0])?;
            let block_out = g(tape, &v[1])?;
            let adapter_out = g(tape, &v[2])?;
            out.push(StageTaps {
                stage_input: block_out,
                block_out,
                adapter_out,
                integration,
            });
        }
        Ok(out.try_into().expect("three stages"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    /// Per `(stage, level)` mean loss over the epoch, stage-major.
    pub terms: Vec<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct LossTrace {
    pub columns: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn initial(&self) -> f64 {
        self.rows.first().map_or(f64::NAN, |r| r.total)
    }

    pub fn last(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.total)
    }

    /// Moving average over `window` epochs never rises by more than `slack`
    /// (relative) from one window to the next.
    pub fn smoothed_decreasing(&self, window: usize, slack: f64) -> bool {
        let t: Vec<f64> = self.rows.iter().map(|r| r.total).collect();
        if t.len() < window || window == 0 {
            return true;
        }
        let avg: Vec<f64> = t.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
        avg.windows(2).all(|w| w[1] <= w[0] * (1.0 + slack))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str("epoch,");
        for c in &self.columns {
            s.push_str(c);
            s.push(',');
        }
        s.push_str("total\n");
        for r in &self.rows {
            let mut line = format!("{}", r.epoch);
            for v in &r.terms {
                line.push_str(&format!(",{v:.9e}"));
            }
            let _ = writeln!(s, "{line},{:.9e}", r.total);
        }
        s
    }
}

pub struct DistillOutcome {
    pub student: StudentModel,
    pub store: ParamStore,
    pub trace: LossTrace,
}

fn mean_terms(
    student: &StudentModel,
    store: &ParamStore,
    teacher: &[TeacherTaps],
    data: &[MaskPair],
    cfg: &DistillConfig,
) -> Result<(Vec<f64>, f64)> {
    let levels = cfg.enabled();
    let mut sums = vec![0.0; 3 * levels.len()];
    let mut total = 0.0;
    for (p, tt) in data.iter().zip(teacher) {
        let mut tape = Tape::new();
        let img = tape.constant(p.image.clone());
        let s = student.encoder.forward(&mut tape, store, img)?;
        let t = tt.on(&mut tape)?;
        let terms = dskd_terms(&mut tape, store, &t, &s, &student.necks, &levels)?;
        let loss = dskd_loss(&mut tape, &terms, cfg.stage_weights)?;
        for (acc, term) in sums.iter_mut().zip(&terms) {
            *acc += tape.value(term.loss).item();
        }
        total += tape.value(loss).item();
    }
    let n = data.len() as f64;
    Ok((sums.iter().map(|v| v / n).collect(), total / n))
}

/// Trains a fresh student encoder and its necks against the frozen teacher
/// on `data`, then attaches frozen copies of the teacher's neck, prompt
/// encoder and decoder.
///
/// Row 0 of the trace is the loss before any update; row `k` is the loss
/// after epoch `k`.
pub fn distill_run(
    teacher: &Segmenter,
    teacher_store: &ParamStore,
    student_cfg: &crate::config::ModelConfig,
    data: &[MaskPair],
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    student_cfg.validate()?;
    let tc = &teacher.config;
    if student_cfg.image_size != tc.image_size || student_cfg.patch_size != tc.patch_size {
        return Err(Error::Config("student and teacher must share image and patch size".into()));
    }
    for l in 0..3 {
        if student_cfg.grid_side(l) != tc.grid_side(l) {
            return Err(Error::Config(format!(
                "stage {} grids differ: teacher {} vs student {}",
                l + 1,
                tc.grid_side(l),
                student_cfg.grid_side(l)
            )));
        }
    }
    if data.is_empty() {
        return Err(Error::Validation("distillation needs at least one image".into()));
    }
    let levels = cfg.enabled();
    let (student, mut store) = StudentModel::build(cfg.seed, student_cfg, teacher, teacher_store, &levels)?;
    let teacher_taps = data
        .iter()
        .map(|p| TeacherTaps::capture(teacher, teacher_store, &p.image))
        .collect::<Result<Vec<_>>>()?;

    let columns = (1..=3)
        .flat_map(|l| levels.iter().map(move |lv| format!("s{l}_{lv}")))
        .collect();
    let mut trace = LossTrace { columns, rows: Vec::new() };
    let (terms, total) = mean_terms(&student, &store, &teacher_taps, data, cfg)?;
    trace.rows.push(TraceRow { epoch: 0, terms, total });

    let sched = ExponentialDecay {
        base: cfg.lr,
        factor: cfg.lr_decay,
    };
    let mut adam = Adam::new(&store);
    for epoch in 0..cfg.epochs {
        let order = crate::train::epoch_order(data.len(), cfg.seed, "distill-order", epoch);
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let mut tape = Tape::new();
                let img = tape.constant(data[i].image.clone());
                let s = student.encoder.forward(&mut tape, &store, img)?;
                let t = teacher_taps[i].on(&mut tape)?;
                let terms = dskd_terms(&mut tape, &store, &t, &s, &student.necks, &levels)?;
                let loss = dskd_loss(&mut tape, &terms, cfg.stage_weights)?;
                let loss = tape.scale(loss, 1.0 / batch.len() as f64);
                tape.backward_into(loss, &mut store)?;
            }
            store.fill_missing_grads();
            adam.step(&mut store, sched.lr_at(epoch))?;
        }
        let (terms, total) = mean_terms(&student, &store, &teacher_taps, data, cfg)?;
        log::debug!("distill epoch {} loss {total:.6}", epoch + 1);
        trace.rows.push(TraceRow {
            epoch: epoch + 1,
            terms,
            total,
        });
    }

    if cfg.decoder_finetune_epochs > 0 {
        store.set_frozen_by(|n| !(n.starts_with("decoder.") || n.starts_with("prompt.")));
        let tcfg = crate::train::TrainConfig {
            epochs: cfg.decoder_finetune_epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            lr_decay: cfg.lr_decay,
            seed: cfg.seed,
            ..crate::train::TrainConfig::default()
        };
        crate::train::fit(&student, &mut store, data, &[], &tcfg)?;
    }
    StudentModel::freeze(&mut store);
    Ok(DistillOutcome { student, store, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(tape: &mut Tape, t: Tensor) -> FeatureGrid {
        let v = tape.constant(t);
        FeatureGrid::on(tape, v).unwrap()
    }

    #[test]
    fn single_term_of_twos_against_zero_is_four() {
        let mut store = ParamStore::new();
        let necks = DistillNecks::new(&mut store, 0, [1, 1, 1], [1, 1, 1], &[Level::D1], Init::Identity).unwrap();
        let mut tape = Tape::new();
        let zero = grid(&mut tape, Tensor::zeros(&[1, 2, 2]));
        let twos = grid(&mut tape, Tensor::full(&[1, 2, 2], 2.0));
        let taps = |g: FeatureGrid| StageTaps {
            stage_input: g,
            block_out: g,
            adapter_out: g,
            integration: g,
        };
        let t = [taps(zero); 3];
        let s = [taps(twos), taps(zero), taps(zero)];
        let terms = dskd_terms(&mut tape, &store, &t, &s, &necks, &[Level::D1]).unwrap();
        assert_eq!(tape.value(terms[0].loss).item(), 4.0);
        let l = dskd_loss(&mut tape, &terms, [1.0; 3]).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
    }

    #[test]
    fn misaligned_taps_name_stage_and_level() {
        let mut store = ParamStore::new();
        let necks = DistillNecks::new(&mut store, 0, [1, 1, 1], [1, 1, 1], &Level::ALL, Init::Identity).unwrap();
        let mut tape = Tape::new();
        let a = grid(&mut tape, Tensor::zeros(&[1, 4, 4]));
        let b = grid(&mut tape, Tensor::zeros(&[1, 2, 2]));
        let taps = |g: FeatureGrid| StageTaps {
            stage_input: g,
            block_out: g,
            adapter_out: g,
            integration: g,
        };
        let t = [taps(a), taps(a), taps(a)];
        let s = [taps(a), taps(b), taps(a)];
        let err = dskd_terms(&mut tape, &store, &t, &s, &necks, &[Level::D2]).unwrap_err().to_string();
        assert!(err.contains("stage 2") && err.contains("d2"), "{err}");
    }

    #[test]
    fn config_requires_a_level() {
        let c = DistillConfig {
            levels: vec![],
            ..DistillConfig::default()
        };
        assert!(c.validate().is_err());
        let c: DistillConfig = serde_json::from_str(r#"{"levels": ["d1"]}"#).unwrap();
        assert_eq!(c.enabled(), vec![Level::D1]);
    }

    #[test]
    fn trace_smoothing() {
        let rows = |v: &[f64]| LossTrace {
            columns: vec![],
            rows: v.iter().enumerate().map(|(i, &t)| TraceRow { epoch: i, terms: vec![], total: t }).collect(),
        };
        assert!(rows(&[5.0, 4.0, 4.2, 3.0, 2.9, 2.95, 2.0]).smoothed_decreasing(3, 0.0));
        assert!(!rows(&[1.0, 1.0, 1.0, 5.0, 5.0, 5.0]).smoothed_decreasing(3, 0.05));
        assert_eq!(rows(&[1.0, 0.5]).to_csv(), "epoch,total\n0,1.000000000e0\n1,5.000000000e-1\n");
    }
}
