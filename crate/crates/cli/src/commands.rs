use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use serde::Serialize;
use uniultra_core::adapter::{count_trainable, ParamCount};
use uniultra_core::data::{gen_synthetic, load_dir, select_split, split, split_counts, write_dataset, MaskPair, Split};
use uniultra_core::distill::{distill_run, Level};
use uniultra_core::edge::Direction;
use uniultra_core::encoder::is_backbone;
use uniultra_core::gradcheck;
use uniultra_core::metrics::{miou, BinaryMask, MetricReport};
use uniultra_core::model::{load_model, save_model, LoadedModel, MaskPredictor, ModelMeta, Segmenter, StudentModel};
use uniultra_core::train::{fit, mean_dice};
use uniultra_core::{ModelConfig, ParamStore};

use crate::config::RunConfig;
use crate::{AblateArgs, CheckFailed, Common, DataError, DistillArgs, EvalArgs, GenDataArgs, GradcheckArgs, ParamsArgs, Preset, Study, TrainArgs, UsageError};

fn base_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn required(flag: Option<&PathBuf>, from_config: &Option<PathBuf>, what: &str) -> Result<PathBuf, UsageError> {
    flag.or(from_config.as_ref())
        .cloned()
        .ok_or_else(|| UsageError(format!("no {what} given (flag or config)")))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| path.display().to_string())
}

/// One split of a dataset directory at the model's resolution.
pub fn load_part(cfg: &RunConfig, dir: &Path, size: usize, part: &str) -> anyhow::Result<Vec<MaskPair>> {
    let report = load_dir(dir, size, cfg.generate.box_jitter, cfg.seed)?;
    for d in &report.diagnostics {
        log::warn!("skipped {d}");
    }
    let pairs = select_split(dir, report.pairs, cfg.seed, part)?;
    if pairs.is_empty() {
        return Err(DataError(format!("{}: {part} split is empty", dir.display())).into());
    }
    Ok(pairs)
}

pub fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(s) = a.size {
        cfg.generate.size = s;
    }
    if a.n == 0 {
        return Err(UsageError("--n must be positive".into()).into());
    }
    let pairs = gen_synthetic(a.n, cfg.seed, &cfg.generate)?;
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let parts = match (a.val, a.test) {
        (None, None) if ids.len() >= 10 => split(&ids, cfg.seed)?,
        (None, None) => Split::default(),
        (v, t) => split_counts(&ids, cfg.seed, v.unwrap_or(0), t.unwrap_or(0))?,
    };
    write_dataset(&pairs, cfg.seed, &parts, &a.out)?;
    let n_train = ids.len() - parts.val.len() - parts.test.len();
    writeln!(
        out,
        "wrote {} samples to {} (train {n_train}, val {}, test {})",
        ids.len(),
        a.out.display(),
        parts.val.len(),
        parts.test.len()
    )?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_dice: f64,
    pub val_dice: Option<f64>,
    pub params: ParamCount,
    pub frozen_tensors_checked: usize,
}

/// Fine-tunes a fresh teacher and checks the backbone never moved.
pub fn train_model(cfg: &RunConfig, train: &[MaskPair], val: &[MaskPair]) -> anyhow::Result<(Segmenter, ParamStore, String, TrainReport)> {
    let (model, mut store) = Segmenter::build(cfg.seed, &cfg.teacher)?;
    let frozen_before: Vec<(String, Vec<f64>)> = store.snapshot().into_iter().filter(|(n, _)| is_backbone(n)).collect();
    let outcome = fit(&model, &mut store, train, val, &cfg.train)?;
    let mut checked = 0;
    for (name, before) in &frozen_before {
        let now = &store.by_name(name).expect("registered").tensor;
        if !now.data().iter().zip(before).all(|(a, b)| a.to_bits() == b.to_bits()) {
            return Err(CheckFailed(format!("freeze audit: backbone tensor {name} changed")).into());
        }
        checked += 1;
    }
    log::info!("freeze audit passed: {checked} backbone tensors bit-identical");
    let report = TrainReport {
        epochs: cfg.train.epochs,
        best_epoch: outcome.best_epoch,
        train_dice: mean_dice(&model, &store, train)?,
        val_dice: outcome.best_val_dice,
        params: count_trainable(&store),
        frozen_tensors_checked: checked,
    };
    Ok((model, store, outcome.to_csv(), report))
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<TrainReport> {
    let mut cfg = base_config(&a.common)?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = &a.edge_directions {
        cfg.teacher.edge_directions = v.clone();
    }
    if let Some(v) = a.adapter_dim {
        cfg.teacher.adapter_dim = v;
    }
    let cfg = cfg.finish()?;
    let data = required(a.data.as_ref(), &cfg.data, "data directory")?;
    let dir = required(a.out.as_ref(), &cfg.out, "output directory")?;
    let size = cfg.teacher.image_size;
    let train = load_part(&cfg, &data, size, "train")?;
    let val = match load_part(&cfg, &data, size, "val") {
        Ok(v) => v,
        Err(e) if e.is::<DataError>() => {
            log::warn!("{e}; keeping the last epoch");
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    let started = Instant::now();
    let (model, store, csv, report) = train_model(&cfg, &train, &val)?;
    fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    save_model(&dir, &ModelMeta::Teacher { config: model.config.clone() }, &store)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| dir.join("metrics.csv"));
    fs::write(&metrics, csv).with_context(|| metrics.display().to_string())?;
    write_json(&dir.join("report.json"), &report)?;
    log::info!("trained in {:.1?}", started.elapsed());
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillReport {
    pub epochs: usize,
    pub levels: Vec<Level>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    pub smoothed_decreasing: bool,
    pub train_dice: f64,
    pub val_dice: Option<f64>,
    pub teacher_encoder_params: usize,
    pub student_encoder_params: usize,
}

fn load_teacher(path: &Path) -> anyhow::Result<(Segmenter, ParamStore)> {
    match load_model(path)? {
        (LoadedModel::Teacher(m), s) => Ok((m, s)),
        (LoadedModel::Student(_), _) => Err(UsageError(format!("{} holds a student, not a teacher", path.display())).into()),
    }
}

/// Distils `teacher` on `train` and scores the student on both splits.
pub fn distill_model(
    cfg: &RunConfig,
    teacher: &Segmenter,
    teacher_store: &ParamStore,
    train: &[MaskPair],
    val: &[MaskPair],
) -> anyhow::Result<(StudentModel, ParamStore, String, DistillReport)> {
    let outcome = distill_run(teacher, teacher_store, &cfg.student, train, &cfg.distill)?;
    let trace = &outcome.trace;
    let smoothed = trace.smoothed_decreasing(5, 0.05);
    if !smoothed {
        log::warn!("distillation loss is not decreasing after smoothing");
    }
    let report = DistillReport {
        epochs: cfg.distill.epochs,
        levels: cfg.distill.enabled(),
        initial_loss: trace.initial(),
        final_loss: trace.last(),
        loss_ratio: trace.last() / trace.initial(),
        smoothed_decreasing: smoothed,
        train_dice: mean_dice(&outcome.student, &outcome.store, train)?,
        val_dice: if val.is_empty() {
            None
        } else {
            Some(mean_dice(&outcome.student, &outcome.store, val)?)
        },
        teacher_encoder_params: Segmenter::encoder_numel(teacher_store),
        student_encoder_params: Segmenter::encoder_numel(&outcome.store),
    };
    Ok((outcome.student, outcome.store, trace.to_csv(), report))
}

pub fn distill(a: &DistillArgs, out: &mut dyn Write) -> anyhow::Result<DistillReport> {
    let mut cfg = base_config(&a.common)?;
    if let Some(v) = a.epochs {
        cfg.distill.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.distill.lr = v;
    }
    if let Some(v) = &a.levels {
        cfg.distill.levels = v.clone();
    }
    if let Some(v) = a.finetune_epochs {
        cfg.distill.decoder_finetune_epochs = v;
    }
    let (teacher, teacher_store) = load_teacher(&a.teacher)?;
    cfg.teacher = teacher.config.clone();
    let cfg = cfg.finish()?;
    let data = required(a.data.as_ref(), &cfg.data, "data directory")?;
    let dir = required(a.out.as_ref(), &cfg.out, "output directory")?;
    let size = cfg.teacher.image_size;
    let train = load_part(&cfg, &data, size, "train")?;
    let val = load_part(&cfg, &data, size, "val").unwrap_or_default();
    let (student, store, csv, report) = distill_model(&cfg, &teacher, &teacher_store, &train, &val)?;
    fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    let meta = ModelMeta::Student {
        config: student.config.clone(),
        teacher_config: student.teacher_config.clone(),
        levels: student.levels.clone(),
    };
    save_model(&dir, &meta, &store)?;
    fs::write(dir.join("trace.csv"), csv)?;
    write_json(&dir.join("report.json"), &report)?;
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub split: String,
    pub images: usize,
    pub dice: f64,
    pub miou: f64,
    pub hd: f64,
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = base_config(&a.common)?;
    let (model, store) = load_model(&a.checkpoint)?;
    let data = required(a.data.as_ref(), &cfg.data, "data directory")?;
    let pairs = load_part(&cfg, &data, model.image_size(), &a.split)?;
    let mut preds = Vec::with_capacity(pairs.len());
    let mut reports = Vec::with_capacity(pairs.len());
    let mut csv = String::from("id,dice,iou,hd\n");
    for p in &pairs {
        let pred = BinaryMask::from_logits(&model.predict(&store, &p.image, &p.bbox)?)?;
        let r = MetricReport::compute(&pred, &p.mask)?;
        csv.push_str(&format!("{},{:.9e},{:.9e},{:.9e}\n", p.id, r.dice, r.iou, r.hd));
        preds.push(pred);
        reports.push(r);
    }
    let gts: Vec<BinaryMask> = pairs.iter().map(|p| p.mask.clone()).collect();
    let mean = MetricReport::mean(&reports).expect("non-empty split");
    let summary = EvalSummary {
        split: a.split.clone(),
        images: pairs.len(),
        dice: mean.dice,
        miou: miou(&preds, &gts)?,
        hd: mean.hd,
    };
    if let Some(path) = &a.csv {
        fs::write(path, csv).with_context(|| path.display().to_string())?;
    }
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if a.seeds == 0 {
        return Err(UsageError("--seeds must be positive".into()).into());
    }
    let started = Instant::now();
    let outcomes = gradcheck::run_suite(0..a.seeds)?;
    let mut failed = Vec::new();
    writeln!(out, "{:<16} {:>12} {:>6}", "op", "worst_rel", "status")?;
    for op in gradcheck::op_names() {
        let mine: Vec<_> = outcomes.iter().filter(|o| o.op == op).collect();
        let worst = mine.iter().map(|o| o.rel_error).fold(0.0, f64::max);
        let ok = mine.iter().all(|o| o.passed());
        if !ok {
            failed.push(op);
        }
        writeln!(out, "{op:<16} {worst:>12.3e} {:>6}", if ok { "ok" } else { "FAIL" })?;
    }
    writeln!(out, "{} checks in {:.2?}", outcomes.len(), started.elapsed())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamsTable {
    pub peft: ParamCount,
    pub distill: ParamCount,
    pub teacher_encoder: usize,
    pub student_encoder: usize,
    pub encoder_ratio: f64,
}

pub fn param_table(teacher_cfg: &ModelConfig, student_cfg: &ModelConfig) -> anyhow::Result<ParamsTable> {
    let (_, teacher) = Segmenter::build(0, teacher_cfg)?;
    let mut student = ParamStore::new();
    StudentModel::new(&mut student, 0, student_cfg, teacher_cfg, &Level::ALL)?;
    StudentModel::freeze(&mut student);
    let teacher_encoder = Segmenter::encoder_numel(&teacher);
    let student_encoder = Segmenter::encoder_numel(&student);
    Ok(ParamsTable {
        peft: count_trainable(&teacher),
        distill: count_trainable(&student),
        teacher_encoder,
        student_encoder,
        encoder_ratio: student_encoder as f64 / teacher_encoder as f64,
    })
}

pub fn params(a: &ParamsArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg = base_config(&a.common)?;
    match a.preset {
        Some(Preset::Toy) => {
            cfg.teacher = ModelConfig::toy_teacher();
            cfg.student = ModelConfig::toy_student();
        }
        Some(Preset::Paper) => {
            cfg.teacher = ModelConfig::paper_scale();
            cfg.student = ModelConfig::paper_student();
        }
        None => {}
    }
    let cfg = cfg.finish()?;
    let t = param_table(&cfg.teacher, &cfg.student)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string(&t)?)?;
        return Ok(());
    }
    writeln!(out, "{:<10} {:>12} {:>12} {:>9}", "phase", "trainable", "total", "ratio")?;
    for (name, c) in [("peft", t.peft), ("distill", t.distill)] {
        writeln!(out, "{name:<10} {:>12} {:>12} {:>8.3}%", c.trainable, c.total, 100.0 * c.ratio)?;
    }
    writeln!(
        out,
        "encoder    teacher {} student {} ({:.1}%)",
        t.teacher_encoder,
        t.student_encoder,
        100.0 * t.encoder_ratio
    )?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub trainable: usize,
    pub train_dice: f64,
    pub val_dice: f64,
    pub dskd_ratio: Option<f64>,
}

pub fn ablation_csv(study: Study, rows: &[AblationRow]) -> String {
    let name = match study {
        Study::EdgeDirections => "edge-directions",
        Study::DistillLevels => "distill-levels",
        Study::AdapterDim => "adapter-dim",
    };
    let mut s = String::from("study,arm,trainable,train_dice,val_dice,dskd_ratio\n");
    for r in rows {
        let ratio = r.dskd_ratio.map(|v| format!("{v:.9e}")).unwrap_or_default();
        s.push_str(&format!("{name},{},{},{:.9e},{:.9e},{ratio}\n", r.arm, r.trainable, r.train_dice, r.val_dice));
    }
    s
}

pub fn ablate(a: &AblateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut base = base_config(&a.common)?;
    let data = required(a.data.as_ref(), &base.data, "data directory")?;
    let dir = required(a.out.as_ref(), &base.out, "output directory")?;
    let teacher = match (a.study, &a.teacher) {
        (Study::DistillLevels, Some(p)) => {
            let t = load_teacher(p)?;
            base.teacher = t.0.config.clone();
            Some(t)
        }
        (Study::DistillLevels, None) => return Err(UsageError("distill-levels needs --teacher".into()).into()),
        _ => None,
    };
    if let Some(e) = a.epochs {
        base.train.epochs = e;
        base.distill.epochs = e;
    }
    let arms = a.arms.clone().unwrap_or_else(|| match a.study {
        Study::EdgeDirections => vec![0, 2, 4],
        Study::DistillLevels => vec![1, 2, 3],
        Study::AdapterDim => vec![4, 8, 16],
    });
    let size = base.teacher.image_size;
    let train = load_part(&base, &data, size, "train")?;
    let val = load_part(&base, &data, size, "val")?;
    let mut rows = Vec::new();
    for &arm in &arms {
        let mut cfg = base.clone();
        let row = match a.study {
            Study::EdgeDirections => {
                if arm > 4 {
                    return Err(UsageError(format!("edge arm {arm}: at most 4 directions")).into());
                }
                cfg.teacher.edge_directions = Direction::ALL[..arm].to_vec();
                let cfg = cfg.finish()?;
                let (m, s, _, rep) = train_model(&cfg, &train, &val)?;
                AblationRow {
                    arm: arm.to_string(),
                    trainable: rep.params.trainable,
                    train_dice: rep.train_dice,
                    val_dice: mean_dice(&m, &s, &val)?,
                    dskd_ratio: None,
                }
            }
            Study::AdapterDim => {
                cfg.teacher.adapter_dim = arm;
                let cfg = cfg.finish()?;
                let (m, s, _, rep) = train_model(&cfg, &train, &val)?;
                AblationRow {
                    arm: arm.to_string(),
                    trainable: rep.params.trainable,
                    train_dice: rep.train_dice,
                    val_dice: mean_dice(&m, &s, &val)?,
                    dskd_ratio: None,
                }
            }
            Study::DistillLevels => {
                if !(1..=3).contains(&arm) {
                    return Err(UsageError(format!("level arm {arm}: use 1, 2 or 3")).into());
                }
                cfg.distill.levels = Level::ALL[..arm].to_vec();
                let cfg = cfg.finish()?;
                let (t, ts) = teacher.as_ref().expect("loaded above");
                let (_, s, _, rep) = distill_model(&cfg, t, ts, &train, &val)?;
                AblationRow {
                    arm: Level::ALL[..arm].iter().map(|l| l.key()).collect::<Vec<_>>().join("+"),
                    trainable: s.trainable_numel(),
                    train_dice: rep.train_dice,
                    val_dice: rep.val_dice.expect("val split loaded"),
                    dskd_ratio: Some(rep.loss_ratio),
                }
            }
        };
        log::info!("arm {}: train {:.4} val {:.4}", row.arm, row.train_dice, row.val_dice);
        rows.push(row);
    }
    fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    let csv = ablation_csv(a.study, &rows);
    fs::write(dir.join("ablation.csv"), &csv)?;
    write!(out, "{csv}")?;
    Ok(())
}
