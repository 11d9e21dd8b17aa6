//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use uniultra_core::adapter::ChAdapter;
use uniultra_core::data::{gen_synthetic, GenConfig};
use uniultra_core::distill::{dskd_loss, dskd_terms, DistillNecks, Level};
use uniultra_core::edge::{sobel_response, Direction, SobelBank};
use uniultra_core::encoder::{is_backbone, is_block, Encoder};
use uniultra_core::gradcheck;
use uniultra_core::metrics::{dice, hausdorff, iou, BinaryMask};
use uniultra_core::model::Segmenter;
use uniultra_core::nn::Init;
use uniultra_core::params::init;
use uniultra_core::train::{fit, TrainConfig};
use uniultra_core::{rng, FeatureGrid, ModelConfig, ParamStore, Tape, Tensor};

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 10;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const FREEZE_BUDGET: Duration = Duration::from_secs(10);
const DECOMPOSITION_TOL: f64 = 1e-12;
const HD_TOL: f64 = 1e-9;
const TRAIN_DICE_MIN: f64 = 0.90;
const VAL_DICE_MIN: f64 = 0.80;
const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const STUDENT_DICE_GAP: f64 = 0.05;
const ENCODER_RATIO_MAX: f64 = 0.30;
const DSKD_RATIO_MAX: f64 = 0.10;
const EDGE_SLACK: f64 = 0.02;
const LEVEL_SLACK: f64 = 0.01;

type Check = anyhow::Result<String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(anyhow::anyhow!(detail))
    }
}

fn gradient_suite() -> Check {
    let started = Instant::now();
    let outcomes = gradcheck::run_suite(0..GRAD_SEEDS)?;
    let elapsed = started.elapsed();
    let worst = outcomes.iter().map(|o| o.rel_error).fold(0.0, f64::max);
    let bad: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed() || !(o.rel_error < GRAD_REL_TOL))
        .map(|o| format!("{}@{}", o.op, o.seed))
        .collect();
    let ops = gradcheck::op_names().len();
    ensure(
        bad.is_empty() && outcomes.len() == ops * GRAD_SEEDS as usize && elapsed < GRAD_BUDGET,
        format!("{ops} ops x {GRAD_SEEDS} seeds, worst rel {worst:.2e}, {elapsed:.1?}, failing {bad:?}"),
    )
}

fn freeze_contract() -> Check {
    let started = Instant::now();
    let data = gen_synthetic(4, 1, &GenConfig::default())?;
    let (m, mut store) = Segmenter::build(1, &ModelConfig::toy_teacher())?;
    let before = store.snapshot();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 4,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    fit(&m, &mut store, &data, &[], &cfg)?;
    let elapsed = started.elapsed();
    let mut blocks = 0;
    let mut moved_blocks = Vec::new();
    let mut stuck = Vec::new();
    for ((name, a), (_, b)) in before.iter().zip(store.snapshot()) {
        let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
        if is_block(name) {
            blocks += 1;
            if !same {
                moved_blocks.push(name.clone());
            }
        } else if !is_backbone(name) && same {
            stuck.push(name.clone());
        }
    }
    ensure(
        moved_blocks.is_empty() && stuck.is_empty() && elapsed < FREEZE_BUDGET,
        format!("{blocks} block tensors bit-identical, unchanged trainables {stuck:?}, moved {moved_blocks:?}, {elapsed:.1?}"),
    )
}

fn fusion_exactness() -> Check {
    let mut store = ParamStore::new();
    let a = ChAdapter::new(&mut store, 4, 1, 32, 16, 16, SobelBank::canonical())?;
    let mut r = rng::stream(4, "fusion");
    for p in store.iter_mut() {
        let shape = p.tensor.shape().to_vec();
        p.tensor = init::trunc_normal(&mut r, &shape, 0.2);
    }
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = init::trunc_normal(&mut r, &[32, 8, 8], 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let f = FeatureGrid::on(&tape, v)?;
        let out = a.forward(&mut tape, &store, f)?;
        let p = a.context_prompt(&mut tape, &store, f)?;
        let e = a.edge_path(&mut tape, &store, f)?;
        let (h, p, e) = (tape.value(out.h.var), tape.value(p.var), tape.value(e.var));
        if p != tape.value(out.p.var) || e != tape.value(out.f_edge.var) {
            return Err(anyhow::anyhow!("recomputed paths differ from the fused ones"));
        }
        for ((h, p), e) in h.data().iter().zip(p.data()).zip(e.data()) {
            worst = worst.max((h - (p + e)).abs());
        }
    }
    ensure(worst == 0.0, format!("20 inputs, max |h - (p + f_edge)| = {worst:e}"))
}

fn distill_fixed_point() -> Check {
    let cfg = ModelConfig::toy_teacher();
    let (t, mut ts) = Segmenter::build(2, &cfg)?;
    let mut r = rng::stream(2, "teacher-adapters");
    for p in ts.iter_mut().filter(|p| p.name.contains(".adapter.") && p.name.contains("up")) {
        let shape = p.tensor.shape().to_vec();
        p.tensor = init::trunc_normal(&mut r, &shape, 0.05);
    }
    ts.freeze_all();
    let img = || init::trunc_normal(&mut rng::stream(3, "img"), &[1, 64, 64], 0.5);

    let mut ss = ParamStore::new();
    let enc = Encoder::new(&mut ss, 99, &cfg)?;
    let ident = DistillNecks::new(&mut ss, 99, cfg.dims(), cfg.dims(), &Level::ALL, Init::Identity)?;
    ss.copy_matching_from(&ts, |n| is_backbone(n) || n.contains(".adapter."))?;
    let mut tape = Tape::new();
    let v = tape.constant(img());
    let tt = t.encoder.forward(&mut tape, &ts, v)?;
    let v = tape.constant(img());
    let st = enc.forward(&mut tape, &ss, v)?;
    let terms = dskd_terms(&mut tape, &ss, &tt, &st, &ident, &Level::ALL)?;
    let loss = dskd_loss(&mut tape, &terms, [1.0; 3])?;
    let zero = tape.value(loss).item();

    let scfg = ModelConfig::toy_student();
    let mut s2 = ParamStore::new();
    let senc = Encoder::new(&mut s2, 5, &scfg)?;
    let necks = DistillNecks::new(&mut s2, 5, scfg.dims(), cfg.dims(), &Level::ALL, Init::FanIn)?;
    let mut tape = Tape::new();
    let v = tape.constant(img());
    let tt = t.encoder.forward(&mut tape, &ts, v)?;
    let v = tape.constant(img());
    let st = senc.forward(&mut tape, &s2, v)?;
    let terms = dskd_terms(&mut tape, &s2, &tt, &st, &necks, &Level::ALL)?;
    let loss = dskd_loss(&mut tape, &terms, [1.0; 3])?;
    let total = tape.value(loss).item();
    let mut independent = 0.0;
    for l in 0..3 {
        for level in Level::ALL {
            let mut tape = Tape::new();
            let v = tape.constant(img());
            let a = level.tap(&t.encoder.forward(&mut tape, &ts, v)?[l]);
            let v = tape.constant(img());
            let b = level.tap(&senc.forward(&mut tape, &s2, v)?[l]);
            let nb = necks.get(l + 1, level)?.forward(&mut tape, &s2, b)?;
            let (x, y) = (tape.value(a.var).data(), tape.value(nb.var).data());
            independent += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
        }
    }
    let gap = (total - independent).abs();
    ensure(
        zero == 0.0 && total > 0.0 && gap <= DECOMPOSITION_TOL,
        format!("copied student loss {zero:e}; 9-term total {total:.6e} vs independent sum, gap {gap:.1e}"),
    )
}

fn brute_hd(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (pa, pb) = (a.points(), b.points());
    if pa.is_empty() && pb.is_empty() {
        return 0.0;
    }
    if pa.is_empty() || pb.is_empty() {
        return ((a.height().pow(2) + a.width().pow(2)) as f64).sqrt();
    }
    let d = |p: (usize, usize), q: (usize, usize)| ((p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2)).sqrt();
    let dir = |s: &[(usize, usize)], t: &[(usize, usize)]| {
        s.iter()
            .map(|&p| t.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    dir(&pa, &pb).max(dir(&pb, &pa))
}

fn metric_oracles() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut hd_gap = 0.0f64;
    for i in 0..100 {
        let density = if i % 25 == 0 { 0.0 } else { r.random_range(0.02..0.6) };
        let mut make = || {
            let bits: Vec<bool> = (0..256).map(|_| r.random_bool(density)).collect();
            BinaryMask::new(16, 16, bits)
        };
        let (a, b) = (make()?, make()?);
        let inter = a.values().iter().zip(b.values()).filter(|(x, y)| **x && **y).count() as f64;
        let union = a.values().iter().zip(b.values()).filter(|(x, y)| **x || **y).count() as f64;
        let total = (a.count() + b.count()) as f64;
        let want_dice = if total == 0.0 { 1.0 } else { 2.0 * inter / total };
        let want_iou = if union == 0.0 { 1.0 } else { inter / union };
        if dice(&a, &b)? != want_dice || iou(&a, &b)? != want_iou {
            return Err(anyhow::anyhow!("pair {i}: dice/iou differ from counting"));
        }
        hd_gap = hd_gap.max((hausdorff(&a, &b)? - brute_hd(&a, &b)).abs());
    }
    let mut p = BinaryMask::empty(8, 8);
    let mut q = BinaryMask::empty(8, 8);
    p.set(0, 0, true);
    q.set(3, 4, true);
    let unit = hausdorff(&p, &q)?;
    ensure(
        hd_gap <= HD_TOL && unit == 5.0,
        format!("100 pairs exact for dice/iou, max HD gap {hd_gap:.1e}, HD((0,0),(3,4)) = {unit}"),
    )
}

fn sobel_contract() -> Check {
    let bank = SobelBank::canonical();
    let sums: Vec<f64> = bank.kernels().iter().map(|(_, k)| k.iter().flatten().sum()).collect();
    let interior = |t: &Tensor, h: usize, w: usize| -> Vec<f64> {
        (1..h - 1).flat_map(|y| (1..w - 1).map(move |x| (y, x))).map(|(y, x)| t.data()[y * w + x]).collect()
    };
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[1, 10, 12], 3.7));
    let cg = FeatureGrid::on(&tape, c)?;
    let mut constant_max = 0.0f64;
    for (d, _) in bank.kernels() {
        let r = sobel_response(&mut tape, cg, &SobelBank::with_directions(&[*d]))?;
        constant_max = interior(tape.value(r.var), 10, 12).iter().fold(constant_max, |m, v| m.max(v.abs()));
    }
    let ramp = tape.constant(Tensor::new(&[1, 10, 12], (0..120).map(|i| (i % 12) as f64).collect())?);
    let rg = FeatureGrid::on(&tape, ramp)?;
    let r = sobel_response(&mut tape, rg, &SobelBank::with_directions(&[Direction::Horizontal]))?;
    let ramp_ok = interior(tape.value(r.var), 10, 12).iter().all(|&v| v == 8.0);
    ensure(
        sums.iter().all(|&s| s == 0.0) && constant_max == 0.0 && ramp_ok,
        format!("kernel sums {sums:?}, constant-field max |response| {constant_max}, horizontal ramp interior == 8: {ramp_ok}"),
    )
}

fn cli(args: &[&str]) -> anyhow::Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_uniultra")).args(args).output()?;
    if !out.status.success() {
        return Err(anyhow::anyhow!(
            "uniultra {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8(out.stdout)?)
}

fn cli_json(args: &[&str]) -> anyhow::Result<Value> {
    let text = cli(args)?;
    let last = text.lines().last().unwrap_or_default();
    Ok(serde_json::from_str(last)?)
}

fn num(v: &Value, key: &str) -> anyhow::Result<f64> {
    v[key].as_f64().ok_or_else(|| anyhow::anyhow!("missing {key} in {v}"))
}

struct Pipeline {
    teacher_train: Value,
    teacher_time: Duration,
    teacher_val: f64,
    no_edge_train: Value,
    distill3: Value,
    student3_val: f64,
    student1_val: f64,
    params: Value,
}

fn pipeline(root: &Path) -> anyhow::Result<Pipeline> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let data = p("data");
    cli(&["gen-data", "--out", &data, "--n", "16", "--val", "8", "--test", "0", "--seed", "7"])?;
    let started = Instant::now();
    let teacher_train = cli_json(&["train", "--data", &data, "--out", &p("teacher"), "--seed", "7"])?;
    let teacher_time = started.elapsed();
    let no_edge_train = cli_json(&["train", "--data", &data, "--out", &p("teacher_no_edge"), "--seed", "7", "--edge-directions", "none"])?;
    let distill3 = cli_json(&["distill", "--teacher", &p("teacher"), "--data", &data, "--out", &p("student3"), "--seed", "7"])?;
    cli_json(&["distill", "--teacher", &p("teacher"), "--data", &data, "--out", &p("student1"), "--seed", "7", "--levels", "d1"])?;
    let eval = |ckpt: &str| -> anyhow::Result<f64> { num(&cli_json(&["eval", "--checkpoint", &p(ckpt), "--data", &data, "--split", "val"])?, "dice") };
    Ok(Pipeline {
        teacher_val: eval("teacher")?,
        student3_val: eval("student3")?,
        student1_val: eval("student1")?,
        params: cli_json(&["params", "--json"])?,
        teacher_train,
        teacher_time,
        no_edge_train,
        distill3,
    })
}

fn overfit(p: &Pipeline) -> Check {
    let train = num(&p.teacher_train, "train_dice")?;
    let val = num(&p.teacher_train, "val_dice")?;
    ensure(
        train >= TRAIN_DICE_MIN && val >= VAL_DICE_MIN && p.teacher_time < TRAIN_BUDGET,
        format!("8 train images, 200 epochs, seed 7: train dice {train:.4}, val dice {val:.4}, {:.0?}", p.teacher_time),
    )
}

fn distillation(p: &Pipeline) -> Check {
    let ratio = num(&p.params, "encoder_ratio")?;
    let loss_ratio = num(&p.distill3, "loss_ratio")?;
    let gap = p.teacher_val - p.student3_val;
    ensure(
        gap <= STUDENT_DICE_GAP && ratio <= ENCODER_RATIO_MAX && loss_ratio <= DSKD_RATIO_MAX,
        format!(
            "val dice teacher {:.4} student {:.4} (gap {gap:.4}); encoder params {} / {} = {:.1}%; final/initial DSKD {loss_ratio:.4}",
            p.teacher_val,
            p.student3_val,
            p.params["student_encoder"],
            p.params["teacher_encoder"],
            100.0 * ratio
        ),
    )
}

fn ablation_trends(p: &Pipeline) -> Check {
    let four = num(&p.teacher_train, "train_dice")?;
    let none = num(&p.no_edge_train, "train_dice")?;
    ensure(
        four >= none - EDGE_SLACK && p.student3_val >= p.student1_val - LEVEL_SLACK,
        format!(
            "train dice 4 directions {four:.4} vs none {none:.4}; student val dice d1+d2+d3 {:.4} vs d1 {:.4}",
            p.student3_val, p.student1_val
        ),
    )
}

fn reproducibility(root: &Path) -> anyhow::Result<String> {
    let data = root.join("data").to_string_lossy().into_owned();
    let config = root.join("repro.json");
    std::fs::write(&config, r#"{"seed": 11, "train": {"epochs": 3, "batch_size": 4}}"#)?;
    let config = config.to_string_lossy().into_owned();
    let mut csvs = Vec::new();
    for run in ["repro_a", "repro_b"] {
        let out = root.join(run).to_string_lossy().into_owned();
        cli(&["train", "--config", &config, "--data", &data, "--out", &out])?;
        csvs.push(std::fs::read(root.join(run).join("metrics.csv"))?);
    }
    ensure(
        csvs[0] == csvs[1] && !csvs[0].is_empty(),
        format!("two seeded runs, metrics CSVs of {} bytes identical: {}", csvs[0].len(), csvs[0] == csvs[1]),
    )
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, &str, Check)> = vec![
        (1, "gradient suite", gradient_suite()),
        (2, "freeze contract", freeze_contract()),
        (3, "fusion exactness", fusion_exactness()),
        (4, "distillation fixed point", distill_fixed_point()),
        (5, "metric oracles", metric_oracles()),
        (6, "sobel contract", sobel_contract()),
    ];
    match pipeline(root.path()) {
        Ok(p) => {
            results.push((7, "overfit check", overfit(&p)));
            results.push((8, "distillation efficacy", distillation(&p)));
            results.push((9, "ablation trends", ablation_trends(&p)));
        }
        Err(e) => {
            let msg = format!("pipeline failed: {e:#}");
            for (i, name) in [(7, "overfit check"), (8, "distillation efficacy"), (9, "ablation trends")] {
                results.push((i, name, Err(anyhow::anyhow!(msg.clone()))));
            }
        }
    }
    results.push((10, "reproducibility", reproducibility(root.path())));

    let mut failed = 0;
    for (i, name, r) in &results {
        match r {
            Ok(d) => println!("PASS {i:>2} {name}: {d}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {i:>2} {name}: {e:#}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
