//! Synthetic speckled blob images, PNG datasets, splits and box prompts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Weibull};
use serde::{Deserialize, Serialize};

use crate::decoder::BoxPrompt;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::rng;
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub id: String,
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub mask: BinaryMask,
    pub bbox: BoxPrompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub size: usize,
    /// Blob semi-axis range as a fraction of the image side.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Foreground intensity added over the background level.
    pub intensity_offset: f64,
    /// Probability of a second, unlabelled blob.
    pub distractor_prob: f64,
    /// Blend factor of the unit-mean Rayleigh multiplicative speckle.
    pub speckle: f64,
    pub blur_sigma: f64,
    /// Global gain is drawn from `1 ± contrast_jitter`.
    pub contrast_jitter: f64,
    /// Maximum outward displacement of each box side, in pixels.
    pub box_jitter: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            size: 64,
            radius_min: 0.12,
            radius_max: 0.25,
            intensity_offset: 0.35,
            distractor_prob: 0.5,
            speckle: 0.5,
            blur_sigma: 1.0,
            contrast_jitter: 0.15,
            box_jitter: 4,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Self {
        let s = cfg.size as f64;
        let a = rng.random_range(cfg.radius_min..=cfg.radius_max) * s;
        let b = rng.random_range(cfg.radius_min..=cfg.radius_max) * s;
        let r = a.max(b) + 1.0;
        Self {
            cx: rng.random_range(r..=(s - 1.0 - r).max(r)),
            cy: rng.random_range(r..=(s - 1.0 - r).max(r)),
            a,
            b,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        }
    }

    /// Normalised radial coordinate; `<= 1` inside.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        (u * u + v * v).sqrt()
    }

    /// 1 inside, smooth fall-off to 0 just outside the support.
    fn profile(&self, x: f64, y: f64) -> f64 {
        let t = ((self.rho(x, y) - 1.0) / 0.15).clamp(0.0, 1.0);
        1.0 - t * t * (3.0 - 2.0 * t)
    }

    fn far_from(&self, other: &Ellipse) -> bool {
        let d = ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt();
        d > 1.2 * (self.a.max(self.b) + other.a.max(other.b)) + 2.0
    }
}

fn gaussian_blur(img: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
    let n = size as isize;
    let clamp = |v: isize| v.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = (-r..=r).map(|i| k[(i + r) as usize] * img[y * size + clamp(x as isize + i)]).sum();
        }
    }
    for y in 0..size {
        for x in 0..size {
            img[y * size + x] = (-r..=r).map(|i| k[(i + r) as usize] * tmp[clamp(y as isize + i) * size + x]).sum();
        }
    }
}

/// Box-jitter stream of one sample; draw `0` is the stored prompt, later
/// draws are per-epoch re-jitters.
pub fn jitter_rng(seed: u64, id: &str, draw: u64) -> ChaCha8Rng {
    rng::indexed(seed, &format!("jitter:{id}"), draw)
}

fn id_for(index: usize) -> String {
    format!("sample_{index:04}")
}

/// One sample, fully determined by `(seed, index)`.
pub fn gen_sample(seed: u64, index: usize, cfg: &GenConfig) -> Result<MaskPair> {
    let mut r = rng::indexed(seed, "data", index as u64);
    let size = cfg.size;
    let target = Ellipse::random(&mut r, cfg);
    let mut blobs = vec![target];
    if r.random_bool(cfg.distractor_prob.clamp(0.0, 1.0)) {
        for _ in 0..20 {
            let d = Ellipse::random(&mut r, cfg);
            if d.far_from(&target) {
                blobs.push(d);
                break;
            }
        }
    }
    let base = r.random_range(0.25..0.4);
    let mut img = vec![0.0; size * size];
    let mut mask = BinaryMask::empty(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let fg = blobs.iter().map(|e| e.profile(fx, fy)).fold(0.0, f64::max);
            img[y * size + x] = base + cfg.intensity_offset * fg;
            mask.set(y, x, target.rho(fx, fy) <= 1.0);
        }
    }
    gaussian_blur(&mut img, size, cfg.blur_sigma);
    // unit-mean Rayleigh: Weibull with shape 2 and scale 2/sqrt(pi)
    let rayleigh = Weibull::new(2.0 / std::f64::consts::PI.sqrt(), 2.0).expect("valid Weibull");
    let gain = 1.0 + r.random_range(-cfg.contrast_jitter..=cfg.contrast_jitter);
    for v in img.iter_mut() {
        let s: f64 = rayleigh.sample(&mut r);
        *v = (gain * *v * (1.0 + cfg.speckle * (s - 1.0))).clamp(0.0, 1.0);
    }
    if mask.is_empty() {
        return Err(Error::Validation(format!("generated an empty mask at index {index}")));
    }
    let id = id_for(index);
    let bbox = box_from_mask(&mask, cfg.box_jitter, &mut jitter_rng(seed, &id, 0))?;
    Ok(MaskPair {
        id,
        image: Tensor::new(&[1, size, size], img)?,
        mask,
        bbox,
    })
}

pub fn gen_synthetic(n: usize, seed: u64, cfg: &GenConfig) -> Result<Vec<MaskPair>> {
    if n == 0 {
        return Err(Error::Validation("sample count must be at least 1".into()));
    }
    (0..n).map(|i| gen_sample(seed, i, cfg)).collect()
}

/// Tightest inclusive rectangle around the foreground.
pub fn tight_box(mask: &BinaryMask) -> Result<BoxPrompt> {
    let pts = mask.points();
    if pts.is_empty() {
        return Err(Error::Validation("cannot derive a box from an empty mask".into()));
    }
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for (y, x) in pts {
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    Ok(BoxPrompt { x0, y0, x1, y1 })
}

/// Tight box with every side moved outward by an independent uniform
/// integer in `[0, jitter_max]`, clamped to the image.
pub fn box_from_mask(mask: &BinaryMask, jitter_max: usize, rng: &mut ChaCha8Rng) -> Result<BoxPrompt> {
    let t = tight_box(mask)?;
    let mut d = || rng.random_range(0..=jitter_max);
    let (dx0, dy0, dx1, dy1) = (d(), d(), d(), d());
    Ok(BoxPrompt {
        x0: t.x0.saturating_sub(dx0),
        y0: t.y0.saturating_sub(dy0),
        x1: (t.x1 + dx1).min(mask.width() - 1),
        y1: (t.y1 + dy1).min(mask.height() - 1),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn part(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, val or test)"))),
        }
    }
}

/// One of the eight square symmetries (bit 2 transposes, bit 1 flips rows,
/// bit 0 flips columns) applied to image, mask and box together.
pub fn dihedral(image: &Tensor, mask: &BinaryMask, bbox: &BoxPrompt, k: u8) -> Result<(Tensor, BinaryMask, BoxPrompt)> {
    let n = mask.width();
    if mask.height() != n || image.shape() != [1, n, n] {
        return Err(Error::Validation("dihedral transforms need square single-channel inputs".into()));
    }
    let map = |y: usize, x: usize| {
        let (y, x) = if k & 4 != 0 { (x, y) } else { (y, x) };
        let y = if k & 2 != 0 { n - 1 - y } else { y };
        let x = if k & 1 != 0 { n - 1 - x } else { x };
        (y, x)
    };
    let mut img = vec![0.0; n * n];
    let mut bits = BinaryMask::empty(n, n);
    for y in 0..n {
        for x in 0..n {
            let (ty, tx) = map(y, x);
            img[ty * n + tx] = image.data()[y * n + x];
            bits.set(ty, tx, mask.get(y, x));
        }
    }
    let (ay, ax) = map(bbox.y0, bbox.x0);
    let (by, bx) = map(bbox.y1, bbox.x1);
    let b = BoxPrompt::new(ax.min(bx), ay.min(by), ax.max(bx), ay.max(by), n)?;
    Ok((Tensor::new(&[1, n, n], img)?, bits, b))
}

/// Seeded shuffle partitioned 8:1:1; val and test take `floor(n/10)` each
/// and the remainder goes to train.
pub fn split(ids: &[String], seed: u64) -> Result<Split> {
    if ids.len() < 10 {
        return Err(Error::Validation(format!("need at least 10 samples to split, got {}", ids.len())));
    }
    split_counts(ids, seed, ids.len() / 10, ids.len() / 10)
}

/// Seeded shuffle with explicit val/test sizes; at least one sample is left
/// for training.
pub fn split_counts(ids: &[String], seed: u64, val: usize, test: usize) -> Result<Split> {
    if val + test >= ids.len() {
        return Err(Error::Validation(format!(
            "{val} val + {test} test leaves no training samples out of {}",
            ids.len()
        )));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Validation("duplicate sample ids".into()));
    }
    sorted.shuffle(&mut rng::stream(seed, "split"));
    let test = sorted.split_off(sorted.len() - test);
    let val = sorted.split_off(sorted.len() - val);
    Ok(Split {
        train: sorted,
        val,
        test,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub split: String,
    pub bbox: BoxPrompt,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub size: usize,
    pub seed: u64,
    pub items: Vec<ManifestItem>,
}

fn to_png(data: impl Iterator<Item = u8>, size: usize, path: &Path) -> Result<()> {
    let buf: Vec<u8> = data.collect();
    let img = image::GrayImage::from_raw(size as u32, size as u32, buf)
        .ok_or_else(|| Error::Validation("image buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Writes `images/<id>.png`, `masks/<id>.png` and `manifest.json`. Ids
/// missing from `parts` are listed as train.
pub fn write_dataset(pairs: &[MaskPair], seed: u64, parts: &Split, out: &Path) -> Result<Manifest> {
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("masks"))?;
    let size = pairs.first().map(|p| p.mask.width()).unwrap_or(0);
    let mut items = Vec::with_capacity(pairs.len());
    for p in pairs {
        let image = format!("images/{}.png", p.id);
        let mask = format!("masks/{}.png", p.id);
        to_png(p.image.data().iter().map(|v| (v * 255.0).round() as u8), size, &out.join(&image))?;
        to_png(p.mask.values().iter().map(|&b| if b { 255 } else { 0 }), size, &out.join(&mask))?;
        let split_name = if parts.val.contains(&p.id) {
            "val"
        } else if parts.test.contains(&p.id) {
            "test"
        } else {
            "train"
        };
        items.push(ManifestItem {
            id: p.id.clone(),
            image,
            mask,
            split: split_name.into(),
            bbox: p.bbox,
        });
    }
    let m = Manifest { size, seed, items };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub pairs: Vec<MaskPair>,
    /// One line per skipped file.
    pub diagnostics: Vec<String>,
}

fn read_gray(path: &Path) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

fn resize_nearest(src: &[bool], h: usize, w: usize, size: usize) -> BinaryMask {
    BinaryMask::from_fn(size, size, |y, x| {
        let sy = (((y as f64 + 0.5) * h as f64 / size as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / size as f64) as usize).min(w - 1);
        src[sy * w + sx]
    })
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::Data {
        path: dir.to_path_buf(),
        detail: e.to_string(),
    })? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Loads `images/*.png` with matching `masks/*.png`, resized to `size`.
/// Bad files are reported in the diagnostics and skipped. Boxes are jittered
/// from `(seed, id)`.
pub fn load_dir(dir: &Path, size: usize, box_jitter: usize, seed: u64) -> Result<LoadReport> {
    let images = stems(&dir.join("images"))?;
    let masks = stems(&dir.join("masks"))?;
    let mut report = LoadReport::default();
    for stem in masks.keys().filter(|s| !images.contains_key(*s)) {
        report.diagnostics.push(format!("masks/{stem}.png: no matching image"));
    }
    for (stem, img_path) in &images {
        let Some(mask_path) = masks.get(stem) else {
            report.diagnostics.push(format!("{}: no matching mask", img_path.display()));
            continue;
        };
        let (ih, iw, ipx) = match read_gray(img_path) {
            Ok(v) => v,
            Err(e) => {
                report.diagnostics.push(format!("{}: {e}", img_path.display()));
                continue;
            }
        };
        let (mh, mw, mpx) = match read_gray(mask_path) {
            Ok(v) => v,
            Err(e) => {
                report.diagnostics.push(format!("{}: {e}", mask_path.display()));
                continue;
            }
        };
        let raw = Tensor::new(&[1, ih, iw], ipx.iter().map(|&v| v as f64 / 255.0).collect())?;
        let image = if (ih, iw) == (size, size) { raw } else { resize_bilinear(&raw, size, size)? };
        let bits: Vec<bool> = mpx.iter().map(|&v| v > 127).collect();
        let mask = resize_nearest(&bits, mh, mw, size);
        if mask.is_empty() {
            report.diagnostics.push(format!("{}: mask is empty", mask_path.display()));
            continue;
        }
        let bbox = box_from_mask(&mask, box_jitter, &mut jitter_rng(seed, stem, 0))?;
        report.pairs.push(MaskPair {
            id: stem.clone(),
            image,
            mask,
            bbox,
        });
    }
    Ok(report)
}

/// Keeps the pairs of one split. Labels come from `manifest.json` when the
/// directory has one, otherwise from a seeded 8:1:1 split of the loaded ids.
pub fn select_split(dir: &Path, pairs: Vec<MaskPair>, seed: u64, part: &str) -> Result<Vec<MaskPair>> {
    let manifest = dir.join("manifest.json");
    let keep: Vec<String> = if manifest.exists() {
        let text = fs::read_to_string(&manifest)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data {
            path: manifest.clone(),
            detail: e.to_string(),
        })?;
        Split::default().part(part)?;
        m.items.into_iter().filter(|i| i.split == part).map(|i| i.id).collect()
    } else {
        let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
        split(&ids, seed)?.part(part)?.to_vec()
    };
    Ok(pairs.into_iter().filter(|p| keep.contains(&p.id)).collect())
}
