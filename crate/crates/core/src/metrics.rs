//! Segmentation loss and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("binary_mask", format!("{} values for {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    /// `sigmoid(z) > 0.5`, i.e. `z > 0`, on a `[1,H,W]` or `[H,W]` logit map.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (h, w) = match *logits.shape() {
            [1, h, w] | [h, w] => (h, w),
            ref s => return Err(Error::dim("from_logits", format!("expected [1,H,W], got {s:?}"))),
        };
        Ok(Self {
            height: h,
            width: w,
            data: logits.data().iter().map(|&z| z > 0.0).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn values(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Foreground pixels as `(row, col)`.
    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.data.len())
            .filter(|&i| self.data[i])
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }

    /// Foreground centroid `(x, y)`.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let pts = self.points();
        if pts.is_empty() {
            return None;
        }
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.1 as f64).sum();
        let sy: f64 = pts.iter().map(|p| p.0 as f64).sum();
        Some((sx / n, sy / n))
    }

    /// `[1,H,W]` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[1, self.height, self.width], data).expect("shape")
    }

    pub fn intersection(&self, other: &Self) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(
                op,
                format!("{}x{} vs {}x{}", self.height, self.width, other.height, other.width),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub focal: f64,
    pub dice: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 20.0,
            dice: 1.0,
            gamma: 2.0,
            alpha: 0.25,
            smooth: 1.0,
        }
    }
}

/// Mean sigmoid focal loss over all pixels; positives weighted by `alpha`.
pub fn focal_loss(tape: &mut Tape, logits: Var, gt: &BinaryMask, w: &LossWeights) -> Result<Var> {
    let y = gt.to_tensor();
    if tape.shape(logits) != y.shape() {
        return Err(Error::dim("focal_loss", format!("logits {:?} vs mask {:?}", tape.shape(logits), y.shape())));
    }
    let pos_w: Vec<f64> = y.data().iter().map(|&v| v * w.alpha).collect();
    let neg_w: Vec<f64> = y.data().iter().map(|&v| (1.0 - v) * (1.0 - w.alpha)).collect();
    let pos_w = tape.constant(Tensor::new(y.shape(), pos_w)?);
    let neg_w = tape.constant(Tensor::new(y.shape(), neg_w)?);

    let neg_logits = tape.neg(logits);
    let log_p = tape.log_sigmoid(logits);
    let log_q = tape.log_sigmoid(neg_logits);
    let p = tape.sigmoid(logits);
    let q = tape.sigmoid(neg_logits);
    let q_g = tape.powf(q, w.gamma);
    let p_g = tape.powf(p, w.gamma);
    let pos = tape.mul(q_g, log_p)?;
    let pos = tape.mul(pos, pos_w)?;
    let neg = tape.mul(p_g, log_q)?;
    let neg = tape.mul(neg, neg_w)?;
    let both = tape.add(pos, neg)?;
    let m = tape.mean(both);
    Ok(tape.neg(m))
}

/// `1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s)`.
pub fn soft_dice_loss(tape: &mut Tape, logits: Var, gt: &BinaryMask, w: &LossWeights) -> Result<Var> {
    let y = gt.to_tensor();
    if tape.shape(logits) != y.shape() {
        return Err(Error::dim("soft_dice_loss", format!("logits {:?} vs mask {:?}", tape.shape(logits), y.shape())));
    }
    let y_sum = gt.count() as f64;
    let yv = tape.constant(y);
    let p = tape.sigmoid(logits);
    let inter = tape.mul(p, yv)?;
    let inter = tape.sum(inter);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, w.smooth);
    let den = tape.sum(p);
    let den = tape.add_scalar(den, y_sum + w.smooth);
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `focal_weight * focal + dice_weight * soft_dice`.
pub fn seg_loss(tape: &mut Tape, logits: Var, gt: &BinaryMask, w: &LossWeights) -> Result<Var> {
    let f = focal_loss(tape, logits, gt, w)?;
    let d = soft_dice_loss(tape, logits, gt, w)?;
    let f = tape.scale(f, w.focal);
    let d = tape.scale(d, w.dice);
    tape.add(f, d)
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.same_shape(gt, "dice")?;
    let (a, b) = (pred.count(), gt.count());
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.intersection(gt) as f64 / (a + b) as f64)
}

/// `|A∩B| / |A∪B|`, 1 when both are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.same_shape(gt, "iou")?;
    let i = pred.intersection(gt);
    let u = pred.count() + gt.count() - i;
    if u == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / u as f64)
}

pub fn miou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Validation(format!("{} predictions for {} masks", preds.len(), gts.len())));
    }
    let s: f64 = preds.iter().zip(gts).map(|(p, g)| iou(p, g)).sum::<Result<f64>>()?;
    Ok(s / preds.len() as f64)
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas). Infinite entries are not sites.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let inter = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for &q in &sites {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = inter(q, p);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            z.clear();
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// foreground pixel of `m` (infinite when `m` is empty).
pub fn squared_distance_transform(m: &BinaryMask) -> Vec<f64> {
    let (h, w) = (m.height, m.width);
    let mut g: Vec<f64> = m.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut buf = vec![0.0; h.max(w)];
    for y in 0..h {
        let row = &mut g[y * w..(y + 1) * w];
        let src = row.to_vec();
        edt_1d(&src, &mut buf[..w]);
        row.copy_from_slice(&buf[..w]);
    }
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[y * w + x];
        }
        edt_1d(&col, &mut buf[..h]);
        for y in 0..h {
            g[y * w + x] = buf[y];
        }
    }
    g
}

fn directed(a: &BinaryMask, dt_b: &[f64]) -> f64 {
    a.data
        .iter()
        .zip(dt_b)
        .filter(|(&on, _)| on)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between foreground sets, in pixels. One empty
/// set gives the image diagonal; two empty sets give 0.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.same_shape(gt, "hausdorff")?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            return Ok(((pred.height.pow(2) + pred.width.pow(2)) as f64).sqrt());
        }
        _ => {}
    }
    let dt_gt = squared_distance_transform(gt);
    let dt_pred = squared_distance_transform(pred);
    Ok(directed(pred, &dt_gt).max(directed(gt, &dt_pred)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub iou: f64,
    pub hd: f64,
}

impl MetricReport {
    pub fn compute(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        Ok(Self {
            dice: dice(pred, gt)?,
            iou: iou(pred, gt)?,
            hd: hausdorff(pred, gt)?,
        })
    }

    /// Arithmetic mean of each field; the `iou` mean is the mIoU.
    pub fn mean(reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(Self {
            dice: reports.iter().map(|r| r.dice).sum::<f64>() / n,
            iou: reports.iter().map(|r| r.iou).sum::<f64>() / n,
            hd: reports.iter().map(|r| r.hd).sum::<f64>() / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, pts: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for &(y, x) in pts {
            m.set(y, x, true);
        }
        m
    }

    fn brute_hd(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let (pa, pb) = (a.points(), b.points());
        let d = |p: (usize, usize), q: (usize, usize)| {
            let (dy, dx) = (p.0 as f64 - q.0 as f64, p.1 as f64 - q.1 as f64);
            (dy * dy + dx * dx).sqrt()
        };
        let h = |s: &[(usize, usize)], t: &[(usize, usize)]| {
            s.iter().map(|&p| t.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
        };
        h(&pa, &pb).max(h(&pb, &pa))
    }

    fn scalar_loss(z: &[f64], gt: &BinaryMask, f: fn(&mut Tape, Var, &BinaryMask, &LossWeights) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(&[1, gt.height(), gt.width()], z.to_vec()).unwrap());
        let v = f(&mut tape, l, gt, &LossWeights::default()).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn count_examples() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 0), (0, 1), (3, 2), (3, 3)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(iou(&a, &b).unwrap(), 2.0 / 6.0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let far = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice(&a, &far).unwrap(), 0.0);
        let e = BinaryMask::empty(4, 4);
        assert_eq!((dice(&e, &e).unwrap(), iou(&e, &e).unwrap()), (1.0, 1.0));
        let m = miou(&[a.clone(), a.clone()], &[a.clone(), b]).unwrap();
        assert!((m - 2.0 / 3.0).abs() < 1e-15);
        assert!(miou(&[a], &[]).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(4, 3)]);
        assert_eq!(hausdorff(&a, &b).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        let e = BinaryMask::empty(8, 8);
        assert_eq!(hausdorff(&e, &e).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &e).unwrap(), 128f64.sqrt());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let m = mask(7, 9, &[(1, 1), (5, 7), (6, 0)]);
        let dt = squared_distance_transform(&m);
        for y in 0..7 {
            for x in 0..9 {
                let want = m
                    .points()
                    .iter()
                    .map(|&(py, px)| (py as f64 - y as f64).powi(2) + (px as f64 - x as f64).powi(2))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(dt[y * 9 + x], want);
            }
        }
    }

    #[test]
    fn saturated_correct_logits_have_tiny_loss() {
        let gt = BinaryMask::from_fn(8, 8, |y, x| y < 4 && x > 2);
        let z: Vec<f64> = gt.values().iter().map(|&v| if v { 20.0 } else { -20.0 }).collect();
        assert!(scalar_loss(&z, &gt, seg_loss) < 1e-4);
    }

    #[test]
    fn hard_prediction_has_zero_dice_term() {
        let gt = BinaryMask::from_fn(6, 6, |y, _| y % 2 == 0);
        let z: Vec<f64> = gt.values().iter().map(|&v| if v { 1e3 } else { -1e3 }).collect();
        assert_eq!(scalar_loss(&z, &gt, soft_dice_loss), 0.0);
    }

    #[test]
    fn focal_on_single_uncertain_positive() {
        let gt = mask(1, 1, &[(0, 0)]);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 1, 1]));
        let w = LossWeights::default();
        let f = focal_loss(&mut tape, l, &gt, &w).unwrap();
        let f = tape.scale(f, w.focal);
        let want = 20.0 * 0.25 * 0.5f64.powi(2) * -(0.5f64.ln());
        assert!((tape.value(f).item() - want).abs() < 1e-15);
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 4, 4]));
        assert!(seg_loss(&mut tape, l, &BinaryMask::empty(4, 5), &LossWeights::default()).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(prop::bool::weighted(0.2), 256).prop_map(|v| BinaryMask::new(16, 16, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn hausdorff_matches_brute_force(a in arb_mask(), b in arb_mask()) {
            prop_assume!(!a.is_empty() && !b.is_empty());
            let fast = hausdorff(&a, &b).unwrap();
            prop_assert!((fast - brute_hd(&a, &b)).abs() <= 1e-9);
            prop_assert_eq!(fast, hausdorff(&b, &a).unwrap());
        }

        #[test]
        fn overlap_metrics_are_symmetric_and_ordered(a in arb_mask(), b in arb_mask()) {
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            prop_assert!(iou(&a, &b).unwrap() <= dice(&a, &b).unwrap());
        }

        #[test]
        fn dilating_away_never_reduces_hd(a in arb_mask(), seed in 0usize..1000) {
            prop_assume!(!a.is_empty());
            // gt confined to the left half; pred grows rightward by one column
            let gt = BinaryMask::from_fn(16, 16, |y, x| x < 8 && a.get(y, x));
            prop_assume!(!gt.is_empty());
            let col = 8 + seed % 7;
            let pred = BinaryMask::from_fn(16, 16, |y, x| gt.get(y, x) || (x == col && y % 3 == 0));
            let grown = BinaryMask::from_fn(16, 16, |y, x| pred.get(y, x) || (x == col + 1 && y % 3 == 0));
            prop_assert!(hausdorff(&grown, &gt).unwrap() >= hausdorff(&pred, &gt).unwrap());
        }
    }
}
