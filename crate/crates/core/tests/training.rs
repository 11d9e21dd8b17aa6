use uniultra_core::adapter::count_trainable;
use uniultra_core::data::{gen_synthetic, tight_box, GenConfig, MaskPair};
use uniultra_core::encoder::{is_backbone, is_block};
use uniultra_core::metrics::{dice, BinaryMask};
use uniultra_core::model::{MaskPredictor, Segmenter};
use uniultra_core::train::{fit, TrainConfig};
use uniultra_core::{ModelConfig, Tensor};

fn adapter_numel(c: usize, a: usize, e: usize) -> usize {
    let context = (c * a + a) + (a * c + c);
    let edge = (c * e + e) + (e * e + e) + (e * c + c);
    context + edge
}

fn block_numel(c: usize, ratio: usize) -> usize {
    4 * c + 4 * (c * c + c) + (c * ratio * c + ratio * c) + (ratio * c * c + c)
}

#[test]
fn toy_counts_match_hand_formulas() {
    let cfg = ModelConfig::toy_teacher();
    let (_, store) = Segmenter::build(0, &cfg).unwrap();
    let dims = [32, 64, 128];
    let adapters: usize = dims.iter().map(|&c| adapter_numel(c, 16, 16)).sum();
    assert_eq!(store.numel_where(|n| n.contains(".adapter.")), adapters);

    let side = 64 / 4;
    let patch = (16 * 32 + 32) + side * side * 32;
    let blocks: usize = dims.iter().map(|&c| block_numel(c, 4)).sum();
    let down = (32 * 64 + 64) + (64 * 128 + 128);
    assert_eq!(store.numel_where(is_backbone), patch + blocks + down);
    assert_eq!(store.numel_where(is_block), blocks);

    let c = count_trainable(&store);
    assert_eq!(c.total, store.total_numel());
    assert_eq!(c.trainable, c.total - (patch + blocks + down));
}

#[test]
fn five_steps_leave_the_backbone_bit_identical() {
    let data = gen_synthetic(4, 2, &GenConfig::default()).unwrap();
    let (m, mut store) = Segmenter::build(2, &ModelConfig::toy_teacher()).unwrap();
    let before = store.snapshot();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 4,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    fit(&m, &mut store, &data, &[], &cfg).unwrap();
    let after = store.snapshot();
    let mut changed = Vec::new();
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        let same = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if is_backbone(name) {
            assert!(same, "{name} moved");
        } else if !same {
            changed.push(name.clone());
        }
    }
    for prefix in ["stage1.adapter.down", "stage3.adapter.up", "stage2.adapter.edge.up_mix", "decoder.", "neck.proj", "prompt."] {
        assert!(changed.iter().any(|n| n.starts_with(prefix)), "{prefix} never updated");
    }
}

#[test]
fn single_sample_overfits() {
    let data = gen_synthetic(1, 5, &GenConfig::default()).unwrap();
    let (m, mut store) = Segmenter::build(5, &ModelConfig::toy_teacher()).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 1,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let out = fit(&m, &mut store, &data, &[], &cfg).unwrap();
    let last = out.rows.last().unwrap();
    assert!(last.train_dice >= 0.95, "dice {}", last.train_dice);
    assert!(last.train_loss < out.rows[0].train_loss);
}

fn disk(cy: f64, cx: f64, r: f64) -> BinaryMask {
    BinaryMask::from_fn(64, 64, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
}

#[test]
fn the_box_selects_which_object_is_segmented() {
    let (a, b) = (disk(18.0, 18.0, 9.0), disk(44.0, 46.0, 9.0));
    let image = Tensor::new(
        &[1, 64, 64],
        (0..64 * 64)
            .map(|i| if a.values()[i] || b.values()[i] { 0.8 } else { 0.2 })
            .collect(),
    )
    .unwrap();
    let pair = |id: &str, mask: &BinaryMask| MaskPair {
        id: id.into(),
        image: image.clone(),
        mask: mask.clone(),
        bbox: tight_box(mask).unwrap(),
    };
    let data = [pair("a", &a), pair("b", &b)];
    let (m, mut store) = Segmenter::build(8, &ModelConfig::toy_teacher()).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    fit(&m, &mut store, &data, &[], &cfg).unwrap();
    for (p, other) in data.iter().zip([&b, &a]) {
        let pred = BinaryMask::from_logits(&m.predict(&store, &p.image, &p.bbox).unwrap()).unwrap();
        let d = dice(&pred, &p.mask).unwrap();
        assert!(d >= 0.9, "{}: dice {d}", p.id);
        assert!(pred.intersection(other) * 10 < other.count(), "{} leaks into the other object", p.id);
        let (x, y) = pred.centroid().unwrap();
        let b = p.bbox;
        assert!((b.x0 as f64..=b.x1 as f64).contains(&x) && (b.y0 as f64..=b.y1 as f64).contains(&y));
    }
}
