mod common;

use common::lift;
use irpatch_core::detector::{
    decode, decode_weights, detect, encode_weights, forward_raw, nms, objectness, train, DetectionMap, DetectorWeights,
    TrainConfig, Variant, DEFAULT_NMS_IOU,
};
use irpatch_core::rng::{indexed, Stream};
use irpatch_core::scene::{generate_dataset, SceneConfig};
use irpatch_diffcore::{finite_diff_check_at, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn random_image(side: usize, seed: u64) -> Tensor {
    let mut rng = indexed(seed, Stream::Scene, 0);
    Tensor::from_fn(&[side, side], |_| rng.gen::<f64>())
}

#[test]
fn input_gradient_matches_finite_differences() {
    for name in ["base", "deep"] {
        let w = DetectorWeights::init(Variant::by_name(name).unwrap(), 3);
        let img = random_image(32, 1);
        let weights = Tensor::from_fn(&[4], |i| 1.0 + i as f64);
        let f = |t: &mut Tape, x| {
            let p = w.load(t, false);
            let raw = forward_raw(t, &w.variant, &p, x).map_err(lift)?;
            let obj = objectness(t, raw).map_err(lift)?;
            let c = t.constant(weights.clone());
            let prod = t.mul(obj, c)?;
            t.reduce_sum(prod)
        };
        let coords: Vec<usize> = (0..40).map(|i| (i * 97 + 13) % 1024).collect();
        let check = finite_diff_check_at(f, &img, 1e-6, &coords).unwrap();
        assert!(check.max_rel_error <= 1e-4, "{name}: {check:?}");
    }
}

#[test]
fn shifting_by_one_stride_shifts_the_interior_map() {
    let w = DetectorWeights::init(Variant::by_name("base").unwrap(), 5);
    let side = 128;
    let img = random_image(side, 2);
    let shifted = Tensor::from_fn(&[side, side], |i| {
        let (r, c) = (i / side, i % side);
        if c >= 16 {
            img.at2(r, c - 16)
        } else {
            0.0
        }
    });
    let a = detect(&w, &img).unwrap();
    let b = detect(&w, &shifted).unwrap();
    let g = a.cols;
    for r in 2..g - 2 {
        for c in 2..g - 3 {
            let (x, y) = (a.objectness[r * g + c], b.objectness[r * g + c + 1]);
            assert!((x - y).abs() < 1e-12, "cell ({r},{c}): {x} vs {y}");
        }
    }
}

#[test]
fn identical_inputs_give_identical_maps() {
    let w = DetectorWeights::init(Variant::by_name("wide").unwrap(), 8);
    let img = random_image(64, 4);
    assert_eq!(detect(&w, &img).unwrap(), detect(&w, &img.clone()).unwrap());
}

fn arbitrary_map() -> impl Strategy<Value = DetectionMap> {
    let cells = 16;
    (
        prop::collection::vec(0.0f64..1.0, cells),
        prop::collection::vec(prop::array::uniform4(-2.0f64..2.0), cells),
        prop::collection::vec(0.5f64..1.0, cells),
    )
        .prop_map(|(objectness, offsets, class)| DetectionMap {
            rows: 4,
            cols: 4,
            objectness,
            offsets,
            class,
        })
}

proptest! {
    #[test]
    fn decoding_is_idempotent(map in arbitrary_map(), thr in 0.05f64..0.9) {
        let once = decode(&map, thr, DEFAULT_NMS_IOU);
        prop_assert!(once.iter().all(|d| d.score >= thr && d.score > 0.0 && d.score < 1.0));
        prop_assert!(once.iter().all(|d| d.bbox.within(64.0, 64.0)));
        let again = nms(once.clone(), DEFAULT_NMS_IOU);
        prop_assert_eq!(again, once);
    }

    #[test]
    fn weight_files_round_trip(seed in any::<u64>(), v in 0usize..4) {
        let name = ["base", "wide", "narrow", "deep"][v];
        let w = DetectorWeights::init(Variant::by_name(name).unwrap(), seed);
        let back = decode_weights(&encode_weights(&w), std::path::Path::new("w")).unwrap();
        prop_assert_eq!(back, w);
    }
}

#[test]
fn training_is_deterministic() {
    let ds = generate_dataset(24, 3, &SceneConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..Default::default()
    };
    let v = Variant::by_name("narrow").unwrap();
    let a = train(&ds.train_scenes(), &ds.test_scenes(), v.clone(), &cfg).unwrap();
    let b = train(&ds.train_scenes(), &ds.test_scenes(), v, &cfg).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.log, b.log);
    assert_ne!(a.weights, DetectorWeights::init(a.weights.variant.clone(), 0));
}
