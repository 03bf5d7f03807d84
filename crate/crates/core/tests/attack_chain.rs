mod common;

use common::lift;
use irpatch_core::attack::{
    attack_loss, ensemble_loss, optimize_patch, paste_patch, total_loss, AttackConfig, ChainRngs,
};
use irpatch_core::detector::{DetectorWeights, Variant};
use irpatch_core::pattern::{black_ratio_loss, sample_gumbel, PatternLatent};
use irpatch_core::rng::{stream, Stream};
use irpatch_core::scene::{generate_dataset, BBox, Dataset, SceneConfig};
use irpatch_diffcore::{finite_diff_check_at, Tape, Tensor};
use rand::seq::index::sample;

fn small_setup() -> (Dataset, DetectorWeights, AttackConfig) {
    let scene = SceneConfig {
        size: 64,
        person_height: [24.0, 40.0],
        persons: [1, 2],
        ..Default::default()
    };
    let ds = generate_dataset(12, 5, &scene).unwrap();
    let det = DetectorWeights::init(Variant::by_name("base").unwrap(), 2);
    let cfg = AttackConfig {
        side: 6,
        batch_size: 2,
        iterations: 4,
        ..Default::default()
    };
    (ds, det, cfg)
}

#[test]
fn full_chain_gradient_matches_finite_differences() {
    let (ds, det, cfg) = small_setup();
    let batch: Vec<_> = ds.scenes.iter().filter(|s| !s.boxes.is_empty()).take(2).collect();
    for instance in 0..3u64 {
        let logits = PatternLatent::init(cfg.side, &mut stream(instance, Stream::Init))
            .logits()
            .clone();
        let g = sample_gumbel(cfg.side, &mut stream(instance, Stream::Gumbel)).g;
        let f = |t: &mut Tape, z| {
            let mut rngs = ChainRngs::from_seed(instance);
            Ok(
                attack_loss(t, z, &g, std::slice::from_ref(&det), &batch, &cfg, &mut rngs)
                    .map_err(lift)?
                    .loss,
            )
        };
        let coords = sample(&mut stream(instance, Stream::Batch), logits.len(), 10).into_vec();
        let check = finite_diff_check_at(f, &logits, 2f64.powi(-20), &coords).unwrap();
        assert!(check.max_rel_error <= 1e-4, "instance {instance}: {check:?}");
    }
}

#[test]
fn paste_gradient_lives_exactly_on_the_patch() {
    let b = BBox::new(10.0, 8.0, 22.0, 36.0).unwrap();
    let f = |t: &mut Tape, p| {
        let img = t.constant(Tensor::full(&[48, 48], 0.3));
        let out = paste_patch(t, img, &b, p, 0.25, [0.4, 0.7])
            .map_err(lift)?
            .expect("fits");
        t.reduce_mean(out)
    };
    let patch = Tensor::from_fn(&[5, 5], |i| (i as f64 * 0.13).fract());
    let all: Vec<usize> = (0..25).collect();
    let check = finite_diff_check_at(f, &patch, 1e-6, &all).unwrap();
    assert!(check.max_rel_error <= 1e-4, "{check:?}");
    assert!(check.analytic.iter().all(|&g| g > 0.0), "{:?}", check.analytic);

    let mut tape = Tape::new();
    let img = tape.constant(Tensor::full(&[48, 48], 0.3));
    let p = tape.leaf(patch.clone());
    let out = paste_patch(&mut tape, img, &b, p, 0.25, [0.4, 0.7]).unwrap().unwrap();
    let changed = tape.value(out).data().iter().filter(|&&v| v != 0.3).count();
    assert_eq!(changed, 49, "a 7x7 patch for a 28px tall box");
}

#[test]
fn single_detector_ensemble_equals_the_plain_loss() {
    for (o, b, l) in [(0.37, 0.41, 0.1), (0.9, 0.0, 1.0), (0.0, 0.6, 0.05)] {
        assert_eq!(ensemble_loss(&[o], b, l).to_bits(), total_loss(o, b, l).to_bits());
    }
}

#[test]
fn optimization_is_deterministic_and_traced() {
    let (ds, det, cfg) = small_setup();
    let train = ds.train_scenes();
    let a = optimize_patch(std::slice::from_ref(&det), &train, &cfg).unwrap();
    let b = optimize_patch(std::slice::from_ref(&det), &train, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trace.len(), cfg.iterations);
    let zeros = a.patch.grid().data().iter().filter(|&&v| v == 0.0).count();
    assert_eq!(a.black_ratio, zeros as f64 / 36.0);

    let init = optimize_patch(
        std::slice::from_ref(&det),
        &train,
        &AttackConfig {
            iterations: 0,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert!(init.trace.is_empty());
    let mut tape = Tape::new();
    let z = tape.constant(init.latent.logits().clone());
    let l = black_ratio_loss(&mut tape, z).unwrap();
    assert_eq!(tape.value(l).item(), a.trace[0].black);
    for t in &a.trace {
        assert_eq!(t.loss, t.obj + cfg.lambda * t.black);
    }
}

#[test]
fn zero_lambda_trace_is_pure_objectness() {
    let (ds, det, cfg) = small_setup();
    let cfg = AttackConfig { lambda: 0.0, ..cfg };
    let r = optimize_patch(&[det], &ds.train_scenes(), &cfg).unwrap();
    assert!(r.trace.iter().all(|t| t.loss == t.obj));
}

#[test]
fn ensemble_sums_detector_terms() {
    let (ds, det, cfg) = small_setup();
    let other = DetectorWeights::init(Variant::by_name("narrow").unwrap(), 9);
    let one = AttackConfig { iterations: 1, ..cfg };
    let train = ds.train_scenes();
    let a = optimize_patch(std::slice::from_ref(&det), &train, &one).unwrap().trace[0];
    let b = optimize_patch(std::slice::from_ref(&other), &train, &one)
        .unwrap()
        .trace[0];
    let both = optimize_patch(&[det, other], &train, &one).unwrap().trace[0];
    assert!((both.obj - (a.obj + b.obj)).abs() < 1e-12);
    assert_eq!(both.black, a.black);
}
