use std::fs;

use irpatch_core::rng::{indexed, Stream};
use irpatch_core::scene::{
    generate_dataset, generate_scene, generate_scene_with_mask, read_dataset, split_ids, write_dataset, Dataset,
    Manifest, SceneConfig, MAX_PERSON_IOU,
};
use irpatch_core::Error;
use proptest::prelude::*;
use rayon::prelude::*;

#[test]
fn persons_are_warmer_than_background() {
    let cfg = SceneConfig::default();
    let failures: Vec<(usize, f64)> = (0..10_000usize)
        .into_par_iter()
        .filter_map(|i| {
            let (scene, _, mask) = generate_scene_with_mask(&mut indexed(99, Stream::Scene, i as u64), &cfg, i);
            let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
            for (v, &m) in scene.image.data().iter().zip(&mask) {
                if m {
                    fg += v;
                    nf += 1;
                } else {
                    bg += v;
                    nb += 1;
                }
            }
            if nf == 0 {
                return None;
            }
            let gap = fg / nf as f64 - bg / nb as f64;
            (gap < 0.2).then_some((i, gap))
        })
        .collect();
    assert!(
        failures.is_empty(),
        "{} scenes below contrast: {:?}",
        failures.len(),
        &failures[..failures.len().min(5)]
    );
}

proptest! {
    #[test]
    fn generated_scenes_respect_invariants(seed in any::<u64>()) {
        let cfg = SceneConfig::default();
        let (scene, _) = generate_scene(&mut indexed(seed, Stream::Scene, 0), &cfg, 0);
        prop_assert!(scene.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(scene.boxes.len() <= cfg.persons[1]);
        for (i, b) in scene.boxes.iter().enumerate() {
            prop_assert!(b.within(cfg.size as f64, cfg.size as f64));
            prop_assert!(b.width() >= 4.0 && b.height() >= 8.0 && b.height() > b.width());
            for o in &scene.boxes[i + 1..] {
                prop_assert!(b.iou(o) <= MAX_PERSON_IOU);
            }
        }
    }

    #[test]
    fn split_is_a_deterministic_partition(count in 0usize..300, seed in any::<u64>()) {
        let (tr, te) = split_ids(count, seed);
        prop_assert_eq!((tr.clone(), te.clone()), split_ids(count, seed));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..count).collect::<Vec<_>>());
        prop_assert_eq!(tr.len(), (count as f64 * 0.8).round() as usize);
    }
}

#[test]
fn dataset_round_trip_is_exact() {
    let ds = generate_dataset(100, 42, &SceneConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn empty_dataset_round_trips() {
    let ds = Dataset {
        manifest: Manifest {
            seed: 0,
            config: SceneConfig::default(),
            train: vec![],
            test: vec![],
            placement_shortfall: vec![],
        },
        scenes: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = SceneConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&generate_dataset(5, 7, &cfg).unwrap(), a.path()).unwrap();
    write_dataset(&generate_dataset(5, 7, &cfg).unwrap(), b.path()).unwrap();
    for f in ["annotations.jsonl", "manifest.json", "images/0.pgm", "images/4.pgm"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

fn expect_format_error(dir: &std::path::Path, needle: &str) {
    match read_dataset(dir) {
        Err(Error::Format { path, .. }) | Err(Error::Io { path, .. }) => {
            assert!(path.to_string_lossy().contains(needle), "{path:?}");
        }
        other => panic!("expected rejection naming {needle}, got {other:?}"),
    }
}

#[test]
fn corrupt_datasets_are_rejected_with_the_file() {
    let ds = generate_dataset(6, 1, &SceneConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("annotations.jsonl");

    write_dataset(&ds, dir.path()).unwrap();
    let text = fs::read_to_string(&ann).unwrap();
    let inverted = text.replacen("\"boxes\":[[", "\"boxes\":[[90,0,80,10],[", 1);
    assert_ne!(inverted, text);
    fs::write(&ann, inverted).unwrap();
    expect_format_error(dir.path(), "annotations.jsonl");

    write_dataset(&ds, dir.path()).unwrap();
    fs::write(&ann, "{not json\n").unwrap();
    expect_format_error(dir.path(), "annotations.jsonl");

    write_dataset(&ds, dir.path()).unwrap();
    fs::write(dir.path().join("images/3.pgm"), b"P5\n4 4\n255\nxx").unwrap();
    expect_format_error(dir.path(), "3.pgm");

    write_dataset(&ds, dir.path()).unwrap();
    fs::remove_file(&ann).unwrap();
    expect_format_error(dir.path(), "annotations.jsonl");
}
