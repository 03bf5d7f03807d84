#![allow(dead_code)]

use irpatch_core::Error;
use irpatch_diffcore::DiffError;

/// Lets core functions run inside a gradient-check closure.
pub fn lift(e: Error) -> DiffError {
    match e {
        Error::Diff(d) => d,
        other => DiffError::Domain {
            op: "core",
            detail: other.to_string(),
        },
    }
}

use irpatch_core::detector::Detection;
use irpatch_core::rng::Rng;
use irpatch_core::scene::BBox;
use rand::Rng as _;

/// Interpolated AP recomputed from scratch for every rank cutoff.
pub fn brute_force_ap(dets: &[Vec<Detection>], gts: &[Vec<BBox>], thr: f64) -> f64 {
    let mut ranked: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.iter().map(move |x| (i, *x)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let mut pr = Vec::new();
    for k in 1..=ranked.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (img, d) in &ranked[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[*img].iter().enumerate() {
                let o = d.bbox.iou(g);
                if !used[*img][j] && o >= thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[*img][j] = true;
                tp += 1;
            }
        }
        pr.push((tp as f64 / num_gt as f64, tp as f64 / k as f64));
    }
    let mut levels: Vec<f64> = pr.iter().map(|p| p.0).collect();
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = pr.iter().filter(|x| x.0 >= r).map(|x| x.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

fn grid_box(rng: &mut Rng) -> BBox {
    let x = rng.gen_range(0..4) as f64 * 4.0;
    let y = rng.gen_range(0..4) as f64 * 4.0;
    let w = rng.gen_range(1..4) as f64 * 4.0;
    let h = rng.gen_range(1..4) as f64 * 4.0;
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Up to 5 images with up to 3 detections (distinct scores) and up to 3
/// ground-truth boxes each; detections are often jittered copies of ground
/// truth. At least one ground-truth box overall.
pub fn tiny_instance(rng: &mut Rng) -> (Vec<Vec<Detection>>, Vec<Vec<BBox>>) {
    loop {
        let images = rng.gen_range(1..=5);
        let mut scores: Vec<f64> = Vec::new();
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..images {
            let g: Vec<BBox> = (0..rng.gen_range(0..=3)).map(|_| grid_box(rng)).collect();
            let d: Vec<Detection> = (0..rng.gen_range(0..=3))
                .map(|_| {
                    let bbox = match g.get(rng.gen_range(0..4)) {
                        Some(b) => {
                            let dx = rng.gen_range(-2.0..2.0);
                            BBox::new(b.x_min + dx, b.y_min, b.x_max + dx, b.y_max).unwrap()
                        }
                        None => grid_box(rng),
                    };
                    let mut score = rng.gen_range(0.01..0.99);
                    while scores.contains(&score) {
                        score = rng.gen_range(0.01..0.99);
                    }
                    scores.push(score);
                    Detection { bbox, score }
                })
                .collect();
            gts.push(g);
            dets.push(d);
        }
        if gts.iter().any(|g| !g.is_empty()) {
            return (dets, gts);
        }
    }
}
