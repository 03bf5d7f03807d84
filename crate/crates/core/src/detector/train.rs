//! Supervised training with Adam.

use irpatch_diffcore::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward_raw, head_channel, DetectorWeights, Variant, ANCHOR, STRIDE};
use crate::eval::{clean_ap, DETECTION_THRESHOLD};
use crate::rng::{indexed, Rng, Stream};
use crate::scene::{BBox, Scene};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Test AP is measured every this many epochs (0 disables).
    pub eval_every: usize,
    pub box_weight: f64,
    /// Chance that each training person gets a uniform cool block pasted
    /// over part of the body.
    pub occlusion_prob: f64,
    /// Block side as a fraction of the box height.
    pub occlusion_size: [f64; 2],
    /// Block intensity range.
    pub occlusion_level: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
            eval_every: 5,
            box_weight: 5.0,
            occlusion_prob: 0.0,
            occlusion_size: [0.1, 0.35],
            occlusion_level: [0.0, 0.45],
        }
    }
}

/// Regression targets for the cells that contain a box center.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTargets {
    /// 1 at positive cells, 0 elsewhere.
    pub objectness: Vec<f64>,
    /// `(cell, [center fraction x, center fraction y, ln(w/ANCHOR), ln(h/ANCHOR)])`.
    pub positives: Vec<(usize, [f64; 4])>,
}

/// The cell containing each box center is positive; when two centers share
/// a cell the first box wins.
pub fn assign_targets(boxes: &[BBox], rows: usize, cols: usize) -> CellTargets {
    let s = STRIDE as f64;
    let mut objectness = vec![0.0; rows * cols];
    let mut positives = Vec::new();
    for b in boxes {
        let (cx, cy) = b.center();
        let col = ((cx / s).floor() as usize).min(cols - 1);
        let row = ((cy / s).floor() as usize).min(rows - 1);
        let cell = row * cols + col;
        if objectness[cell] == 1.0 {
            continue;
        }
        objectness[cell] = 1.0;
        positives.push((
            cell,
            [
                (cx / s - col as f64).clamp(0.0, 1.0),
                (cy / s - row as f64).clamp(0.0, 1.0),
                (b.width() / ANCHOR).ln(),
                (b.height() / ANCHOR).ln(),
            ],
        ));
    }
    CellTargets { objectness, positives }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub weights: DetectorWeights,
    pub log: Vec<EpochLog>,
}

impl TrainReport {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,test_ap\n");
        for e in &self.log {
            let ap = e.test_ap.map(|a| crate::eval::sig6(a).to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", e.epoch, crate::eval::sig6(e.train_loss), ap));
        }
        s
    }

    /// Test AP at the last checkpoint.
    pub fn final_test_ap(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|e| e.test_ap)
    }
}

/// Copy of the scene image with random uniform blocks over some persons.
pub fn occlude(scene: &Scene, cfg: &TrainConfig, rng: &mut Rng) -> Tensor {
    let mut img = scene.image.clone();
    let (h, w) = (scene.height(), scene.width());
    for b in &scene.boxes {
        if !rng.gen_bool(cfg.occlusion_prob.clamp(0.0, 1.0)) {
            continue;
        }
        let frac = uniform(rng, cfg.occlusion_size);
        let level = uniform(rng, cfg.occlusion_level);
        let (fy, fx): (f64, f64) = (rng.gen(), rng.gen());
        let r0 = b.y_min.max(0.0).ceil() as usize;
        let c0 = b.x_min.max(0.0).ceil() as usize;
        let rows = (b.y_max.min(h as f64).floor() as usize).saturating_sub(r0);
        let cols = (b.x_max.min(w as f64).floor() as usize).saturating_sub(c0);
        let side = ((frac * b.height()).round() as usize).min(rows).min(cols);
        if side == 0 {
            continue;
        }
        let top = r0 + (fy * (rows - side) as f64).round() as usize;
        let left = c0 + (fx * (cols - side) as f64).round() as usize;
        for r in top..top + side {
            img.data_mut()[r * w + left..r * w + left + side].fill(level);
        }
    }
    img
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] < r[1] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Detection loss of one image recorded on `tape`.
fn image_loss(
    tape: &mut Tape,
    variant: &Variant,
    params: &[Var],
    image: Tensor,
    scene: &Scene,
    box_weight: f64,
) -> Result<Var> {
    let x = tape.constant(image);
    let raw = forward_raw(tape, variant, params, x)?;
    let s = tape.shape(raw).to_vec();
    let (rows, cols) = (s[1], s[2]);
    let cells = rows * cols;
    let targets = assign_targets(&scene.boxes, rows, cols);

    let obj = head_channel(tape, raw, 0)?;
    let obj_bce = tape.bce_with_logits(obj, targets.objectness)?;
    let mut loss = tape.reduce_sum(obj_bce)?;
    if targets.positives.is_empty() {
        return Ok(loss);
    }
    let p = targets.positives.len();
    let at = |ch: usize| targets.positives.iter().map(move |(c, _)| Some(ch * cells + c));
    let xy = tape.gather(raw, at(1).chain(at(2)).collect(), &[2 * p])?;
    let xy = tape.sigmoid(xy)?;
    let xy_target = (0..2)
        .flat_map(|k| targets.positives.iter().map(move |(_, t)| t[k]))
        .collect();
    let wh = tape.gather(raw, at(3).chain(at(4)).collect(), &[2 * p])?;
    let wh_target = (2..4)
        .flat_map(|k| targets.positives.iter().map(move |(_, t)| t[k]))
        .collect();
    let cls = tape.gather(raw, at(5).collect(), &[p])?;

    let xy_loss = tape.smooth_l1(xy, xy_target, 0.1)?;
    let wh_loss = tape.smooth_l1(wh, wh_target, 0.1)?;
    let cls_loss = tape.bce_with_logits(cls, vec![1.0; p])?;
    let box_sum = tape.concat(&[xy_loss, wh_loss], 0)?;
    let box_sum = tape.reduce_sum(box_sum)?;
    let box_term = tape.scalar_mul(box_sum, box_weight)?;
    let cls_sum = tape.reduce_sum(cls_loss)?;
    loss = tape.add(loss, box_term)?;
    Ok(tape.add(loss, cls_sum)?)
}

/// Loss and parameter gradients for one image.
fn image_gradient(
    weights: &DetectorWeights,
    image: Tensor,
    scene: &Scene,
    box_weight: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = weights.load(&mut tape, true);
    let loss = image_loss(&mut tape, &weights.variant, &params, image, scene, box_weight)?;
    let mut grads = tape.backward(loss)?;
    let g = params
        .iter()
        .zip(&weights.params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((tape.value(loss).item(), g))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains `variant` from a seeded initialization with a per-epoch cosine
/// learning-rate decay down to 5% of `lr`. Test AP is logged every
/// `eval_every` epochs and after the last one.
pub fn train(train_set: &[&Scene], test_set: &[&Scene], variant: Variant, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("invalid training settings {cfg:?}")));
    }
    let mut weights = DetectorWeights::init(variant, cfg.seed);
    let mut adam = Adam::new(&weights.params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let has_test = test_set.iter().any(|s| !s.boxes.is_empty());
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut indexed(cfg.seed, Stream::Train, epoch as u64));
        let mut total = 0.0;
        let progress = (epoch - 1) as f64 / cfg.epochs as f64;
        let lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| {
                    let scene = train_set[i];
                    let key = (epoch as u64) << 32 | i as u64;
                    let image = occlude(scene, cfg, &mut indexed(cfg.seed, Stream::Augment, key));
                    image_gradient(&weights, image, scene, cfg.box_weight)
                })
                .collect::<Result<_>>()?;
            let mut sum: Vec<Vec<f64>> = weights.params.iter().map(|p| vec![0.0; p.len()]).collect();
            for (loss, grads) in &results {
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}, batch {b} ({} {cfg:?})",
                        weights.variant
                    )));
                }
                total += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    for (a, x) in acc.iter_mut().zip(g.data()) {
                        *a += x;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            sum.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.update(&mut weights.params, &sum, lr);
        }
        if weights.params.iter().any(|p| !p.all_finite()) {
            return Err(Error::Diverged(format!("non-finite weights after epoch {epoch}")));
        }
        let checkpoint = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let test_ap = if checkpoint && has_test {
            Some(clean_ap(&weights, test_set, DETECTION_THRESHOLD)?)
        } else {
            None
        };
        log.push(EpochLog {
            epoch,
            train_loss: total / train_set.len().max(1) as f64,
            test_ap,
        });
    }
    Ok(TrainReport { weights, log })
}

/// Minimum clean test AP for an ensemble member.
pub const ENSEMBLE_AP_FLOOR: f64 = 0.85;

/// Trains each variant with its own seed (`cfg.seed + index`). Members whose
/// final test AP misses [`ENSEMBLE_AP_FLOOR`] are listed in the error.
pub fn make_ensemble(
    train_set: &[&Scene],
    test_set: &[&Scene],
    variants: &[Variant],
    cfg: &TrainConfig,
) -> Result<Vec<TrainReport>> {
    let reports: Vec<TrainReport> = variants
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let member = TrainConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            train(train_set, test_set, v.clone(), &member)
        })
        .collect::<Result<_>>()?;
    let weak: Vec<String> = reports
        .iter()
        .filter(|r| r.final_test_ap().is_none_or(|ap| ap < ENSEMBLE_AP_FLOOR))
        .map(|r| format!("{} (AP {:?})", r.weights.variant.name, r.final_test_ap()))
        .collect();
    if !weak.is_empty() {
        return Err(Error::Invalid(format!(
            "ensemble members below AP {ENSEMBLE_AP_FLOOR}: {}",
            weak.join(", ")
        )));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_mark_center_cells() {
        let b = BBox::new(20.0, 30.0, 30.0, 60.0).unwrap();
        let t = assign_targets(&[b], 8, 8);
        let cell = 2 * 8 + 1;
        assert_eq!(t.objectness.iter().sum::<f64>(), 1.0);
        assert_eq!(t.objectness[cell], 1.0);
        let [fx, fy, lw, lh] = t.positives[0].1;
        assert!((fx - (25.0 / 16.0 - 1.0)).abs() < 1e-12);
        assert!((fy - (45.0 / 16.0 - 2.0)).abs() < 1e-12);
        assert!((lw - (10.0f64 / 32.0).ln()).abs() < 1e-12);
        assert!((lh - (30.0f64 / 32.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let v = Variant::by_name("narrow").unwrap();
        let r = train(
            &[],
            &[],
            v.clone(),
            &TrainConfig {
                epochs: 0,
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.weights, DetectorWeights::init(v, 9));
        assert!(r.log.is_empty());
    }
}
