//! Patch compositing, the objectness and black-ratio losses, and the
//! momentum-SGD loop that optimizes the pattern logits.

use std::path::Path;

use irpatch_diffcore::{Tape, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::detector::{forward_raw, objectness, DetectionMap, DetectorWeights, STRIDE};
use crate::pattern::{
    black_ratio_loss, gumbel_softmax, sample_gumbel, tile, write_all, Patch, PatternLatent, DEFAULT_TAU,
};
use crate::rng::{indexed, stream, Rng, Stream};
use crate::scene::{BBox, Scene};
use crate::warp::{
    control_grid, crop, eot_transform, sample_crop, sample_eot, sample_tps_targets, tps_fit, tps_warp, TransformConfig,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Basic pattern side `N`.
    pub side: usize,
    pub tile_reps: usize,
    pub lambda: f64,
    pub tau: f64,
    /// Patch side as a fraction of the person box height.
    pub proportion_range: [f64; 2],
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Decoded-box IOU with a person above which a cell counts toward the
    /// objectness loss.
    pub obj_iou: f64,
    pub transform: TransformConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            side: 20,
            tile_reps: 5,
            lambda: 0.1,
            tau: DEFAULT_TAU,
            proportion_range: [0.1, 0.3],
            lr: 10.0,
            momentum: 0.9,
            iterations: 1000,
            batch_size: 16,
            seed: 0,
            obj_iou: 0.3,
            transform: TransformConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        let [lo, hi] = self.proportion_range;
        let bad = |m: String| Err(Error::Config(m));
        if self.side == 0 || self.tile_reps == 0 {
            return bad(format!(
                "pattern side {} and tile_reps {} must be >= 1",
                self.side, self.tile_reps
            ));
        }
        if !(self.lambda >= 0.0) || !(self.tau > 0.0) {
            return bad(format!("lambda {} must be >= 0 and tau {} > 0", self.lambda, self.tau));
        }
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "proportion_range {:?} must lie in (0, 1]",
                self.proportion_range
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == 0 {
            return bad(format!(
                "invalid optimizer settings lr {} momentum {} batch {}",
                self.lr, self.momentum, self.batch_size
            ));
        }
        if self.transform.crop_range[1] > self.side * self.tile_reps {
            return bad(format!(
                "crop_range {:?} exceeds the {}px tiled pattern",
                self.transform.crop_range,
                self.side * self.tile_reps
            ));
        }
        Ok(())
    }

    pub fn chain(&self) -> ChainConfig {
        ChainConfig {
            transform: self.transform.clone(),
            proportion_range: self.proportion_range,
        }
    }
}

/// Transform-chain settings shared by optimization and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub transform: TransformConfig,
    pub proportion_range: [f64; 2],
}

/// Independent random streams for the per-box transform draws.
pub struct ChainRngs {
    pub crop: Rng,
    pub tps: Rng,
    pub eot: Rng,
}

impl ChainRngs {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            crop: stream(seed, Stream::Crop),
            tps: stream(seed, Stream::Tps),
            eot: stream(seed, Stream::Eot),
        }
    }

    /// Streams dedicated to one scene, so every condition evaluated on that
    /// scene sees the same placements.
    pub fn for_scene(seed: u64, scene_id: usize) -> Self {
        let id = scene_id as u64;
        Self {
            crop: indexed(seed, Stream::Crop, id),
            tps: indexed(seed, Stream::Tps, id),
            eot: indexed(seed, Stream::Eot, id),
        }
    }
}

/// Integer pixel region fully inside `bbox`: `(row0, col0, rows, cols)`.
fn interior(bbox: &BBox) -> (usize, usize, usize, usize) {
    let r0 = bbox.y_min.max(0.0).ceil();
    let c0 = bbox.x_min.max(0.0).ceil();
    let rows = (bbox.y_max.floor() - r0).max(0.0);
    let cols = (bbox.x_max.floor() - c0).max(0.0);
    (r0 as usize, c0 as usize, rows as usize, cols as usize)
}

/// Pastes `patch` (a square tape value) into `image` inside `bbox`.
///
/// The patch is bilinearly resized to side `round(proportion * box height)`,
/// clamped so it fits inside the box, and placed at `offset` (fractions of
/// the free vertical and horizontal range). Returns `None` when the box is
/// too small to hold a one-pixel patch.
pub fn paste_patch(
    tape: &mut Tape,
    image: Var,
    bbox: &BBox,
    patch: Var,
    proportion: f64,
    offset: [f64; 2],
) -> Result<Option<Var>> {
    let ps = tape.shape(patch).to_vec();
    let is = tape.shape(image).to_vec();
    if ps.len() != 2 || ps[0] != ps[1] || is.len() != 2 {
        return Err(Error::Invalid(format!(
            "paste_patch expects a square patch, got {ps:?} into {is:?}"
        )));
    }
    if !(proportion >= 0.0) {
        return Err(Error::Invalid(format!("proportion must be >= 0, got {proportion}")));
    }
    let (r0, c0, rows, cols) = interior(&bbox.clamped(is[1] as f64, is[0] as f64));
    let side = ((proportion * bbox.height()).round() as usize).min(rows).min(cols);
    if side == 0 {
        return Ok(None);
    }
    let src = ps[0] as f64;
    let scale = src / side as f64;
    let coord = |i: usize| ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, src - 1.0);
    let points: Vec<(f64, f64)> = (0..side * side).map(|i| (coord(i / side), coord(i % side))).collect();
    let resized = tape.bilinear_sample(patch, &points, &[side, side])?;
    let top = r0 + (offset[0].clamp(0.0, 1.0) * (rows - side) as f64).round() as usize;
    let left = c0 + (offset[1].clamp(0.0, 1.0) * (cols - side) as f64).round() as usize;
    Ok(Some(tape.paste(image, resized, top, left)?))
}

/// [`paste_patch`] with proportion and position drawn uniformly.
pub fn paste_patch_random(
    tape: &mut Tape,
    image: Var,
    bbox: &BBox,
    patch: Var,
    rng: &mut Rng,
    proportion_range: [f64; 2],
) -> Result<Option<Var>> {
    let [lo, hi] = proportion_range;
    let proportion = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let offset = [rng.gen(), rng.gen()];
    paste_patch(tape, image, bbox, patch, proportion, offset)
}

/// Larger crops map to larger patches on the body.
pub fn proportion_for_crop(crop_side: usize, crop_range: [usize; 2], proportion_range: [f64; 2]) -> f64 {
    let [cmin, cmax] = crop_range;
    let [lo, hi] = proportion_range;
    if cmax <= cmin {
        return lo;
    }
    let t = (crop_side.clamp(cmin, cmax) - cmin) as f64 / (cmax - cmin) as f64;
    lo + t * (hi - lo)
}

/// Crop, TPS deformation and EOT of one patch instance drawn from the tiled
/// pattern. Returns the transformed square and its crop side.
pub fn transform_instance(
    tape: &mut Tape,
    tiled: Var,
    cfg: &TransformConfig,
    rngs: &mut ChainRngs,
) -> Result<(Var, usize, [f64; 2])> {
    let s = tape.shape(tiled).to_vec();
    let spec = sample_crop(s[0], s[1], cfg.crop_range, &mut rngs.crop)?;
    let mut x = crop(tape, tiled, spec)?;
    if spec.side >= 2 {
        let src = control_grid(cfg.tps_k, spec.side);
        let dst = sample_tps_targets(&src, spec.side, cfg.tps_sigma * spec.side as f64, &mut rngs.tps);
        let field = tps_fit(&dst, &src, 0.0)?;
        x = tps_warp(tape, x, &field)?;
    }
    let params = sample_eot(cfg, &mut rngs.eot);
    x = eot_transform(tape, x, &params, &mut rngs.eot)?;
    Ok((x, spec.side, params.translation))
}

/// Applies the full chain to every person box of `scene`. Returns the
/// patched image and the number of boxes that were too small to patch.
pub fn patch_scene(
    tape: &mut Tape,
    tiled: Var,
    scene: &Scene,
    cfg: &ChainConfig,
    rngs: &mut ChainRngs,
) -> Result<(Var, usize)> {
    let mut image = tape.constant(scene.image.clone());
    let mut skipped = 0;
    for bbox in &scene.boxes {
        let (instance, crop_side, offset) = transform_instance(tape, tiled, &cfg.transform, rngs)?;
        let proportion = proportion_for_crop(crop_side, cfg.transform.crop_range, cfg.proportion_range);
        match paste_patch(tape, image, bbox, instance, proportion, offset)? {
            Some(next) => image = next,
            None => skipped += 1,
        }
    }
    Ok((tape.clamp(image, 0.0, 1.0)?, skipped))
}

/// Renders `scene` wearing the hard `patch` (no gradients).
pub fn render_patched(
    scene: &Scene,
    patch: &Patch,
    reps: usize,
    cfg: &ChainConfig,
    rngs: &mut ChainRngs,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let basic = tape.constant(patch.grid().clone());
    let tiled = tile(&mut tape, basic, reps)?;
    let (img, _) = patch_scene(&mut tape, tiled, scene, cfg, rngs)?;
    Ok(tape.value(img).clone())
}

/// Cells whose decoded box overlaps a person (IOU >= `min_iou`) or that
/// contain a person's center.
pub fn person_cells(map: &DetectionMap, boxes: &[BBox], min_iou: f64) -> Vec<usize> {
    let s = STRIDE as f64;
    let mut cells: Vec<usize> = (0..map.rows * map.cols)
        .filter(|&c| {
            let b = map.cell_box(c);
            boxes.iter().any(|g| b.iou(g) >= min_iou)
        })
        .collect();
    for g in boxes {
        let (cx, cy) = g.center();
        let col = ((cx / s) as usize).min(map.cols - 1);
        let row = ((cy / s) as usize).min(map.rows - 1);
        cells.push(row * map.cols + col);
    }
    cells.sort_unstable();
    cells.dedup();
    cells
}

/// Highest objectness among the person cells of one image, or `None` when
/// the image has no persons.
pub fn image_objectness(
    tape: &mut Tape,
    detector: &DetectorWeights,
    params: &[Var],
    image: Var,
    boxes: &[BBox],
    min_iou: f64,
) -> Result<Option<Var>> {
    if boxes.is_empty() {
        return Ok(None);
    }
    let raw = forward_raw(tape, &detector.variant, params, image)?;
    let map = DetectionMap::from_raw(tape.value(raw));
    let cells = person_cells(&map, boxes, min_iou);
    let obj = objectness(tape, raw)?;
    let n = cells.len();
    let picked = tape.gather(obj, cells.into_iter().map(Some).collect(), &[n])?;
    Ok(Some(tape.max_axis(picked, 0)?))
}

/// Batch mean of per-image objectness; images without persons count as 0.
pub fn objectness_loss(tape: &mut Tape, per_image: &[Option<Var>]) -> Result<Var> {
    if per_image.is_empty() {
        return Err(Error::Invalid("objectness loss over an empty batch".into()));
    }
    let present: Vec<Var> = per_image.iter().flatten().copied().collect();
    let m = per_image.len() as f64;
    if present.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut acc = present[0];
    for &v in &present[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scalar_mul(acc, 1.0 / m)?)
}

/// `L_obj + lambda * L_black`.
pub fn total_loss(l_obj: f64, l_black: f64, lambda: f64) -> f64 {
    l_obj + lambda * l_black
}

/// `sum_i L_obj_i + lambda * L_black`; equal to [`total_loss`] for one
/// detector.
pub fn ensemble_loss(l_obj: &[f64], l_black: f64, lambda: f64) -> f64 {
    let sum = l_obj[1..].iter().fold(l_obj[0], |a, b| a + b);
    total_loss(sum, l_black, lambda)
}

/// Tape form of [`ensemble_loss`]. Returns `(L, sum of L_obj)`.
pub fn ensemble_loss_var(tape: &mut Tape, l_obj: &[Var], l_black: Var, lambda: f64) -> Result<(Var, Var)> {
    let mut sum = l_obj[0];
    for &v in &l_obj[1..] {
        sum = tape.add(sum, v)?;
    }
    let weighted = tape.scalar_mul(l_black, lambda)?;
    Ok((tape.add(sum, weighted)?, sum))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loss: f64,
    pub obj: f64,
    pub black: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub latent: PatternLatent,
    /// Most probable binary pattern of the final latent.
    pub patch: Patch,
    pub trace: Vec<TraceEntry>,
    pub black_ratio: f64,
    /// Person boxes skipped because they could not hold a patch.
    pub skipped_boxes: usize,
    /// Batch images without persons.
    pub empty_images: usize,
}

/// Tape values of one optimization step.
pub struct StepLoss {
    pub loss: Var,
    /// Sum over detectors of the batch objectness loss.
    pub obj: Var,
    pub black: Var,
    pub skipped_boxes: usize,
    pub empty_images: usize,
}

/// Records the full chain from pattern logits to the attack loss for one
/// batch: Gumbel-softmax with noise `gumbel`, tiling, per-box transforms
/// and pasting, every detector, and the black-ratio term.
pub fn attack_loss(
    tape: &mut Tape,
    logits: Var,
    gumbel: &Tensor,
    detectors: &[DetectorWeights],
    batch: &[&Scene],
    cfg: &AttackConfig,
    rngs: &mut ChainRngs,
) -> Result<StepLoss> {
    if detectors.is_empty() {
        return Err(Error::Invalid("at least one target detector is required".into()));
    }
    let chain = cfg.chain();
    let soft = gumbel_softmax(tape, logits, gumbel, cfg.tau)?;
    let tiled = tile(tape, soft, cfg.tile_reps)?;
    let params: Vec<Vec<Var>> = detectors.iter().map(|d| d.load(tape, false)).collect();
    let mut per_detector: Vec<Vec<Option<Var>>> = vec![Vec::with_capacity(batch.len()); detectors.len()];
    let (mut skipped_boxes, mut empty_images) = (0, 0);
    for scene in batch {
        let (image, skipped) = patch_scene(tape, tiled, scene, &chain, rngs)?;
        skipped_boxes += skipped;
        for ((d, p), out) in detectors.iter().zip(&params).zip(per_detector.iter_mut()) {
            let v = image_objectness(tape, d, p, image, &scene.boxes, cfg.obj_iou)?;
            if v.is_none() {
                empty_images += 1;
            }
            out.push(v);
        }
    }
    let l_obj: Vec<Var> = per_detector
        .iter()
        .map(|v| objectness_loss(tape, v))
        .collect::<Result<_>>()?;
    let black = black_ratio_loss(tape, logits)?;
    let (loss, obj) = ensemble_loss_var(tape, &l_obj, black, cfg.lambda)?;
    Ok(StepLoss {
        loss,
        obj,
        black,
        skipped_boxes,
        empty_images,
    })
}

/// Optimizes the pattern logits against frozen `detectors` over `scenes`.
pub fn optimize_patch(detectors: &[DetectorWeights], scenes: &[&Scene], cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if detectors.is_empty() {
        return Err(Error::Invalid("at least one target detector is required".into()));
    }
    let usable: Vec<&Scene> = scenes.iter().copied().filter(|s| !s.boxes.is_empty()).collect();
    if usable.is_empty() && cfg.iterations > 0 {
        return Err(Error::Invalid("no training scenes contain persons".into()));
    }

    let mut latent = PatternLatent::init(cfg.side, &mut stream(cfg.seed, Stream::Init));
    let mut velocity = vec![0.0; latent.logits().len()];
    let mut gumbel_rng = stream(cfg.seed, Stream::Gumbel);
    let mut batch_rng = stream(cfg.seed, Stream::Batch);
    let mut rngs = ChainRngs::from_seed(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let (mut skipped_boxes, mut empty_images) = (0, 0);

    for iteration in 0..cfg.iterations {
        let mut tape = Tape::new();
        let logits = tape.leaf(latent.logits().clone());
        let g = sample_gumbel(cfg.side, &mut gumbel_rng);
        let batch: Vec<&Scene> = (0..cfg.batch_size)
            .map(|_| usable[batch_rng.gen_range(0..usable.len())])
            .collect();
        let step = attack_loss(&mut tape, logits, &g.g, detectors, &batch, cfg, &mut rngs)?;
        skipped_boxes += step.skipped_boxes;
        empty_images += step.empty_images;
        let (loss, obj_sum, l_black) = (step.loss, step.obj, step.black);
        let entry = TraceEntry {
            iteration,
            loss: tape.value(loss).item(),
            obj: tape.value(obj_sum).item(),
            black: tape.value(l_black).item(),
        };
        if !entry.loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite attack loss at iteration {iteration}; config {}",
                serde_json::to_string(cfg).unwrap_or_default()
            )));
        }
        trace.push(entry);
        let grads = tape.backward(loss)?;
        if let Some(g) = grads.get(logits) {
            for ((z, v), &gi) in latent.logits_mut().iter_mut().zip(velocity.iter_mut()).zip(g.data()) {
                *v = cfg.momentum * *v + gi;
                *z -= cfg.lr * *v;
            }
        }
    }

    let patch = latent.mode();
    Ok(AttackResult {
        black_ratio: patch.black_ratio(),
        latent,
        patch,
        trace,
        skipped_boxes,
        empty_images,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Random,
    Blank,
}

/// Control patterns: iid fair coin flips, or all black.
pub fn make_baseline_patch(kind: BaselineKind, side: usize, rng: &mut Rng) -> Result<Patch> {
    if side == 0 {
        return Err(Error::Invalid("baseline patch side must be >= 1".into()));
    }
    let grid = match kind {
        BaselineKind::Random => Tensor::from_fn(&[side, side], |_| if rng.gen::<bool>() { 1.0 } else { 0.0 }),
        BaselineKind::Blank => Tensor::zeros(&[side, side]),
    };
    Patch::hard(grid)
}

#[derive(Serialize)]
struct ResultManifest<'a> {
    config: &'a AttackConfig,
    detectors: Vec<String>,
    black_ratio: f64,
    iterations: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    skipped_boxes: usize,
    empty_images: usize,
}

pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut s = String::from("iteration,loss,obj,black\n");
    for t in trace {
        s.push_str(&format!(
            "{},{},{},{}\n",
            t.iteration,
            crate::eval::sig6(t.loss),
            crate::eval::sig6(t.obj),
            crate::eval::sig6(t.black)
        ));
    }
    s
}

/// Writes `patch.png`, `latent.bin`, `trace.csv` and `result.json` into `dir`.
pub fn write_attack_result(
    result: &AttackResult,
    cfg: &AttackConfig,
    detectors: &[DetectorWeights],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    result.patch.write_png(&dir.join("patch.png"))?;
    result.latent.write(&dir.join("latent.bin"), cfg.tau)?;
    write_all(&dir.join("trace.csv"), trace_csv(&result.trace).as_bytes())?;
    let manifest = ResultManifest {
        config: cfg,
        detectors: detectors
            .iter()
            .map(|d| format!("{} seed={}", d.variant, d.seed))
            .collect(),
        black_ratio: crate::eval::sig6(result.black_ratio),
        iterations: result.trace.len(),
        initial_loss: result.trace.first().map(|t| crate::eval::sig6(t.loss)),
        final_loss: result.trace.last().map(|t| crate::eval::sig6(t.loss)),
        skipped_boxes: result.skipped_boxes,
        empty_images: result.empty_images,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    write_all(&dir.join("result.json"), text.as_bytes())
}
