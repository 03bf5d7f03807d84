//! Detection evaluation: IOU matching, precision-recall curves, AP, AP
//! decrease and attack success rate under patch conditions.

use irpatch_diffcore::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{render_patched, ChainConfig, ChainRngs};
use crate::detector::{decode, detect, Detection, DetectorWeights, DEFAULT_NMS_IOU};
use crate::pattern::Patch;
use crate::scene::{BBox, Scene};
use crate::warp::TransformConfig;
use crate::{Error, Result};

pub const REPORT_SCHEMA: u32 = 1;
/// Detector output threshold for counting a detection.
pub const DETECTION_THRESHOLD: f64 = 0.7;
pub const MATCH_IOU: f64 = 0.5;

/// Rounds to 6 significant digits.
pub fn sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per ranked detection, in descending score order.
    pub points: Vec<PrPoint>,
    pub ap: f64,
    pub num_gt: usize,
}

/// Ranks all detections by score (ties keep image then input order) and
/// matches each to the unmatched ground-truth box of its image with the
/// highest IOU; a match needs IOU >= `iou_thresh`. AP is the area under the
/// precision envelope over all recall steps.
pub fn pr_curve(detections: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thresh: f64) -> Result<PrCurve> {
    if detections.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} detection lists for {} images",
            detections.len(),
            gts.len()
        )));
    }
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return Err(Error::Invalid("AP is undefined without ground-truth boxes".into()));
    }
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.iter().map(move |d| (i, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(ranked.len());
    for (img, det) in ranked {
        let best = gts[img]
            .iter()
            .enumerate()
            .filter(|(k, _)| !matched[img][*k])
            .map(|(k, g)| (k, iou(&det.bbox, g)))
            .filter(|(_, o)| *o >= iou_thresh)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((k, _)) => {
                matched[img][k] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        points.push(PrPoint {
            score: det.score,
            recall: tp as f64 / num_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    let ap = interpolated_ap(&points);
    Ok(PrCurve { points, ap, num_gt })
}

fn interpolated_ap(points: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

/// Clean minus condition AP, in points (percent of full scale).
pub fn ap_decrease(clean: &PrCurve, cond: &PrCurve) -> f64 {
    100.0 * (clean.ap - cond.ap)
}

/// Fraction of frames in which the person went undetected.
pub fn asr(detected: &[bool]) -> Result<f64> {
    if detected.is_empty() {
        return Err(Error::Invalid("ASR needs at least one frame".into()));
    }
    Ok(detected.iter().filter(|d| !**d).count() as f64 / detected.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GtMode {
    /// Synthetic ground-truth boxes.
    #[default]
    Dataset,
    /// The detector's own detections on the unpatched image.
    CleanModelOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub gt_mode: GtMode,
    pub tile_reps: usize,
    pub proportion_range: [f64; 2],
    pub transform: TransformConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            score_threshold: DETECTION_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            match_iou: MATCH_IOU,
            gt_mode: GtMode::Dataset,
            tile_reps: 5,
            proportion_range: [0.1, 0.3],
            transform: TransformConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn chain(&self) -> ChainConfig {
        ChainConfig {
            transform: self.transform.clone(),
            proportion_range: self.proportion_range,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub ap: f64,
    /// Clean AP minus condition AP, in points.
    pub ap_drop: f64,
    pub asr: f64,
    /// The condition scored better than clean.
    pub improved_over_clean: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub detector: String,
    /// False for detectors that were not attacked directly.
    pub attacked: bool,
    pub clean_ap: f64,
    pub clean_asr: f64,
    pub frames: usize,
    pub conditions: Vec<ConditionReport>,
    /// Clean curve followed by one curve per condition.
    #[serde(skip)]
    pub curves: Vec<PrCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub images: usize,
    pub detectors: Vec<DetectorReport>,
}

impl EvalReport {
    pub fn condition(&self, detector: usize, name: &str) -> Option<&ConditionReport> {
        self.detectors.get(detector)?.conditions.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rounded()).expect("serializable")
    }

    fn rounded(&self) -> Self {
        let mut r = self.clone();
        for d in &mut r.detectors {
            d.clean_ap = sig6(d.clean_ap);
            d.clean_asr = sig6(d.clean_asr);
            for c in &mut d.conditions {
                c.ap = sig6(c.ap);
                c.ap_drop = sig6(c.ap_drop);
                c.asr = sig6(c.asr);
            }
        }
        r
    }
}

/// One patch condition to evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub name: String,
    pub patch: Patch,
}

fn detect_all(detector: &DetectorWeights, images: &[&Tensor], cfg: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    images
        .par_iter()
        .map(|img| Ok(decode(&detect(detector, img)?, cfg.score_threshold, cfg.nms_iou)))
        .collect()
}

/// Clean and patched AP, AP decrease and ASR for every detector and
/// condition. Each scene gets the same transform draws under every
/// condition. `attacked[i]` marks detectors the patches were optimized on.
pub fn evaluate_conditions(
    detectors: &[(DetectorWeights, bool)],
    scenes: &[&Scene],
    conditions: &[Condition],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let chain = cfg.chain();
    let rendered: Vec<Vec<Tensor>> = conditions
        .iter()
        .map(|c| {
            scenes
                .par_iter()
                .map(|s| {
                    render_patched(
                        s,
                        &c.patch,
                        cfg.tile_reps,
                        &chain,
                        &mut ChainRngs::for_scene(cfg.seed, s.id),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let clean_images: Vec<&Tensor> = scenes.iter().map(|s| &s.image).collect();
    let mut reports = Vec::with_capacity(detectors.len());
    for (det, attacked) in detectors {
        let clean = detect_all(det, &clean_images, cfg)?;
        let gts: Vec<Vec<BBox>> = match cfg.gt_mode {
            GtMode::Dataset => scenes.iter().map(|s| s.boxes.clone()).collect(),
            GtMode::CleanModelOutput => clean.iter().map(|d| d.iter().map(|x| x.bbox).collect()).collect(),
        };
        let clean_curve = pr_curve(&clean, &gts, cfg.match_iou)?;
        let clean_flags = flags_for(&clean, &gts, cfg.match_iou);
        let mut conds = Vec::with_capacity(conditions.len());
        let mut curves = Vec::with_capacity(conditions.len() + 1);
        for (c, images) in conditions.iter().zip(&rendered) {
            let refs: Vec<&Tensor> = images.iter().collect();
            let dets = detect_all(det, &refs, cfg)?;
            let curve = pr_curve(&dets, &gts, cfg.match_iou)?;
            let drop = ap_decrease(&clean_curve, &curve);
            conds.push(ConditionReport {
                name: c.name.clone(),
                ap: curve.ap,
                ap_drop: drop,
                asr: asr(&flags_for(&dets, &gts, cfg.match_iou))?,
                improved_over_clean: drop < 0.0,
            });
            curves.push(curve);
        }
        curves.insert(0, clean_curve.clone());
        reports.push(DetectorReport {
            detector: det.variant.name.clone(),
            attacked: *attacked,
            clean_ap: clean_curve.ap,
            clean_asr: asr(&clean_flags)?,
            frames: clean_flags.len(),
            conditions: conds,
            curves,
        });
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA,
        config: cfg.clone(),
        images: scenes.len(),
        detectors: reports,
    })
}

fn flags_for(dets: &[Vec<Detection>], gts: &[Vec<BBox>], match_iou: f64) -> Vec<bool> {
    dets.iter()
        .zip(gts)
        .flat_map(|(d, g)| g.iter().map(move |b| d.iter().any(|x| iou(&x.bbox, b) >= match_iou)))
        .collect()
}

/// Test-set AP of a detector on clean images.
pub fn clean_ap(detector: &DetectorWeights, scenes: &[&Scene], score_threshold: f64) -> Result<f64> {
    let dets: Vec<Vec<Detection>> = scenes
        .par_iter()
        .map(|s| Ok(decode(&detect(detector, &s.image)?, score_threshold, DEFAULT_NMS_IOU)))
        .collect::<Result<_>>()?;
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.boxes.clone()).collect();
    Ok(pr_curve(&dets, &gts, MATCH_IOU)?.ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub proportion: f64,
    pub asr: f64,
}

/// ASR with the patch forced to each fixed proportion of the box height.
pub fn scale_sweep(
    detector: &DetectorWeights,
    scenes: &[&Scene],
    patch: &Patch,
    proportions: &[f64],
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    proportions
        .iter()
        .map(|&p| {
            let chain = ChainConfig {
                transform: cfg.transform.clone(),
                proportion_range: [p, p],
            };
            let images: Vec<Tensor> = scenes
                .par_iter()
                .map(|s| {
                    render_patched(
                        s,
                        patch,
                        cfg.tile_reps,
                        &chain,
                        &mut ChainRngs::for_scene(cfg.seed, s.id),
                    )
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = images.iter().collect();
            let dets = detect_all(detector, &refs, cfg)?;
            let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.boxes.clone()).collect();
            Ok(SweepRow {
                proportion: p,
                asr: asr(&flags_for(&dets, &gts, cfg.match_iou))?,
            })
        })
        .collect()
}

pub fn pr_csv(curve: &PrCurve) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        s.push_str(&format!("{},{},{}\n", sig6(p.score), sig6(p.precision), sig6(p.recall)));
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("proportion,asr\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", sig6(r.proportion), sig6(r.asr)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, x + w, y + h).unwrap()
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn ap_examples() {
        let g = bx(0.0, 0.0, 10.0, 20.0);
        let perfect = pr_curve(&[vec![det(g, 0.9)]], &[vec![g]], 0.5).unwrap();
        assert_eq!(perfect.ap, 1.0);
        let none = pr_curve(&[vec![]], &[vec![g]], 0.5).unwrap();
        assert_eq!(none.ap, 0.0);
        let shifted = bx(0.0, 5.0, 10.0, 20.0);
        assert!(iou(&g, &shifted) >= 0.5);
        let fp = bx(50.0, 50.0, 10.0, 20.0);
        let c = pr_curve(&[vec![det(fp, 0.8), det(shifted, 0.9)]], &[vec![g]], 0.5).unwrap();
        assert_eq!(c.ap, 1.0);
        assert!(pr_curve(&[vec![]], &[vec![]], 0.5).is_err());
    }

    #[test]
    fn asr_and_decrease() {
        assert_eq!(asr(&[false; 4]).unwrap(), 1.0);
        assert_eq!(asr(&[true; 4]).unwrap(), 0.0);
        let mut flags = vec![false; 80];
        flags.extend(vec![true; 20]);
        assert_eq!(asr(&flags).unwrap(), 0.8);
        assert!(asr(&[]).is_err());
        let clean = PrCurve {
            points: vec![],
            ap: 1.0,
            num_gt: 1,
        };
        let cond = PrCurve {
            points: vec![],
            ap: 0.123,
            num_gt: 1,
        };
        assert!((ap_decrease(&clean, &cond) - 87.7).abs() < 1e-9);
        assert_eq!(ap_decrease(&clean, &clean), 0.0);
    }

    #[test]
    fn sig6_rounds() {
        assert_eq!(sig6(0.123456789), 0.123457);
        assert_eq!(sig6(87.70000000001), 87.7);
        assert_eq!(sig6(0.0), 0.0);
    }
}
