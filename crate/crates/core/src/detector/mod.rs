//! Small anchor-free single-scale person detector.
//!
//! Stride-2 3x3 convolution blocks reduce an `H x W` image to a `G x G` cell
//! grid (`G = H / 16`); a 1x1 head emits per cell an objectness logit, four
//! box offsets and a class logit.

mod io;
mod train;

use std::fmt;

use irpatch_diffcore::{sigmoid, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Stream};
use crate::scene::BBox;
use crate::{Error, Result};

pub use io::{decode_weights, encode_weights, read_weights, write_weights};
pub use train::{
    assign_targets, make_ensemble, occlude, train, CellTargets, EpochLog, TrainConfig, TrainReport, ENSEMBLE_AP_FLOOR,
};

/// Output stride of the backbone.
pub const STRIDE: usize = 16;
/// Reference box side for the log-size offsets.
pub const ANCHOR: f64 = 32.0;
pub const HEAD_CHANNELS: usize = 6;
pub const LEAKY_SLOPE: f64 = 0.1;
/// Log-size offsets are clamped to this magnitude when decoding.
const MAX_LOG_SIZE: f64 = 6.0;

/// Architecture of one detector: channel widths of the four stride-2 blocks
/// followed by `extra` stride-1 blocks at the last width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub channels: [usize; 4],
    pub extra: usize,
}

pub const VARIANT_NAMES: [&str; 4] = ["base", "wide", "narrow", "deep"];

impl Variant {
    pub fn by_name(name: &str) -> Result<Self> {
        let (channels, extra) = match name {
            "base" => ([8, 16, 24, 32], 0),
            "wide" => ([12, 24, 32, 48], 0),
            "narrow" => ([6, 12, 16, 24], 0),
            "deep" => ([8, 16, 24, 32], 1),
            _ => {
                return Err(Error::Config(format!(
                    "unknown detector variant {name:?}; expected one of {}",
                    VARIANT_NAMES.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            channels,
            extra,
        })
    }

    /// `(name, shape)` of every parameter tensor in declared order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut c_in = 1;
        let widths = self
            .channels
            .iter()
            .copied()
            .chain(std::iter::repeat_n(self.channels[3], self.extra));
        for (i, c_out) in widths.enumerate() {
            specs.push((format!("conv{i}.weight"), vec![c_out, c_in, 3, 3]));
            specs.push((format!("conv{i}.bias"), vec![c_out]));
            c_in = c_out;
        }
        specs.push(("head.weight".into(), vec![HEAD_CHANNELS, c_in, 1, 1]));
        specs.push(("head.bias".into(), vec![HEAD_CHANNELS]));
        specs
    }

    pub fn blocks(&self) -> usize {
        4 + self.extra
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        write!(f, "{} channels={} extra={}", self.name, c.join(","), self.extra)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorWeights {
    pub variant: Variant,
    pub seed: u64,
    /// Parameter tensors in [`Variant::param_specs`] order.
    pub params: Vec<Tensor>,
}

impl DetectorWeights {
    /// He-normal convolutions, zero biases, small head.
    pub fn init(variant: Variant, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Init);
        let params = variant
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let std = if name.starts_with("head") {
                    0.01
                } else {
                    (2.0 / fan_in).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            })
            .collect();
        Self { variant, seed, params }
    }

    pub fn zeros(variant: Variant) -> Self {
        let params = variant
            .param_specs()
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Self {
            variant,
            seed: 0,
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let specs = self.variant.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "{} parameter tensors for topology needing {}",
                self.params.len(),
                specs.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&self.params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Invalid(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Invalid(format!("{name}: non-finite values")));
            }
        }
        Ok(())
    }

    /// Places the parameters on `tape`, as leaves when `trainable`.
    pub fn load(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }
}

/// Records the network on `tape`. `image` is `[H, W]` with both sides
/// multiples of 16; the result is the raw head output `[6, G, G]`.
pub fn forward_raw(tape: &mut Tape, variant: &Variant, params: &[Var], image: Var) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    if s.len() != 2 || !s[0].is_multiple_of(STRIDE) || !s[1].is_multiple_of(STRIDE) || s[0] == 0 || s[1] == 0 {
        return Err(Error::Invalid(format!(
            "detector input must be [H, W] with sides divisible by {STRIDE}, got {s:?}"
        )));
    }
    if params.len() != 2 * variant.blocks() + 2 {
        return Err(Error::Invalid(format!(
            "{} parameter handles for variant {variant}",
            params.len()
        )));
    }
    let mut x = tape.reshape(image, &[1, s[0], s[1]])?;
    for b in 0..variant.blocks() {
        let stride = if b < 4 { 2 } else { 1 };
        x = tape.conv2d(x, params[2 * b], Some(params[2 * b + 1]), stride, 1)?;
        x = tape.leaky_relu(x, LEAKY_SLOPE)?;
    }
    let n = params.len();
    Ok(tape.conv2d(x, params[n - 2], Some(params[n - 1]), 1, 0)?)
}

/// Channel `channel` of a raw `[6, G, G]` head output as a `[G*G]` vector.
pub fn head_channel(tape: &mut Tape, raw: Var, channel: usize) -> Result<Var> {
    let s = tape.shape(raw).to_vec();
    let cells = s[1] * s[2];
    let index = (0..cells).map(|i| Some(channel * cells + i)).collect();
    Ok(tape.gather(raw, index, &[cells])?)
}

/// Post-sigmoid objectness `[G*G]` recorded on the tape.
pub fn objectness(tape: &mut Tape, raw: Var) -> Result<Var> {
    let logits = head_channel(tape, raw, 0)?;
    Ok(tape.sigmoid(logits)?)
}

/// Per-cell detector outputs, row-major over the `rows x cols` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMap {
    pub rows: usize,
    pub cols: usize,
    pub objectness: Vec<f64>,
    /// Raw `[dx, dy, log w, log h]` offsets.
    pub offsets: Vec<[f64; 4]>,
    pub class: Vec<f64>,
}

impl DetectionMap {
    pub fn from_raw(raw: &Tensor) -> Self {
        let s = raw.shape();
        let (rows, cols) = (s[1], s[2]);
        let cells = rows * cols;
        let d = raw.data();
        Self {
            rows,
            cols,
            objectness: d[..cells].iter().map(|&v| sigmoid(v)).collect(),
            offsets: (0..cells)
                .map(|i| [d[cells + i], d[2 * cells + i], d[3 * cells + i], d[4 * cells + i]])
                .collect(),
            class: d[5 * cells..6 * cells].iter().map(|&v| sigmoid(v)).collect(),
        }
    }

    pub fn score(&self, cell: usize) -> f64 {
        self.objectness[cell] * self.class[cell]
    }

    /// Decoded box of `cell`, clamped to the image.
    pub fn cell_box(&self, cell: usize) -> BBox {
        decode_cell(
            cell / self.cols,
            cell % self.cols,
            self.offsets[cell],
            self.cols,
            self.rows,
        )
    }
}

pub fn decode_cell(row: usize, col: usize, t: [f64; 4], cols: usize, rows: usize) -> BBox {
    let s = STRIDE as f64;
    let cx = (col as f64 + sigmoid(t[0])) * s;
    let cy = (row as f64 + sigmoid(t[1])) * s;
    let w = t[2].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * ANCHOR;
    let h = t[3].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * ANCHOR;
    BBox {
        x_min: cx - w / 2.0,
        y_min: cy - h / 2.0,
        x_max: cx + w / 2.0,
        y_max: cy + h / 2.0,
    }
    .clamped(cols as f64 * s, rows as f64 * s)
}

/// Runs the detector without recording gradients.
pub fn detect(weights: &DetectorWeights, image: &Tensor) -> Result<DetectionMap> {
    let mut tape = Tape::new();
    let params = weights.load(&mut tape, false);
    let x = tape.constant(image.clone());
    let raw = forward_raw(&mut tape, &weights.variant, &params, x)?;
    Ok(DetectionMap::from_raw(tape.value(raw)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Cells scoring at least `score_threshold`, then greedy non-maximum
/// suppression.
pub fn decode(map: &DetectionMap, score_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let candidates = (0..map.rows * map.cols)
        .filter(|&c| map.score(c) >= score_threshold)
        .map(|c| Detection {
            bbox: map.cell_box(c),
            score: map.score(c),
        })
        .filter(|d| d.bbox.validate().is_ok())
        .collect();
    nms(candidates, nms_iou)
}

/// Greedy suppression in descending score order; a detection is dropped when
/// its IOU with an already kept one exceeds `iou`.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_with(scores: &[(usize, f64)], grid: usize) -> DetectionMap {
        let cells = grid * grid;
        let mut obj = vec![0.01; cells];
        for &(c, s) in scores {
            obj[c] = s;
        }
        DetectionMap {
            rows: grid,
            cols: grid,
            objectness: obj,
            offsets: vec![[0.0; 4]; cells],
            class: vec![1.0; cells],
        }
    }

    #[test]
    fn zero_weights_give_half_objectness() {
        let w = DetectorWeights::zeros(Variant::by_name("base").unwrap());
        let m = detect(&w, &Tensor::full(&[64, 64], 0.3)).unwrap();
        assert_eq!((m.rows, m.cols), (4, 4));
        assert!(m.objectness.iter().all(|&o| o == 0.5));
    }

    #[test]
    fn forward_rejects_bad_sizes() {
        let w = DetectorWeights::init(Variant::by_name("base").unwrap(), 0);
        assert!(detect(&w, &Tensor::zeros(&[60, 64])).is_err());
    }

    #[test]
    fn param_specs_match_init() {
        for name in VARIANT_NAMES {
            let w = DetectorWeights::init(Variant::by_name(name).unwrap(), 3);
            w.validate().unwrap();
        }
        assert!(Variant::by_name("yolo").is_err());
    }

    #[test]
    fn decode_examples() {
        let mut flat = map_with(&[], 8);
        flat.objectness.fill(0.5);
        assert!(decode(&flat, 0.7, 0.5).is_empty());
        let one = decode(&map_with(&[(10, 0.99)], 8), 0.7, 0.5);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].score, 0.99);
    }

    #[test]
    fn nms_keeps_higher_of_overlapping_pair() {
        let a = BBox::new(0.0, 0.0, 10.0, 20.0).unwrap();
        let b = BBox::new(0.0, 0.0, 10.0, 18.0).unwrap();
        assert!((a.iou(&b) - 0.9).abs() < 1e-12);
        let kept = nms(
            vec![Detection { bbox: b, score: 0.8 }, Detection { bbox: a, score: 0.9 }],
            0.5,
        );
        assert_eq!(kept, vec![Detection { bbox: a, score: 0.9 }]);
    }
}
