//! Cloth-to-clothing transform chain: random crop, thin-plate-spline
//! deformation and photometric/geometric augmentation. Every transform acts
//! on tape values and is differentiable with respect to patch pixels.

use irpatch_diffcore::{Tape, Tensor, Var};
use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

/// Transform sampling configuration (the `transform` block of a run config).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    /// Number of TPS control points; must be a square (4x4 grid by default).
    pub tps_k: usize,
    /// TPS target perturbation std as a fraction of the crop side.
    pub tps_sigma: f64,
    pub rot_max_deg: f64,
    pub scale_range: [f64; 2],
    pub contrast_range: [f64; 2],
    pub brightness_range: [f64; 2],
    pub noise_std_max: f64,
    /// Inclusive crop side range in pixels of the tiled pattern.
    pub crop_range: [usize; 2],
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            tps_k: 16,
            tps_sigma: 0.05,
            rot_max_deg: 20.0,
            scale_range: [0.9, 1.1],
            contrast_range: [0.8, 1.2],
            brightness_range: [-0.1, 0.1],
            noise_std_max: 0.02,
            crop_range: [10, 30],
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        let grid = (self.tps_k as f64).sqrt().round() as usize;
        if grid < 2 || grid * grid != self.tps_k {
            return Err(Error::Config(format!(
                "tps_k must be a square >= 4, got {}",
                self.tps_k
            )));
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !(self.tps_sigma >= 0.0)
            || !(self.rot_max_deg >= 0.0)
            || !(self.noise_std_max >= 0.0)
            || !ordered(self.scale_range)
            || self.scale_range[0] <= 0.0
            || !ordered(self.contrast_range)
            || !ordered(self.brightness_range)
        {
            return Err(Error::Config(format!("invalid transform ranges: {self:?}")));
        }
        if self.crop_range[0] == 0 || self.crop_range[0] > self.crop_range[1] {
            return Err(Error::Config(format!("invalid crop_range {:?}", self.crop_range)));
        }
        Ok(())
    }
}

/// Square crop window in tiled-pattern coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub row: usize,
    pub col: usize,
    pub side: usize,
}

/// Draws a crop with side in `size_range` and a uniform valid position.
pub fn sample_crop(height: usize, width: usize, size_range: [usize; 2], rng: &mut Rng) -> Result<CropSpec> {
    let [lo, hi] = size_range;
    if lo == 0 || lo > hi || hi > height.min(width) {
        return Err(Error::Invalid(format!(
            "crop range {size_range:?} does not fit a {height}x{width} pattern"
        )));
    }
    let side = rng.gen_range(lo..=hi);
    let row = rng.gen_range(0..=height - side);
    let col = rng.gen_range(0..=width - side);
    Ok(CropSpec { row, col, side })
}

/// Copies the crop window out of a 2-D tape value.
pub fn crop(tape: &mut Tape, tiled: Var, spec: CropSpec) -> Result<Var> {
    let s = tape.shape(tiled).to_vec();
    if s.len() != 2 || spec.row + spec.side > s[0] || spec.col + spec.side > s[1] || spec.side == 0 {
        return Err(Error::Invalid(format!("crop {spec:?} outside pattern {s:?}")));
    }
    let w = s[1];
    let index = (0..spec.side * spec.side)
        .map(|i| Some((spec.row + i / spec.side) * w + spec.col + i % spec.side))
        .collect();
    Ok(tape.gather(tiled, index, &[spec.side, spec.side])?)
}

pub fn random_crop(tape: &mut Tape, tiled: Var, rng: &mut Rng, size_range: [usize; 2]) -> Result<(Var, CropSpec)> {
    let s = tape.shape(tiled).to_vec();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("random_crop expects a 2-D pattern, got {s:?}")));
    }
    let spec = sample_crop(s[0], s[1], size_range, rng)?;
    Ok((crop(tape, tiled, spec)?, spec))
}

/// A point as `[x, y]` (column, row).
pub type Point = [f64; 2];

/// Thin-plate spline `R^2 -> R^2` with kernel `U(r) = r^2 ln r^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsWarpField {
    pub src: Vec<Point>,
    pub dst: Vec<Point>,
    /// Per output coordinate: `a0 + a1 x + a2 y`.
    pub affine: [[f64; 3]; 2],
    /// Kernel weights per control point and output coordinate.
    pub weights: Vec<[f64; 2]>,
    pub mu: f64,
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Fits the spline taking each `src` point to its `dst` point. With `mu > 0`
/// the fit is smoothed and no longer interpolates exactly.
pub fn tps_fit(src: &[Point], dst: &[Point], mu: f64) -> Result<TpsWarpField> {
    let k = src.len();
    if k < 3 || dst.len() != k {
        return Err(Error::Invalid(format!(
            "TPS needs >= 3 matching points, got {k} source and {} target",
            dst.len()
        )));
    }
    if !(mu >= 0.0) {
        return Err(Error::Invalid(format!("TPS regularization must be >= 0, got {mu}")));
    }
    let scale = src
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    for i in 0..k {
        for j in i + 1..k {
            let d2 = (src[i][0] - src[j][0]).powi(2) + (src[i][1] - src[j][1]).powi(2);
            if d2 <= (1e-9 * scale).powi(2) {
                return Err(Error::Invalid(format!("TPS source points {i} and {j} coincide")));
            }
        }
    }
    let max_cross = (1..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .map(|(i, j)| {
            let (ax, ay) = (src[i][0] - src[0][0], src[i][1] - src[0][1]);
            let (bx, by) = (src[j][0] - src[0][0], src[j][1] - src[0][1]);
            (ax * by - ay * bx).abs()
        })
        .fold(0.0f64, f64::max);
    if max_cross <= 1e-9 * scale * scale {
        return Err(Error::Invalid("TPS source points are collinear".into()));
    }

    let n = k + 3;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DMatrix::<f64>::zeros(n, 2);
    for i in 0..k {
        for j in 0..k {
            let r2 = (src[i][0] - src[j][0]).powi(2) + (src[i][1] - src[j][1]).powi(2);
            a[(i, j)] = tps_kernel(r2);
        }
        a[(i, i)] += mu;
        let row = [1.0, src[i][0], src[i][1]];
        for (c, v) in row.into_iter().enumerate() {
            a[(i, k + c)] = v;
            a[(k + c, i)] = v;
        }
        b[(i, 0)] = dst[i][0];
        b[(i, 1)] = dst[i][1];
    }
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Invalid("TPS system is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("TPS system is singular".into()));
    }
    let weights = (0..k).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
    let affine = [
        [sol[(k, 0)], sol[(k + 1, 0)], sol[(k + 2, 0)]],
        [sol[(k, 1)], sol[(k + 1, 1)], sol[(k + 2, 1)]],
    ];
    Ok(TpsWarpField {
        src: src.to_vec(),
        dst: dst.to_vec(),
        affine,
        weights,
        mu,
    })
}

impl TpsWarpField {
    pub fn eval(&self, p: Point) -> Point {
        let mut out = [0.0; 2];
        for (d, o) in out.iter_mut().enumerate() {
            let a = self.affine[d];
            *o = a[0] + a[1] * p[0] + a[2] * p[1];
        }
        for (c, w) in self.src.iter().zip(&self.weights) {
            let u = tps_kernel((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2));
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }

    /// Residuals of the side conditions `sum w = 0`, `sum w x = 0`, `sum w y = 0`.
    pub fn side_condition_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for d in 0..2 {
            let s0: f64 = self.weights.iter().map(|w| w[d]).sum();
            let sx: f64 = self.weights.iter().zip(&self.src).map(|(w, p)| w[d] * p[0]).sum();
            let sy: f64 = self.weights.iter().zip(&self.src).map(|(w, p)| w[d] * p[1]).sum();
            worst = worst.max(s0.abs()).max(sx.abs()).max(sy.abs());
        }
        worst
    }

    pub fn max_kernel_weight(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// `grid x grid` uniform control points spanning `[0, side-1]^2`.
pub fn control_grid(k: usize, side: usize) -> Vec<Point> {
    let g = (k as f64).sqrt().round() as usize;
    let extent = side.saturating_sub(1) as f64;
    let step = |i: usize| if g > 1 { extent * i as f64 / (g - 1) as f64 } else { 0.0 };
    (0..g).flat_map(|r| (0..g).map(move |c| [step(c), step(r)])).collect()
}

/// Gaussian jitter of the control points, clamped to a box 20% larger than
/// the patch (10% margin per side).
pub fn sample_tps_targets(src: &[Point], side: usize, sigma: f64, rng: &mut Rng) -> Vec<Point> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let extent = side.saturating_sub(1) as f64;
    let (lo, hi) = (-0.1 * extent, 1.1 * extent);
    src.iter()
        .map(|p| {
            [
                (p[0] + normal.sample(rng)).clamp(lo, hi),
                (p[1] + normal.sample(rng)).clamp(lo, hi),
            ]
        })
        .collect()
}

/// Backward-mapped resampling: output pixel `q` reads input at `field(q)`.
/// Samples falling outside the input are black.
pub fn tps_warp(tape: &mut Tape, patch: Var, field: &TpsWarpField) -> Result<Var> {
    let s = tape.shape(patch).to_vec();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("tps_warp expects a 2-D patch, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let points: Vec<(f64, f64)> = (0..h * w)
        .map(|i| {
            let q = field.eval([(i % w) as f64, (i / w) as f64]);
            (q[1], q[0])
        })
        .collect();
    Ok(tape.bilinear_sample(patch, &points, &[h, w])?)
}

/// One draw from the augmentation distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EotParams {
    /// Placement inside the person box as fractions `[row, col]` of the free
    /// range; consumed by the compositor.
    pub translation: [f64; 2],
    /// Radians.
    pub rotation: f64,
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_std: f64,
}

impl EotParams {
    pub fn identity() -> Self {
        Self {
            translation: [0.5, 0.5],
            rotation: 0.0,
            scale: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            noise_std: 0.0,
        }
    }
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

pub fn sample_eot(cfg: &TransformConfig, rng: &mut Rng) -> EotParams {
    let rot = cfg.rot_max_deg.to_radians();
    EotParams {
        translation: [rng.gen(), rng.gen()],
        rotation: uniform(rng, [-rot, rot]),
        scale: uniform(rng, cfg.scale_range),
        brightness: uniform(rng, cfg.brightness_range),
        contrast: uniform(rng, cfg.contrast_range),
        noise_std: uniform(rng, [0.0, cfg.noise_std_max]),
    }
}

/// Rotation and scale about the patch center, then contrast about mid-gray,
/// brightness, additive Gaussian noise and a clamp to `[0, 1]`.
pub fn eot_transform(tape: &mut Tape, patch: Var, params: &EotParams, rng: &mut Rng) -> Result<Var> {
    if !(params.scale > 0.0) {
        return Err(Error::Invalid(format!(
            "EOT scale must be positive, got {}",
            params.scale
        )));
    }
    let s = tape.shape(patch).to_vec();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("eot_transform expects a 2-D patch, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = params.rotation.sin_cos();
    let inv = 1.0 / params.scale;
    let points: Vec<(f64, f64)> = (0..h * w)
        .map(|i| {
            let dy = (i / w) as f64 - cy;
            let dx = (i % w) as f64 - cx;
            (cy + (cos * dy + sin * dx) * inv, cx + (cos * dx - sin * dy) * inv)
        })
        .collect();
    let mut x = tape.bilinear_sample(patch, &points, &[h, w])?;
    x = tape.scalar_mul(x, params.contrast)?;
    x = tape.add_scalar(x, 0.5 * (1.0 - params.contrast) + params.brightness)?;
    if params.noise_std > 0.0 {
        let normal = Normal::new(0.0, params.noise_std).expect("positive std");
        let noise = tape.constant(Tensor::from_fn(&[h, w], |_| normal.sample(rng)));
        x = tape.add(x, noise)?;
    }
    Ok(tape.clamp(x, 0.0, 1.0)?)
}
