//! Binary pattern representation and its differentiable relaxation.
//!
//! The optimization variable is a `2 x N x N` logit tensor. Channel 0 is the
//! black (insulated, value 0) class and channel 1 the white (body
//! temperature, value 1) class. A Gumbel-softmax sample turns it into a soft
//! grayscale patch; thresholding at 0.5 gives the printable binary patch.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use irpatch_diffcore::{Tape, Tensor, Var};
use rand::Rng as _;

use crate::rng::Rng;
use crate::{Error, Result};

/// Default relaxation temperature.
pub const DEFAULT_TAU: f64 = 0.1;
/// Uniform draws are clamped to `[U_EPS, 1 - U_EPS]`.
pub const U_EPS: f64 = 1e-12;

const LATENT_MAGIC: &str = "IRPATCH-LATENT/1";

/// Per-pixel class logits for an `N x N` pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternLatent {
    side: usize,
    logits: Tensor,
}

impl PatternLatent {
    pub fn new(logits: Tensor) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 3 || s[0] != 2 || s[1] != s[2] {
            return Err(Error::Invalid(format!("latent logits must be 2xNxN, got {s:?}")));
        }
        if !logits.all_finite() {
            return Err(Error::Invalid("latent logits must be finite".into()));
        }
        Ok(Self { side: s[1], logits })
    }

    /// Independent logits uniform in `[-0.1, 0.1]`.
    pub fn init(side: usize, rng: &mut Rng) -> Self {
        let logits = Tensor::from_fn(&[2, side, side], |_| rng.gen_range(-0.1..=0.1));
        Self { side, logits }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        self.logits.data_mut()
    }

    /// `pi_0`, the probability that each pixel is black, row-major.
    pub fn black_probability(&self) -> Vec<f64> {
        let n = self.side * self.side;
        let d = self.logits.data();
        (0..n)
            .map(|i| {
                let (a, b) = (d[i], d[n + i]);
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                ea / (ea + eb)
            })
            .collect()
    }

    /// Most probable pattern (white where `pi_1 >= pi_0`).
    pub fn mode(&self) -> Patch {
        let grid = Tensor::from_fn(&[self.side, self.side], |i| {
            let d = self.logits.data();
            if d[self.side * self.side + i] >= d[i] {
                1.0
            } else {
                0.0
            }
        });
        Patch {
            grid,
            mode: PatchMode::Hard,
        }
    }

    pub fn write(&self, path: &Path, tau: f64) -> Result<()> {
        let mut buf = format!("{LATENT_MAGIC}\nN {}\ntau {tau}\n", self.side).into_bytes();
        for v in self.logits.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a latent file, returning it with the stored temperature.
    pub fn read(path: &Path) -> Result<(Self, f64)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        let mut next_line = |reader: &mut BufReader<_>| -> Result<String> {
            line.clear();
            reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            Ok(line.trim_end().to_string())
        };
        if next_line(&mut reader)? != LATENT_MAGIC {
            return Err(Error::format(path, "missing IRPATCH-LATENT/1 header"));
        }
        let side: usize =
            parse_field(&next_line(&mut reader)?, "N").ok_or_else(|| Error::format(path, "bad N line"))?;
        let tau: f64 =
            parse_field(&next_line(&mut reader)?, "tau").ok_or_else(|| Error::format(path, "bad tau line"))?;
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if side == 0 || bytes.len() != 2 * side * side * 8 {
            return Err(Error::format(
                path,
                format!("expected {} payload bytes, found {}", 2 * side * side * 8, bytes.len()),
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let logits = Tensor::new([2, side, side], values)?;
        let latent = Self::new(logits).map_err(|e| Error::format(path, e.to_string()))?;
        Ok((latent, tau))
    }
}

fn parse_field<T: std::str::FromStr>(line: &str, key: &str) -> Option<T> {
    let (k, v) = line.split_once(' ')?;
    (k == key).then(|| v.parse().ok()).flatten()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchMode {
    Soft,
    Hard,
}

/// Grayscale patch with values in `[0, 1]`; hard patches hold only 0 and 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    grid: Tensor,
    mode: PatchMode,
}

impl Patch {
    pub fn soft(grid: Tensor) -> Result<Self> {
        if grid.shape().len() != 2 || grid.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("soft patch must be 2-D with values in [0, 1]".into()));
        }
        Ok(Self {
            grid,
            mode: PatchMode::Soft,
        })
    }

    pub fn hard(grid: Tensor) -> Result<Self> {
        if grid.shape().len() != 2 || grid.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("hard patch must be 2-D with values in {0, 1}".into()));
        }
        Ok(Self {
            grid,
            mode: PatchMode::Hard,
        })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn mode(&self) -> PatchMode {
        self.mode
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    /// Fraction of exactly-zero pixels.
    pub fn black_ratio(&self) -> f64 {
        let zeros = self.grid.data().iter().filter(|&&v| v == 0.0).count();
        zeros as f64 / self.grid.len() as f64
    }

    /// 8-bit grayscale PNG. Soft values are rounded to the nearest level.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let bytes: Vec<u8> = self
            .grid
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::GrayImage::from_raw(w, h, bytes).expect("buffer matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    /// Reads a PNG as a hard patch when every pixel is 0 or 255, otherwise soft.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .into_luma8();
        let (w, h) = img.dimensions();
        let data: Vec<f64> = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        let grid = Tensor::new([h as usize, w as usize], data).map_err(|e| Error::format(path, e.to_string()))?;
        if grid.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            Self::hard(grid)
        } else {
            Self::soft(grid)
        }
    }
}

/// Gumbel noise for one relaxation draw.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    /// Uniform draws, `2 x N x N`.
    pub u: Tensor,
    /// `-ln(-ln u)`, same shape.
    pub g: Tensor,
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Independent Gumbel noise per pixel and class.
pub fn sample_gumbel(side: usize, rng: &mut Rng) -> GumbelSample {
    let u = Tensor::from_fn(&[2, side, side], |_| rng.gen::<f64>().clamp(U_EPS, 1.0 - U_EPS));
    let g = Tensor::from_fn(&[2, side, side], |i| gumbel_from_uniform(u.data()[i]));
    GumbelSample { u, g }
}

/// Relaxed sample `y = softmax((g + ln pi) / tau)` over the class axis.
///
/// Returns the `2 x N x N` tensor `y`; channel 1 is the soft patch.
pub fn gumbel_softmax_classes(tape: &mut Tape, logits: Var, g: &Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let pi = tape.softmax(logits, 0)?;
    let log_pi = tape.log(pi)?;
    let noise = tape.constant(g.clone());
    let z = tape.add(log_pi, noise)?;
    let z = tape.scalar_mul(z, 1.0 / tau)?;
    Ok(tape.softmax(z, 0)?)
}

/// Soft patch `p~ = y_1` as an `N x N` tape value.
pub fn gumbel_softmax(tape: &mut Tape, logits: Var, g: &Tensor, tau: f64) -> Result<Var> {
    let y = gumbel_softmax_classes(tape, logits, g, tau)?;
    let side = tape.shape(y)[1];
    let n = side * side;
    Ok(tape.gather(y, (n..2 * n).map(Some).collect(), &[side, side])?)
}

/// Hard patch: 1 where `p~ >= 0.5`, else 0.
pub fn binarize(soft: &Patch) -> Patch {
    let grid = Tensor::from_fn(
        soft.grid.shape(),
        |i| {
            if soft.grid.data()[i] >= 0.5 {
                1.0
            } else {
                0.0
            }
        },
    );
    Patch {
        grid,
        mode: PatchMode::Hard,
    }
}

/// Periodic tiling of an `H x W` tape value into `reps*H x reps*W`.
pub fn tile(tape: &mut Tape, basic: Var, reps: usize) -> Result<Var> {
    if reps == 0 {
        return Err(Error::Invalid("tile repetitions must be >= 1".into()));
    }
    let s = tape.shape(basic).to_vec();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("tile expects a 2-D patch, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let (th, tw) = (h * reps, w * reps);
    let index = (0..th * tw).map(|i| Some((i / tw % h) * w + (i % tw) % w)).collect();
    Ok(tape.gather(basic, index, &[th, tw])?)
}

/// Non-differentiable tiling of a patch value.
pub fn tile_patch(basic: &Patch, reps: usize) -> Result<Patch> {
    let mut tape = Tape::new();
    let v = tape.constant(basic.grid.clone());
    let t = tile(&mut tape, v, reps)?;
    Ok(Patch {
        grid: tape.value(t).clone(),
        mode: basic.mode,
    })
}

/// Mean black probability `sum(pi_0) / N^2`.
pub fn black_ratio_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let side = tape.shape(logits)[1];
    let n = side * side;
    let pi = tape.softmax(logits, 0)?;
    let black = tape.gather(pi, (0..n).map(Some).collect(), &[side, side])?;
    Ok(tape.reduce_mean(black)?)
}

/// Fraction of pixels where two hard patches agree.
pub fn agreement(a: &Patch, b: &Patch) -> f64 {
    let same = a.grid.data().iter().zip(b.grid.data()).filter(|(x, y)| x == y).count();
    same as f64 / a.grid.len() as f64
}

pub(crate) fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
