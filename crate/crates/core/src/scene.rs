//! Synthetic grayscale thermal scenes with warm upright persons, and the
//! on-disk dataset layout (`images/{id}.pgm`, `annotations.jsonl`,
//! `manifest.json`).

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use irpatch_diffcore::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pattern::write_all;
use crate::rng::{indexed, stream, Rng, Stream};
use crate::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates; pixel `(r, c)` covers
/// `[c, c+1) x [r, r+1)`. The only class is person.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clamped(&self, width: f64, height: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    /// `[H, W]`, values in `[0, 1]` quantized to multiples of 1/255.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Square image side in pixels.
    pub size: usize,
    pub persons: [usize; 2],
    pub background: [f64; 2],
    pub body: [f64; 2],
    pub person_height: [f64; 2],
    pub max_structures: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 128,
            persons: [1, 3],
            background: [0.1, 0.4],
            body: [0.7, 0.95],
            person_height: [22.0, 44.0],
            max_structures: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |r: [f64; 2]| 0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0;
        if self.size < 16
            || self.persons[0] > self.persons[1]
            || !unit(self.background)
            || !unit(self.body)
            || !(8.0 <= self.person_height[0] && self.person_height[0] <= self.person_height[1])
            || self.person_height[1] > self.size as f64
        {
            return Err(Error::Config(format!("invalid scene config: {self:?}")));
        }
        Ok(())
    }
}

/// Largest permitted IOU between two persons in one scene.
pub const MAX_PERSON_IOU: f64 = 0.1;
const PLACEMENT_ATTEMPTS: usize = 100;
const COARSE: usize = 5;

struct Person {
    cx: f64,
    top: f64,
    height: f64,
    half_width: f64,
    head_radius: f64,
    intensity: f64,
}

impl Person {
    fn bbox(&self) -> BBox {
        let hw = self.half_width.max(self.head_radius);
        BBox {
            x_min: self.cx - hw,
            y_min: self.top,
            x_max: self.cx + hw,
            y_max: self.top + self.height,
        }
    }

    /// Approximate signed distance in pixels (negative inside).
    fn distance(&self, x: f64, y: f64) -> f64 {
        let head_cy = self.top + self.head_radius;
        let head = ((x - self.cx).powi(2) + (y - head_cy).powi(2)).sqrt() - self.head_radius;
        let torso_top = self.top + 1.7 * self.head_radius;
        let ry = 0.5 * (self.top + self.height - torso_top);
        let cy = torso_top + ry;
        let (nx, ny) = ((x - self.cx) / self.half_width, (y - cy) / ry);
        let torso = ((nx * nx + ny * ny).sqrt() - 1.0) * self.half_width.min(ry);
        head.min(torso)
    }
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Draws one scene. Returns the scene and how many requested persons could
/// not be placed without exceeding [`MAX_PERSON_IOU`].
pub fn generate_scene(rng: &mut Rng, cfg: &SceneConfig, id: usize) -> (Scene, usize) {
    let (scene, short, _) = generate_scene_with_mask(rng, cfg, id);
    (scene, short)
}

/// [`generate_scene`] plus the silhouette mask (pixels more than half covered
/// by a person).
pub fn generate_scene_with_mask(rng: &mut Rng, cfg: &SceneConfig, id: usize) -> (Scene, usize, Vec<bool>) {
    let size = cfg.size;
    let s = size as f64;
    let [bg_lo, bg_hi] = cfg.background;
    let base = uniform(rng, cfg.background);
    let amp = 0.15 * (bg_hi - bg_lo);
    let coarse: Vec<f64> = (0..COARSE * COARSE)
        .map(|_| base + amp * rng.gen_range(-1.0..1.0))
        .collect();
    let mut img: Vec<f64> = (0..size * size)
        .map(|i| {
            let fy = (i / size) as f64 / (s - 1.0) * (COARSE - 1) as f64;
            let fx = (i % size) as f64 / (s - 1.0) * (COARSE - 1) as f64;
            let (y0, x0) = ((fy as usize).min(COARSE - 2), (fx as usize).min(COARSE - 2));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let g = |r: usize, c: usize| coarse[r * COARSE + c];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bottom = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            (top * (1.0 - ty) + bottom * ty).clamp(bg_lo, bg_hi)
        })
        .collect();

    let structures = rng.gen_range(0..=cfg.max_structures);
    for _ in 0..structures {
        let w = rng.gen_range(8..=size / 3);
        let h = rng.gen_range(4..=size / 4);
        let x0 = rng.gen_range(0..=size - w);
        let y0 = rng.gen_range(0..=size - h);
        let drop = rng.gen_range(0.03..0.1);
        for r in y0..y0 + h {
            for c in x0..x0 + w {
                let v = &mut img[r * size + c];
                *v = (*v - drop).max(bg_lo.min(*v));
            }
        }
    }

    let requested = rng.gen_range(cfg.persons[0]..=cfg.persons[1]);
    let mut persons: Vec<Person> = Vec::new();
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..requested {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let height = uniform(rng, cfg.person_height);
            let half_width = rng.gen_range(0.17..0.22) * height;
            let head_radius = 0.13 * height;
            let hw = half_width.max(head_radius);
            let cx = rng.gen_range(hw + 1.0..s - hw - 1.0);
            let top = rng.gen_range(1.0..s - height - 1.0);
            let p = Person {
                cx,
                top,
                height,
                half_width,
                head_radius,
                intensity: uniform(rng, cfg.body),
            };
            let b = p.bbox();
            if boxes.iter().all(|o| o.iou(&b) <= MAX_PERSON_IOU) {
                boxes.push(b);
                persons.push(p);
                break;
            }
        }
    }

    let mut mask = vec![false; size * size];
    for p in &persons {
        let b = p.bbox();
        let (c0, c1) = (b.x_min.floor() as usize, (b.x_max.ceil() as usize).min(size));
        let (r0, r1) = (b.y_min.floor() as usize, (b.y_max.ceil() as usize).min(size));
        for r in r0..r1 {
            for c in c0..c1 {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                let alpha = (0.5 - p.distance(x, y)).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let depth = ((y - p.top) / p.height).clamp(0.0, 1.0);
                    let warm = p.intensity * (1.0 - 0.08 * depth);
                    let v = &mut img[r * size + c];
                    *v = alpha * warm + (1.0 - alpha) * *v;
                    if alpha > 0.5 {
                        mask[r * size + c] = true;
                    }
                }
            }
        }
    }

    let image = Tensor::new([size, size], img.into_iter().map(quantize).collect()).expect("image length matches shape");
    (Scene { id, image, boxes }, requested - persons.len(), mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SceneConfig,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Scenes that received fewer persons than requested.
    #[serde(default)]
    pub placement_shortfall: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<Scene>,
}

pub const TRAIN_FRACTION: f64 = 0.8;

/// Deterministic shuffled split of `0..count`; both halves sorted.
pub fn split_ids(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut stream(seed, Stream::Split));
    let n_train = (count as f64 * TRAIN_FRACTION).round() as usize;
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn generate_dataset(count: usize, seed: u64, cfg: &SceneConfig) -> Result<Dataset> {
    cfg.validate()?;
    let generated: Vec<(Scene, usize)> = (0..count)
        .into_par_iter()
        .map(|i| generate_scene(&mut indexed(seed, Stream::Scene, i as u64), cfg, i))
        .collect();
    let placement_shortfall = generated
        .iter()
        .filter(|(_, short)| *short > 0)
        .map(|(s, _)| s.id)
        .collect();
    let (train, test) = split_ids(count, seed);
    Ok(Dataset {
        manifest: Manifest {
            seed,
            config: cfg.clone(),
            train,
            test,
            placement_shortfall,
        },
        scenes: generated.into_iter().map(|(s, _)| s).collect(),
    })
}

impl Dataset {
    pub fn scene(&self, id: usize) -> Option<&Scene> {
        self.scenes
            .get(id)
            .filter(|s| s.id == id)
            .or_else(|| self.scenes.iter().find(|s| s.id == id))
    }

    pub fn train_scenes(&self) -> Vec<&Scene> {
        self.manifest.train.iter().filter_map(|&i| self.scene(i)).collect()
    }

    pub fn test_scenes(&self) -> Vec<&Scene> {
        self.manifest.test.iter().filter_map(|&i| self.scene(i)).collect()
    }
}

pub fn encode_pgm(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format(path, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad PGM field {s:?}")))
    };
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(Error::format(path, format!("unsupported PGM {w}x{h} maxval {max}")));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h {
        return Err(Error::format(
            path,
            format!("expected {} pixel bytes, found {}", w * h, body.len()),
        ));
    }
    Tensor::new([h, w], body.iter().map(|&b| b as f64 / 255.0).collect())
        .map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: usize,
    boxes: Vec<[f64; 4]>,
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut annotations = String::new();
    for scene in &dataset.scenes {
        write_all(&images.join(format!("{}.pgm", scene.id)), &encode_pgm(&scene.image))?;
        let record = AnnotationRecord {
            id: scene.id,
            boxes: scene
                .boxes
                .iter()
                .map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
                .collect(),
        };
        annotations.push_str(&serde_json::to_string(&record).expect("serializable"));
        annotations.push('\n');
    }
    write_all(&dir.join("annotations.jsonl"), annotations.as_bytes())?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest).expect("serializable");
    write_all(&dir.join("manifest.json"), manifest.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;

    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut scenes = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::format(&ann_path, format!("line {}: {detail}", n + 1));
        let record: AnnotationRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(record.id) {
            return Err(bad(format!("duplicate scene id {}", record.id)));
        }
        let img_path = dir.join("images").join(format!("{}.pgm", record.id));
        let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let image = decode_pgm(&bytes, &img_path)?;
        let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
        let boxes = record
            .boxes
            .iter()
            .map(|b| {
                let bx = BBox::new(b[0], b[1], b[2], b[3]).map_err(|e| bad(e.to_string()))?;
                if !bx.within(w, h) {
                    return Err(bad(format!("box {b:?} outside {w}x{h} image")));
                }
                Ok(bx)
            })
            .collect::<Result<Vec<_>>>()?;
        scenes.push(Scene {
            id: record.id,
            image,
            boxes,
        });
    }
    for id in manifest.train.iter().chain(&manifest.test) {
        if !seen.contains(id) {
            return Err(Error::format(
                &manifest_path,
                format!("split references unknown scene {id}"),
            ));
        }
    }
    Ok(Dataset { manifest, scenes })
}
