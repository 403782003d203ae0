//! Synthetic two-domain detection benchmark.
//!
//! Source scenes are flat-shaded geometric shapes on smooth gradient backgrounds.
//! The target domain is the same generator passed through a fog-like corruption
//! (blur, brightness shift, blend toward a bright gray, sensor noise). Geometry
//! is never touched by the corruption, so target annotations stay valid and can
//! be used for evaluation.
//!
//! On disk a split is a directory holding `images/*.png` and an
//! `annotations.json` in the COCO layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cpa::DomainLabel;
use crate::detector::boxes::BBox;
use crate::error::{Error, Result};

/// Gray level every pixel converges to as `haze_alpha` approaches 1.
pub const HAZE_GRAY: f32 = 0.7;

pub const DEFAULT_CLASSES: [&str; 4] = ["circle", "square", "triangle", "cross"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    /// Inclusive range of objects per scene.
    pub num_objects_range: (usize, usize),
    pub shape_classes: Vec<String>,
    pub min_object_size: f32,
    pub max_object_size: f32,
    pub max_overlap_iou: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: (128, 128),
            num_objects_range: (1, 4),
            shape_classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            min_object_size: 14.0,
            max_object_size: 36.0,
            max_overlap_iou: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (lo, hi) = self.num_objects_range;
        if lo < 1 || hi < lo {
            return Err(Error::InvalidConfig(format!(
                "num_objects_range must satisfy 1 <= min <= max, got ({lo}, {hi})"
            )));
        }
        if self.shape_classes.is_empty() {
            return Err(Error::InvalidConfig("shape_classes is empty".into()));
        }
        let mut sorted = self.shape_classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.shape_classes.len() {
            return Err(Error::InvalidConfig("shape_classes contains duplicates".into()));
        }
        if !(self.min_object_size > 0.0
            && self.min_object_size < self.max_object_size
            && self.max_object_size <= h.min(w) as f32)
        {
            return Err(Error::InvalidConfig(format!(
                "object sizes must satisfy 0 < min < max <= min(H, W), got {}..{} for {h}x{w}",
                self.min_object_size, self.max_object_size
            )));
        }
        if !(0.0..=1.0).contains(&self.max_overlap_iou) {
            return Err(Error::InvalidConfig("max_overlap_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.shape_classes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftParams {
    pub blur_sigma: f32,
    pub brightness_shift: f32,
    pub haze_alpha: f32,
    pub noise_std: f32,
}

impl DomainShiftParams {
    pub const NONE: Self = Self {
        blur_sigma: 0.0,
        brightness_shift: 0.0,
        haze_alpha: 0.0,
        noise_std: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.blur_sigma >= 0.0
            && self.noise_std >= 0.0
            && (0.0..=1.0).contains(&self.haze_alpha)
            && (-1.0..=1.0).contains(&self.brightness_shift);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid domain shift parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FogPreset {
    None,
    Light,
    Heavy,
}

impl FogPreset {
    pub fn params(self) -> DomainShiftParams {
        match self {
            FogPreset::None => DomainShiftParams::NONE,
            FogPreset::Light => DomainShiftParams {
                blur_sigma: 0.8,
                brightness_shift: 0.05,
                haze_alpha: 0.4,
                noise_std: 0.02,
            },
            FogPreset::Heavy => DomainShiftParams {
                blur_sigma: 1.2,
                brightness_shift: 0.08,
                haze_alpha: 0.62,
                noise_std: 0.04,
            },
        }
    }
}

/// Row-major `height x width x 3` float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    #[inline]
    fn idx(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * 3
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = self.idx(y, x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub pixels: Image,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    /// Confidences, present only for pseudo-labels.
    pub scores: Option<Vec<f32>>,
    pub domain: DomainLabel,
}

impl AnnotatedImage {
    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} boxes but {} labels",
                self.boxes.len(),
                self.labels.len()
            )));
        }
        if let Some(scores) = &self.scores {
            if scores.len() != self.boxes.len() {
                return Err(Error::InvalidInput("scores length differs from boxes".into()));
            }
        }
        for b in &self.boxes {
            if !b.is_valid() {
                return Err(Error::InvalidInput(format!("box {b:?} outside [0,1] or empty")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scene generation

fn shape_contains(class: usize, dx: f32, dy: f32, size: f32) -> bool {
    let r = size / 2.0;
    match class % 4 {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r && dy.abs() <= r,
        2 => {
            // Apex at the top, base at the bottom.
            let t = (dy + r) / size;
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        _ => {
            let arm = size / 6.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// Pixel mask of a shape and its tight pixel extent `(x0, y0, x1, y1)` (exclusive ends).
fn rasterize(
    class: usize,
    cx: f32,
    cy: f32,
    size: f32,
    h: usize,
    w: usize,
) -> Option<(Vec<(usize, usize)>, [usize; 4])> {
    let r = size / 2.0;
    let y_lo = ((cy - r).floor().max(0.0)) as usize;
    let y_hi = ((cy + r).ceil() as usize).min(h);
    let x_lo = ((cx - r).floor().max(0.0)) as usize;
    let x_hi = ((cx + r).ceil() as usize).min(w);
    let mut pts = Vec::new();
    let mut ext = [usize::MAX, usize::MAX, 0, 0];
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            if shape_contains(class, dx, dy, size) {
                pts.push((y, x));
                ext[0] = ext[0].min(x);
                ext[1] = ext[1].min(y);
                ext[2] = ext[2].max(x + 1);
                ext[3] = ext[3].max(y + 1);
            }
        }
    }
    if pts.is_empty() {
        None
    } else {
        Some((pts, ext))
    }
}

fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()]
}

const PLACEMENT_RETRIES: usize = 60;

/// Renders one scene. Fully determined by `seed` and `spec`.
///
/// If an object cannot be placed within the overlap budget after a bounded
/// number of retries the scene simply ends up with fewer objects.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<AnnotatedImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = spec.image_size;

    // Smooth two-color gradient background with a little texture.
    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ax, ay) = (angle.cos(), angle.sin());
    let texture = Normal::new(0.0f32, 0.015).expect("valid std");
    let mut img = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f32 / w as f32 - 0.5) * ax + (y as f32 / h as f32 - 0.5) * ay;
            let t = (u + 0.71) / 1.42;
            let i = img.idx(y, x);
            for ch in 0..3 {
                let v = c0[ch] * (1.0 - t) + c1[ch] * t + texture.sample(&mut rng);
                img.data[i + ch] = v.clamp(0.0, 1.0);
            }
        }
    }

    let (lo, hi) = spec.num_objects_range;
    let target = rng.random_range(lo..=hi);
    let mut occupied = vec![false; h * w];
    let mut boxes: Vec<BBox> = Vec::new();
    let mut labels = Vec::new();

    'objects: for _ in 0..target {
        for _ in 0..PLACEMENT_RETRIES {
            let class = rng.random_range(0..spec.num_classes());
            let size = rng.random_range(spec.min_object_size..=spec.max_object_size);
            let r = size / 2.0;
            let cx = rng.random_range(r..=(w as f32 - r));
            let cy = rng.random_range(r..=(h as f32 - r));
            let Some((pts, ext)) = rasterize(class, cx, cy, size, h, w) else {
                continue;
            };
            let candidate = BBox::from_xyxy(
                ext[0] as f32 / w as f32,
                ext[1] as f32 / h as f32,
                ext[2] as f32 / w as f32,
                ext[3] as f32 / h as f32,
            );
            if boxes
                .iter()
                .any(|b| b.iou(&candidate) > spec.max_overlap_iou as f64)
            {
                continue;
            }
            if pts.iter().any(|&(y, x)| occupied[y * w + x]) {
                continue;
            }
            // Foreground must stand out from the local background.
            let bg = img.pixel(
                (cy as usize).min(h - 1),
                (cx as usize).min(w - 1),
            );
            let mut color = random_color(&mut rng);
            for _ in 0..20 {
                if (luminance(color) - luminance(bg)).abs() >= 0.3 {
                    break;
                }
                color = random_color(&mut rng);
            }
            if (luminance(color) - luminance(bg)).abs() < 0.3 {
                color = if luminance(bg) > 0.5 { [0.05; 3] } else { [0.95; 3] };
            }
            for &(y, x) in &pts {
                occupied[y * w + x] = true;
                let i = img.idx(y, x);
                img.data[i..i + 3].copy_from_slice(&color);
            }
            boxes.push(candidate);
            labels.push(class);
            continue 'objects;
        }
    }

    Ok(AnnotatedImage {
        pixels: img,
        boxes,
        labels,
        scores: None,
        domain: DomainLabel::Source,
    })
}

fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::filled(src.height, src.width, 0.0);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (k, weight) in kernel.iter().enumerate() {
                    let off = k as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y, (x + off).clamp(0, w - 1))
                    } else {
                        ((y + off).clamp(0, h - 1), x)
                    };
                    let p = src.pixel(sy as usize, sx as usize);
                    for ch in 0..3 {
                        acc[ch] += weight * p[ch];
                    }
                }
                let i = out.idx(y as usize, x as usize);
                out.data[i..i + 3].copy_from_slice(&acc);
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Fog-like corruption: blur, brightness shift, blend toward [`HAZE_GRAY`], noise, clip.
///
/// Boxes and labels are copied untouched; the result is tagged as target domain.
pub fn apply_domain_shift(
    img: &AnnotatedImage,
    params: &DomainShiftParams,
    seed: u64,
) -> Result<AnnotatedImage> {
    params.validate()?;
    let mut pixels = if params.blur_sigma > 0.0 {
        gaussian_blur(&img.pixels, params.blur_sigma)
    } else {
        img.pixels.clone()
    };
    let a = params.haze_alpha;
    for v in pixels.data.iter_mut() {
        *v = (1.0 - a) * (*v + params.brightness_shift) + a * HAZE_GRAY;
    }
    if params.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, params.noise_std).expect("valid std");
        for v in pixels.data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in pixels.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(AnnotatedImage {
        pixels,
        boxes: img.boxes.clone(),
        labels: img.labels.clone(),
        scores: img.scores.clone(),
        domain: DomainLabel::Target,
    })
}

// ---------------------------------------------------------------------------
// COCO-style annotation files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoInfo {
    pub split: String,
    pub domain: DomainLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// 1-based category id (`label + 1`).
    pub category_id: u64,
    /// `[x, y, w, h]` in absolute pixels.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub info: CocoInfo,
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<CocoAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub domain: DomainLabel,
    pub categories: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 folding
    let mut z: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn split_code(split: &str) -> u64 {
    split.bytes().fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64))
}

/// Directory of one split: `<out_dir>/<domain>/<split>`.
pub fn split_dir(out_dir: &Path, domain: DomainLabel, split: &str) -> PathBuf {
    out_dir.join(domain.name()).join(split)
}

/// Renders `n_images` scenes and writes PNGs plus a COCO annotation file into
/// `<out_dir>/<domain>/<split>`. Target-domain images go through
/// [`apply_domain_shift`].
pub fn build_dataset(
    spec: &SceneSpec,
    shift: &DomainShiftParams,
    n_images: usize,
    split: &str,
    domain: DomainLabel,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    spec.validate()?;
    shift.validate()?;
    if n_images == 0 {
        return Err(Error::InvalidConfig("n_images must be positive".into()));
    }
    let dir = split_dir(out_dir, domain, split);
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut coco = CocoFile {
        info: CocoInfo {
            split: split.to_string(),
            domain,
        },
        images: Vec::with_capacity(n_images),
        annotations: Vec::new(),
        categories: spec
            .shape_classes
            .iter()
            .enumerate()
            .map(|(i, name)| CocoCategory {
                id: i as u64 + 1,
                name: name.clone(),
            })
            .collect(),
    };
    let (h, w) = spec.image_size;
    for index in 0..n_images {
        let scene_seed = mix_seed(&[seed, domain.value() as u64, split_code(split), index as u64]);
        let mut scene = generate_scene(scene_seed, spec)?;
        if domain == DomainLabel::Target {
            scene = apply_domain_shift(&scene, shift, mix_seed(&[scene_seed, 0xF06]))?;
        }
        let file_name = format!("{index:06}.png");
        let path = img_dir.join(&file_name);
        scene
            .pixels
            .to_rgb8()
            .save(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        let image_id = index as u64 + 1;
        coco.images.push(CocoImage {
            id: image_id,
            file_name: format!("images/{file_name}"),
            width: w as u32,
            height: h as u32,
        });
        for (b, &label) in scene.boxes.iter().zip(&scene.labels) {
            let [x0, y0, x1, y1] = b.to_xyxy();
            coco.annotations.push(CocoAnnotation {
                id: coco.annotations.len() as u64 + 1,
                image_id,
                category_id: label as u64 + 1,
                bbox: [
                    (x0 as f64 * w as f64).round(),
                    (y0 as f64 * h as f64).round(),
                    ((x1 - x0) as f64 * w as f64).round(),
                    ((y1 - y0) as f64 * h as f64).round(),
                ],
            });
        }
    }
    let ann_path = dir.join(ANNOTATION_FILE);
    let json = serde_json::to_string_pretty(&coco).map_err(|e| Error::json(&ann_path, e))?;
    fs::write(&ann_path, json).map_err(|e| Error::io(&ann_path, e))?;
    load_manifest(&dir)
}

/// Reads `<dir>/annotations.json` and checks that every referenced image exists.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let ann_path = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let coco: CocoFile = serde_json::from_str(&text).map_err(|e| Error::json(&ann_path, e))?;
    let mut categories: Vec<_> = coco.categories.clone();
    categories.sort_by_key(|c| c.id);
    let mut by_image: std::collections::BTreeMap<u64, Vec<CocoAnnotation>> = Default::default();
    for a in coco.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut entries = Vec::with_capacity(coco.images.len());
    for img in &coco.images {
        let image_path = dir.join(&img.file_name);
        if !image_path.is_file() {
            return Err(Error::io(
                &image_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "image file missing"),
            ));
        }
        entries.push(ManifestEntry {
            image_path,
            width: img.width,
            height: img.height,
            annotations: by_image.remove(&img.id).unwrap_or_default(),
        });
    }
    if entries.is_empty() {
        return Err(Error::InvalidInput(format!("{} lists no images", ann_path.display())));
    }
    Ok(DatasetManifest {
        root: dir.to_path_buf(),
        split: coco.info.split,
        domain: coco.info.domain,
        categories: categories.into_iter().map(|c| c.name).collect(),
        entries,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decodes entry `index` into an [`AnnotatedImage`].
    pub fn load_entry(&self, index: usize) -> Result<AnnotatedImage> {
        let entry = &self.entries[index];
        let corrupt = |message: String| Error::CorruptAnnotation { index, message };
        let (w, h) = (entry.width as f64, entry.height as f64);
        let mut boxes = Vec::with_capacity(entry.annotations.len());
        let mut labels = Vec::with_capacity(entry.annotations.len());
        for a in &entry.annotations {
            let [x, y, bw, bh] = a.bbox;
            if !(bw > 0.0 && bh > 0.0 && x >= 0.0 && y >= 0.0 && x + bw <= w && y + bh <= h) {
                return Err(corrupt(format!("bbox {:?} outside {w}x{h} image", a.bbox)));
            }
            if a.category_id == 0 || a.category_id as usize > self.categories.len() {
                return Err(corrupt(format!("unknown category id {}", a.category_id)));
            }
            boxes.push(BBox::from_xyxy(
                (x / w) as f32,
                (y / h) as f32,
                ((x + bw) / w) as f32,
                ((y + bh) / h) as f32,
            ));
            labels.push(a.category_id as usize - 1);
        }
        let rgb = image::open(&entry.image_path)
            .map_err(|e| Error::Image {
                path: entry.image_path.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        if rgb.width() != entry.width || rgb.height() != entry.height {
            return Err(corrupt(format!(
                "image is {}x{}, annotation says {}x{}",
                rgb.width(),
                rgb.height(),
                entry.width,
                entry.height
            )));
        }
        Ok(AnnotatedImage {
            pixels: Image::from_rgb8(&rgb),
            boxes,
            labels,
            scores: None,
            domain: self.domain,
        })
    }

    /// Streams the split in batches; see [`load_batches`].
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Batches<'_> {
        load_batches(self, batch_size, shuffle_seed)
    }
}

/// Visiting order for one epoch: identity without a seed, a seeded shuffle otherwise.
pub fn epoch_order(n: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

pub struct Batches<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<Vec<AnnotatedImage>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&i| self.manifest.load_entry(i))
            .collect();
        self.pos = end;
        Some(batch)
    }
}

/// Yields every entry exactly once per pass, in manifest order or a seeded shuffle.
pub fn load_batches(
    manifest: &DatasetManifest,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Batches<'_> {
    assert!(batch_size > 0, "batch_size must be positive");
    Batches {
        manifest,
        order: epoch_order(manifest.len(), shuffle_seed),
        batch_size,
        pos: 0,
    }
}

/// A split fully decoded into memory, which is how training consumes it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub domain: DomainLabel,
    pub categories: Vec<String>,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let images = (0..manifest.len())
            .map(|i| manifest.load_entry(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            domain: manifest.domain,
            categories: manifest.categories.clone(),
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn subset(&self, n: usize) -> Self {
        Self {
            domain: self.domain,
            categories: self.categories.clone(),
            images: self.images.iter().take(n).cloned().collect(),
        }
    }
}

/// The four splits of a generated benchmark.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub source_train: DatasetManifest,
    pub source_val: DatasetManifest,
    pub target_train: DatasetManifest,
    pub target_val: DatasetManifest,
}

/// Builds source/target train/val splits under `out_dir`.
pub fn build_benchmark(
    spec: &SceneSpec,
    fog: &DomainShiftParams,
    n_train: usize,
    n_val: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Benchmark> {
    let build = |n, split, domain| build_dataset(spec, fog, n, split, domain, out_dir, seed);
    Ok(Benchmark {
        source_train: build(n_train, "train", DomainLabel::Source)?,
        source_val: build(n_val, "val", DomainLabel::Source)?,
        target_train: build(n_train, "train", DomainLabel::Target)?,
        target_val: build(n_val, "val", DomainLabel::Target)?,
    })
}

pub fn load_benchmark(out_dir: &Path) -> Result<Benchmark> {
    Ok(Benchmark {
        source_train: load_manifest(&split_dir(out_dir, DomainLabel::Source, "train"))?,
        source_val: load_manifest(&split_dir(out_dir, DomainLabel::Source, "val"))?,
        target_train: load_manifest(&split_dir(out_dir, DomainLabel::Target, "train"))?,
        target_val: load_manifest(&split_dir(out_dir, DomainLabel::Target, "val"))?,
    })
}
