//! Dataset ingestion, preprocessing, augmentation, the stratified 80/20
//! split and deterministic batching.
//!
//! On disk a dataset is a root directory with `Parasitized/` and
//! `Uninfected/` subdirectories of PNG files; the label comes from the
//! directory name.

use std::cell::OnceCell;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::Class;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use crate::training::LabelBatch;

pub mod synthetic;

/// Side length every image is resized to.
pub const IMAGE_SIZE: usize = 130;

/// One labeled, preprocessed sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: Class,
    /// `1×130×130×3`, RGB, values in `[0, 1]`.
    pub pixels: Tensor4<f32>,
}

/// Label implied by the name of a file's parent directory.
pub fn label_from_path(path: &Path) -> Result<Class> {
    path.parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Ingestion {
            path: path.to_path_buf(),
            reason: "parent directory is neither Parasitized nor Uninfected".into(),
        })
}

/// Decodes an image file to RGB, resizes to 130×130 and scales to `[0, 1]`.
///
/// The decoder delivers channels in RGB order already, so no BGR swap is
/// applied here.
pub fn load_pixels(path: &Path) -> Result<Tensor4<f32>> {
    let ingest = |reason: String| Error::Ingestion {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| ingest(e.to_string()))?;
    let img = image::load_from_memory(&bytes).map_err(|e| ingest(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(ingest("image has no pixels".into()));
    }
    let raw = Tensor4::new([1, h, w, 3], rgb.into_raw().into_iter().map(|b| b as f32).collect())?;
    let resized = resize_bilinear(&raw, IMAGE_SIZE, IMAGE_SIZE);
    Ok(resized.map(|v| (v / 255.0).clamp(0.0, 1.0)))
}

pub fn load_and_preprocess(path: impl AsRef<Path>) -> Result<ImageRecord> {
    let path = path.as_ref();
    let label = label_from_path(path)?;
    Ok(ImageRecord {
        path: path.to_path_buf(),
        label,
        pixels: load_pixels(path)?,
    })
}

/// Bilinear resize with half-pixel centers; edge samples clamp.
pub fn resize_bilinear(src: &Tensor4<f32>, out_h: usize, out_w: usize) -> Tensor4<f32> {
    let [n, h, w, c] = src.dims();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Tensor4::zeros([n, out_h, out_w, c]);
    for b in 0..n {
        for y in 0..out_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            for x in 0..out_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                for ch in 0..c {
                    let v = sample_bilinear(src, b, fy, fx, ch);
                    out.set(b, y, x, ch, v as f32);
                }
            }
        }
    }
    out
}

/// Bilinear sample at a fractional position already clamped into the image.
fn sample_bilinear(src: &Tensor4<f32>, b: usize, fy: f64, fx: f64, ch: usize) -> f64 {
    let (h, w) = (src.height(), src.width());
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let dy = fy - y0 as f64;
    let dx = fx - x0 as f64;
    let p = |y, x| src.at(b, y, x, ch) as f64;
    let top = p(y0, x0) * (1.0 - dx) + p(y0, x1) * dx;
    let bottom = p(y1, x0) * (1.0 - dx) + p(y1, x1) * dx;
    top * (1.0 - dy) + bottom * dy
}

/// Augmentation magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_deg_max: f64,
    pub zoom_frac_max: f64,
    /// Fraction of the image side.
    pub shift_frac_max: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg_max: 10.0,
            zoom_frac_max: 0.10,
            shift_frac_max: 0.10,
            hflip: true,
            vflip: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn identity() -> Self {
        Self {
            rotation_deg_max: 0.0,
            zoom_frac_max: 0.0,
            shift_frac_max: 0.0,
            hflip: false,
            vflip: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mags = [self.rotation_deg_max, self.zoom_frac_max, self.shift_frac_max];
        if mags.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::usage("augmentation magnitudes must be non-negative"));
        }
        if self.zoom_frac_max > 1.0 || self.shift_frac_max > 1.0 {
            return Err(Error::usage("zoom and shift fractions must not exceed 1"));
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub zoom: f64,
    /// Pixels, positive is right/down.
    pub shift_x: f64,
    pub shift_y: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        zoom: 1.0,
        shift_x: 0.0,
        shift_y: 0.0,
        hflip: false,
        vflip: false,
    };

    fn is_identity_geometry(&self) -> bool {
        self.rotation_deg == 0.0 && self.zoom == 1.0 && self.shift_x == 0.0 && self.shift_y == 0.0
    }
}

fn symmetric(rng: &mut impl Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

pub fn sample_affine(config: &AugmentConfig, size: usize, rng: &mut impl Rng) -> AffineParams {
    let rotation_deg = symmetric(rng, config.rotation_deg_max);
    let zoom = 1.0 + symmetric(rng, config.zoom_frac_max);
    let max_shift = config.shift_frac_max * size as f64;
    let shift_x = symmetric(rng, max_shift);
    let shift_y = symmetric(rng, max_shift);
    let hflip = config.hflip && rng.random_bool(0.5);
    let vflip = config.vflip && rng.random_bool(0.5);
    AffineParams {
        rotation_deg,
        zoom,
        shift_x,
        shift_y,
        hflip,
        vflip,
    }
}

/// Rotation and zoom about the image center plus a shift, by inverse
/// mapping with bilinear sampling and nearest-edge fill, then flips.
pub fn apply_affine(pixels: &Tensor4<f32>, p: &AffineParams) -> Tensor4<f32> {
    let [n, h, w, c] = pixels.dims();
    let mut out = if p.is_identity_geometry() {
        pixels.clone()
    } else {
        let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut out = Tensor4::zeros([n, h, w, c]);
        for y in 0..h {
            let v = y as f64 - cy - p.shift_y;
            for x in 0..w {
                let u = x as f64 - cx - p.shift_x;
                let sx = ((cos * u + sin * v) / p.zoom + cx).clamp(0.0, (w - 1) as f64);
                let sy = ((-sin * u + cos * v) / p.zoom + cy).clamp(0.0, (h - 1) as f64);
                for b in 0..n {
                    for ch in 0..c {
                        out.set(b, y, x, ch, sample_bilinear(pixels, b, sy, sx, ch) as f32);
                    }
                }
            }
        }
        out
    };
    if p.hflip || p.vflip {
        let src = out.clone();
        for b in 0..n {
            for y in 0..h {
                let sy = if p.vflip { h - 1 - y } else { y };
                for x in 0..w {
                    let sx = if p.hflip { w - 1 - x } else { x };
                    for ch in 0..c {
                        out.set(b, y, x, ch, src.at(b, sy, sx, ch));
                    }
                }
            }
        }
    }
    out
}

pub fn augment_pixels(pixels: &Tensor4<f32>, config: &AugmentConfig, rng: &mut impl Rng) -> Tensor4<f32> {
    let params = sample_affine(config, pixels.height(), rng);
    apply_affine(pixels, &params).map(|v| v.clamp(0.0, 1.0))
}

pub fn augment(record: &ImageRecord, config: &AugmentConfig, rng: &mut impl Rng) -> ImageRecord {
    ImageRecord {
        path: record.path.clone(),
        label: record.label,
        pixels: augment_pixels(&record.pixels, config, rng),
    }
}

/// A labeled file reference, path relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sample {
    pub path: PathBuf,
    pub label: Class,
}

/// Lists every PNG under `root/Parasitized` and `root/Uninfected`, sorted.
pub fn scan_dataset(root: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for class in Class::ALL {
        let dir = root.join(class.dir_name());
        let entries = fs::read_dir(&dir).map_err(|e| Error::Ingestion {
            path: dir.clone(),
            reason: e.to_string(),
        })?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            let is_png = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if is_png {
                samples.push(Sample {
                    path: PathBuf::from(class.dir_name()).join(entry.file_name()),
                    label: class,
                });
            }
        }
    }
    samples.sort();
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub val_frac: f64,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
}

/// Number of validation items for a class of `count`, `ceil(frac * count)`.
pub fn validation_count(count: usize, val_frac: f64) -> usize {
    // guard against products like 0.2 * 15 = 3.0000000000000004
    let raw = val_frac * count as f64;
    let rounded = raw.round();
    let n = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (n as usize).min(count)
}

/// Per class: seeded shuffle, first `ceil(val_frac * count)` to validation.
pub fn stratified_split(samples: &[Sample], val_frac: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&val_frac) {
        return Err(Error::usage(format!("validation fraction {val_frac} outside [0, 1]")));
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for class in Class::ALL {
        let mut members: Vec<Sample> = samples.iter().filter(|s| s.label == class).cloned().collect();
        if members.is_empty() {
            return Err(Error::usage(format!("class {class} has no samples")));
        }
        members.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, class.index() as u64]));
        members.shuffle(&mut rng);
        let k = validation_count(members.len(), val_frac);
        let rest = members.split_off(k);
        validation.extend(members);
        train.extend(rest);
    }
    Ok(DatasetSplit {
        seed,
        val_frac,
        train,
        validation,
    })
}

/// Frozen split, shareable as JSON. Paths are relative to `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub val_frac: f64,
    pub train: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
}

impl SplitManifest {
    pub fn from_split(root: &Path, split: &DatasetSplit) -> Self {
        Self {
            root: root.to_path_buf(),
            seed: split.seed,
            val_frac: split.val_frac,
            train: split.train.iter().map(|s| s.path.clone()).collect(),
            validation: split.validation.iter().map(|s| s.path.clone()).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn samples(paths: &[PathBuf]) -> Result<Vec<Sample>> {
        paths
            .iter()
            .map(|p| {
                Ok(Sample {
                    path: p.clone(),
                    label: label_from_path(p)?,
                })
            })
            .collect()
    }

    pub fn train_samples(&self) -> Result<Vec<Sample>> {
        Self::samples(&self.train)
    }

    pub fn validation_samples(&self) -> Result<Vec<Sample>> {
        Self::samples(&self.validation)
    }
}

/// Random-access labeled images.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn label(&self, index: usize) -> Class;
    fn pixels(&self, index: usize) -> Result<Tensor4<f32>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [ImageRecord] {
    fn len(&self) -> usize {
        <[ImageRecord]>::len(self)
    }

    fn label(&self, index: usize) -> Class {
        self[index].label
    }

    fn pixels(&self, index: usize) -> Result<Tensor4<f32>> {
        Ok(self[index].pixels.clone())
    }
}

impl SampleSource for Vec<ImageRecord> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn label(&self, index: usize) -> Class {
        self[index].label
    }

    fn pixels(&self, index: usize) -> Result<Tensor4<f32>> {
        Ok(self[index].pixels.clone())
    }
}

/// Files decoded on demand, with an optional in-memory cache of decoded images.
pub struct DiskSource {
    root: PathBuf,
    samples: Vec<Sample>,
    cache: Option<Vec<OnceCell<Tensor4<f32>>>>,
}

impl DiskSource {
    pub fn new(root: impl Into<PathBuf>, samples: Vec<Sample>, cache: bool) -> Self {
        let cache = cache.then(|| (0..samples.len()).map(|_| OnceCell::new()).collect());
        Self {
            root: root.into(),
            samples,
            cache,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }
}

impl SampleSource for DiskSource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn label(&self, index: usize) -> Class {
        self.samples[index].label
    }

    fn pixels(&self, index: usize) -> Result<Tensor4<f32>> {
        let path = self.root.join(&self.samples[index].path);
        match &self.cache {
            None => load_pixels(&path),
            Some(cells) => {
                if let Some(t) = cells[index].get() {
                    return Ok(t.clone());
                }
                let t = load_pixels(&path)?;
                Ok(cells[index].get_or_init(|| t).clone())
            }
        }
    }
}

/// splitmix64 over a sequence of words.
pub fn mix(words: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        state ^= w;
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

/// Sample order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, epoch]));
    order.shuffle(&mut rng);
    order
}

/// Deterministic batches for one epoch.
pub struct BatchIter<'a, S: SampleSource + ?Sized> {
    source: &'a S,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    augment: Option<&'a AugmentConfig>,
    seed: u64,
    epoch: u64,
}

/// Shuffles `source` by `(seed, epoch)` and yields batches of `batch_size`
/// with a short final batch. With augmentation each image gets its own RNG
/// stream keyed by `(augment seed, seed, epoch, sample index)`.
pub fn batch_iter<'a, S: SampleSource + ?Sized>(
    source: &'a S,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    augment: Option<&'a AugmentConfig>,
) -> Result<BatchIter<'a, S>> {
    if batch_size < 1 {
        return Err(Error::usage("batch size must be at least 1"));
    }
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(cfg) = augment {
        cfg.validate()?;
    }
    Ok(BatchIter {
        source,
        order: epoch_order(source.len(), seed, epoch),
        batch_size,
        cursor: 0,
        augment,
        seed,
        epoch,
    })
}

impl<S: SampleSource + ?Sized> BatchIter<'_, S> {
    /// Sample indices of each batch, in delivery order.
    pub fn plan(&self) -> Vec<Vec<usize>> {
        self.order.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }

    fn load(&self, index: usize) -> Result<Tensor4<f32>> {
        let pixels = self.source.pixels(index)?;
        Ok(match self.augment {
            Some(cfg) => {
                let stream = mix(&[cfg.seed, self.seed, self.epoch, index as u64]);
                augment_pixels(&pixels, cfg, &mut ChaCha8Rng::seed_from_u64(stream))
            }
            None => pixels,
        })
    }
}

impl<S: SampleSource + ?Sized> Iterator for BatchIter<'_, S> {
    type Item = Result<(Tensor4<f32>, LabelBatch)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let result = (|| {
            let images = indices.iter().map(|&i| self.load(i)).collect::<Result<Vec<_>>>()?;
            let labels = indices.iter().map(|&i| self.source.label(i).index()).collect();
            Ok((Tensor4::stack(&images)?, LabelBatch::new(labels)?))
        })();
        Some(result)
    }
}
