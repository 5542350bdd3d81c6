//! Synthetic blood-cell images for smoke runs and tests.
//!
//! Each image is one pink cell filling most of a black frame, as in the
//! cropped NIH images. Parasitized cells
//! carry one to three dark purple stained inclusions; uninfected cells are clean.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mix, ImageRecord, Sample, IMAGE_SIZE};
use crate::class::Class;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub fn cell_image(class: Class, rng: &mut impl Rng) -> Tensor4<f32> {
    let s = IMAGE_SIZE as f64;
    let cx = s / 2.0 + rng.random_range(-6.0..6.0);
    let cy = s / 2.0 + rng.random_range(-6.0..6.0);
    // cropped cells fill most of the frame, slightly elliptical
    let rx = rng.random_range(48.0..62.0);
    let ry = rx * rng.random_range(0.85..1.0);
    let shade = rng.random_range(0.85..1.1);
    let tint = [
        shade * rng.random_range(0.74..0.90),
        shade * rng.random_range(0.50..0.64),
        shade * rng.random_range(0.56..0.72),
    ];
    let spots: Vec<(f64, f64, f64)> = match class {
        Class::Uninfected => Vec::new(),
        Class::Parasitized => (0..rng.random_range(1..=3))
            .map(|_| {
                let r = rng.random_range(0.0..rx * 0.55);
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                (cx + r * a.cos(), cy + r * a.sin(), rng.random_range(8.0..16.0))
            })
            .collect(),
    };
    let spot_color = [0.36, 0.14, 0.48];
    Tensor4::from_fn([1, IMAGE_SIZE, IMAGE_SIZE, 3], |_, y, x, c| {
        let (fx, fy) = (x as f64, y as f64);
        let d = (((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2)).sqrt();
        let mut v = if d <= 1.0 { tint[c] * (1.0 - 0.15 * d * d) } else { 0.0 };
        for &(sx, sy, sr) in &spots {
            let ds = ((fx - sx).powi(2) + (fy - sy).powi(2)).sqrt();
            if ds <= sr && d <= 1.0 {
                // soft-edged stain
                let t = (1.0 - ds / sr).min(0.3) / 0.3;
                v = v * (1.0 - t) + spot_color[c] * t;
            }
        }
        (v + noise(x, y, c)).clamp(0.0, 1.0) as f32
    })
}

// cheap fixed texture so neighbouring pixels differ
fn noise(x: usize, y: usize, c: usize) -> f64 {
    let h = mix(&[x as u64, y as u64, c as u64]);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 0.06 - 0.03
}

/// `n_per_class` in-memory records per class, alternating classes.
pub fn records(n_per_class: usize, seed: u64) -> Vec<ImageRecord> {
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        for class in Class::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, i as u64, class.index() as u64]));
            out.push(ImageRecord {
                path: format!("{}/{i:05}.png", class.dir_name()).into(),
                label: class,
                pixels: cell_image(class, &mut rng),
            });
        }
    }
    out
}

pub fn write_png(pixels: &Tensor4<f32>, path: &Path) -> Result<()> {
    let [_, h, w, c] = pixels.dims();
    if c != 3 {
        return Err(Error::shape("PNG export needs 3 channels"));
    }
    let bytes: Vec<u8> = pixels.data()[..h * w * 3]
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from dims");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes a dataset in the on-disk layout and returns its samples.
pub fn write_dataset(root: &Path, n_per_class: usize, seed: u64) -> Result<Vec<Sample>> {
    for class in Class::ALL {
        let dir = root.join(class.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    records(n_per_class, seed)
        .into_iter()
        .map(|r| {
            write_png(&r.pixels, &root.join(&r.path))?;
            Ok(Sample {
                path: r.path,
                label: r.label,
            })
        })
        .collect()
}
