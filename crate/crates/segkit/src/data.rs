//! Data preparation: per-channel normalization, overlapping patch grids,
//! geometric augmentation, and a synthetic shape dataset for desk-scale
//! experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelling::LabelMap;
use crate::tensor::{Real, Tensor};

/// Default sliding-window size.
pub const PATCH_SIZE: usize = 256;
/// Default sliding-window stride.
pub const PATCH_STRIDE: usize = 192;

/// Per-channel z-score normalization over the spatial extent. Uses the
/// population standard deviation; channels with std below 1e-8 become all
/// zeros.
pub fn zscore_normalize<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = image.shape();
    let n = (h * w) as f64;
    let mut out = image.clone();
    for ch in 0..c {
        let mut sum = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                sum += image.get(y, x, ch).as_f64();
            }
        }
        let mean = sum / n;
        let mut var = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let d = image.get(y, x, ch).as_f64() - mean;
                var += d * d;
            }
        }
        let std = (var / n).sqrt();
        for y in 0..h {
            for x in 0..w {
                let v = if std < 1e-8 {
                    0.0
                } else {
                    (image.get(y, x, ch).as_f64() - mean) / std
                };
                out.set(y, x, ch, T::of(v));
            }
        }
    }
    out
}

/// Anchor layout of overlapping square windows over one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub row_anchors: Vec<usize>,
    pub col_anchors: Vec<usize>,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.row_anchors.len() * self.col_anchors.len()
    }

    /// Anchors in row-major order (rows outer, columns inner).
    pub fn anchors(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_patches());
        for &r in &self.row_anchors {
            for &c in &self.col_anchors {
                out.push((r, c));
            }
        }
        out
    }

    /// How many windows cover each pixel (row-major H×W).
    pub fn membership_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.height * self.width];
        for (r, c) in self.anchors() {
            for y in r..r + self.patch {
                for x in c..c + self.patch {
                    counts[y * self.width + x] += 1;
                }
            }
        }
        counts
    }
}

fn axis_anchors(dim: usize, d: usize, s: usize) -> Vec<usize> {
    let mut anchors = Vec::new();
    let mut a = 0usize;
    while a + d <= dim {
        anchors.push(a);
        a += s;
    }
    let last = dim - d;
    if anchors.last() != Some(&last) {
        anchors.push(last);
    }
    anchors
}

/// Plans window anchors at multiples of the stride, with the final anchor
/// clamped to the image edge (duplicates removed).
pub fn plan_grid(height: usize, width: usize, d: usize, s: usize) -> Result<PatchGrid> {
    if d == 0 || s == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
    }
    if d > height || d > width {
        return Err(Error::InvalidDimension(format!(
            "patch {d} exceeds image {height}x{width}"
        )));
    }
    Ok(PatchGrid {
        height,
        width,
        patch: d,
        row_anchors: axis_anchors(height, d, s),
        col_anchors: axis_anchors(width, d, s),
    })
}

/// Copies out one D×D window per anchor, in anchor order.
pub fn extract_patches<T: Real>(image: &Tensor<T>, grid: &PatchGrid) -> Result<Vec<Tensor<T>>> {
    if image.height() != grid.height || image.width() != grid.width {
        return Err(Error::ShapeMismatch(format!(
            "grid planned for {}x{}, image is {}x{}",
            grid.height,
            grid.width,
            image.height(),
            image.width()
        )));
    }
    let d = grid.patch;
    let c = image.channels();
    let mut patches = Vec::with_capacity(grid.num_patches());
    for (r, col) in grid.anchors() {
        let mut p = Tensor::zeros(d, d, c);
        for y in 0..d {
            for x in 0..d {
                for ch in 0..c {
                    p.set(y, x, ch, image.get(r + y, col + x, ch));
                }
            }
        }
        patches.push(p);
    }
    Ok(patches)
}

/// Window extraction for label maps, index-aligned with the image patches.
pub fn extract_mask_patches(mask: &LabelMap, grid: &PatchGrid) -> Result<Vec<LabelMap>> {
    if mask.height() != grid.height || mask.width() != grid.width {
        return Err(Error::ShapeMismatch("grid planned for a different mask size".into()));
    }
    let d = grid.patch;
    Ok(grid
        .anchors()
        .into_iter()
        .map(|(r, c)| LabelMap::from_fn(d, d, |y, x| mask.get(r + y, c + x)))
        .collect())
}

/// Blends per-patch score maps back to full resolution: each pixel is the
/// arithmetic mean of its values across all covering windows, accumulated
/// in f64.
pub fn reconstruct<T: Real>(patches: &[Tensor<T>], grid: &PatchGrid) -> Result<Tensor<T>> {
    if patches.len() != grid.num_patches() {
        return Err(Error::ShapeMismatch(format!(
            "{} patches for {} anchors",
            patches.len(),
            grid.num_patches()
        )));
    }
    let d = grid.patch;
    let c = match patches.first() {
        Some(p) => p.channels(),
        None => return Err(Error::InvalidArgument("no patches to reconstruct".into())),
    };
    let mut sums = vec![0.0f64; grid.height * grid.width * c];
    let mut counts = vec![0u32; grid.height * grid.width];
    for ((r, col), patch) in grid.anchors().into_iter().zip(patches) {
        if patch.shape() != (d, d, c) {
            return Err(Error::ShapeMismatch("inconsistent patch shape".into()));
        }
        for y in 0..d {
            for x in 0..d {
                let gy = r + y;
                let gx = col + x;
                counts[gy * grid.width + gx] += 1;
                for ch in 0..c {
                    sums[(gy * grid.width + gx) * c + ch] += patch.get(y, x, ch).as_f64();
                }
            }
        }
    }
    let mut out = Tensor::zeros(grid.height, grid.width, c);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let n = counts[y * grid.width + x] as f64;
            for ch in 0..c {
                out.set(y, x, ch, T::of(sums[(y * grid.width + x) * c + ch] / n));
            }
        }
    }
    Ok(out)
}

/// One sampled geometric transform, applied identically to an image and
/// its mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Rotation in degrees, positive = counter-clockwise in (y-down) pixel space.
    pub angle_deg: f64,
    pub zoom: f64,
    /// Vertical shift as a fraction of the height.
    pub shift_y: f64,
    /// Horizontal shift as a fraction of the width.
    pub shift_x: f64,
    pub hflip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { angle_deg: 0.0, zoom: 1.0, shift_y: 0.0, shift_x: 0.0, hflip: false }
    }

    /// Draws rotation ±20°, zoom 0.5–1.5, shifts ±10%, and a fair-coin
    /// horizontal flip, in that order.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            angle_deg: rng.random_range(-20.0..=20.0),
            zoom: rng.random_range(0.5..=1.5),
            shift_y: rng.random_range(-0.1..=0.1),
            shift_x: rng.random_range(-0.1..=0.1),
            hflip: rng.random_bool(0.5),
        }
    }
}

/// Mixes a base seed with per-draw indices (SplitMix64 finalizer), so each
/// (epoch, sample) pair gets an independent augmentation stream.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Applies one geometric transform to an image (bilinear, zero fill) and
/// its mask (nearest-neighbor, background fill). Identity parameters
/// reproduce the inputs exactly.
pub fn augment<T: Real>(
    image: &Tensor<T>,
    mask: &LabelMap,
    params: &AugmentParams,
) -> Result<(Tensor<T>, LabelMap)> {
    let (h, w, c) = image.shape();
    if mask.height() != h || mask.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} vs mask {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    if params.zoom <= 0.0 {
        return Err(Error::InvalidArgument("zoom must be positive".into()));
    }
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let theta = params.angle_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let shift_y_px = params.shift_y * h as f64;
    let shift_x_px = params.shift_x * w as f64;

    let mut out_img = Tensor::zeros(h, w, c);
    let mut out_mask = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let x_eff = if params.hflip { w - 1 - x } else { x } as f64;
            let dy = y as f64 - cy - shift_y_px;
            let dx = x_eff - cx - shift_x_px;
            // Inverse rotation then inverse zoom back into source space.
            let sy = cy + (cos_t * dy + sin_t * dx) / params.zoom;
            let sx = cx + (-sin_t * dy + cos_t * dx) / params.zoom;

            // Mask: nearest neighbor, out-of-frame = background.
            let ny = sy.round();
            let nx = sx.round();
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                out_mask.set(y, x, mask.get(ny as usize, nx as usize));
            }

            // Image: bilinear over zero-padded source.
            if sy <= -1.0 || sx <= -1.0 || sy >= h as f64 || sx >= w as f64 {
                continue;
            }
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let (y0, x0) = (y0 as i64, x0 as i64);
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                    for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                        let yy = y0 + oy;
                        let xx = x0 + ox;
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            acc += wy * wx * image.get(yy as usize, xx as usize, ch).as_f64();
                        }
                    }
                }
                out_img.set(y, x, ch, T::of(acc));
            }
        }
    }
    Ok((out_img, out_mask))
}

/// Samples a transform from the seed and applies it.
pub fn augment_seeded<T: Real>(
    image: &Tensor<T>,
    mask: &LabelMap,
    seed: u64,
) -> Result<(Tensor<T>, LabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams::sample(&mut rng);
    augment(image, mask, &params)
}

/// One image/mask pair with its origin patient.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub patient_id: String,
    pub image: Tensor<f32>,
    pub mask: LabelMap,
}

/// An in-memory dataset of aligned samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    /// Distinct patient ids in first-appearance order.
    pub fn patients(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for s in &self.samples {
            if !seen.contains(&s.patient_id) {
                seen.push(s.patient_id.clone());
            }
        }
        seen
    }
}

/// Configuration of the synthetic shape dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_patients: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_images: 8, height: 32, width: 32, num_classes: 5, num_patients: 5, seed: 7 }
    }
}

/// Per-channel intensity signature of a class: channel 0 ascends with the
/// class index, channel 1 descends, so every class is separable from the
/// background (≈0.05) and from its neighbors.
fn class_signature(class: usize, channel: usize, num_classes: usize) -> f64 {
    let t = class as f64 / (num_classes - 1) as f64;
    if channel == 0 {
        0.15 + 0.8 * t
    } else {
        0.95 - 0.8 * t
    }
}

/// Generates two-channel images of layered geometric shapes with exact
/// masks. Each target class appears once per image (one circle or
/// rectangle jittered inside its own grid cell, so classes never occlude
/// each other), with class-specific intensities plus Gaussian noise.
/// Patients are assigned round-robin.
pub fn generate_synthetic_dataset(config: &SynthConfig) -> Result<Dataset> {
    let SynthConfig { num_images, height: h, width: w, num_classes, num_patients, seed } = *config;
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if num_patients == 0 {
        return Err(Error::InvalidArgument("need at least 1 patient".into()));
    }
    let targets = num_classes - 1;
    // Cell layout: one region per target class.
    let cols = (targets as f64).sqrt().ceil() as usize;
    let rows = targets.div_ceil(cols);
    if h / rows < 4 || w / cols < 4 {
        return Err(Error::InvalidDimension(format!(
            "{h}x{w} too small for {targets} target classes"
        )));
    }
    let noise = Normal::new(0.0f64, 0.02).expect("valid normal");

    let mut samples = Vec::with_capacity(num_images);
    for i in 0..num_images {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64, 0));
        let mut image = Tensor::zeros(h, w, 2);
        let mut mask = LabelMap::filled(h, w, 0);
        // Background: gentle gradients plus noise.
        for y in 0..h {
            for x in 0..w {
                let g0 = 0.05 + 0.05 * y as f64 / h as f64 + noise.sample(&mut rng);
                let g1 = 0.08 + 0.04 * x as f64 / w as f64 + noise.sample(&mut rng);
                image.set(y, x, 0, g0 as f32);
                image.set(y, x, 1, g1 as f32);
            }
        }
        for class in 1..num_classes {
            let cell = class - 1;
            let cell_y = (cell / cols) * (h / rows);
            let cell_x = (cell % cols) * (w / cols);
            let cell_h = h / rows;
            let cell_w = w / cols;
            let max_r = (cell_h.min(cell_w) / 2).saturating_sub(1).max(1);
            let r = rng.random_range((max_r / 2).max(1)..=max_r);
            let cy = cell_y + rng.random_range(r..cell_h - r.min(cell_h - 1));
            let cx = cell_x + rng.random_range(r..cell_w - r.min(cell_w - 1));
            let circle = rng.random_bool(0.5);
            for y in cy.saturating_sub(r)..(cy + r + 1).min(h) {
                for x in cx.saturating_sub(r)..(cx + r + 1).min(w) {
                    let dy = y as i64 - cy as i64;
                    let dx = x as i64 - cx as i64;
                    let inside = if circle { dy * dy + dx * dx <= (r * r) as i64 } else { true };
                    if inside {
                        mask.set(y, x, class as u8);
                        for ch in 0..2 {
                            let v = class_signature(class, ch, num_classes) + noise.sample(&mut rng);
                            image.set(y, x, ch, v as f32);
                        }
                    }
                }
            }
        }
        samples.push(Sample {
            id: format!("img_{i:03}"),
            patient_id: format!("patient_{}", i % num_patients),
            image,
            mask,
        });
    }
    Ok(Dataset { samples, num_classes })
}
