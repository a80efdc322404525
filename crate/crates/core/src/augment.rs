//! Paired augmentation of optical / infrared samples and upsampling with replacement.
//!
//! The pipeline runs in a fixed order:
//!
//! 1. reflection across the vertical axis (optional),
//! 2. a fixed rotation (optional),
//! 3. a random affine rotation, scale and shear (optional),
//! 4. Gaussian blur (always),
//! 5. salt-and-pepper noise (optional).
//!
//! Steps 1 to 3 are composed into one warp shared by both modalities, so the
//! pair stays aligned. Blur strength and noise pixels are drawn per modality.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetItem, Sample};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("invalid sample: {0}")]
    Sample(String),
    #[error("cannot upsample an empty dataset")]
    EmptySource,
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineRanges {
    /// Symmetric bound in degrees.
    pub rotation_deg: f32,
    pub scale: (f32, f32),
    /// Symmetric bound in degrees.
    pub shear_deg: f32,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self { rotation_deg: 15.0, scale: (0.9, 1.1), shear_deg: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability of each optional step.
    pub p_step: f64,
    pub fixed_rotation_deg: f32,
    pub affine: AffineRanges,
    pub blur_sigma: (f32, f32),
    pub salt_pepper_fraction: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_step: 0.5,
            fixed_rotation_deg: 25.0,
            affine: AffineRanges::default(),
            blur_sigma: (0.5, 1.5),
            salt_pepper_fraction: 0.02,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AugmentError::Config(m));
        if !(0.0..=1.0).contains(&self.p_step) {
            return bad(format!("p_step {} outside [0, 1]", self.p_step));
        }
        let (lo, hi) = self.affine.scale;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("scale range ({lo}, {hi}) must be positive and ordered"));
        }
        if !(self.affine.rotation_deg >= 0.0 && self.affine.shear_deg >= 0.0 && self.affine.shear_deg < 90.0) {
            return bad("rotation and shear bounds must be non-negative, shear below 90 degrees".into());
        }
        let (s0, s1) = self.blur_sigma;
        if !(s0 > 0.0 && s0 <= s1) {
            return bad(format!("blur sigma range ({s0}, {s1}) must be positive and ordered"));
        }
        if !(0.0..=0.5).contains(&self.salt_pepper_fraction) {
            return bad(format!("salt-and-pepper fraction {} outside [0, 0.5]", self.salt_pepper_fraction));
        }
        Ok(())
    }

    /// Random stream owned by one sample, independent of processing order.
    pub fn stream_for(&self, sample_id: &str) -> ChaCha8Rng {
        seed::stream(seed::from_id(self.seed, sample_id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineDraw {
    pub rotation_deg: f32,
    pub scale: f32,
    pub shear_deg: f32,
}

/// What the pipeline did to one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub reflected: bool,
    pub rotated: bool,
    pub affine: Option<AffineDraw>,
    pub optical_blur_sigma: f32,
    pub infrared_blur_sigma: f32,
    pub salt_pepper: bool,
    /// Forward map of centered `(x, y)` coordinates.
    pub warp: [[f64; 2]; 2],
}

impl AugmentTrace {
    /// Output location of input pixel `(y, x)` in an `h x w` image.
    pub fn map_point(&self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (u, v) = (x - cx, y - cy);
        let m = self.warp;
        (m[1][0] * u + m[1][1] * v + cy, m[0][0] * u + m[0][1] * v + cx)
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j]))
}

fn rotation(deg: f64) -> [[f64; 2]; 2] {
    let (s, c) = deg.to_radians().sin_cos();
    [[c, -s], [s, c]]
}

const IDENTITY: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];
const REFLECT: [[f64; 2]; 2] = [[-1.0, 0.0], [0.0, 1.0]];

fn border_mean(plane: &[f32], h: usize, w: usize) -> f32 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                sum += plane[y * w + x] as f64;
                n += 1;
            }
        }
    }
    (sum / n as f64) as f32
}

/// Resamples `plane` so that output pixel `p` reads input at `inverse * p`
/// (centered coordinates), bilinearly, with out-of-frame reads set to the
/// border mean.
fn warp_plane(plane: &[f32], h: usize, w: usize, inverse: [[f64; 2]; 2]) -> Vec<f32> {
    if inverse == REFLECT {
        return (0..h * w).map(|i| plane[(i / w) * w + (w - 1 - i % w)]).collect();
    }
    let fill = border_mean(plane, h, w);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let eps = 1e-6;
    let mut out = vec![fill; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 - cx, y as f64 - cy);
            let sx = inverse[0][0] * u + inverse[0][1] * v + cx;
            let sy = inverse[1][0] * u + inverse[1][1] * v + cy;
            if sx < -eps || sy < -eps || sx > (w - 1) as f64 + eps || sy > (h - 1) as f64 + eps {
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, (w - 1) as f64), sy.clamp(0.0, (h - 1) as f64));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out[y * w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma as f64).powi(2)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian blur of one `h x w` plane with clamped borders.
pub fn gaussian_blur(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * plane[y * w + clamp(x as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[clamp(y as i64 + k as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Sets a `fraction` of pixels to `high` or `low` with equal odds; returns touched pixel count.
fn salt_and_pepper(planes: &mut [&mut [f32]], fraction: f32, low: f32, high: f32, rng: &mut ChaCha8Rng) -> usize {
    let n = planes[0].len();
    let mut touched = 0;
    for i in 0..n {
        if rng.random::<f32>() < fraction {
            let v = if rng.random::<bool>() { high } else { low };
            for p in planes.iter_mut() {
                p[i] = v;
            }
            touched += 1;
        }
    }
    touched
}

fn check_sample(sample: &Sample) -> Result<(usize, usize)> {
    let ir = sample.infrared.shape();
    match (sample.optical.shape(), ir) {
        (&[3, h, w], &[h2, w2]) if (h, w) == (h2, w2) && h > 0 && w > 0 => Ok((h, w)),
        (o, i) => Err(AugmentError::Sample(format!("optical {o:?} and infrared {i:?} are not an aligned pair"))),
    }
}

/// Runs the pipeline and reports which steps fired.
pub fn augment_sample_traced(sample: &Sample, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<(Sample, AugmentTrace)> {
    config.validate()?;
    let (h, w) = check_sample(sample)?;
    let p = config.p_step;

    // Every draw happens regardless of outcome so the stream layout is fixed.
    let reflected = rng.random_bool(p);
    let rotated = rng.random_bool(p);
    let affine_on = rng.random_bool(p);
    let a = config.affine;
    let draw = AffineDraw {
        rotation_deg: rng.random_range(-a.rotation_deg..=a.rotation_deg),
        scale: rng.random_range(a.scale.0..=a.scale.1),
        shear_deg: rng.random_range(-a.shear_deg..=a.shear_deg),
    };
    let (s0, s1) = config.blur_sigma;
    let optical_sigma = rng.random_range(s0..=s1);
    let infrared_sigma = rng.random_range(s0..=s1);
    let salt_pepper = rng.random_bool(p);
    let mut optical_noise = seed::stream(rng.next_u64());
    let mut infrared_noise = seed::stream(rng.next_u64());

    let mut warp = IDENTITY;
    if reflected {
        warp = mat_mul(REFLECT, warp);
    }
    if rotated {
        warp = mat_mul(rotation(config.fixed_rotation_deg as f64), warp);
    }
    if affine_on {
        let shear = [[1.0, (draw.shear_deg as f64).to_radians().tan()], [0.0, 1.0]];
        let s = draw.scale as f64;
        let m = mat_mul(rotation(draw.rotation_deg as f64), shear);
        warp = mat_mul(m.map(|row| row.map(|v| v * s)), warp);
    }
    let det = warp[0][0] * warp[1][1] - warp[0][1] * warp[1][0];
    let inverse = [[warp[1][1] / det, -warp[0][1] / det], [-warp[1][0] / det, warp[0][0] / det]];

    let plane = h * w;
    let mut optical: Vec<f32> = sample.optical.data().to_vec();
    let mut infrared: Vec<f32> = sample.infrared.data().to_vec();
    if warp != IDENTITY {
        for c in 0..3 {
            let warped = warp_plane(&optical[c * plane..(c + 1) * plane], h, w, inverse);
            optical[c * plane..(c + 1) * plane].copy_from_slice(&warped);
        }
        infrared = warp_plane(&infrared, h, w, inverse);
    }

    for c in 0..3 {
        let blurred = gaussian_blur(&optical[c * plane..(c + 1) * plane], h, w, optical_sigma);
        optical[c * plane..(c + 1) * plane].copy_from_slice(&blurred);
    }
    infrared = gaussian_blur(&infrared, h, w, infrared_sigma);

    if salt_pepper {
        let f = config.salt_pepper_fraction;
        let (r, rest) = optical.split_at_mut(plane);
        let (g, b) = rest.split_at_mut(plane);
        salt_and_pepper(&mut [r, g, b], f, 0.0, 1.0, &mut optical_noise);
        let (lo, hi) = infrared.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)));
        salt_and_pepper(&mut [&mut infrared[..]], f, lo, hi, &mut infrared_noise);
    }

    let out = Sample {
        optical: Tensor::new([3, h, w], optical).expect("shape preserved"),
        infrared: Tensor::new([h, w], infrared).expect("shape preserved"),
        label: sample.label,
        provenance: sample.provenance.clone(),
    };
    let trace = AugmentTrace {
        reflected,
        rotated,
        affine: affine_on.then_some(draw),
        optical_blur_sigma: optical_sigma,
        infrared_blur_sigma: infrared_sigma,
        salt_pepper,
        warp,
    };
    Ok((out, trace))
}

pub fn augment_sample(sample: &Sample, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    augment_sample_traced(sample, config, rng).map(|(s, _)| s)
}

/// Reflection across the vertical axis alone, as applied by step 1.
pub fn reflect(sample: &Sample) -> Result<Sample> {
    let (h, w) = check_sample(sample)?;
    let plane = h * w;
    let flip = |data: &[f32], planes: usize| -> Vec<f32> {
        (0..planes).flat_map(|c| warp_plane(&data[c * plane..(c + 1) * plane], h, w, REFLECT)).collect()
    };
    Ok(Sample {
        optical: Tensor::new([3, h, w], flip(sample.optical.data(), 3)).expect("shape preserved"),
        infrared: Tensor::new([h, w], flip(sample.infrared.data(), 1)).expect("shape preserved"),
        label: sample.label,
        provenance: sample.provenance.clone(),
    })
}

/// Indices of `target_size` uniform draws with replacement from `0..source_len`.
pub fn upsample_indices(source_len: usize, target_size: usize, seed: u64) -> Result<Vec<usize>> {
    if source_len == 0 {
        return Err(AugmentError::EmptySource);
    }
    let mut rng = seed::stream(seed::derive_named(seed, "upsample"));
    Ok((0..target_size).map(|_| rng.random_range(0..source_len)).collect())
}

/// Separator between a source id and the copy number in upsampled ids.
pub const COPY_SEPARATOR: char = '#';

/// Source sample id of an upsampled copy.
pub fn source_id(id: &str) -> &str {
    id.split(COPY_SEPARATOR).next().unwrap_or(id)
}

/// Draws `target_size` entries with replacement; copies keep their split and
/// get ids `<source>#<k>`.
pub fn upsample_with_replacement(dataset: &Dataset, target_size: usize, seed: u64) -> Result<Dataset> {
    let picks = upsample_indices(dataset.len(), target_size, seed)?;
    let items = picks
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let src = &dataset.items[i];
            DatasetItem { id: format!("{}{COPY_SEPARATOR}{k}", src.id), split: src.split, sample: src.sample.clone() }
        })
        .collect();
    Ok(Dataset { items, ..dataset.clone_meta() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_bounds_checked() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = [
            AugmentConfig { p_step: 1.5, ..Default::default() },
            AugmentConfig { salt_pepper_fraction: 0.6, ..Default::default() },
            AugmentConfig { affine: AffineRanges { scale: (0.0, 1.0), ..Default::default() }, ..Default::default() },
            AugmentConfig { blur_sigma: (2.0, 1.0), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.2);
        assert_eq!(k.len(), 9);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        for i in 0..k.len() / 2 {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn blur_keeps_constants() {
        let out = gaussian_blur(&[3.5; 30], 5, 6, 1.5);
        assert!(out.iter().all(|v| (v - 3.5).abs() < 1e-5));
    }

    #[test]
    fn identity_warp_keeps_pixels() {
        let plane: Vec<f32> = (0..20).map(|i| i as f32).collect();
        assert_eq!(warp_plane(&plane, 4, 5, IDENTITY), plane);
    }

    #[test]
    fn rotation_by_90_about_center() {
        // 3x3 with a marker at the top middle: the pixel moves to a side middle.
        let mut plane = vec![0.0f32; 9];
        plane[1] = 1.0;
        let r = rotation(90.0);
        let inv = [[r[1][1], -r[0][1]], [-r[1][0], r[0][0]]];
        let out = warp_plane(&plane, 3, 3, inv);
        let hot: Vec<usize> = out.iter().enumerate().filter(|(_, &v)| v > 0.99).map(|(i, _)| i).collect();
        assert!(hot == vec![3] || hot == vec![5], "{out:?}");
    }

    #[test]
    fn border_fill_uses_edge_mean() {
        let mut plane = vec![0.0f32; 16];
        for (i, v) in plane.iter_mut().enumerate() {
            let (y, x) = (i / 4, i % 4);
            *v = if y == 0 || x == 0 || y == 3 || x == 3 { 2.0 } else { 10.0 };
        }
        // Shrinking to half size pulls in out-of-frame reads at the corners.
        let out = warp_plane(&plane, 4, 4, [[3.0, 0.0], [0.0, 3.0]]);
        assert_eq!(out[0], 2.0);
    }

    #[test]
    fn upsample_rejects_empty_source() {
        assert_eq!(upsample_indices(0, 5, 1), Err(AugmentError::EmptySource));
        assert_eq!(upsample_indices(1, 5, 1).unwrap(), vec![0; 5]);
    }

    #[test]
    fn copy_ids_resolve_to_source() {
        assert_eq!(source_id("s00012#7"), "s00012");
        assert_eq!(source_id("s00012"), "s00012");
    }
}
