//! Procedural image datasets and the evaluation-scenario transforms:
//! long-tail subsampling, corruptions and nested few-shot subsets.
//!
//! Every random draw is keyed by `(seed, purpose, index)` so that labels and
//! geometry do not depend on appearance settings, and corruption noise at one
//! severity is a rescaling of the noise at another.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container, Record};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
const IMAGE_LEN: usize = CHANNELS * PIXELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `len × 3 × 32 × 32`, row-major, values in `[0,1]`.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, purpose, index)`.
pub(crate) fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ purpose.rotate_left(32)) ^ index))
}

const LABELS: u64 = 1;
const GEOMETRY: u64 = 2;
const SHIFT: u64 = 3;
const LONGTAIL: u64 = 4;
const CORRUPT: u64 = 5;
const FEWSHOT: u64 = 6;
const TEST_SPLIT: u64 = 0x7465_7374;

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Mean of each color channel over the whole dataset.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for i in 0..self.len() {
            for (c, slot) in m.iter_mut().enumerate() {
                *slot += self.image(i)[c * PIXELS..(c + 1) * PIXELS].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        m.map(|s| s / (self.len() * PIXELS).max(1) as f64)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            seed: self.seed,
        }
    }

    /// `[B,3,32,32]` batch and labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let x = Tensor::new(&[indices.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "kind": "dataset",
            "num_classes": self.num_classes,
            "split": self.split,
            "seed": self.seed,
        });
        Container {
            meta: meta.to_string(),
            records: vec![
                Record {
                    name: "images".into(),
                    shape: vec![self.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
                    flags: 0,
                    data: ArrayData::F32(self.images.clone()),
                },
                Record {
                    name: "labels".into(),
                    shape: vec![self.len()],
                    flags: 0,
                    data: ArrayData::U32(self.labels.iter().map(|&l| l as u32).collect()),
                },
            ],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let c = Container::read(path)?;
        let bad = |reason: &str| Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() };
        #[derive(Deserialize)]
        struct Meta {
            num_classes: usize,
            split: Split,
            seed: u64,
        }
        let meta: Meta = serde_json::from_str(&c.meta).map_err(|_| bad("metadata is not a dataset description"))?;
        let Some(ArrayData::F32(images)) = c.get("images").map(|r| r.data.clone()) else {
            return Err(bad("missing f32 `images` array"));
        };
        let Some(ArrayData::U32(labels)) = c.get("labels").map(|r| r.data.clone()) else {
            return Err(bad("missing u32 `labels` array"));
        };
        if images.len() != labels.len() * IMAGE_LEN {
            return Err(bad("image and label counts disagree"));
        }
        let labels: Vec<usize> = labels.into_iter().map(|l| l as usize).collect();
        if labels.iter().any(|&l| l >= meta.num_classes) {
            return Err(bad("label out of range"));
        }
        Ok(Dataset { images, labels, num_classes: meta.num_classes, split: meta.split, seed: meta.seed })
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Color cast added by the domain shift.
const TINT: [f64; 3] = [0.45, 0.3, 0.0];

/// Membership test for shape `s` at normalized offsets `(u, v)`.
fn inside(shape: usize, u: f64, v: f64) -> bool {
    let d = (u * u + v * v).sqrt();
    match shape {
        0 => d < 1.0,
        1 => u.abs().max(v.abs()) < 0.8,
        2 => (-0.8..0.8).contains(&v) && u.abs() < 0.55 * (v + 0.8),
        3 => (0.55..1.0).contains(&d),
        4 => (u.abs() < 0.3 && v.abs() < 1.0) || (v.abs() < 0.3 && u.abs() < 1.0),
        5 => u.abs() < 1.0 && v.abs() < 0.35,
        6 => v.abs() < 1.0 && u.abs() < 0.35,
        _ => u.abs() + v.abs() < 1.0,
    }
}

/// Renders `n` labelled 32×32 images from `C` shape/texture classes.
///
/// Class `c` draws shape `c mod 8`; classes 8 and above fill the shape with
/// diagonal stripes. `domain_shift` in `[0,1]` lowers contrast, adds a warm
/// color cast and overlays an oriented grating on the background, leaving
/// labels and geometry untouched.
pub fn synth_shapes(n: usize, num_classes: usize, domain_shift: f64, seed: u64) -> Result<Dataset> {
    if !(2..=16).contains(&num_classes) {
        return Err(Error::Data(format!("class count must be in [2, 16], got {num_classes}")));
    }
    if !(0.0..=1.0).contains(&domain_shift) {
        return Err(Error::Data(format!("domain shift must be in [0, 1], got {domain_shift}")));
    }
    use rand::seq::SliceRandom;
    // Balanced labels in seeded order.
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut stream(seed, LABELS, 0));
    let mut images = vec![0f32; n * IMAGE_LEN];
    for (i, &label) in labels.iter().enumerate() {
        let mut g = stream(seed, GEOMETRY, i as u64);
        let radius = g.random_range(7.0..11.0);
        let cx = g.random_range(radius..IMAGE_SIZE as f64 - radius);
        let cy = g.random_range(radius..IMAGE_SIZE as f64 - radius);
        let fg = hsv(g.random(), g.random_range(0.6..1.0), g.random_range(0.8..1.0));
        let bg: [f64; 3] = std::array::from_fn(|_| g.random_range(0.06..0.2));
        let shape = label % 8;
        let striped = label >= 8;

        let mut s = stream(seed, SHIFT, i as u64);
        let theta: f64 = s.random_range(0.0..std::f64::consts::PI);
        let period: f64 = s.random_range(3.0..6.0);
        let phase: f64 = s.random_range(0.0..std::f64::consts::TAU);

        let img = &mut images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN];
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let on = inside(shape, (px - cx) / radius, (py - cy) / radius);
                let stripe_dim = if on && striped && ((x + y) / 3) % 2 == 1 { 0.45 } else { 1.0 };
                let wave = ((px * theta.cos() + py * theta.sin()) * std::f64::consts::TAU / period + phase).sin();
                for c in 0..CHANNELS {
                    let base = if on { fg[c] * stripe_dim } else { bg[c] };
                    let texture = if on { 0.0 } else { 0.25 * wave };
                    let shifted = (1.0 - 0.6 * domain_shift) * base + domain_shift * (TINT[c] + texture);
                    img[c * PIXELS + y * IMAGE_SIZE + x] = shifted.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Ok(Dataset { images, labels, num_classes, split: Split::Train, seed })
}

/// Held-out split drawn from an independent stream of the same generator.
pub fn synth_shapes_test(n: usize, num_classes: usize, domain_shift: f64, seed: u64) -> Result<Dataset> {
    let mut ds = synth_shapes(n, num_classes, domain_shift, seed ^ TEST_SPLIT)?;
    ds.split = Split::Test;
    ds.seed = seed;
    Ok(ds)
}

/// `n_i = round(n_0 · IR^(−i/(C−1)))` for `i = 0..C`.
pub fn longtail_profile(num_classes: usize, n0: usize, imbalance: f64) -> Vec<usize> {
    if num_classes == 1 {
        return vec![n0];
    }
    (0..num_classes)
        .map(|i| (n0 as f64 * imbalance.powf(-(i as f64) / (num_classes - 1) as f64)).round() as usize)
        .collect()
}

/// Keeps the first `n_i` samples of class `i` under a seeded shuffle, with
/// `n_0` equal to the smallest class count of the input.
pub fn make_longtail(ds: &Dataset, imbalance: f64, seed: u64) -> Result<Dataset> {
    if !(imbalance >= 1.0 && imbalance.is_finite()) {
        return Err(Error::Data(format!("imbalance ratio must be at least 1, got {imbalance}")));
    }
    let counts = ds.class_counts();
    let n0 = counts.iter().copied().min().unwrap_or(0);
    let profile = longtail_profile(ds.num_classes, n0, imbalance);
    if profile.iter().any(|&k| k == 0) {
        return Err(Error::Data(format!(
            "not enough samples: {n0} per class cannot express imbalance ratio {imbalance}"
        )));
    }
    let mut keep = Vec::new();
    for (class, &k) in profile.iter().enumerate() {
        keep.extend(shuffled_class(ds, class, seed, LONGTAIL).into_iter().take(k));
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

fn shuffled_class(ds: &Dataset, class: usize, seed: u64, purpose: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
    idx.shuffle(&mut stream(seed, purpose, class as u64));
    idx
}

/// Exactly `k` samples per class; for a fixed seed the `k` subset is a prefix
/// of the `k+1` subset, so shot counts are nested.
pub fn few_shot_subset(ds: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    Ok(ds.subset(&few_shot_indices(ds, k, seed)?))
}

/// Sorted source indices selected by [`few_shot_subset`].
pub fn few_shot_indices(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Data("few-shot k must be positive".into()));
    }
    let mut keep = Vec::with_capacity(k * ds.num_classes);
    for class in 0..ds.num_classes {
        let idx = shuffled_class(ds, class, seed, FEWSHOT);
        if idx.len() < k {
            return Err(Error::Data(format!("class {class} has {} samples, fewer than k = {k}", idx.len())));
        }
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    Contrast,
    Occlusion,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [Self::GaussianNoise, Self::GaussianBlur, Self::Contrast, Self::Occlusion];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::GaussianBlur => "gaussian_blur",
            Self::Contrast => "contrast",
            Self::Occlusion => "occlusion",
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption `{s}` (expected gaussian_noise, gaussian_blur, contrast or occlusion)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

const NOISE_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const BLUR_SIGMA: [f64; 5] = [0.4, 0.6, 0.9, 1.3, 1.8];
const CONTRAST: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];
const OCCLUSION: [usize; 5] = [4, 6, 8, 10, 12];

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Data(format!("corruption severity must be 1..=5, got {}", self.severity)));
        }
        Ok(())
    }
}

fn blur_kernel(sigma: f64) -> [f64; 5] {
    let mut k: [f64; 5] = std::array::from_fn(|i| {
        let d = i as f64 - 2.0;
        (-d * d / (2.0 * sigma * sigma)).exp()
    });
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable 5-tap blur with edge replication.
fn blur_plane(plane: &mut [f32], k: &[f64; 5]) {
    let n = IMAGE_SIZE as isize;
    let at = |i: isize| i.clamp(0, n - 1) as usize;
    let mut tmp = vec![0f64; PIXELS];
    for y in 0..n {
        for x in 0..n {
            tmp[(y * n + x) as usize] =
                (0..5).map(|t| k[t] * plane[(y * n) as usize + at(x + t as isize - 2)] as f64).sum();
        }
    }
    for y in 0..n {
        for x in 0..n {
            plane[(y * n + x) as usize] =
                (0..5).map(|t| k[t] * tmp[at(y + t as isize - 2) * IMAGE_SIZE + x as usize]).sum::<f64>() as f32;
        }
    }
}

fn corrupt_image(img: &mut [f32], spec: CorruptionSpec, rng: &mut ChaCha8Rng) {
    let s = spec.severity as usize - 1;
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            for v in img.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = (*v as f64 + NOISE_SIGMA[s] * z) as f32;
            }
        }
        CorruptionKind::GaussianBlur => {
            let k = blur_kernel(BLUR_SIGMA[s]);
            img.chunks_mut(PIXELS).for_each(|p| blur_plane(p, &k));
        }
        CorruptionKind::Contrast => {
            let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
            for v in img.iter_mut() {
                *v = (mean + CONTRAST[s] * (*v as f64 - mean)) as f32;
            }
        }
        CorruptionKind::Occlusion => {
            // Center fixed per image so that larger squares contain smaller ones.
            let half = OCCLUSION[4] / 2;
            let cx = rng.random_range(half..=IMAGE_SIZE - half);
            let cy = rng.random_range(half..=IMAGE_SIZE - half);
            let side = OCCLUSION[s];
            for plane in img.chunks_mut(PIXELS) {
                for y in cy - side / 2..cy - side / 2 + side {
                    plane[y * IMAGE_SIZE + cx - side / 2..y * IMAGE_SIZE + cx - side / 2 + side].fill(0.0);
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Applies one corruption to every image. Labels are unchanged.
pub fn corrupt(ds: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut out = ds.clone();
    for (i, img) in out.images.chunks_mut(IMAGE_LEN).enumerate() {
        corrupt_image(img, spec, &mut stream(seed, CORRUPT, i as u64));
    }
    Ok(out)
}

/// Mean squared difference between two equally sized datasets.
pub fn mse(a: &Dataset, b: &Dataset) -> f64 {
    let n = a.images.len().max(1) as f64;
    a.images.iter().zip(&b.images).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_label_preserving() {
        let a = synth_shapes(40, 10, 0.0, 5).unwrap();
        let b = synth_shapes(40, 10, 0.0, 5).unwrap();
        assert_eq!(a, b);
        let s = synth_shapes(40, 10, 0.8, 5).unwrap();
        assert_eq!(a.labels, s.labels);
        let (ma, ms) = (a.channel_means(), s.channel_means());
        for c in 0..3 {
            assert!((ma[c] - ms[c]).abs() > 0.05, "{ma:?} vs {ms:?}");
        }
        assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_shapes(4, 17, 0.0, 0).is_err());
        assert!(synth_shapes(4, 4, 1.5, 0).is_err());
    }

    #[test]
    fn test_split_differs_from_train() {
        let tr = synth_shapes(20, 4, 0.0, 1).unwrap();
        let te = synth_shapes_test(20, 4, 0.0, 1).unwrap();
        assert_ne!(tr.images, te.images);
        assert_eq!(te.split, Split::Test);
    }

    #[test]
    fn longtail_closed_form() {
        let p = longtail_profile(10, 5000, 100.0);
        assert_eq!(p, vec![5000, 2997, 1797, 1077, 646, 387, 232, 139, 83, 50]);
        assert_eq!(longtail_profile(5, 40, 1.0), vec![40; 5]);
    }

    #[test]
    fn longtail_subsample_counts() {
        let ds = synth_shapes(400, 4, 0.0, 2).unwrap();
        let lt = make_longtail(&ds, 10.0, 0).unwrap();
        let counts = lt.class_counts();
        let n0 = ds.class_counts().into_iter().min().unwrap();
        assert_eq!(counts, longtail_profile(4, n0, 10.0));
        assert!(make_longtail(&ds, 0.5, 0).is_err());
        assert!(make_longtail(&ds, 1e9, 0).is_err());
    }

    #[test]
    fn few_shot_nested() {
        let ds = synth_shapes(300, 10, 0.0, 4).unwrap();
        let mut prev = Vec::new();
        for k in [1, 2, 4, 8, 16] {
            let sub = few_shot_subset(&ds, k, 9).unwrap();
            assert_eq!(sub.class_counts(), vec![k; 10]);
            let idx = few_shot_indices(&ds, k, 9).unwrap();
            assert!(prev.iter().all(|i| idx.contains(i)), "k={k}");
            prev = idx;
        }
        assert!(few_shot_subset(&ds, 1000, 0).is_err());
    }

    #[test]
    fn corruption_severity_monotone() {
        let ds = synth_shapes(16, 10, 0.0, 3).unwrap();
        for kind in CorruptionKind::ALL {
            let errs: Vec<f64> = (1..=5)
                .map(|severity| mse(&ds, &corrupt(&ds, CorruptionSpec { kind, severity }, 0).unwrap()))
                .collect();
            assert!(errs.windows(2).all(|w| w[1] > w[0]), "{kind:?}: {errs:?}");
        }
    }

    #[test]
    fn contrast_fixed_point_on_constant_image() {
        let mut ds = synth_shapes(1, 2, 0.0, 0).unwrap();
        ds.images.iter_mut().for_each(|v| *v = 0.37);
        let c = corrupt(&ds, CorruptionSpec { kind: CorruptionKind::Contrast, severity: 5 }, 0).unwrap();
        assert!(c.images.iter().all(|&v| (v - 0.37).abs() < 1e-6));
        assert_eq!(c.labels, ds.labels);
        assert!(corrupt(&ds, CorruptionSpec { kind: CorruptionKind::Contrast, severity: 6 }, 0).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let ds = synth_shapes(5, 3, 0.3, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.bin");
        ds.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), ds);
    }
}
