//! Synthetic datasets, corruption functions, and domain streams.
//!
//! Images are procedural class-distinct textures (stripes, checkers, rings,
//! gradients) with per-sample phase/frequency jitter and a per-class color
//! tint, generated deterministically from a seed. Corruptions cover a
//! noise / blur / digital / geometry mix at five graded severities with
//! fixed in-code parameter tables. Streams draw per-domain batches under
//! configurable class-sampling weights, so class imbalance over time is
//! part of the benchmark itself.

use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::seeds;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

// ── Dataset ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub samples: usize,
    pub seed: u64,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if !(4..=10).contains(&self.classes) {
            return Err(Error::Config(format!("classes {} outside [4, 10]", self.classes)));
        }
        if !(16..=32).contains(&self.image_size) {
            return Err(Error::Config(format!("image size {} outside [16, 32]", self.image_size)));
        }
        if !(1..=3).contains(&self.channels) {
            return Err(Error::Config(format!("channels {} outside [1, 3]", self.channels)));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, idx: usize) -> Tensor {
        let (c, h, w) = self.image_dims();
        let per = c * h * w;
        Tensor::new(vec![c, h, w], self.images.data()[idx * per..(idx + 1) * per].to_vec())
            .expect("image slice")
    }

    /// Gather `[B, C, H, W]` batch plus labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.image_dims();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(vec![indices.len(), c, h, w], data).expect("batch"), labels)
    }

    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Per-class color tints. Kept close together so texture, not color,
/// carries the class signal.
fn class_tint(class: usize, channels: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| {
            let angle = 2.0 * PI * class as f64 / 8.0 + 2.1 * c as f64;
            (0.75 + 0.12 * angle.sin()).clamp(0.3, 1.0)
        })
        .collect()
}

/// Texture field in `[0, 1]` for one class at pixel (x, y).
fn texture(class: usize, x: f64, y: f64, size: f64, period: f64, phase: (f64, f64), center: (f64, f64)) -> f64 {
    let k = 2.0 * PI / period;
    match class % 8 {
        0 => 0.5 + 0.5 * (k * y + phase.0).sin(),
        1 => 0.5 + 0.5 * (k * x + phase.0).sin(),
        2 => 0.5 + 0.5 * (k * (x + y) * 0.7071 + phase.0).sin(),
        3 => 0.5 + 0.5 * (k * (x - y) * 0.7071 + phase.0).sin(),
        4 => 0.5 + 0.5 * ((k * x + phase.0).sin() * (k * y + phase.1).sin()),
        5 => {
            let r = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
            0.5 + 0.5 * (k * r + phase.0).sin()
        }
        6 => {
            let r = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
            (1.0 - r / size).clamp(0.0, 1.0)
        }
        _ => 0.5 + 0.25 * (k * x + phase.0).sin() + 0.25 * (k * y + phase.1).sin(),
    }
}

/// Procedurally generated textures/shapes, one texture family per class,
/// uniform label histogram, deterministic per (spec, seed).
pub fn generate_dataset(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n, c, hw) = (spec.samples, spec.channels, spec.image_size);
    let per = c * hw * hw;
    let chunks = crate::par::map_indexed(Parallelism::Auto, n, |i| {
        let class = i % spec.classes;
        let mut rng = seeds::rng_for(spec.seed, "sample", i as u64);
        let period = hw as f64 / 4.0 * rng.gen_range(0.8..1.3);
        let phase = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
        let center = (
            hw as f64 / 2.0 + rng.gen_range(-4.0..4.0),
            hw as f64 / 2.0 + rng.gen_range(-4.0..4.0),
        );
        let tint = class_tint(class, c);
        let brightness = rng.gen_range(-0.08..0.08);
        let mut img = vec![0.0; per];
        for yy in 0..hw {
            for xx in 0..hw {
                let t = texture(class, xx as f64, yy as f64, hw as f64, period, phase, center);
                for ch in 0..c {
                    let noise: f64 = rng.gen_range(-0.05..0.05);
                    let v = 0.15 + 0.7 * t * tint[ch] + brightness + noise;
                    img[(ch * hw + yy) * hw + xx] = v.clamp(0.0, 1.0);
                }
            }
        }
        img
    });
    let mut data = Vec::with_capacity(n * per);
    for chunk in chunks {
        data.extend_from_slice(&chunk);
    }
    let labels = (0..n).map(|i| i % spec.classes).collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, c, hw, hw], data)?,
        labels,
        classes: spec.classes,
    })
}

// ── Corruptions ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    BoxBlur,
    Contrast,
    Brightness,
    Pixelate,
    ElasticShift,
}

pub const ALL_CORRUPTIONS: [CorruptionKind; 8] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::BoxBlur,
    CorruptionKind::Contrast,
    CorruptionKind::Brightness,
    CorruptionKind::Pixelate,
    CorruptionKind::ElasticShift,
];

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::ElasticShift => "elastic_shift",
        }
    }
}

// Severity tables, index = severity - 1.
pub const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.06, 0.08, 0.12, 0.18];
pub const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
pub const IMPULSE_PROB: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
pub const BLUR_RADIUS_PASSES: [(usize, usize); 5] = [(1, 1), (1, 2), (2, 1), (2, 2), (3, 2)];
pub const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.55, 0.40, 0.30, 0.20];
pub const BRIGHTNESS_DELTA: [f64; 5] = [0.08, 0.14, 0.20, 0.28, 0.36];
pub const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 6, 8];
pub const ELASTIC_AMP: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Config(format!("severity {} outside [1, 5]", self.severity)));
        }
        Ok(())
    }
}

// Standalone primitives (also exercised directly by tests).

pub fn add_gaussian_noise<R: Rng>(img: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    img.map_with_rng(rng, |v, r| (v + sigma * normal_sample(r)).clamp(0.0, 1.0))
}

fn normal_sample<R: Rng>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

pub fn contrast(img: &Tensor, factor: f64) -> Tensor {
    if factor == 1.0 {
        return img.clone();
    }
    let mean = img.mean();
    img.map(|v| ((v - mean) * factor + mean).clamp(0.0, 1.0))
}

pub fn brightness(img: &Tensor, delta: f64) -> Tensor {
    if delta == 0.0 {
        return img.clone();
    }
    img.map(|v| (v + delta).clamp(0.0, 1.0))
}

fn box_blur(img: &Tensor, radius: usize, passes: usize) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut cur = img.data().to_vec();
    let win = (2 * radius + 1) as f64;
    for _ in 0..passes {
        // Horizontal then vertical pass with clamp-to-edge indexing.
        let mut tmp = vec![0.0; cur.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for d in -(radius as isize)..=(radius as isize) {
                        let xi = (x as isize + d).clamp(0, w as isize - 1) as usize;
                        acc += cur[(ch * h + y) * w + xi];
                    }
                    tmp[(ch * h + y) * w + x] = acc / win;
                }
            }
        }
        let mut out = vec![0.0; cur.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for d in -(radius as isize)..=(radius as isize) {
                        let yi = (y as isize + d).clamp(0, h as isize - 1) as usize;
                        acc += tmp[(ch * h + yi) * w + x];
                    }
                    out[(ch * h + y) * w + x] = acc / win;
                }
            }
        }
        cur = out;
    }
    Tensor::new(s.to_vec(), cur).expect("blur shape")
}

fn pixelate(img: &Tensor, block: usize) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = img.data().to_vec();
    for ch in 0..c {
        let mut by = 0;
        while by < h {
            let bh = block.min(h - by);
            let mut bx = 0;
            while bx < w {
                let bw = block.min(w - bx);
                let mut acc = 0.0;
                for y in by..by + bh {
                    for x in bx..bx + bw {
                        acc += img.data()[(ch * h + y) * w + x];
                    }
                }
                let avg = acc / (bh * bw) as f64;
                for y in by..by + bh {
                    for x in bx..bx + bw {
                        out[(ch * h + y) * w + x] = avg;
                    }
                }
                bx += block;
            }
            by += block;
        }
    }
    Tensor::new(s.to_vec(), out).expect("pixelate shape")
}

fn elastic_shift<R: Rng>(img: &Tensor, amp: f64, rng: &mut R) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let lambda = 8.0;
    let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let mut out = vec![0.0; img.numel()];
    let sample = |ch: usize, y: f64, x: f64| -> f64 {
        let y0 = y.floor().clamp(0.0, (h - 1) as f64);
        let x0 = x.floor().clamp(0.0, (w - 1) as f64);
        let y1 = (y0 + 1.0).min((h - 1) as f64);
        let x1 = (x0 + 1.0).min((w - 1) as f64);
        let fy = (y - y0).clamp(0.0, 1.0);
        let fx = (x - x0).clamp(0.0, 1.0);
        let at = |yy: f64, xx: f64| img.data()[(ch * h + yy as usize) * w + xx as usize];
        at(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + at(y0, x1) * (1.0 - fy) * fx
            + at(y1, x0) * fy * (1.0 - fx)
            + at(y1, x1) * fy * fx
    };
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let dx = amp * (2.0 * PI * y as f64 / lambda + p1).sin();
                let dy = amp * (2.0 * PI * x as f64 / lambda + p2).sin();
                out[(ch * h + y) * w + x] =
                    sample(ch, (y as f64 + dy).clamp(0.0, (h - 1) as f64), (x as f64 + dx).clamp(0.0, (w - 1) as f64));
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("elastic shape")
}

/// Apply one corruption to a `[C, H, W]` image in `[0, 1]`. Deterministic
/// under `spec.seed`; output clamped back into `[0, 1]`.
pub fn apply_corruption(img: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    spec.validate()?;
    if img.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("apply_corruption: image {:?}", img.shape())));
    }
    let sev = (spec.severity - 1) as usize;
    let mut rng = seeds::rng_for(spec.seed, "corruption", 0);
    let out = match spec.kind {
        CorruptionKind::GaussianNoise => add_gaussian_noise(img, GAUSSIAN_SIGMA[sev], &mut rng),
        CorruptionKind::ShotNoise => {
            let lambda = SHOT_PHOTONS[sev];
            img.map_with_rng(&mut rng, |v, r| {
                if v <= 0.0 {
                    0.0
                } else {
                    let pois = Poisson::new(v * lambda).expect("positive rate");
                    (pois.sample(r) / lambda).clamp(0.0, 1.0)
                }
            })
        }
        CorruptionKind::ImpulseNoise => {
            let p = IMPULSE_PROB[sev];
            img.map_with_rng(&mut rng, |v, r| {
                let u: f64 = r.gen();
                if u < p / 2.0 {
                    0.0
                } else if u < p {
                    1.0
                } else {
                    v
                }
            })
        }
        CorruptionKind::BoxBlur => {
            let (r, passes) = BLUR_RADIUS_PASSES[sev];
            box_blur(img, r, passes)
        }
        CorruptionKind::Contrast => contrast(img, CONTRAST_FACTOR[sev]),
        CorruptionKind::Brightness => brightness(img, BRIGHTNESS_DELTA[sev]),
        CorruptionKind::Pixelate => pixelate(img, PIXELATE_BLOCK[sev]),
        CorruptionKind::ElasticShift => elastic_shift(img, ELASTIC_AMP[sev], &mut rng),
    };
    Ok(out)
}

// ── Streams ─────────────────────────────────────────────────────────

/// Per-domain class sampling weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ImbalanceProfile {
    Uniform,
    /// One fixed majority class with the given weight; the rest share evenly.
    Skewed { major_class: usize, major_weight: f64 },
    /// The majority class rotates with the domain index.
    Rotating { major_weight: f64 },
    /// Explicit per-domain weight rows (cycled if shorter than the stream).
    Explicit { weights: Vec<Vec<f64>> },
}

impl ImbalanceProfile {
    pub fn weights(&self, domain_idx: usize, classes: usize) -> Result<Vec<f64>> {
        let skew = |major: usize, w: f64| -> Vec<f64> {
            let rest = (1.0 - w) / (classes - 1) as f64;
            (0..classes).map(|c| if c == major { w } else { rest }).collect()
        };
        let raw = match self {
            ImbalanceProfile::Uniform => vec![1.0 / classes as f64; classes],
            ImbalanceProfile::Skewed { major_class, major_weight } => {
                if *major_class >= classes {
                    return Err(Error::Config(format!(
                        "major class {} outside [0, {})",
                        major_class, classes
                    )));
                }
                skew(*major_class, *major_weight)
            }
            ImbalanceProfile::Rotating { major_weight } => skew(domain_idx % classes, *major_weight),
            ImbalanceProfile::Explicit { weights } => {
                if weights.is_empty() {
                    return Err(Error::Config("explicit profile has no rows".into()));
                }
                weights[domain_idx % weights.len()].clone()
            }
        };
        if raw.len() != classes {
            return Err(Error::Config(format!(
                "profile row has {} weights for {} classes",
                raw.len(),
                classes
            )));
        }
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) || raw.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("class weights must be nonnegative and sum > 0".into()));
        }
        Ok(raw.iter().map(|w| w / total).collect())
    }
}

#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DomainSegment {
    pub spec: CorruptionSpec,
    pub weights: Vec<f64>,
    pub batches: Vec<StreamBatch>,
}

/// Ordered single-pass test environment: one segment per corruption domain.
#[derive(Debug, Clone)]
pub struct DomainStream {
    pub segments: Vec<DomainSegment>,
}

impl DomainStream {
    pub fn total_batches(&self) -> usize {
        self.segments.iter().map(|s| s.batches.len()).sum()
    }
}

/// Serializable stream description (the external interface file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamDescription {
    pub segments: Vec<StreamSegmentDesc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamSegmentDesc {
    pub kind: String,
    pub severity: u8,
    pub weights: Vec<f64>,
}

impl DomainStream {
    pub fn description(&self) -> StreamDescription {
        StreamDescription {
            segments: self
                .segments
                .iter()
                .map(|s| StreamSegmentDesc {
                    kind: s.spec.kind.name().to_string(),
                    severity: s.spec.severity,
                    weights: s.weights.clone(),
                })
                .collect(),
        }
    }
}

fn weighted_class<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return c;
        }
    }
    weights.len() - 1
}

/// Build a single-pass stream: for each (corruption, severity) in
/// `sequence`, draw `batches_per_domain * batch_size` samples under the
/// profile's class weights (with replacement), corrupt them, and chunk into
/// disjoint batches. Deterministic under `seed`.
pub fn build_stream(
    dataset: &Dataset,
    sequence: &[CorruptionSpec],
    profile: &ImbalanceProfile,
    batch_size: usize,
    batches_per_domain: usize,
    seed: u64,
) -> Result<DomainStream> {
    if sequence.is_empty() {
        return Err(Error::Config("stream sequence is empty".into()));
    }
    if batch_size == 0 || batches_per_domain == 0 {
        return Err(Error::Config("batch size and batches per domain must be positive".into()));
    }
    let by_class = dataset.indices_by_class();
    if by_class.iter().any(|v| v.is_empty()) {
        return Err(Error::Config("every class needs at least one sample".into()));
    }
    let (c, h, w) = dataset.image_dims();
    let per = c * h * w;
    let mut segments = Vec::with_capacity(sequence.len());
    for (d, spec) in sequence.iter().enumerate() {
        spec.validate()?;
        let weights = profile.weights(d, dataset.classes)?;
        let n = batch_size * batches_per_domain;
        let mut pick_rng = seeds::rng_for(seed, "stream-pick", d as u64);
        let picks: Vec<(usize, usize)> = (0..n)
            .map(|_| {
                let class = weighted_class(&weights, &mut pick_rng);
                let idx = by_class[class][pick_rng.gen_range(0..by_class[class].len())];
                (idx, class)
            })
            .collect();
        // Corrupt in parallel; per-sample seeds keep it order-independent.
        let corrupted = crate::par::map_indexed(Parallelism::Auto, n, |i| {
            let (idx, _) = picks[i];
            let img = dataset.image(idx);
            let sample_spec = CorruptionSpec {
                kind: spec.kind,
                severity: spec.severity,
                seed: seeds::child_seed(seed, "stream-corrupt", (d * 1_000_000 + i) as u64)
                    ^ spec.seed,
            };
            apply_corruption(&img, &sample_spec).expect("validated spec")
        });
        let mut batches = Vec::with_capacity(batches_per_domain);
        for b in 0..batches_per_domain {
            let mut data = Vec::with_capacity(batch_size * per);
            let mut labels = Vec::with_capacity(batch_size);
            for i in b * batch_size..(b + 1) * batch_size {
                data.extend_from_slice(corrupted[i].data());
                labels.push(dataset.labels[picks[i].0]);
            }
            batches.push(StreamBatch {
                images: Tensor::new(vec![batch_size, c, h, w], data)?,
                labels,
            });
        }
        segments.push(DomainSegment { spec: *spec, weights, batches });
    }
    Ok(DomainStream { segments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DataSpec {
        DataSpec { classes: 8, image_size: 24, channels: 3, samples: 64, seed: 7 }
    }

    #[test]
    fn dataset_is_deterministic_and_uniform() {
        let a = generate_dataset(&spec()).unwrap();
        let b = generate_dataset(&spec()).unwrap();
        assert!(a.images.bitwise_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        let mut hist = vec![0usize; 8];
        for &l in &a.labels {
            hist[l] += 1;
        }
        assert!(hist.iter().all(|&h| h == 8));
        assert!(a.images.min() >= 0.0 && a.images.max() <= 1.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec();
        s.classes = 3;
        assert!(generate_dataset(&s).is_err());
        let mut s = spec();
        s.image_size = 64;
        assert!(generate_dataset(&s).is_err());
    }

    #[test]
    fn gaussian_severity_table_matches_residual_std() {
        // Mid-gray image avoids clamping bias; severity 3 should apply
        // sigma = 0.08 within 5%.
        let img = Tensor::full(&[1, 100, 100], 0.5);
        let spec = CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 3, seed: 3 };
        let out = apply_corruption(&img, &spec).unwrap();
        let resid: Vec<f64> = out.data().iter().zip(img.data()).map(|(a, b)| a - b).collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / resid.len() as f64;
        let std = var.sqrt();
        assert!((std - 0.08).abs() / 0.08 < 0.05, "std {} vs 0.08", std);
    }

    #[test]
    fn identity_parameters_are_identities() {
        let ds = generate_dataset(&spec()).unwrap();
        let img = ds.image(0);
        assert!(contrast(&img, 1.0).bitwise_eq(&img));
        assert!(brightness(&img, 0.0).bitwise_eq(&img));
    }

    #[test]
    fn corruption_outputs_stay_in_unit_range_and_are_deterministic() {
        let ds = generate_dataset(&spec()).unwrap();
        let img = ds.image(3);
        for kind in ALL_CORRUPTIONS {
            for severity in 1..=5u8 {
                let cs = CorruptionSpec { kind, severity, seed: 5 };
                let a = apply_corruption(&img, &cs).unwrap();
                let b = apply_corruption(&img, &cs).unwrap();
                assert!(a.bitwise_eq(&b), "{:?} not deterministic", kind);
                assert!(a.min() >= 0.0 && a.max() <= 1.0, "{:?} out of range", kind);
            }
        }
    }

    #[test]
    fn noise_and_blur_distortion_increases_with_severity() {
        let ds = generate_dataset(&spec()).unwrap();
        let img = ds.image(1);
        for kind in [
            CorruptionKind::GaussianNoise,
            CorruptionKind::ShotNoise,
            CorruptionKind::ImpulseNoise,
            CorruptionKind::BoxBlur,
        ] {
            let mut prev = -1.0;
            for severity in 1..=5u8 {
                let cs = CorruptionSpec { kind, severity, seed: 9 };
                let out = apply_corruption(&img, &cs).unwrap();
                let dist = out
                    .data()
                    .iter()
                    .zip(img.data())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / img.numel() as f64;
                assert!(dist > prev, "{:?}: severity {} distortion {} <= {}", kind, severity, dist, prev);
                prev = dist;
            }
        }
    }

    #[test]
    fn stream_realizes_profile_frequencies() {
        let mut s = spec();
        s.samples = 512;
        let ds = generate_dataset(&s).unwrap();
        let seq = [CorruptionSpec { kind: CorruptionKind::Contrast, severity: 1, seed: 0 }];
        let profile = ImbalanceProfile::Explicit {
            weights: vec![vec![0.7, 0.1, 0.1, 0.1, 0.0, 0.0, 0.0, 0.0]],
        };
        let stream = build_stream(&ds, &seq, &profile, 100, 20, 21).unwrap();
        let mut hist = vec![0usize; 8];
        for b in &stream.segments[0].batches {
            for &l in &b.labels {
                hist[l] += 1;
            }
        }
        let total: usize = hist.iter().sum();
        assert_eq!(total, 2000);
        assert!((hist[0] as f64 / total as f64 - 0.7).abs() < 0.03);
        for c in 1..4 {
            assert!((hist[c] as f64 / total as f64 - 0.1).abs() < 0.03);
        }
        for c in 4..8 {
            assert_eq!(hist[c], 0);
        }
    }

    #[test]
    fn stream_is_deterministic_under_seed() {
        let ds = generate_dataset(&spec()).unwrap();
        let seq = [
            CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 2, seed: 0 },
            CorruptionSpec { kind: CorruptionKind::BoxBlur, severity: 4, seed: 0 },
        ];
        let make = || build_stream(&ds, &seq, &ImbalanceProfile::Uniform, 8, 3, 33).unwrap();
        let (a, b) = (make(), make());
        for (sa, sb) in a.segments.iter().zip(&b.segments) {
            assert_eq!(sa.weights, sb.weights);
            for (ba, bb) in sa.batches.iter().zip(&sb.batches) {
                assert!(ba.images.bitwise_eq(&bb.images));
                assert_eq!(ba.labels, bb.labels);
            }
        }
    }

    #[test]
    fn zero_weight_profiles_rejected() {
        let profile = ImbalanceProfile::Explicit { weights: vec![vec![0.0; 8]] };
        assert!(profile.weights(0, 8).is_err());
    }
}
