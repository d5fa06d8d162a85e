//! Synthetic clean images, noise injection, augmentation, PPM I/O, and the
//! deterministic patch stream.
//!
//! Every operation is a pure function of its inputs and a seed: a batch is
//! reconstructible from `(config, iteration)` alone, which is what makes
//! training resumable bit-exactly.

use std::error::Error;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Shape, Tensor};

/// Failures from image files and dataset directories.
#[derive(Debug)]
pub enum DataError {
    Io(io::Error),
    Format { path: PathBuf, msg: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "i/o error: {e}"),
            DataError::Format { path, msg } => write!(f, "{}: {msg}", path.display()),
        }
    }
}

impl Error for DataError {}

impl From<io::Error> for DataError {
    fn from(e: io::Error) -> Self {
        DataError::Io(e)
    }
}

/// Kinds of synthetic clean images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CleanKind {
    Gradient,
    Checker,
    SmoothField,
    Mixed,
}

/// Noise model applied to clean patches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Read-noise standard deviation in [0,1] units.
    pub sigma: f64,
    /// Shot-noise scale; only used by the Poisson-Gaussian model.
    pub gain: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    PoissonGaussian,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Gaussian,
            sigma,
            gain: 0.0,
        }
    }
}

/// One training example plus its provenance.
pub struct PatchPair<S: Scalar> {
    pub noisy: Tensor<S>,
    pub clean: Tensor<S>,
    pub source: usize,
    pub noise: NoiseSpec,
}

/// SplitMix64 over a seed, a stream tag, and an index.
fn mix(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag, index))
}

const TAG_IMAGE: u64 = 1;
const TAG_ORDER: u64 = 2;
const TAG_PATCH: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_VAL: u64 = 5;

fn ramp(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64
}

fn gradient_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let mut img = vec![0.0; 3 * size * size];
    // Channel 0 always rises left to right.
    let lo = rng.random::<f64>() * 0.4;
    let hi = 0.6 + rng.random::<f64>() * 0.4;
    let (v_lo, v_hi) = (rng.random::<f64>(), rng.random::<f64>());
    let (d_lo, d_hi) = (rng.random::<f64>(), rng.random::<f64>());
    for y in 0..size {
        for x in 0..size {
            img[y * size + x] = ramp(lo, hi, x, size);
            img[(size + y) * size + x] = ramp(v_lo, v_hi, y, size);
            img[(2 * size + y) * size + x] = ramp(d_lo, d_hi, x + y, 2 * size - 1);
        }
    }
    img
}

fn checker_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let cell = [4usize, 8, 16][rng.random_range(0..3)];
    let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
    let a: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let b: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let mut img = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let parity = ((y + oy) / cell + (x + ox) / cell) % 2;
                img[(c * size + y) * size + x] = if parity == 0 { a[c] } else { b[c] };
            }
        }
    }
    img
}

/// Separable Gaussian blur with edge replication.
fn blur(channel: &mut [f64], size: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut norm = 0.0;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        norm += v;
    }
    for v in &mut kernel {
        *v /= norm;
    }
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                acc += kv * channel[y * size + clamp(x as isize + ki as isize - radius)];
            }
            tmp[y * size + x] = acc;
        }
    }
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[clamp(y as isize + ki as isize - radius) * size + x];
            }
            channel[y * size + x] = acc;
        }
    }
}

fn stretch(values: &mut [f64]) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if hi - lo < 1e-12 {
        values.iter_mut().for_each(|v| *v = 0.5);
        return;
    }
    for v in values.iter_mut() {
        *v = (*v - lo) / (hi - lo);
    }
}

fn smooth_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let mut img: Vec<f64> = (0..3 * size * size).map(|_| rng.random()).collect();
    for c in 0..3 {
        let channel = &mut img[c * size * size..(c + 1) * size * size];
        blur(channel, size, 4.0);
        stretch(channel);
    }
    img
}

/// Deterministic synthetic clean image in [0,1].
pub fn synth_clean<S: Scalar>(seed: u64, size: usize, kind: CleanKind) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = match kind {
        CleanKind::Gradient => gradient_field(&mut rng, size),
        CleanKind::Checker => checker_field(&mut rng, size),
        CleanKind::SmoothField => smooth_field(&mut rng, size),
        CleanKind::Mixed => {
            let mut weights = [
                0.1 + rng.random::<f64>(),
                0.1 + rng.random::<f64>(),
                0.1 + rng.random::<f64>(),
            ];
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let g = gradient_field(&mut rng, size);
            let c = checker_field(&mut rng, size);
            let s = smooth_field(&mut rng, size);
            let mut img: Vec<f64> = (0..3 * size * size)
                .map(|i| weights[0] * g[i] + weights[1] * c[i] + weights[2] * s[i])
                .collect();
            stretch(&mut img);
            img
        }
    };
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let data = img.into_iter().map(S::from_f64).collect();
    Tensor::constant(Shape::nchw(1, 3, size, size), data).expect("sized by construction")
}

/// Corrupt `clean` with the given noise and clip back to [0,1]; deterministic per seed.
pub fn add_noise<S: Scalar>(clean: &Tensor<S>, spec: NoiseSpec, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let data: Vec<S> = clean
        .data()
        .iter()
        .map(|v| {
            let v = v.as_f64();
            let noisy = match spec.kind {
                NoiseKind::Gaussian => v + spec.sigma * normal(),
                NoiseKind::PoissonGaussian => {
                    v + (spec.gain * v).max(0.0).sqrt() * normal() + spec.sigma * normal()
                }
            };
            S::from_f64(noisy.clamp(0.0, 1.0))
        })
        .collect();
    Tensor::constant(clean.shape(), data).expect("same length")
}

/// The exact pixel permutations used for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugVariant {
    Identity,
    HFlip,
    Rot90,
    Rot180,
    Rot270,
}

const AUG_VARIANTS: [AugVariant; 5] = [
    AugVariant::Identity,
    AugVariant::HFlip,
    AugVariant::Rot90,
    AugVariant::Rot180,
    AugVariant::Rot270,
];

/// Apply one permutation to a square `[n,c,p,p]` tensor.
pub fn apply_aug<S: Scalar>(t: &Tensor<S>, variant: AugVariant) -> Tensor<S> {
    let s = t.shape();
    let p = s.h();
    assert_eq!(p, s.w(), "augmentation expects square patches");
    let src = t.data();
    let mut out = vec![S::zero(); src.len()];
    for img in 0..s.n() * s.c() {
        let base = img * p * p;
        for y in 0..p {
            for x in 0..p {
                let (sy, sx) = match variant {
                    AugVariant::Identity => (y, x),
                    AugVariant::HFlip => (y, p - 1 - x),
                    AugVariant::Rot90 => (p - 1 - x, y),
                    AugVariant::Rot180 => (p - 1 - y, p - 1 - x),
                    AugVariant::Rot270 => (x, p - 1 - y),
                };
                out[base + y * p + x] = src[base + sy * p + sx];
            }
        }
    }
    Tensor::constant(s, out).expect("same length")
}

/// Random augmentation applied identically to both members of the pair.
pub fn augment<S: Scalar>(pair: &PatchPair<S>, seed: u64) -> PatchPair<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = AUG_VARIANTS[rng.random_range(0..AUG_VARIANTS.len())];
    PatchPair {
        noisy: apply_aug(&pair.noisy, variant),
        clean: apply_aug(&pair.clean, variant),
        source: pair.source,
        noise: pair.noise,
    }
}

/// Binary PPM (P6, 8-bit) load; values are mapped to [0,1] by /255.
pub fn load_image<S: Scalar>(path: &Path) -> Result<Tensor<S>, DataError> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| DataError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, DataError> {
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                msg: "truncated header".to_string(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(bad("not a binary PPM (expected magic P6)"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("empty image"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(bad("payload shorter than extents declare"));
    }
    let payload = &bytes[pos..pos + need];
    let mut data = vec![S::zero(); need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] =
                    S::from_f64(payload[(y * w + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok(Tensor::constant(Shape::nchw(1, 3, h, w), data).expect("sized by construction"))
}

/// Binary PPM (P6, 8-bit) save; values are clamped to [0,1] and rounded
/// half-up to 8 bits.
pub fn save_image<S: Scalar>(t: &Tensor<S>, path: &Path) -> Result<(), DataError> {
    let s = t.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            msg: format!("expected one 3-channel image, got {s}"),
        });
    }
    let (h, w) = (s.h(), s.w());
    let mut out = Vec::with_capacity(32 + 3 * h * w);
    write!(&mut out, "P6\n{w} {h}\n255\n")?;
    let data = t.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[(c * h + y) * w + x].as_f64().clamp(0.0, 1.0);
                out.push((v * 255.0 + 0.5).floor() as u8);
            }
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Clean/noisy pairs matched by basename across two directories.
pub fn load_pairs<S: Scalar>(
    clean_dir: &Path,
    noisy_dir: &Path,
) -> Result<Vec<(String, Tensor<S>, Tensor<S>)>, DataError> {
    let mut names: Vec<String> = fs::read_dir(clean_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(DataError::Format {
            path: clean_dir.to_path_buf(),
            msg: "no .ppm files found".to_string(),
        });
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let clean = load_image(&clean_dir.join(&name))?;
        let noisy = load_image(&noisy_dir.join(&name))?;
        if clean.shape() != noisy.shape() {
            return Err(DataError::Format {
                path: noisy_dir.join(&name),
                msg: format!(
                    "extents {} do not match clean {}",
                    noisy.shape(),
                    clean.shape()
                ),
            });
        }
        pairs.push((name, clean, noisy));
    }
    Ok(pairs)
}

/// Corpus and batching parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    pub patch: usize,
    pub batch: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_images: 200,
            val_images: 50,
            image_size: 128,
            patch: 64,
            batch: 8,
            noise: NoiseSpec::gaussian(25.0 / 255.0),
            seed: 0,
        }
    }
}

const KIND_CYCLE: [CleanKind; 4] = [
    CleanKind::Mixed,
    CleanKind::Gradient,
    CleanKind::Checker,
    CleanKind::SmoothField,
];

impl DatasetConfig {
    /// Whole batches per epoch; the last partial batch is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        self.train_images / self.batch
    }

    /// The `index`-th clean source image (training indices first, then
    /// validation).
    pub fn source_image<S: Scalar>(&self, index: usize) -> Tensor<S> {
        synth_clean(
            mix(self.seed, TAG_IMAGE, index as u64),
            self.image_size,
            KIND_CYCLE[index % KIND_CYCLE.len()],
        )
    }

    /// Deterministic noisy/clean pair for held-out validation image `i`, at
    /// full image extents.
    pub fn val_pair<S: Scalar>(&self, i: usize) -> (Tensor<S>, Tensor<S>) {
        let clean = self.source_image(self.train_images + i);
        let noisy = add_noise(&clean, self.noise, mix(self.seed, TAG_VAL, i as u64));
        (clean, noisy)
    }
}

/// The training batch for one iteration, as a pure function of the config
/// and the global iteration number.
pub fn batch_at<S: Scalar>(cfg: &DatasetConfig, iter: usize) -> Vec<PatchPair<S>> {
    let bpe = cfg.batches_per_epoch().max(1);
    let (epoch, slot) = (iter / bpe, iter % bpe);
    let mut order: Vec<usize> = (0..cfg.train_images).collect();
    order.shuffle(&mut rng_for(cfg.seed, TAG_ORDER, epoch as u64));
    let take = cfg.batch.min(order.len());
    (0..take)
        .map(|i| {
            let source = order[(slot * cfg.batch + i) % order.len()];
            let clean_full = cfg.source_image::<S>(source);
            let mut rng = rng_for(cfg.seed, TAG_PATCH, (iter * cfg.batch + i) as u64);
            let span = cfg.image_size - cfg.patch;
            let (y0, x0) = (rng.random_range(0..=span), rng.random_range(0..=span));
            let variant = AUG_VARIANTS[rng.random_range(0..AUG_VARIANTS.len())];
            let clean = apply_aug(&crop(&clean_full, y0, x0, cfg.patch), variant);
            let noisy = add_noise(
                &clean,
                cfg.noise,
                mix(cfg.seed, TAG_NOISE, (iter * cfg.batch + i) as u64),
            );
            PatchPair {
                noisy,
                clean,
                source,
                noise: cfg.noise,
            }
        })
        .collect()
}

/// Stream of batches for one epoch.
pub fn dataset_iter<S: Scalar>(
    cfg: &DatasetConfig,
    epoch: usize,
) -> impl Iterator<Item = Vec<PatchPair<S>>> + '_ {
    let bpe = cfg.batches_per_epoch();
    (0..bpe).map(move |slot| batch_at(cfg, epoch * bpe + slot))
}

fn crop<S: Scalar>(t: &Tensor<S>, y0: usize, x0: usize, p: usize) -> Tensor<S> {
    let s = t.shape();
    let src = t.data();
    let mut out = vec![S::zero(); s.n() * s.c() * p * p];
    for img in 0..s.n() * s.c() {
        for y in 0..p {
            for x in 0..p {
                out[(img * p + y) * p + x] = src[(img * s.h() + y0 + y) * s.w() + x0 + x];
            }
        }
    }
    Tensor::constant(Shape::nchw(s.n(), s.c(), p, p), out).expect("sized by construction")
}

/// Stack per-sample pairs into `[B,3,P,P]` batch tensors (noisy, clean).
pub fn stack<S: Scalar>(pairs: &[PatchPair<S>]) -> (Tensor<S>, Tensor<S>) {
    assert!(!pairs.is_empty(), "cannot stack an empty batch");
    let s = pairs[0].clean.shape();
    let per = s.numel();
    let mut noisy = Vec::with_capacity(pairs.len() * per);
    let mut clean = Vec::with_capacity(pairs.len() * per);
    for p in pairs {
        noisy.extend_from_slice(&p.noisy.data());
        clean.extend_from_slice(&p.clean.data());
    }
    let shape = Shape::nchw(pairs.len(), s.c(), s.h(), s.w());
    (
        Tensor::constant(shape, noisy).expect("sized by construction"),
        Tensor::constant(shape, clean).expect("sized by construction"),
    )
}
