//! Dataset ingestion, deterministic splits and seeded RNG streams.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Keyed substreams of a counter-based generator. The same
/// (master seed, purpose tag, index) key always yields the same sequence,
/// and distinct keys yield independent streams, so per-example randomness
/// does not depend on batch composition or worker count.
#[derive(Debug, Clone, Copy)]
pub struct RngStream {
    master: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl RngStream {
    pub fn new(master: u64) -> Self {
        RngStream { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Derived 64-bit key for (tag, index); also usable as the master
    /// seed of a nested component.
    pub fn derive(&self, tag: &str, index: u64) -> u64 {
        splitmix64(splitmix64(self.master ^ fnv1a(tag)) ^ index)
    }

    /// Independent stream for (tag, index).
    pub fn stream(&self, tag: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(tag, index))
    }
}

/// Images in [0,1] plus integer class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: String,
        classes: usize,
        dims: (usize, usize, usize),
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let (c, h, w) = dims;
        let per = c * h * w;
        if per == 0 || images.len() % per != 0 || images.len() / per != labels.len() {
            return Err(Error::Validation("image buffer does not match labels".into()));
        }
        if images.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Validation("pixels must lie in [0,1]".into()));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::Validation("label out of range".into()));
        }
        Ok(Dataset {
            name,
            classes,
            channels: c,
            height: h,
            width: w,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn example_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.example_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PLANE: usize = 1024;

/// Load CIFAR-10 binary files: each record is one label byte followed by
/// 3072 bytes of pixels (R, G then B plane, row-major 32x32). Pixels map
/// to byte/255.0 and record order is preserved.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p.as_ref())?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD}",
                p.as_ref().display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0];
            if label > 9 {
                return Err(Error::Format(format!(
                    "{}: label byte {label} out of range",
                    p.as_ref().display()
                )));
            }
            labels.push(label as usize);
            images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let _ = CIFAR_PLANE; // layout constant documented above
    Dataset::new("cifar10".into(), 10, (3, 32, 32), images, labels)
}

/// Synthetic generators, 3x16x16 images. `separation` scales the class
/// template, `noise` the per-pixel Gaussian noise; together they set the
/// linear-separability margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    GaussianBlobs { separation: f64, noise: f64 },
    StripedPatterns { separation: f64, noise: f64 },
}

const SYN_C: usize = 3;
const SYN_H: usize = 16;
const SYN_W: usize = 16;

fn blob_template(class: usize, classes: usize, out: &mut [f64]) {
    // one signed smooth bump per class, centers spread on a circle;
    // normalized to max amplitude 1 so `separation` is the true pixel
    // amplitude and the [0,1] clip stays inactive for sane settings.
    // The circle starts at the top so two classes separate vertically
    // and horizontal flips keep each class's appearance.
    let angle = std::f64::consts::FRAC_PI_2
        + 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
    let (cy, cx) = (
        SYN_H as f64 / 2.0 + 4.0 * angle.sin(),
        SYN_W as f64 / 2.0 + 4.0 * angle.cos(),
    );
    for ch in 0..SYN_C {
        let chan_scale = 1.0 - 0.25 * ch as f64;
        for y in 0..SYN_H {
            for x in 0..SYN_W {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let bump = (-d2 / 10.0).exp();
                // signed so templates of different classes point in
                // genuinely different directions
                out[(ch * SYN_H + y) * SYN_W + x] = chan_scale * (2.0 * bump - 0.35) / 1.65;
            }
        }
    }
}

fn stripe_template(class: usize, classes: usize, out: &mut [f64]) {
    // class selects stripe orientation/frequency
    let freq = 1.0 + (class % 4) as f64;
    let vertical = (class * 2) >= classes;
    for ch in 0..SYN_C {
        let chan_scale = 1.0 - 0.2 * ch as f64;
        for y in 0..SYN_H {
            for x in 0..SYN_W {
                let t = if vertical { x } else { y } as f64;
                let v = (2.0 * std::f64::consts::PI * freq * t / SYN_H as f64
                    + class as f64)
                    .sin();
                out[(ch * SYN_H + y) * SYN_W + x] = chan_scale * v;
            }
        }
    }
}

/// Balanced deterministic synthetic dataset: label(i) = i mod K, image =
/// clip(0.5 + separation * template + noise * N(0,1)).
pub fn synthetic_dataset(kind: SyntheticKind, n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if !(2..=10).contains(&classes) {
        return Err(Error::Validation("synthetic classes must be in 2..=10".into()));
    }
    use rand_distr::Distribution;
    let (separation, noise, name) = match kind {
        SyntheticKind::GaussianBlobs { separation, noise } => {
            (separation, noise, "gaussian_blobs_img")
        }
        SyntheticKind::StripedPatterns { separation, noise } => {
            (separation, noise, "striped_patterns")
        }
    };
    let per = SYN_C * SYN_H * SYN_W;
    let mut templates = vec![vec![0.0; per]; classes];
    for (k, t) in templates.iter_mut().enumerate() {
        match kind {
            SyntheticKind::GaussianBlobs { .. } => blob_template(k, classes, t),
            SyntheticKind::StripedPatterns { .. } => stripe_template(k, classes, t),
        }
    }
    let streams = RngStream::new(seed);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        let mut rng = streams.stream("synthetic", i as u64);
        for j in 0..per {
            let v = 0.5 + separation * templates[label][j] + noise * normal.sample(&mut rng);
            images.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset::new(name.into(), classes, (SYN_C, SYN_H, SYN_W), images, labels)
}

/// Arithmetic mean over all pixels, per channel.
pub fn dataset_mean(ds: &Dataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::Validation("dataset_mean of empty dataset".into()));
    }
    let (c, h, w) = ds.dims();
    let mut sums = vec![0.0; c];
    for i in 0..ds.len() {
        let img = ds.image(i);
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += img[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>();
        }
    }
    let denom = (ds.len() * h * w) as f64;
    Ok(sums.into_iter().map(|s| s / denom).collect())
}

/// Disjoint index sets over one dataset. Validation comes out of the
/// training pool, never the held-out test indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic shuffle of 0..N; the first `test_size` indices become
/// the test set, the next `val_size` the validation set, the remainder
/// the training set.
pub fn make_split(ds: &Dataset, val_size: usize, test_size: usize, seed: u64) -> Result<Split> {
    let n = ds.len();
    if val_size + test_size >= n {
        return Err(Error::Validation(format!(
            "split sizes val={val_size} test={test_size} leave no training data out of {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(seed).stream("split", 0);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let test = idx[..test_size].to_vec();
    let val = idx[test_size..test_size + val_size].to_vec();
    let train = idx[test_size + val_size..].to_vec();
    Ok(Split { train, val, test })
}
