//! Augmentation operators with exact sampling and soft-label semantics.
//!
//! Every operator keeps pixels in [0,1] and keeps each label row a
//! probability distribution. Mixing operators derive their label weights
//! from the actually painted pixel areas, so weight and area agree
//! exactly, not just in expectation.
//!
//! Randomness is keyed per example id (not per batch position): the same
//! (seed, example) pair produces the same augmentation wherever the
//! example lands in a batch. Partner selection for the mixing operators
//! is necessarily batch-level and uses a separate batch stream.

use rand::Rng;
use rand_distr::Distribution;

use crate::data::{Dataset, RngStream};
use crate::error::{Error, Result};

/// Batch of images plus per-example soft-label distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    channels: usize,
    height: usize,
    width: usize,
    /// Class count.
    pub classes: usize,
    /// B x C x H x W pixels in [0,1].
    pub images: Vec<f64>,
    /// B x K rows, each summing to 1.
    pub labels: Vec<f64>,
    /// Dataset example ids; keys for per-example randomness.
    pub ids: Vec<u64>,
}

impl ImageBatch {
    pub fn new(
        dims: (usize, usize, usize),
        classes: usize,
        images: Vec<f64>,
        labels: Vec<f64>,
        ids: Vec<u64>,
    ) -> Result<Self> {
        let per = dims.0 * dims.1 * dims.2;
        if per == 0 || images.len() % per != 0 {
            return Err(Error::Dimension("image buffer does not tile into examples".into()));
        }
        let b = images.len() / per;
        if labels.len() != b * classes || ids.len() != b {
            return Err(Error::Dimension("labels/ids do not match batch size".into()));
        }
        Ok(ImageBatch {
            channels: dims.0,
            height: dims.1,
            width: dims.2,
            classes,
            images,
            labels,
            ids,
        })
    }

    /// Gather dataset examples into a batch with one-hot labels.
    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        let dims = ds.dims();
        let mut images = Vec::with_capacity(indices.len() * ds.example_len());
        let mut labels = vec![0.0; indices.len() * ds.classes];
        let mut ids = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images.extend_from_slice(ds.image(i));
            labels[row * ds.classes + ds.label(i)] = 1.0;
            ids.push(i as u64);
        }
        ImageBatch::new(dims, ds.classes, images, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
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

    pub fn label_row(&self, i: usize) -> &[f64] {
        &self.labels[i * self.classes..(i + 1) * self.classes]
    }

    /// Hard label: argmax of the soft-label row.
    pub fn hard_label(&self, i: usize) -> usize {
        crate::tensor::argmax(self.label_row(i))
    }
}

/// Randomness source for one augmentation application. Construct with a
/// seed that already encodes the training step so successive steps draw
/// fresh augmentations.
#[derive(Debug, Clone, Copy)]
pub struct AugmentCtx {
    streams: RngStream,
}

impl AugmentCtx {
    pub fn new(seed: u64) -> Self {
        AugmentCtx {
            streams: RngStream::new(seed),
        }
    }

    fn example_rng(&self, tag: &str, id: u64) -> rand_chacha::ChaCha8Rng {
        self.streams.stream(tag, id)
    }

    fn batch_rng(&self, tag: &str) -> rand_chacha::ChaCha8Rng {
        self.streams.stream(tag, u64::MAX)
    }
}

/// Square (or rectangular) region given by its integer center. The
/// center is sampled within the image bounds but the window itself may
/// overflow; the effective region is the clipped intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub cy: i64,
    pub cx: i64,
    pub height: i64,
    pub width: i64,
}

impl Window {
    /// Clipped intersection as (y0, y1, x0, x1) half-open ranges. The
    /// window spans [c - extent/2, c - extent/2 + extent) per axis.
    pub fn clipped(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let y0 = (self.cy - self.height / 2).clamp(0, h as i64);
        let y1 = (self.cy - self.height / 2 + self.height).clamp(0, h as i64);
        let x0 = (self.cx - self.width / 2).clamp(0, w as i64);
        let x1 = (self.cx - self.width / 2 + self.width).clamp(0, w as i64);
        (y0 as usize, y1 as usize, x0 as usize, x1 as usize)
    }

    pub fn clipped_area(&self, h: usize, w: usize) -> usize {
        let (y0, y1, x0, x1) = self.clipped(h, w);
        (y1 - y0) * (x1 - x0)
    }
}

/// Zero-pad by `pad` on each side, crop back to the original size at a
/// uniform offset, and (optionally) flip horizontally with probability
/// one half. Labels are unchanged.
pub fn pad_and_crop(batch: &ImageBatch, pad: usize, flip: bool, ctx: &AugmentCtx) -> ImageBatch {
    let (c, h, w) = batch.dims();
    let mut out = batch.clone();
    for i in 0..batch.len() {
        let mut rng = ctx.example_rng("padcrop", batch.ids[i]);
        let oy = rng.gen_range(0..=2 * pad) as i64;
        let ox = rng.gen_range(0..=2 * pad) as i64;
        let do_flip = flip && rng.gen_bool(0.5);
        let src = batch.image(i);
        let dst = &mut out.images[i * batch.example_len()..(i + 1) * batch.example_len()];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // crop offset (oy, ox) into the padded image
                    let sy = y as i64 + oy - pad as i64;
                    let sx = x as i64 + ox - pad as i64;
                    let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        src[(ci * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                    let xo = if do_flip { w - 1 - x } else { x };
                    dst[(ci * h + y) * w + xo] = v;
                }
            }
        }
    }
    out
}

fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Per-example draw made by [`mixup`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixDraw {
    pub partner: usize,
    pub lambda: f64,
}

/// Convex combination with a batch partner: lambda ~ Beta(alpha, alpha)
/// per example, partner via a uniform random permutation (self-pairing
/// allowed). Both image and label mix with the same lambda.
pub fn mixup(batch: &ImageBatch, alpha: f64, ctx: &AugmentCtx) -> Result<ImageBatch> {
    mixup_with_report(batch, alpha, ctx).map(|(b, _)| b)
}

pub fn mixup_with_report(
    batch: &ImageBatch,
    alpha: f64,
    ctx: &AugmentCtx,
) -> Result<(ImageBatch, Vec<MixDraw>)> {
    if batch.len() < 2 {
        return Err(Error::Validation("mixup needs a batch of at least 2".into()));
    }
    if alpha <= 0.0 {
        return Err(Error::Validation("mixup alpha must be positive".into()));
    }
    let beta = rand_distr::Beta::new(alpha, alpha).map_err(|e| Error::Validation(e.to_string()))?;
    let partner = random_permutation(batch.len(), &mut ctx.batch_rng("mixup.partner"));
    let mut out = batch.clone();
    let mut draws = Vec::with_capacity(batch.len());
    let per = batch.example_len();
    for i in 0..batch.len() {
        let mut rng = ctx.example_rng("mixup", batch.ids[i]);
        let lambda = beta.sample(&mut rng);
        draws.push(MixDraw {
            partner: partner[i],
            lambda,
        });
        let a = batch.image(i);
        let b = batch.image(partner[i]);
        let dst = &mut out.images[i * per..(i + 1) * per];
        for j in 0..per {
            dst[j] = lambda * a[j] + (1.0 - lambda) * b[j];
        }
        let ya = batch.label_row(i).to_vec();
        let yb = batch.label_row(partner[i]).to_vec();
        let drow = &mut out.labels[i * batch.classes..(i + 1) * batch.classes];
        for k in 0..batch.classes {
            drow[k] = lambda * ya[k] + (1.0 - lambda) * yb[k];
        }
    }
    Ok((out, draws))
}

/// Replace a clipped square window with the given per-channel fill.
/// Labels are unchanged.
pub fn cutout(batch: &ImageBatch, window: usize, fill: &[f64], ctx: &AugmentCtx) -> Result<ImageBatch> {
    cutout_with_report(batch, window, fill, ctx).map(|(b, _)| b)
}

pub fn cutout_with_report(
    batch: &ImageBatch,
    window: usize,
    fill: &[f64],
    ctx: &AugmentCtx,
) -> Result<(ImageBatch, Vec<Window>)> {
    let (c, h, w) = batch.dims();
    if fill.len() != c {
        return Err(Error::Dimension(format!(
            "cutout fill has {} channels, batch has {c}",
            fill.len()
        )));
    }
    let mut out = batch.clone();
    let mut windows = Vec::with_capacity(batch.len());
    let per = batch.example_len();
    for i in 0..batch.len() {
        let mut rng = ctx.example_rng("cutout", batch.ids[i]);
        let win = Window {
            cy: rng.gen_range(0..h) as i64,
            cx: rng.gen_range(0..w) as i64,
            height: window as i64,
            width: window as i64,
        };
        windows.push(win);
        let (y0, y1, x0, x1) = win.clipped(h, w);
        let dst = &mut out.images[i * per..(i + 1) * per];
        for ci in 0..c {
            for y in y0..y1 {
                for x in x0..x1 {
                    dst[(ci * h + y) * w + x] = fill[ci];
                }
            }
        }
    }
    Ok((out, windows))
}

/// Per-example draw made by [`cutmix`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchDraw {
    pub partner: usize,
    pub window: Window,
    /// Weight kept by the original image: 1 - clipped_area/(H*W).
    pub lambda: f64,
}

/// Paste a square window from a batch partner; the label weight of the
/// partner equals the pasted-pixel fraction exactly. The patch area
/// ratio is Beta(1,1) (uniform) and the side length is
/// round(H * sqrt(ratio)).
pub fn cutmix(batch: &ImageBatch, ctx: &AugmentCtx) -> Result<ImageBatch> {
    cutmix_with_report(batch, ctx).map(|(b, _)| b)
}

pub fn cutmix_with_report(
    batch: &ImageBatch,
    ctx: &AugmentCtx,
) -> Result<(ImageBatch, Vec<PatchDraw>)> {
    if batch.len() < 2 {
        return Err(Error::Validation("cutmix needs a batch of at least 2".into()));
    }
    let (c, h, w) = batch.dims();
    let partner = random_permutation(batch.len(), &mut ctx.batch_rng("cutmix.partner"));
    let mut out = batch.clone();
    let mut draws = Vec::with_capacity(batch.len());
    let per = batch.example_len();
    for i in 0..batch.len() {
        let mut rng = ctx.example_rng("cutmix", batch.ids[i]);
        let ratio: f64 = rng.gen_range(0.0..1.0);
        let side = (h as f64 * ratio.sqrt()).round() as i64;
        let win = Window {
            cy: rng.gen_range(0..h) as i64,
            cx: rng.gen_range(0..w) as i64,
            height: side,
            width: side,
        };
        let (y0, y1, x0, x1) = win.clipped(h, w);
        let src = batch.image(partner[i]);
        let dst = &mut out.images[i * per..(i + 1) * per];
        for ci in 0..c {
            for y in y0..y1 {
                for x in x0..x1 {
                    dst[(ci * h + y) * w + x] = src[(ci * h + y) * w + x];
                }
            }
        }
        let pasted = ((y1 - y0) * (x1 - x0)) as f64;
        let lambda = 1.0 - pasted / (h * w) as f64;
        draws.push(PatchDraw {
            partner: partner[i],
            window: win,
            lambda,
        });
        let ya = batch.label_row(i).to_vec();
        let yb = batch.label_row(partner[i]).to_vec();
        let drow = &mut out.labels[i * batch.classes..(i + 1) * batch.classes];
        for k in 0..batch.classes {
            drow[k] = lambda * ya[k] + (1.0 - lambda) * yb[k];
        }
    }
    Ok((out, draws))
}

fn distinct_indices(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let j = rng.gen_range(0..n);
        if !picked.contains(&j) {
            picked.push(j);
        }
    }
    picked
}

/// Per-example draw made by [`ricap`]: source indices in TL, TR, BL, BR
/// order plus the boundary point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RicapDraw {
    pub sources: [usize; 4],
    pub boundary: (usize, usize),
}

/// Four-quadrant patchwork: the boundary point is
/// (round(H*Beta(.3,.3)), round(W*Beta(.3,.3))), the quadrants come from
/// four distinct batch partners cropped at random positions of matching
/// size, and label weights equal the quadrant area fractions.
pub fn ricap(batch: &ImageBatch, ctx: &AugmentCtx) -> Result<ImageBatch> {
    ricap_with_report(batch, ctx).map(|(b, _)| b)
}

pub fn ricap_with_report(
    batch: &ImageBatch,
    ctx: &AugmentCtx,
) -> Result<(ImageBatch, Vec<RicapDraw>)> {
    if batch.len() < 4 {
        return Err(Error::Validation("ricap needs a batch of at least 4".into()));
    }
    let (c, h, w) = batch.dims();
    let beta = rand_distr::Beta::new(0.3, 0.3).map_err(|e| Error::Validation(e.to_string()))?;
    let mut partner_rng = ctx.batch_rng("ricap.partner");
    let mut out = batch.clone();
    let mut draws = Vec::with_capacity(batch.len());
    let per = batch.example_len();
    for i in 0..batch.len() {
        let sources = distinct_indices(batch.len(), 4, &mut partner_rng);
        let mut rng = ctx.example_rng("ricap", batch.ids[i]);
        let bh = (h as f64 * beta.sample(&mut rng)).round() as usize;
        let bw = (w as f64 * beta.sample(&mut rng)).round() as usize;
        draws.push(RicapDraw {
            sources: [sources[0], sources[1], sources[2], sources[3]],
            boundary: (bh, bw),
        });
        // (row range, col range) per quadrant, in fixed order TL TR BL BR
        let quads = [
            (0, bh, 0, bw),
            (0, bh, bw, w),
            (bh, h, 0, bw),
            (bh, h, bw, w),
        ];
        let dst = &mut out.images[i * per..(i + 1) * per];
        let drow = &mut out.labels[i * batch.classes..(i + 1) * batch.classes];
        drow.iter_mut().for_each(|v| *v = 0.0);
        for (q, &(y0, y1, x0, x1)) in quads.iter().enumerate() {
            let (qh, qw) = (y1 - y0, x1 - x0);
            let weight = (qh * qw) as f64 / (h * w) as f64;
            let src_idx = sources[q];
            for (k, &y) in batch.label_row(src_idx).iter().enumerate() {
                drow[k] += weight * y;
            }
            if qh == 0 || qw == 0 {
                continue;
            }
            let oy = rng.gen_range(0..=h - qh);
            let ox = rng.gen_range(0..=w - qw);
            let src = batch.image(src_idx);
            for ci in 0..c {
                for dy in 0..qh {
                    for dx in 0..qw {
                        dst[(ci * h + y0 + dy) * w + x0 + dx] =
                            src[(ci * h + oy + dy) * w + ox + dx];
                    }
                }
            }
        }
    }
    Ok((out, draws))
}

// ---- primitive pixel operations (the RandAugment pool) ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveOp {
    AutoContrast,
    Equalize,
    Invert,
    Rotate,
    Posterize,
    Solarize,
    Color,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    SolarizeAdd,
}

impl PrimitiveOp {
    pub const ALL: [PrimitiveOp; 15] = [
        PrimitiveOp::AutoContrast,
        PrimitiveOp::Equalize,
        PrimitiveOp::Invert,
        PrimitiveOp::Rotate,
        PrimitiveOp::Posterize,
        PrimitiveOp::Solarize,
        PrimitiveOp::Color,
        PrimitiveOp::Contrast,
        PrimitiveOp::Brightness,
        PrimitiveOp::Sharpness,
        PrimitiveOp::ShearX,
        PrimitiveOp::ShearY,
        PrimitiveOp::TranslateX,
        PrimitiveOp::TranslateY,
        PrimitiveOp::SolarizeAdd,
    ];

    /// Pool without the operations that measurably hurt robustness
    /// (Invert, Posterize, Solarize).
    pub const CURATED: [PrimitiveOp; 12] = [
        PrimitiveOp::AutoContrast,
        PrimitiveOp::Equalize,
        PrimitiveOp::Rotate,
        PrimitiveOp::Color,
        PrimitiveOp::Contrast,
        PrimitiveOp::Brightness,
        PrimitiveOp::Sharpness,
        PrimitiveOp::ShearX,
        PrimitiveOp::ShearY,
        PrimitiveOp::TranslateX,
        PrimitiveOp::TranslateY,
        PrimitiveOp::SolarizeAdd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveOp::AutoContrast => "AutoContrast",
            PrimitiveOp::Equalize => "Equalize",
            PrimitiveOp::Invert => "Invert",
            PrimitiveOp::Rotate => "Rotate",
            PrimitiveOp::Posterize => "Posterize",
            PrimitiveOp::Solarize => "Solarize",
            PrimitiveOp::Color => "Color",
            PrimitiveOp::Contrast => "Contrast",
            PrimitiveOp::Brightness => "Brightness",
            PrimitiveOp::Sharpness => "Sharpness",
            PrimitiveOp::ShearX => "ShearX",
            PrimitiveOp::ShearY => "ShearY",
            PrimitiveOp::TranslateX => "TranslateX",
            PrimitiveOp::TranslateY => "TranslateY",
            PrimitiveOp::SolarizeAdd => "SolarizeAdd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown augmentation op `{s}`")))
    }
}

/// Magnitude table: what each operation does at magnitude M in [0,10].
/// This table is normative for the artifact; magnitudes scale linearly
/// in M unless stated otherwise.
pub const MAGNITUDE_TABLE: &[(&str, &str)] = &[
    ("AutoContrast", "per-channel rescale to full [0,1] range (no magnitude)"),
    ("Equalize", "per-channel 256-bin histogram equalization (no magnitude)"),
    ("Invert", "p -> 1 - p (no magnitude)"),
    ("Rotate", "rotate by +-30deg * M/10 (random sign), nearest sampling, zero fill"),
    ("Posterize", "keep 8 - floor(M*4/10) most significant bits of each 8-bit pixel"),
    ("Solarize", "threshold t = 1 - M/10; pixels >= t map to 1 - p"),
    ("Color", "blend with per-pixel grayscale, factor 1 +- 0.9*M/10 (random sign)"),
    ("Contrast", "blend with mean grayscale, factor 1 +- 0.9*M/10 (random sign)"),
    ("Brightness", "multiply by factor 1 +- 0.9*M/10 (random sign), clipped"),
    ("Sharpness", "blend with 3x3 smoothed image, factor 1 +- 0.9*M/10 (random sign)"),
    ("ShearX", "shear factor +-0.3 * M/10 (random sign), nearest, zero fill"),
    ("ShearY", "shear factor +-0.3 * M/10 (random sign), nearest, zero fill"),
    ("TranslateX", "shift by +-round(10px * W/32 * M/10) (random sign), zero fill"),
    ("TranslateY", "shift by +-round(10px * H/32 * M/10) (random sign), zero fill"),
    ("SolarizeAdd", "add 110/255 * M/10 to pixels below 0.5, clipped"),
];

fn rand_sign(rng: &mut impl Rng) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn grayscale(image: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut gray = vec![0.0; hw];
    if c == 3 {
        for (i, g) in gray.iter_mut().enumerate() {
            *g = 0.299 * image[i] + 0.587 * image[hw + i] + 0.114 * image[2 * hw + i];
        }
    } else {
        for (i, g) in gray.iter_mut().enumerate() {
            *g = (0..c).map(|ch| image[ch * hw + i]).sum::<f64>() / c as f64;
        }
    }
    gray
}

fn blend_per_pixel(image: &mut [f64], base: impl Fn(usize, usize) -> f64, factor: f64, hw: usize) {
    let c = image.len() / hw;
    for ch in 0..c {
        for i in 0..hw {
            let b = base(ch, i);
            image[ch * hw + i] = b + factor * (image[ch * hw + i] - b);
        }
    }
}

/// Inverse-map an affine transform with nearest-neighbor sampling and
/// zero fill. `map` takes output (y, x) and returns fractional source
/// coordinates.
fn warp(image: &[f64], c: usize, h: usize, w: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let mut out = vec![0.0; image.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64, x as f64);
            let (ry, rx) = (sy.round(), sx.round());
            if ry >= 0.0 && ry < h as f64 && rx >= 0.0 && rx < w as f64 {
                let (ry, rx) = (ry as usize, rx as usize);
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = image[(ch * h + ry) * w + rx];
                }
            }
        }
    }
    out
}

fn equalize_channel(chan: &mut [f64]) {
    let mut hist = [0u64; 256];
    let quant: Vec<usize> = chan
        .iter()
        .map(|&p| ((p * 255.0).round() as i64).clamp(0, 255) as usize)
        .collect();
    for &q in &quant {
        hist[q] += 1;
    }
    let occupied: Vec<u64> = hist.iter().copied().filter(|&c| c > 0).collect();
    if occupied.len() <= 1 {
        return;
    }
    let step = (occupied.iter().sum::<u64>() - occupied[occupied.len() - 1]) / 255;
    if step == 0 {
        return;
    }
    let mut lut = [0u8; 256];
    let mut n = step / 2;
    for (i, l) in lut.iter_mut().enumerate() {
        *l = (n / step).min(255) as u8;
        n += hist[i];
    }
    for (p, &q) in chan.iter_mut().zip(&quant) {
        *p = lut[q] as f64 / 255.0;
    }
}

/// Apply one primitive operation to a single image at magnitude
/// `m` in [0,10]. Geometric operations use zero fill outside the source;
/// the output is clipped to [0,1].
pub fn apply_primitive(
    image: &[f64],
    dims: (usize, usize, usize),
    op: PrimitiveOp,
    m: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let (c, h, w) = dims;
    if image.len() != c * h * w {
        return Err(Error::Dimension("image does not match dims".into()));
    }
    if !(0.0..=10.0).contains(&m) {
        return Err(Error::Validation(format!("magnitude {m} outside [0,10]")));
    }
    let hw = h * w;
    let mut out = image.to_vec();
    match op {
        PrimitiveOp::AutoContrast => {
            for ch in 0..c {
                let chan = &mut out[ch * hw..(ch + 1) * hw];
                let lo = chan.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = chan.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    chan.iter_mut().for_each(|p| *p = (*p - lo) / (hi - lo));
                }
            }
        }
        PrimitiveOp::Equalize => {
            for ch in 0..c {
                equalize_channel(&mut out[ch * hw..(ch + 1) * hw]);
            }
        }
        PrimitiveOp::Invert => out.iter_mut().for_each(|p| *p = 1.0 - *p),
        PrimitiveOp::Rotate => {
            let theta = rand_sign(rng) * (30.0 * m / 10.0).to_radians();
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let (cos, sin) = (theta.cos(), theta.sin());
            out = warp(image, c, h, w, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
            });
        }
        PrimitiveOp::Posterize => {
            let bits = 8 - (m * 4.0 / 10.0).floor() as u32;
            let mask = if bits >= 8 { 0xffu8 } else { 0xffu8 << (8 - bits) };
            out.iter_mut().for_each(|p| {
                let v = ((*p * 255.0).round() as i64).clamp(0, 255) as u8;
                *p = (v & mask) as f64 / 255.0;
            });
        }
        PrimitiveOp::Solarize => {
            let t = 1.0 - m / 10.0;
            out.iter_mut().for_each(|p| {
                if *p >= t {
                    *p = 1.0 - *p;
                }
            });
        }
        PrimitiveOp::SolarizeAdd => {
            let add = 110.0 / 255.0 * m / 10.0;
            out.iter_mut().for_each(|p| {
                if *p < 0.5 {
                    *p += add;
                }
            });
        }
        PrimitiveOp::Color => {
            let f = 1.0 + rand_sign(rng) * 0.9 * m / 10.0;
            let gray = grayscale(image, c, hw);
            blend_per_pixel(&mut out, |_, i| gray[i], f, hw);
        }
        PrimitiveOp::Contrast => {
            let f = 1.0 + rand_sign(rng) * 0.9 * m / 10.0;
            let gray = grayscale(image, c, hw);
            let mean = gray.iter().sum::<f64>() / hw as f64;
            blend_per_pixel(&mut out, |_, _| mean, f, hw);
        }
        PrimitiveOp::Brightness => {
            let f = 1.0 + rand_sign(rng) * 0.9 * m / 10.0;
            blend_per_pixel(&mut out, |_, _| 0.0, f, hw);
        }
        PrimitiveOp::Sharpness => {
            let f = 1.0 + rand_sign(rng) * 0.9 * m / 10.0;
            // 3x3 smoothing kernel, center weight 5, border pixels kept
            let mut blur = image.to_vec();
            for ch in 0..c {
                for y in 1..h.saturating_sub(1) {
                    for x in 1..w.saturating_sub(1) {
                        let mut s = 0.0;
                        for (dy, row_w) in [(-1i64, 1.0), (0, 1.0), (1, 1.0)] {
                            for (dx, col_w) in [(-1i64, 1.0), (0, 1.0), (1, 1.0)] {
                                let wgt = if dy == 0 && dx == 0 { 5.0 } else { row_w * col_w };
                                let sy = (y as i64 + dy) as usize;
                                let sx = (x as i64 + dx) as usize;
                                s += wgt * image[(ch * h + sy) * w + sx];
                            }
                        }
                        blur[(ch * h + y) * w + x] = s / 13.0;
                    }
                }
            }
            blend_per_pixel(&mut out, |ch, i| blur[ch * hw + i], f, hw);
        }
        PrimitiveOp::ShearX => {
            let s = rand_sign(rng) * 0.3 * m / 10.0;
            out = warp(image, c, h, w, |y, x| (y, x + s * y));
        }
        PrimitiveOp::ShearY => {
            let s = rand_sign(rng) * 0.3 * m / 10.0;
            out = warp(image, c, h, w, |y, x| (y + s * x, x));
        }
        PrimitiveOp::TranslateX => {
            let t = rand_sign(rng) * (10.0 * w as f64 / 32.0 * m / 10.0).round();
            out = warp(image, c, h, w, |y, x| (y, x + t));
        }
        PrimitiveOp::TranslateY => {
            let t = rand_sign(rng) * (10.0 * h as f64 / 32.0 * m / 10.0).round();
            out = warp(image, c, h, w, |y, x| (y + t, x));
        }
    }
    out.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(out)
}

/// RandAugment over an explicit pool: per example, draw `n` operations
/// uniformly with replacement (exactly `n` op draws) and apply them in
/// sequence at magnitude `m`. Labels are unchanged.
pub fn rand_augment_with_pool(
    batch: &ImageBatch,
    n: usize,
    m: f64,
    pool: &[PrimitiveOp],
    ctx: &AugmentCtx,
) -> Result<ImageBatch> {
    if n == 0 {
        return Err(Error::Validation("rand_augment needs n >= 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::Validation("rand_augment pool is empty".into()));
    }
    let dims = batch.dims();
    let mut out = batch.clone();
    let per = batch.example_len();
    for i in 0..batch.len() {
        let mut rng = ctx.example_rng("randaug", batch.ids[i]);
        let mut img = batch.image(i).to_vec();
        for _ in 0..n {
            let op = pool[rng.gen_range(0..pool.len())];
            img = apply_primitive(&img, dims, op, m, &mut rng)?;
        }
        out.images[i * per..(i + 1) * per].copy_from_slice(&img);
    }
    Ok(out)
}

/// RandAugment over the full 15-op pool, or the curated 12-op pool that
/// drops Invert, Posterize and Solarize.
pub fn rand_augment(
    batch: &ImageBatch,
    n: usize,
    m: f64,
    curated: bool,
    ctx: &AugmentCtx,
) -> Result<ImageBatch> {
    let pool: &[PrimitiveOp] = if curated {
        &PrimitiveOp::CURATED
    } else {
        &PrimitiveOp::ALL
    };
    rand_augment_with_pool(batch, n, m, pool, ctx)
}

/// One step of an augmentation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentSpec {
    PadCrop { pad: usize, flip: bool },
    Mixup { alpha: f64 },
    Cutout { window: usize, fill: Vec<f64> },
    CutMix,
    Ricap,
    RandAugment { n: usize, m: f64, curated: bool },
}

impl AugmentSpec {
    pub fn apply(&self, batch: &ImageBatch, ctx: &AugmentCtx) -> Result<ImageBatch> {
        match self {
            AugmentSpec::PadCrop { pad, flip } => Ok(pad_and_crop(batch, *pad, *flip, ctx)),
            AugmentSpec::Mixup { alpha } => mixup(batch, *alpha, ctx),
            AugmentSpec::Cutout { window, fill } => cutout(batch, *window, fill, ctx),
            AugmentSpec::CutMix => cutmix(batch, ctx),
            AugmentSpec::Ricap => ricap(batch, ctx),
            AugmentSpec::RandAugment { n, m, curated } => {
                rand_augment(batch, *n, *m, *curated, ctx)
            }
        }
    }
}

/// Apply operators in listed order. An empty pipeline is an error:
/// "no augmentation" is expressed by not calling this at all.
pub fn pipeline(batch: &ImageBatch, specs: &[AugmentSpec], ctx: &AugmentCtx) -> Result<ImageBatch> {
    if specs.is_empty() {
        return Err(Error::Validation("augmentation pipeline must be nonempty".into()));
    }
    let mut out = specs[0].apply(batch, ctx)?;
    for spec in &specs[1..] {
        out = spec.apply(&out, ctx)?;
    }
    Ok(out)
}
