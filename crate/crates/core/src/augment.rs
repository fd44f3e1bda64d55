//! Stochastic view generation: flip, square crop + bilinear resize,
//! brightness/contrast jitter and normalization. Each source image yields two
//! independently augmented views that form a positive pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::rng::{purpose, substream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Crop side as a fraction of the shorter image side.
    pub crop_scale_min: f32,
    pub crop_scale_max: f32,
    pub target_size: usize,
    pub flip_prob: f32,
    pub brightness_range: [f32; 2],
    pub contrast_range: [f32; 2],
    pub contrast_prob: f32,
    pub norm_mean: f32,
    pub norm_std: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_min: 0.5,
            crop_scale_max: 0.8,
            target_size: 32,
            flip_prob: 0.5,
            brightness_range: [0.8, 1.2],
            contrast_range: [0.8, 1.2],
            contrast_prob: 0.2,
            norm_mean: 0.5,
            norm_std: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0 < self.crop_scale_min
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return bad(format!(
                "crop scale range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.crop_scale_min, self.crop_scale_max
            ));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("contrast_prob", self.contrast_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.target_size < 8 {
            return bad(format!("target_size {} < 8", self.target_size));
        }
        for (name, [lo, hi]) in [
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
        ] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} [{lo}, {hi}] must satisfy 0 <= lo <= hi"));
            }
        }
        if !(self.norm_std > 0.0) || !self.norm_mean.is_finite() {
            return bad(format!("normalization std {} must be > 0", self.norm_std));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left-right: `(r, c) -> (r, W-1-c)`.
    Horizontal,
    /// Mirror top-bottom: `(r, c) -> (H-1-r, c)`.
    Vertical,
}

pub fn flip(img: &GrayImage, axis: FlipAxis) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            out.push(match axis {
                FlipAxis::Horizontal => img.get(r, w - 1 - c),
                FlipAxis::Vertical => img.get(h - 1 - r, c),
            });
        }
    }
    GrayImage::new(w, h, out).expect("same geometry")
}

/// With probability `flip_prob`, mirror along a uniformly chosen axis.
pub fn random_flip<R: Rng>(img: &GrayImage, cfg: &AugmentConfig, rng: &mut R) -> GrayImage {
    if rng.gen::<f32>() < cfg.flip_prob {
        let axis = if rng.gen::<bool>() {
            FlipAxis::Horizontal
        } else {
            FlipAxis::Vertical
        };
        flip(img, axis)
    } else {
        img.clone()
    }
}

/// Square crop window in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

pub fn sample_crop<R: Rng>(
    width: usize,
    height: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> CropWindow {
    let short = width.min(height);
    let scale = if cfg.crop_scale_min < cfg.crop_scale_max {
        rng.gen_range(cfg.crop_scale_min..=cfg.crop_scale_max)
    } else {
        cfg.crop_scale_min
    };
    let side = ((scale * short as f32).round() as usize).clamp(1, short);
    let x = rng.gen_range(0..=width - side);
    let y = rng.gen_range(0..=height - side);
    CropWindow { x, y, side }
}

pub fn crop(img: &GrayImage, win: CropWindow) -> Result<GrayImage> {
    if win.x + win.side > img.width() || win.y + win.side > img.height() || win.side == 0 {
        return Err(Error::InvalidInput(format!(
            "crop {win:?} outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let mut out = Vec::with_capacity(win.side * win.side);
    for r in win.y..win.y + win.side {
        let row = r * img.width();
        out.extend_from_slice(&img.pixels()[row + win.x..row + win.x + win.side]);
    }
    GrayImage::new(win.side, win.side, out)
}

/// Bilinear resampling of a row-major plane with pixel-center alignment.
pub fn resize_plane(src: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(out_w * out_h);
    let sx = w as f32 / out_w as f32;
    let sy = h as f32 / out_h as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

pub fn resize(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    let px = resize_plane(img.pixels(), img.width(), img.height(), width, height);
    GrayImage::from_clamped(width, height, px)
}

pub fn random_crop_resize<R: Rng>(
    img: &GrayImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<GrayImage> {
    if img.width() < 2 || img.height() < 2 {
        return Err(Error::InvalidInput(format!(
            "image {}x{} too small to crop",
            img.width(),
            img.height()
        )));
    }
    let win = sample_crop(img.width(), img.height(), cfg, rng);
    resize(&crop(img, win)?, cfg.target_size, cfg.target_size)
}

/// Outcome of one jitter draw, exposed for statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterDraw {
    pub brightness: f32,
    pub contrast: Option<f32>,
}

fn uniform<R: Rng>(range: [f32; 2], rng: &mut R) -> f32 {
    if range[0] < range[1] {
        rng.gen_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

pub fn sample_jitter<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> JitterDraw {
    let brightness = uniform(cfg.brightness_range, rng);
    let contrast = (rng.gen::<f32>() < cfg.contrast_prob).then(|| uniform(cfg.contrast_range, rng));
    JitterDraw {
        brightness,
        contrast,
    }
}

pub fn apply_jitter(img: &GrayImage, draw: JitterDraw) -> GrayImage {
    let mut px: Vec<f32> = img
        .pixels()
        .iter()
        .map(|&p| (p * draw.brightness).clamp(0.0, 1.0))
        .collect();
    if let Some(c) = draw.contrast {
        let mean = px.iter().map(|&p| p as f64).sum::<f64>() as f32 / px.len() as f32;
        for p in &mut px {
            *p = (mean + c * (*p - mean)).clamp(0.0, 1.0);
        }
    }
    GrayImage::new(img.width(), img.height(), px).expect("clamped pixels")
}

/// Brightness always, then contrast with probability `contrast_prob`.
pub fn color_jitter<R: Rng>(img: &GrayImage, cfg: &AugmentConfig, rng: &mut R) -> GrayImage {
    apply_jitter(img, sample_jitter(cfg, rng))
}

/// `(x - mean) / std` as a `[1, H, W]` tensor.
pub fn normalize(img: &GrayImage, mean: f32, std: f32) -> Result<Tensor> {
    if !(std > 0.0) {
        return Err(Error::InvalidInput(format!(
            "normalization std {std} must be > 0"
        )));
    }
    let data = img.pixels().iter().map(|&p| (p - mean) / std).collect();
    Tensor::new(&[1, img.height(), img.width()], data)
}

/// Inverse of [`normalize`].
pub fn denormalize(t: &Tensor, mean: f32, std: f32) -> Result<GrayImage> {
    let (h, w) = match t.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("expected [1,H,W], got {s:?}"))),
    };
    GrayImage::from_clamped(w, h, t.data().iter().map(|&x| x * std + mean).collect())
}

/// One full draw of the pipeline: flip, crop/resize, jitter. Output is in
/// pixel space, `target_size` square.
pub fn augment_view<R: Rng>(
    img: &GrayImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<GrayImage> {
    let flipped = random_flip(img, cfg, rng);
    let cropped = random_crop_resize(&flipped, cfg, rng)?;
    Ok(color_jitter(&cropped, cfg, rng))
}

/// Deterministic preprocessing for classification: center square crop,
/// resize to `target_size`, normalize.
pub fn prepare_eval(img: &GrayImage, cfg: &AugmentConfig) -> Result<Tensor> {
    let side = img.width().min(img.height());
    let win = CropWindow {
        x: (img.width() - side) / 2,
        y: (img.height() - side) / 2,
        side,
    };
    let resized = resize(&crop(img, win)?, cfg.target_size, cfg.target_size)?;
    normalize(&resized, cfg.norm_mean, cfg.norm_std)
}

/// Stack `[1,S,S]` tensors into `[B,1,S,S]`.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?} in batch",
                t.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

/// Two augmented views per source, rows `2k` and `2k+1` from source `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPairBatch {
    pub views: Tensor,
    pub provenance: Vec<usize>,
}

impl ViewPairBatch {
    pub fn pairs(&self) -> usize {
        self.provenance.len() / 2
    }
}

/// Build a positive-pair batch. View `v` of source `k` draws from the
/// substream `(seed, k, v)`, so the result is independent of evaluation order.
pub fn make_view_pair_batch(
    images: &[&GrayImage],
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<ViewPairBatch> {
    if images.is_empty() {
        return Err(Error::InvalidInput(
            "view batch needs at least one image".into(),
        ));
    }
    let mut views = Vec::with_capacity(images.len() * 2);
    let mut provenance = Vec::with_capacity(images.len() * 2);
    for (k, img) in images.iter().enumerate() {
        for v in 0..2u64 {
            let mut rng = substream(seed, &[purpose::AUGMENT, k as u64, v]);
            let view = augment_view(img, cfg, &mut rng)?;
            views.push(normalize(&view, cfg.norm_mean, cfg.norm_std)?);
            provenance.push(k);
        }
    }
    Ok(ViewPairBatch {
        views: stack(&views)?,
        provenance,
    })
}
