//! Grad-CAM heatmaps over the last residual stage, plus PGM/PNG/JSON output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{prepare_eval, resize_plane, AugmentConfig};
use crate::data::io::{write_pgm, write_png_rgb};
use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Model, NUM_CLASSES};
use crate::tensor::{dims4, Scalar, Tape, Tensor, Var};

/// A network exposing class logits `[1, C]` and the activation map
/// `[1, K, H, W]` they are computed from. The map must be passed to
/// [`Tape::watch`] before the logits are built from it.
pub trait ActivationCapture<T: Scalar> {
    fn capture(&self, tape: &mut Tape<T>, input: Var) -> Result<(Var, Var)>;
}

impl<T: Scalar> ActivationCapture<T> for Model<T> {
    fn capture(&self, tape: &mut Tape<T>, input: Var) -> Result<(Var, Var)> {
        let mut ctx = ForwardCtx::eval();
        self.forward_with_capture(tape, &mut ctx, input)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetClass {
    Predicted,
    Class(usize),
}

impl std::str::FromStr for TargetClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "predicted" {
            return Ok(TargetClass::Predicted);
        }
        s.parse()
            .map(TargetClass::Class)
            .map_err(|_| Error::Config(format!("class {s:?} (expected \"predicted\" or an index)")))
    }
}

/// Class-activation map at feature resolution before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCam {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub target_class: usize,
    pub logits: Vec<f64>,
}

/// `ReLU(sum_k alpha_k A_k)` with `alpha_k` the spatial mean of `dy/dA_k`.
pub fn weighted_activation_map<T: Scalar>(
    activations: &Tensor<T>,
    grads: &Tensor<T>,
) -> Result<Vec<f64>> {
    let (b, k, h, w) = dims4(activations)?;
    if b != 1 || grads.shape() != activations.shape() {
        return Err(Error::Shape(format!(
            "activation map {:?} with gradient {:?}; one image expected",
            activations.shape(),
            grads.shape()
        )));
    }
    let plane = h * w;
    let mut map = vec![0.0f64; plane];
    for c in 0..k {
        let g = &grads.data()[c * plane..(c + 1) * plane];
        let alpha = g.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        let a = &activations.data()[c * plane..(c + 1) * plane];
        for (m, v) in map.iter_mut().zip(a) {
            *m += alpha * v.to_f64_lossy();
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    Ok(map)
}

/// Grad-CAM for a single `[1,1,S,S]` input.
pub fn gradcam_raw<T: Scalar, M: ActivationCapture<T>>(
    model: &M,
    input: &Tensor<T>,
    target: TargetClass,
) -> Result<RawCam> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let (logits, acts) = model.capture(&mut tape, x)?;
    if !tape.requires_grad(acts) || !tape.requires_grad(logits) {
        return Err(Error::InvalidInput(
            "activation map was not watched before computing the logits".into(),
        ));
    }
    let logit_values: Vec<f64> = tape
        .value(logits)
        .data()
        .iter()
        .map(|v| v.to_f64_lossy())
        .collect();
    let classes = logit_values.len();
    if tape.value(logits).shape() != [1, classes] {
        return Err(Error::Shape(format!(
            "logits {:?} for one image",
            tape.value(logits).shape()
        )));
    }
    let class = match target {
        TargetClass::Class(c) if c < classes => c,
        TargetClass::Class(c) => {
            return Err(Error::InvalidInput(format!(
                "target class {c} out of range for {classes} classes"
            )))
        }
        TargetClass::Predicted => argmax(&logit_values),
    };
    let mut onehot = vec![T::zero(); classes];
    onehot[class] = T::one();
    let mask = tape.constant(Tensor::new(&[1, classes], onehot)?);
    let picked = tape.mul(logits, mask)?;
    let score = tape.sum(picked);
    let grads = tape.backward(score)?;
    let a = tape.value(acts);
    let (_, _, height, width) = dims4(a)?;
    let zeros;
    let g = match grads.get(acts) {
        Some(g) => g,
        None => {
            zeros = a.zeros_like();
            &zeros
        }
    };
    let values = weighted_activation_map(a, g)?;
    Ok(RawCam {
        width,
        height,
        values,
        target_class: class,
        logits: logit_values,
    })
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Min-max scaling to `[0, 1]`. An all-zero map stays all zero; a constant
/// positive map becomes all ones.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) {
        return vec![0.0; values.len()];
    }
    let span = max - min;
    if span <= f64::EPSILON * max {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - min) / span).collect()
}

/// Nearest-neighbour resize with half-pixel centers.
pub fn resize_nearest(src: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        for x in 0..out_w {
            let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Values in `[0,1]` at source-image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub target_class: usize,
    pub source: Option<PathBuf>,
}

impl Heatmap {
    /// Normalize a raw map and place it over the centered square region the
    /// classifier saw; pixels outside that square are 0.
    pub fn from_raw(
        raw: &RawCam,
        image_width: usize,
        image_height: usize,
        upsample: Upsample,
    ) -> Self {
        let norm: Vec<f32> = min_max_normalize(&raw.values)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let side = image_width.min(image_height);
        let square = match upsample {
            Upsample::Bilinear => resize_plane(&norm, raw.width, raw.height, side, side),
            Upsample::Nearest => resize_nearest(&norm, raw.width, raw.height, side, side),
        };
        let (x0, y0) = ((image_width - side) / 2, (image_height - side) / 2);
        let mut values = vec![0.0f32; image_width * image_height];
        for y in 0..side {
            for x in 0..side {
                values[(y0 + y) * image_width + x0 + x] = square[y * side + x].clamp(0.0, 1.0);
            }
        }
        Self {
            width: image_width,
            height: image_height,
            values,
            target_class: raw.target_class,
            source: None,
        }
    }

    pub fn as_image(&self) -> Result<GrayImage> {
        GrayImage::new(self.width, self.height, self.values.clone())
    }

    /// Share of total mass inside the rectangle `[x0, x1) x [y0, y1)`.
    pub fn mass_fraction(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let total: f64 = self.values.iter().map(|&v| v as f64).sum();
        if total == 0.0 {
            return 0.0;
        }
        let inside: f64 = (y0..y1)
            .flat_map(|y| (x0..x1).map(move |x| (x, y)))
            .map(|(x, y)| self.values[y * self.width + x] as f64)
            .sum();
        inside / total
    }
}

/// Heatmap for one image: eval preprocessing, Grad-CAM, upsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub heatmap: Heatmap,
    pub logits: Vec<f64>,
    pub predicted_class: usize,
}

pub fn gradcam(
    model: &Model,
    image: &GrayImage,
    augment: &AugmentConfig,
    target: TargetClass,
    upsample: Upsample,
) -> Result<Explanation> {
    if let TargetClass::Class(c) = target {
        if c >= NUM_CLASSES {
            return Err(Error::InvalidInput(format!(
                "target class {c} out of range for {NUM_CLASSES} classes"
            )));
        }
    }
    let x = prepare_eval(image, augment)?;
    let input = x.reshape(&[1, 1, augment.target_size, augment.target_size])?;
    let raw = gradcam_raw(model, &input, target)?;
    let heatmap = Heatmap::from_raw(&raw, image.width(), image.height(), upsample);
    let predicted_class = argmax(&raw.logits);
    Ok(Explanation {
        heatmap,
        logits: raw.logits,
        predicted_class,
    })
}

/// Piecewise-linear blue -> cyan -> yellow -> red ramp.
pub fn color_ramp(v: f32) -> [u8; 3] {
    const STOPS: [(f32, [f32; 3]); 4] = [
        (0.0, [0.0, 0.0, 128.0]),
        (1.0 / 3.0, [0.0, 255.0, 255.0]),
        (2.0 / 3.0, [255.0, 255.0, 0.0]),
        (1.0, [255.0, 0.0, 0.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    let i = STOPS
        .iter()
        .rposition(|&(t, _)| t <= v)
        .unwrap_or(0)
        .min(STOPS.len() - 2);
    let ((t0, c0), (t1, c1)) = (STOPS[i], STOPS[i + 1]);
    let f = (v - t0) / (t1 - t0);
    std::array::from_fn(|k| (c0[k] + f * (c1[k] - c0[k])).round() as u8)
}

/// Base image at half intensity plus the color ramp at half intensity.
pub fn overlay_rgb(hm: &Heatmap, base: &GrayImage) -> Result<Vec<u8>> {
    if (hm.width, hm.height) != (base.width(), base.height()) {
        return Err(Error::Shape(format!(
            "heatmap {}x{} over image {}x{}",
            hm.width,
            hm.height,
            base.width(),
            base.height()
        )));
    }
    let mut rgb = Vec::with_capacity(hm.values.len() * 3);
    for (&v, &p) in hm.values.iter().zip(base.pixels()) {
        let ramp = color_ramp(v);
        for c in ramp {
            rgb.push((0.5 * p * 255.0 + 0.5 * c as f32).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(rgb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub source: Option<String>,
    pub target_class: usize,
    pub predicted_class: usize,
    pub logits: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub upsample: Upsample,
}

/// Output paths for one explained image.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPaths {
    pub overlay_png: PathBuf,
    pub raw_pgm: PathBuf,
    pub sidecar_json: PathBuf,
}

impl RenderedPaths {
    pub fn new(out_dir: &Path, stem: &str) -> Self {
        Self {
            overlay_png: out_dir.join(format!("{stem}.gradcam.png")),
            raw_pgm: out_dir.join(format!("{stem}.gradcam.pgm")),
            sidecar_json: out_dir.join(format!("{stem}.gradcam.json")),
        }
    }
}

pub fn render_heatmap(
    explanation: &Explanation,
    base: &GrayImage,
    upsample: Upsample,
    paths: &RenderedPaths,
) -> Result<()> {
    let hm = &explanation.heatmap;
    let rgb = overlay_rgb(hm, base)?;
    write_png_rgb(&paths.overlay_png, hm.width, hm.height, &rgb)?;
    write_pgm(&paths.raw_pgm, &hm.as_image()?)?;
    let sidecar = Sidecar {
        source: hm.source.as_ref().map(|p| p.display().to_string()),
        target_class: hm.target_class,
        predicted_class: explanation.predicted_class,
        logits: explanation.logits.clone(),
        width: hm.width,
        height: hm.height,
        upsample,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&paths.sidecar_json, json).map_err(|e| Error::file(&paths.sidecar_json, e))
}
