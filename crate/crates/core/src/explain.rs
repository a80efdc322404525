//! Saliency maps: Grad-CAM for the convolutional families, class-token
//! attention for the ViT, plus overlay and panel image export.

use std::path::Path;

use image::Rgb;
pub use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::models::{Architecture, Family, Model, ModelError};
use crate::tensor::{Tape, Tensor, TensorError};

/// Weight of the heatmap colors in an overlay.
pub const OVERLAY_ALPHA: f32 = 0.45;

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot write image {path}: {source}")]
    Image { path: String, source: image::ImageError },
}

pub type Result<T, E = ExplainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeatmapSource {
    GradCam { layer: String },
    /// Class-token attention of one encoder layer, averaged over heads.
    Attention { layer: usize },
}

/// Saliency over the input pixels, max-normalized into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H, W]`.
    pub values: Tensor<f32>,
    pub source: HeatmapSource,
    pub target: Label,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Share of the total heat inside `(y0, x0, y1, x1)`; `None` for an all-zero map.
    pub fn mass_fraction(&self, (y0, x0, y1, x1): (usize, usize, usize, usize)) -> Option<f64> {
        let total: f64 = self.values.data().iter().map(|&v| v as f64).sum();
        if total <= 0.0 {
            return None;
        }
        let w = self.width();
        let inside: f64 = (y0..y1).flat_map(|y| (x0..x1).map(move |x| y * w + x)).map(|i| self.values.data()[i] as f64).sum();
        Some(inside / total)
    }
}

/// Clamps negatives to zero and divides by the maximum; an all-zero map stays zero.
pub fn normalize_max(values: &[f32]) -> Vec<f32> {
    let max = values.iter().fold(0.0f32, |m, &v| m.max(v));
    if max > 0.0 {
        values.iter().map(|&v| (v.max(0.0) / max).min(1.0)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub fn resize_bilinear(plane: &[f32], (h, w): (usize, usize), (out_h, out_w): (usize, usize)) -> Vec<f32> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), (src - lo as f64) as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let lerp = |a: f32, b: f32, f: f32| a + (b - a) * f;
            let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
            let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    out
}

/// `relu(sum_k alpha_k A_k)` from activations and gradients of one sample, each `[K, h, w]`.
pub fn grad_cam_map(activations: &[f32], gradients: &[f32], channels: usize) -> Vec<f32> {
    let area = activations.len() / channels;
    let mut map = vec![0.0f32; area];
    for k in 0..channels {
        let g = &gradients[k * area..(k + 1) * area];
        let alpha = g.iter().sum::<f32>() / area as f32;
        for (m, a) in map.iter_mut().zip(&activations[k * area..(k + 1) * area]) {
            *m += alpha * a;
        }
    }
    map.iter().map(|v| v.max(0.0)).collect()
}

fn grad_cam_layer(family: Family) -> Result<&'static str> {
    match family {
        Family::ShallowCnn => Ok("conv2"),
        Family::MiniResNet => Ok("final_block"),
        Family::MiniVit => Err(ModelError::UnsupportedFamily {
            family,
            detail: "Grad-CAM needs convolutional features, use attention_heatmap",
        }
        .into()),
    }
}

/// Grad-CAM of one `[C, H, W]` input for `target`.
pub fn grad_cam(model: &Model<f32>, input: &Tensor<f32>, target: Label) -> Result<Heatmap> {
    let batch = Tensor::stack(std::slice::from_ref(input))?;
    Ok(grad_cam_batch(model, &batch, &[target])?.remove(0))
}

/// Grad-CAM for every sample of a `[N, C, H, W]` batch; samples do not interact.
pub fn grad_cam_batch(model: &Model<f32>, batch: &Tensor<f32>, targets: &[Label]) -> Result<Vec<Heatmap>> {
    let layer = grad_cam_layer(model.family())?;
    let n = batch.shape().first().copied().unwrap_or(0);
    if targets.len() != n {
        return Err(ExplainError::Argument(format!("{} targets for {n} samples", targets.len())));
    }
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false)?;
    let x = tape.leaf(batch.clone(), true)?;
    let graph = model.graph(&mut tape, x, &params)?;
    let features = graph.final_conv.expect("convolutional families expose their final conv");
    let mask = Tensor::from_fn([n, 2], |i| if i % 2 == targets[i / 2].index() { 1.0 } else { 0.0 });
    let mask = tape.constant(mask)?;
    let picked = tape.mul(graph.logits, mask)?;
    let objective = tape.sum(picked)?;
    tape.backward(objective)?;

    let acts = tape.value(features).clone();
    let grads = tape.grad(features).cloned().unwrap_or_else(|| Tensor::zeros(acts.shape().to_vec()));
    let &[_, k, fh, fw] = acts.shape() else { unreachable!("features are [N, K, h, w]") };
    let (h, w) = (batch.shape()[2], batch.shape()[3]);
    let per_sample = k * fh * fw;
    Ok((0..n)
        .map(|i| {
            let range = i * per_sample..(i + 1) * per_sample;
            let raw = grad_cam_map(&acts.data()[range.clone()], &grads.data()[range], k);
            let up = resize_bilinear(&raw, (fh, fw), (h, w));
            Heatmap {
                values: Tensor::new([h, w], normalize_max(&up)).expect("sizes agree"),
                source: HeatmapSource::GradCam { layer: layer.into() },
                target: targets[i],
            }
        })
        .collect())
}

/// Head-averaged class-token attention over the patches, one value per patch
/// in row-major grid order. `attention` is `[heads, T, T]` with the class token first.
pub fn class_token_saliency(attention: &Tensor<f32>) -> Result<Vec<f32>> {
    let &[heads, t, t2] = attention.shape() else {
        return Err(ExplainError::Shape(format!("attention must be [heads, T, T], got {:?}", attention.shape())));
    };
    if t != t2 || t < 2 || heads == 0 {
        return Err(ExplainError::Shape(format!("attention must be [heads, T, T], got {:?}", attention.shape())));
    }
    let mut out = vec![0.0f32; t - 1];
    for head in 0..heads {
        let row = &attention.data()[head * t * t..head * t * t + t];
        for (o, &v) in out.iter_mut().zip(&row[1..]) {
            *o += v / heads as f32;
        }
    }
    Ok(out)
}

/// Patch saliency of shape `grid` upsampled to `size` and normalized.
pub fn patch_heatmap(patch_values: &[f32], grid: (usize, usize), size: (usize, usize)) -> Result<Tensor<f32>> {
    if patch_values.len() != grid.0 * grid.1 {
        return Err(ExplainError::Shape(format!("{} patch values for a {}x{} grid", patch_values.len(), grid.0, grid.1)));
    }
    let up = resize_bilinear(patch_values, grid, size);
    Ok(Tensor::new([size.0, size.1], normalize_max(&up))?)
}

/// Class-token attention map of one `[3, H, W]` input; `layer` defaults to the last encoder layer.
pub fn attention_heatmap(model: &Model<f32>, input: &Tensor<f32>, layer: Option<usize>, target: Label) -> Result<Heatmap> {
    if model.family() != Family::MiniVit {
        return Err(ModelError::UnsupportedFamily {
            family: model.family(),
            detail: "attention maps need a ViT, use grad_cam",
        }
        .into());
    }
    let batch = Tensor::stack(std::slice::from_ref(input))?;
    let trace = model.forward(&batch)?;
    let depth = trace.attention_maps.len();
    let layer = layer.unwrap_or(depth - 1);
    if layer >= depth {
        return Err(ExplainError::Argument(format!("layer {layer} out of range for {depth} encoder layers")));
    }
    let maps = trace.attention_maps[layer].slice_outer(0);
    let saliency = class_token_saliency(&maps)?;
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let Architecture::MiniVit(params) = &model.spec().architecture else { unreachable!("family checked above") };
    let patch = params.patch;
    let values = patch_heatmap(&saliency, (h / patch, w / patch), (h, w))?;
    Ok(Heatmap { values, source: HeatmapSource::Attention { layer }, target })
}

/// Jet-style colormap: dark blue at 0 through cyan, yellow, to dark red at 1.
pub fn colormap(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let band = |c: f32| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [band(3.0), band(2.0), band(1.0)]
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` values in `[0, 1]` as an 8-bit image.
pub fn to_rgb_image(image: &Tensor<f32>) -> Result<RgbImage> {
    let &[3, h, w] = image.shape() else {
        return Err(ExplainError::Shape(format!("expected [3, H, W], got {:?}", image.shape())));
    };
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
    }))
}

/// Colormapped heatmap alone.
pub fn heatmap_image(heatmap: &Heatmap) -> RgbImage {
    let w = heatmap.width();
    RgbImage::from_fn(w as u32, heatmap.height() as u32, |x, y| {
        let c = colormap(heatmap.values.data()[y as usize * w + x as usize]);
        Rgb(c.map(quantize))
    })
}

/// Blends the colormapped heatmap over a `[3, H, W]` base image.
pub fn overlay(heatmap: &Heatmap, base: &Tensor<f32>) -> Result<RgbImage> {
    if base.shape() != [3, heatmap.height(), heatmap.width()] {
        return Err(ExplainError::Shape(format!(
            "base {:?} does not match a {}x{} heatmap",
            base.shape(),
            heatmap.height(),
            heatmap.width()
        )));
    }
    let (h, w) = (heatmap.height(), heatmap.width());
    let d = base.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let c = colormap(heatmap.values.data()[i]);
        Rgb(std::array::from_fn(|ch| {
            quantize((1.0 - OVERLAY_ALPHA) * d[ch * h * w + i].clamp(0.0, 1.0) + OVERLAY_ALPHA * c[ch])
        }))
    }))
}

/// Lays images out on a grid, row-major, separated by `gap` white pixels.
pub fn contact_sheet(panels: &[RgbImage], columns: usize, gap: u32) -> Result<RgbImage> {
    let Some(first) = panels.first() else {
        return Err(ExplainError::Argument("no panels".into()));
    };
    if columns == 0 {
        return Err(ExplainError::Argument("zero columns".into()));
    }
    let (pw, ph) = first.dimensions();
    if panels.iter().any(|p| p.dimensions() != (pw, ph)) {
        return Err(ExplainError::Shape("panels differ in size".into()));
    }
    let cols = columns.min(panels.len()) as u32;
    let rows = panels.len().div_ceil(columns) as u32;
    let mut sheet = RgbImage::from_pixel(cols * pw + (cols - 1) * gap, rows * ph + (rows - 1) * gap, Rgb([255; 3]));
    for (i, panel) in panels.iter().enumerate() {
        let (r, c) = (i as u32 / cols, i as u32 % cols);
        image::imageops::replace(&mut sheet, panel, (c * (pw + gap)) as i64, (r * (ph + gap)) as i64);
    }
    Ok(sheet)
}

/// Input on the left, its heatmap overlay on the right.
pub fn two_panel(input: &RgbImage, overlay: &RgbImage) -> Result<RgbImage> {
    contact_sheet(&[input.clone(), overlay.clone()], 2, 4)
}

/// Three input/overlay pairs stacked as a 3x2 grid.
pub fn six_panel(pairs: &[(RgbImage, RgbImage); 3]) -> Result<RgbImage> {
    let panels: Vec<RgbImage> = pairs.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
    contact_sheet(&panels, 2, 4)
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    image.save_with_format(path, image::ImageFormat::Png).map_err(|source| ExplainError::Image { path: path.display().to_string(), source })
}
