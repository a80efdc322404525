use rand::Rng;

use super::{
    DatasetError, ImageSize, Label, Provenance, Result, Sample, SceneConfig, AMBIENT_TEMP_C, HOUSING_POSITIONS,
    IR_CLAMP_C, MAX_IDLE_WARMTH_C,
};
use crate::seed;
use crate::tensor::Tensor;

const HOUSING_ROWS: usize = 2;
const HOUSING_COLS: usize = 3;

const FLOOR_RGB: [f32; 3] = [0.58, 0.55, 0.50];
const HOUSING_RGB: [f32; 3] = [0.30, 0.32, 0.35];
const SLOT_RGB: [f32; 3] = [0.40, 0.42, 0.44];
const BATTERY_RGB: [f32; 3] = [0.12, 0.30, 0.70];
const TERMINAL_RGB: [f32; 3] = [0.80, 0.78, 0.70];
const HEATER_RGB: [f32; 3] = [0.45, 0.18, 0.08];
const SMOKE_GRAY: f32 = 0.85;

const IDLE_WARMTH_RANGE_C: (f32, f32) = (1.5, 6.5);
const IR_NOISE_C: f32 = 0.5;
const OPTICAL_NOISE: f32 = 0.015;

/// Axis-aligned pixel rectangle in continuous coordinates, half-open.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub y0: f32,
    pub x0: f32,
    pub y1: f32,
    pub x1: f32,
}

impl Rect {
    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }

    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.y0 + self.y1) * 0.5, (self.x0 + self.x1) * 0.5)
    }

    pub fn inset(&self, dy: f32, dx: f32) -> Rect {
        Rect { y0: self.y0 + dy, x0: self.x0 + dx, y1: self.y1 - dy, x1: self.x1 - dx }
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    /// Signed distance to the nearest edge, positive inside.
    fn depth(&self, y: f32, x: f32) -> f32 {
        (y - self.y0).min(self.y1 - y).min(x - self.x0).min(self.x1 - x)
    }
}

fn housing_rect(size: ImageSize) -> Rect {
    let (h, w) = (size.height as f32, size.width as f32);
    Rect { y0: 0.15 * h, x0: 0.08 * w, y1: 0.90 * h, x1: 0.92 * w }
}

/// Slot `position` of the housing, row-major over two rows of three.
pub fn slot_rect(position: usize, size: ImageSize) -> Rect {
    debug_assert!(position < HOUSING_POSITIONS);
    let housing = housing_rect(size);
    let (row, col) = (position / HOUSING_COLS, position % HOUSING_COLS);
    let cell_h = housing.height() / HOUSING_ROWS as f32;
    let cell_w = housing.width() / HOUSING_COLS as f32;
    Rect {
        y0: housing.y0 + row as f32 * cell_h,
        x0: housing.x0 + col as f32 * cell_w,
        y1: housing.y0 + (row + 1) as f32 * cell_h,
        x1: housing.x0 + (col + 1) as f32 * cell_w,
    }
}

fn battery_rect(position: usize, size: ImageSize) -> Rect {
    let slot = slot_rect(position, size);
    slot.inset(slot.height() * 0.12, slot.width() * 0.25)
}

fn blend(px: &mut [f32; 3], color: [f32; 3], alpha: f32) {
    for c in 0..3 {
        px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
    }
}

/// Pixel of the heater center; snapped to the grid so that pixel carries the peak exactly.
fn heater_pixel(config: &SceneConfig, size: ImageSize) -> Result<Option<(usize, usize)>> {
    let Some(heat) = &config.heat_source else { return Ok(None) };
    let (cy, cx) = slot_rect(heat.center, size).center();
    let (y, x) = ((cy + heat.offset[0] - 0.5).round(), (cx + heat.offset[1] - 0.5).round());
    if !(y >= 0.0 && x >= 0.0 && y < size.height as f32 && x < size.width as f32) {
        return Err(DatasetError::Argument(format!("heat source center ({y}, {x}) lies outside the {size:?} image")));
    }
    Ok(Some((y as usize, x as usize)))
}

/// Pixel box around the heat blob, `(y0, x0, y1, x1)` inclusive-exclusive,
/// grown by `dilation` radii and clipped to the image.
pub fn heat_blob_box(config: &SceneConfig, size: ImageSize, dilation: f32) -> Result<Option<(usize, usize, usize, usize)>> {
    let (Some((py, px)), Some(heat)) = (heater_pixel(config, size)?, &config.heat_source) else {
        return Ok(None);
    };
    let r = heat.radius_px * dilation;
    let lo = |c: usize| (c as f32 - r).floor().max(0.0) as usize;
    let hi = |c: usize, n: usize| ((c as f32 + r).ceil() as usize + 1).min(n);
    Ok(Some((lo(py), lo(px), hi(py, size.height), hi(px, size.width))))
}

/// Renders the optical and infrared views of a scene.
pub fn render_scene(config: &SceneConfig, size: ImageSize) -> Result<Sample> {
    config.validate()?;
    if size.height == 0 || size.width == 0 {
        return Err(DatasetError::Argument("image size must be non-zero".into()));
    }
    let heater = heater_pixel(config, size)?;
    let (h, w) = (size.height, size.width);

    let mut look = seed::stream(seed::derive_named(config.seed, "optical"));
    let lighting: f32 = look.random_range(0.92..=1.05);
    let tint: [f32; 3] = std::array::from_fn(|_| look.random_range(-0.03..=0.03));
    let mut thermal = seed::stream(seed::derive_named(config.seed, "thermal"));
    let warmth: Vec<f32> = config
        .occupied_positions
        .iter()
        .map(|_| thermal.random_range(IDLE_WARMTH_RANGE_C.0..=IDLE_WARMTH_RANGE_C.1))
        .collect();
    debug_assert!(IDLE_WARMTH_RANGE_C.1 + IR_NOISE_C <= MAX_IDLE_WARMTH_C);

    let housing = housing_rect(size);
    let slots: Vec<Rect> = (0..HOUSING_POSITIONS).map(|p| slot_rect(p, size).inset(1.0, 1.0)).collect();
    let batteries: Vec<Rect> = config.occupied_positions.iter().map(|&p| battery_rect(p, size)).collect();
    let terminals: Vec<Rect> = batteries
        .iter()
        .map(|b| {
            let cap_w = b.width() * 0.3;
            let (_, cx) = b.center();
            Rect { y0: b.y0, x0: cx - cap_w * 0.5, y1: b.y0 + b.height() * 0.1, x1: cx + cap_w * 0.5 }
        })
        .collect();

    let mut optical = vec![0.0f32; 3 * h * w];
    let mut infrared = vec![0.0f32; h * w];
    let feather = 2.0f32;
    let jitter = config.ir_jitter.unwrap_or([0.0, 0.0]);

    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let mut px = FLOOR_RGB;
            if housing.contains(fy, fx) {
                px = HOUSING_RGB;
                if slots.iter().any(|s| s.contains(fy, fx)) {
                    px = SLOT_RGB;
                }
            }
            for (b, t) in batteries.iter().zip(&terminals) {
                if b.contains(fy, fx) {
                    px = BATTERY_RGB;
                }
                if t.contains(fy, fx) {
                    px = TERMINAL_RGB;
                }
            }
            for c in 0..3 {
                px[c] = px[c] * lighting + tint[c];
            }
            let i = y * w + x;
            for c in 0..3 {
                optical[c * h * w + i] = px[c];
            }

            // Infrared is sampled at the jittered position.
            let (iy, ix) = (fy + jitter[0], fx + jitter[1]);
            let mut temp = AMBIENT_TEMP_C;
            for (b, &dw) in batteries.iter().zip(&warmth) {
                let profile = (b.depth(iy, ix) / feather).clamp(0.0, 1.0);
                temp = temp.max(AMBIENT_TEMP_C + dw * profile);
            }
            infrared[i] = temp + thermal.random_range(-IR_NOISE_C..=IR_NOISE_C);
        }
    }

    if let (Some(heat), Some(smoke), Some((py, px))) = (&config.heat_source, &config.smoke, heater) {
        let r = heat.radius_px;
        let (cy, cx) = (py as f32 + 0.5, px as f32 + 0.5);
        let disc = (r * 0.5).max(1.0);
        let (sy, sx) = slot_rect(smoke.origin, size).center();
        let extent = smoke.plume_extent;
        // The plume rises from its origin: centered above it and taller than wide.
        let (plume_y, plume_x) = (sy - extent * 0.6, sx);
        let (sigma_y, sigma_x) = (extent, extent * 0.6);
        let alpha_peak = 0.2 + 0.6 * smoke.intensity;
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
                let i = y * w + x;
                let mut rgb = [optical[i], optical[h * w + i], optical[2 * h * w + i]];
                let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
                if d2 <= disc * disc {
                    blend(&mut rgb, HEATER_RGB, 1.0);
                }
                let g = (-0.5 * ((fy - plume_y) / sigma_y).powi(2) - 0.5 * ((fx - plume_x) / sigma_x).powi(2)).exp();
                blend(&mut rgb, [SMOKE_GRAY; 3], alpha_peak * g);
                for c in 0..3 {
                    optical[c * h * w + i] = rgb[c];
                }

                let (iy, ix) = (y as f32, x as f32);
                let d = ((iy - py as f32).powi(2) + (ix - px as f32).powi(2)).sqrt();
                let blob = AMBIENT_TEMP_C + (heat.peak_temp - AMBIENT_TEMP_C) * (-2.0 * (d / r).powi(2)).exp();
                if blob > infrared[i] || (y, x) == (py, px) {
                    infrared[i] = blob;
                }
            }
        }
    }

    for v in &mut optical {
        let noisy = *v + look.random_range(-OPTICAL_NOISE..=OPTICAL_NOISE);
        // Quantized to 8-bit levels so PNG storage is lossless.
        *v = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    for t in &mut infrared {
        *t = t.clamp(IR_CLAMP_C.0, IR_CLAMP_C.1);
    }

    let label = if config.runaway { Label::Runaway } else { Label::Baseline };
    Ok(Sample {
        optical: Tensor::new([3, h, w], optical).expect("optical buffer sized from image"),
        infrared: Tensor::new([h, w], infrared).expect("infrared buffer sized from image"),
        label,
        provenance: Provenance::Synthetic { scene: config.clone() },
    })
}
