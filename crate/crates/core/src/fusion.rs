//! False-color rendering of temperature maps and six-channel fusion.

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::tensor::{Result, Tensor, TensorError};

/// Default false-color span in degrees Celsius.
pub const DEFAULT_RANGE_C: (f32, f32) = (20.0, 90.0);

/// Fixed temperature window for false-color mapping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TempRange {
    pub min: f32,
    pub max: f32,
}

impl TempRange {
    pub fn new(min: f32, max: f32) -> Result<Self> {
        if !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(TensorError::Argument {
                op: "ir_to_falsecolor",
                detail: format!("temperature range needs t_min < t_max, got [{min}, {max}]"),
            });
        }
        Ok(Self { min, max })
    }
}

impl Default for TempRange {
    fn default() -> Self {
        Self { min: DEFAULT_RANGE_C.0, max: DEFAULT_RANGE_C.1 }
    }
}

/// Ramp color at position `t` in `[0, 1]`: blue (cold) to red (hot).
pub fn ramp(t: f32) -> [f32; 3] {
    [t, 0.0, 1.0 - t]
}

/// Inverse of [`ramp`].
pub fn ramp_position(rgb: [f32; 3]) -> f32 {
    rgb[0]
}

/// Maps `[H, W]` temperatures to a `[3, H, W]` false-color image.
pub fn ir_to_falsecolor(temp: &Tensor<f32>, t_min: f32, t_max: f32) -> Result<Tensor<f32>> {
    let range = TempRange::new(t_min, t_max)?;
    let &[h, w] = temp.shape() else {
        return Err(TensorError::Shape { op: "ir_to_falsecolor", detail: format!("expected [H, W], got {:?}", temp.shape()) });
    };
    let plane = h * w;
    let span = range.max - range.min;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, &t) in temp.data().iter().enumerate() {
        let pos = ((t.clamp(range.min, range.max) - range.min) / span).clamp(0.0, 1.0);
        let rgb = ramp(pos);
        for c in 0..3 {
            out[c * plane + i] = rgb[c];
        }
    }
    Tensor::new([3, h, w], out)
}

/// Concatenates optical and false-color infrared channels into `[6, H, W]`.
pub fn fuse(optical: &Tensor<f32>, ir_rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
    match (optical.shape(), ir_rgb.shape()) {
        (&[3, h, w], &[3, h2, w2]) if (h, w) == (h2, w2) => {
            let mut data = Vec::with_capacity(6 * h * w);
            data.extend_from_slice(optical.data());
            data.extend_from_slice(ir_rgb.data());
            Tensor::new([6, h, w], data)
        }
        (a, b) => Err(TensorError::Shape { op: "fuse", detail: format!("optical {a:?} vs infrared {b:?}") }),
    }
}

/// Which modality a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Optical,
    Infrared,
    Fusion,
}

impl InputKind {
    pub const ALL: [InputKind; 3] = [InputKind::Optical, InputKind::Infrared, InputKind::Fusion];

    pub fn channels(self) -> usize {
        match self {
            InputKind::Fusion => 6,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputKind::Optical => "optical",
            InputKind::Infrared => "infrared",
            InputKind::Fusion => "fusion",
        }
    }
}

impl std::fmt::Display for InputKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for InputKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "optical" => Ok(InputKind::Optical),
            "infrared" | "ir" => Ok(InputKind::Infrared),
            "fusion" => Ok(InputKind::Fusion),
            other => Err(format!("unknown input kind `{other}` (optical, infrared, fusion)")),
        }
    }
}

/// The `[C, H, W]` network input for a sample.
pub fn model_input(sample: &Sample, kind: InputKind, range: TempRange) -> Result<Tensor<f32>> {
    match kind {
        InputKind::Optical => Ok(sample.optical.clone()),
        InputKind::Infrared => ir_to_falsecolor(&sample.infrared, range.min, range.max),
        InputKind::Fusion => fuse(&sample.optical, &ir_to_falsecolor(&sample.infrared, range.min, range.max)?),
    }
}
