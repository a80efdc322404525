//! Synthetic battery-station scenes and on-disk datasets.
//!
//! A scene is a battery housing with six slots holding one or two batteries,
//! observed by an optical camera (`[3, H, W]`, values in `[0, 1]`) and an
//! infrared camera (`[H, W]`, degrees Celsius). Runaway scenes add a heater
//! that pushes the infrared peak above [`RUNAWAY_THRESHOLD_C`] and a smoke
//! plume in the optical image.

mod io;
mod render;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::tensor::Tensor;

pub use io::{
    load_manifest, read_infrared, save_dataset, write_infrared, DatasetManifest, FilePair, ManifestEntry, MANIFEST_FILE,
};
pub use render::{heat_blob_box, render_scene, slot_rect, Rect};

pub const GENERATOR_VERSION: &str = "runaway-scenes/1";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Slots in the battery housing, laid out as two rows of three.
pub const HOUSING_POSITIONS: usize = 6;
pub const MAX_BATTERIES: usize = 2;

pub const AMBIENT_TEMP_C: f32 = 22.0;
/// Upper bound on the idle warmth a battery adds above ambient.
pub const MAX_IDLE_WARMTH_C: f32 = 8.0;
pub const RUNAWAY_THRESHOLD_C: f32 = 35.0;
pub const RUNAWAY_PEAK_RANGE_C: (f32, f32) = (40.0, 90.0);
pub const IR_CLAMP_C: (f32, f32) = (15.0, 120.0);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(std::path::PathBuf),
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("unsupported manifest schema version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("size mismatch for {id}: {detail}")]
    SizeMismatch { id: String, detail: String },
    #[error("image error for {}: {source}", path.display())]
    Image { path: std::path::PathBuf, source: image::ImageError },
    #[error("i/o error for {}: {source}", path.display())]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl ImageSize {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn square(side: usize) -> Self {
        Self { height: side, width: side }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl Default for ImageSize {
    fn default() -> Self {
        Self::square(128)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Baseline,
    Runaway,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Baseline => 0,
            Label::Runaway => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Baseline),
            1 => Some(Label::Runaway),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatSource {
    /// Housing slot the heater sits on.
    pub center: usize,
    /// Pixel offset of the heater from the slot center, `[dy, dx]`.
    #[serde(default)]
    pub offset: [f32; 2],
    pub radius_px: f32,
    pub peak_temp: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smoke {
    pub origin: usize,
    /// In `[0, 1]`; maps linearly onto plume opacity `[0.2, 0.8]`.
    pub intensity: f32,
    pub plume_extent: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub occupied_positions: Vec<usize>,
    pub runaway: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heat_source: Option<HeatSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoke: Option<Smoke>,
    /// Sub-pixel offset of the infrared frame, `[dy, dx]`, emulating the
    /// trigger delay between the two cameras. Off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ir_jitter: Option<[f32; 2]>,
    pub seed: u64,
}

impl SceneConfig {
    pub fn baseline(occupied_positions: Vec<usize>, seed: u64) -> Self {
        Self { occupied_positions, runaway: false, heat_source: None, smoke: None, ir_jitter: None, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let occ = &self.occupied_positions;
        if occ.is_empty() || occ.len() > MAX_BATTERIES {
            return Err(DatasetError::Argument(format!("{} batteries; expected 1..={MAX_BATTERIES}", occ.len())));
        }
        if occ.iter().any(|&p| p >= HOUSING_POSITIONS) {
            return Err(DatasetError::Argument(format!("positions {occ:?} outside 0..{HOUSING_POSITIONS}")));
        }
        if occ.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DatasetError::Argument(format!("positions {occ:?} must be strictly increasing")));
        }
        match (self.runaway, &self.heat_source, &self.smoke) {
            (true, Some(heat), Some(smoke)) => {
                if !occ.contains(&heat.center) {
                    return Err(DatasetError::Argument(format!("heat source on empty slot {}", heat.center)));
                }
                if heat.peak_temp <= RUNAWAY_THRESHOLD_C {
                    return Err(DatasetError::Argument(format!(
                        "runaway peak {} C must exceed {RUNAWAY_THRESHOLD_C} C",
                        heat.peak_temp
                    )));
                }
                if !(heat.radius_px > 0.0) {
                    return Err(DatasetError::Argument("heat radius must be positive".into()));
                }
                if smoke.origin >= HOUSING_POSITIONS || !(0.0..=1.0).contains(&smoke.intensity) || !(smoke.plume_extent > 0.0) {
                    return Err(DatasetError::Argument(format!("invalid smoke {smoke:?}")));
                }
                Ok(())
            }
            (true, _, _) => Err(DatasetError::Argument("runaway scene needs both heat and smoke".into())),
            (false, None, None) => Ok(()),
            (false, _, _) => Err(DatasetError::Argument("baseline scene cannot carry heat or smoke".into())),
        }
    }
}

/// Where a sample came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { scene: SceneConfig },
    External {
        optical: std::path::PathBuf,
        infrared: std::path::PathBuf,
        /// Original infrared size when it was nearest-neighbour resampled to the optical size.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ir_resampled_from: Option<ImageSize>,
    },
}

/// Aligned optical / infrared pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub optical: Tensor<f32>,
    /// `[H, W]` in degrees Celsius.
    pub infrared: Tensor<f32>,
    pub label: Label,
    pub provenance: Provenance,
}

impl Sample {
    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.infrared.shape()[0], self.infrared.shape()[1])
    }

    pub fn max_temp(&self) -> f32 {
        self.infrared.max()
    }

    pub fn scene(&self) -> Option<&SceneConfig> {
        match &self.provenance {
            Provenance::Synthetic { scene } => Some(scene),
            Provenance::External { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub split: SplitTag,
    pub sample: Sample,
}

/// In-memory dataset with the global metadata of its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: ImageSize,
    pub generator_version: String,
    pub root_seed: Option<u64>,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.items.iter().map(|i| i.sample.label).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.items.iter().filter(|i| i.sample.label == label).count()
    }

    pub fn find(&self, id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Copy of the metadata with no items.
    pub fn clone_meta(&self) -> Dataset {
        Dataset {
            image_size: self.image_size,
            generator_version: self.generator_version.clone(),
            root_seed: self.root_seed,
            items: Vec::new(),
        }
    }
}

/// All subsets of `0..n_positions` with `1..=max_batteries` elements, in
/// lexicographic order of their sorted element sequences.
pub fn enumerate_configurations(n_positions: usize, max_batteries: usize) -> Result<Vec<Vec<usize>>> {
    if max_batteries == 0 || max_batteries > n_positions {
        return Err(DatasetError::Argument(format!(
            "need 1 <= max_batteries ({max_batteries}) <= n_positions ({n_positions})"
        )));
    }
    fn extend(prefix: &mut Vec<usize>, start: usize, n: usize, max: usize, out: &mut Vec<Vec<usize>>) {
        for p in start..n {
            prefix.push(p);
            out.push(prefix.clone());
            if prefix.len() < max {
                extend(prefix, p + 1, n, max, out);
            }
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), 0, n_positions, max_batteries, &mut out);
    Ok(out)
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Builds the scene for sample `index`: baseline samples first, then runaway.
fn scene_for(index: usize, n_baseline: usize, configs: &[Vec<usize>], size: ImageSize, sample_seed: u64) -> SceneConfig {
    if index < n_baseline {
        return SceneConfig::baseline(configs[index % configs.len()].clone(), sample_seed);
    }
    let j = index - n_baseline;
    let occupied = configs[j % configs.len()].clone();
    let mut rng = seed::stream(seed::derive_named(sample_seed, "runaway"));
    let side = size.height.min(size.width) as f32;
    let center = occupied[rng.random_range(0..occupied.len())];
    let slot = slot_rect(center, size);
    let offset = [
        rng.random_range(-0.25..=0.25) * slot.height() * 0.5,
        rng.random_range(-0.25..=0.25) * slot.width() * 0.5,
    ];
    let heat = HeatSource {
        center,
        offset,
        radius_px: rng.random_range(0.05..=0.12) * side,
        peak_temp: rng.random_range(RUNAWAY_PEAK_RANGE_C.0..=RUNAWAY_PEAK_RANGE_C.1),
    };
    let smoke = Smoke {
        origin: center,
        intensity: rng.random_range(0.0..=1.0),
        plume_extent: rng.random_range(0.08..=0.16) * side,
    };
    SceneConfig {
        occupied_positions: occupied,
        runaway: true,
        heat_source: Some(heat),
        smoke: Some(smoke),
        ir_jitter: None,
        seed: sample_seed,
    }
}

/// Generates `n_baseline` then `n_runaway` synthetic samples.
///
/// Baseline samples cycle through the 21 housing configurations; runaway
/// samples cycle through them too and draw heater size, placement, peak
/// temperature and smoke intensity from the per-sample seed.
pub fn generate_dataset(root_seed: u64, n_baseline: usize, n_runaway: usize, size: ImageSize) -> Result<Dataset> {
    generate_dataset_with(root_seed, n_baseline, n_runaway, size, false)
}

/// As [`generate_dataset`], optionally emulating the optical/infrared trigger
/// delay with a sub-pixel infrared offset.
pub fn generate_dataset_with(
    root_seed: u64,
    n_baseline: usize,
    n_runaway: usize,
    size: ImageSize,
    ir_jitter: bool,
) -> Result<Dataset> {
    if size.height == 0 || size.width == 0 {
        return Err(DatasetError::Argument("image size must be non-zero".into()));
    }
    if n_baseline + n_runaway == 0 {
        return Err(DatasetError::Argument("sample counts must not both be zero".into()));
    }
    let configs = enumerate_configurations(HOUSING_POSITIONS, MAX_BATTERIES)?;
    let mut items = Vec::with_capacity(n_baseline + n_runaway);
    for index in 0..n_baseline + n_runaway {
        let sample_seed = seed::derive(root_seed, index as u64);
        let mut scene = scene_for(index, n_baseline, &configs, size, sample_seed);
        if ir_jitter {
            let mut rng = seed::stream(seed::derive_named(sample_seed, "jitter"));
            scene.ir_jitter = Some([rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5)]);
        }
        let sample = render_scene(&scene, size)?;
        items.push(DatasetItem { id: sample_id(index), split: SplitTag::Unassigned, sample });
    }
    Ok(Dataset { image_size: size, generator_version: GENERATOR_VERSION.into(), root_seed: Some(root_seed), items })
}
