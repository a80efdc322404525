use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    render_scene, Dataset, DatasetError, DatasetItem, ImageSize, Label, Provenance, Result, Sample, SceneConfig,
    SplitTag, MANIFEST_SCHEMA_VERSION,
};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const TIR_MAGIC: &[u8; 4] = b"TIR1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilePair {
    pub optical: PathBuf,
    pub infrared: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    #[serde(default)]
    pub split: SplitTag,
    /// Paths relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<FilePair>,
    /// Scene parameters; rendered on load when `files` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ir_resampled_from: Option<ImageSize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub image_size: ImageSize,
    pub generator_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_seed: Option<u64>,
    /// Temperature span `[lo, hi]` encoded by grayscale infrared PNGs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infrared_range: Option<[f32; 2]>,
    pub entries: Vec<ManifestEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io { path: path.to_path_buf(), source }
        }
    }
}

/// Writes a temperature map as `TIR1`, height and width (u32 LE), then f32 LE values.
pub fn write_infrared(path: &Path, temps: &Tensor<f32>) -> Result<()> {
    let [h, w] = temps.shape() else {
        return Err(DatasetError::Argument(format!("infrared map must be 2-D, got {:?}", temps.shape())));
    };
    let mut buf = Vec::with_capacity(12 + 4 * temps.numel());
    buf.extend_from_slice(TIR_MAGIC);
    buf.extend_from_slice(&(*h as u32).to_le_bytes());
    buf.extend_from_slice(&(*w as u32).to_le_bytes());
    for v in temps.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_infrared(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |detail: &str| DatasetError::Malformed(format!("{}: {detail}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != TIR_MAGIC {
        return Err(bad("not a TIR1 infrared file"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize;
    let (h, w) = (word(4), word(8));
    if bytes.len() != 12 + 4 * h * w {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(Tensor::new([h, w], data).expect("length checked against header"))
}

fn write_optical(path: &Path, optical: &Tensor<f32>) -> Result<()> {
    let &[3, h, w] = optical.shape() else {
        return Err(DatasetError::Argument(format!("optical image must be [3, H, W], got {:?}", optical.shape())));
    };
    let plane = h * w;
    let data = optical.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).expect("buffer sized from shape");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DatasetError::Image { path: path.to_path_buf(), source })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| DatasetError::Image { path: path.to_path_buf(), source })
}

fn read_optical(path: &Path) -> Result<Tensor<f32>> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data).expect("buffer sized from image"))
}

fn read_infrared_any(path: &Path, range: Option<[f32; 2]>) -> Result<Tensor<f32>> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        return read_infrared(path);
    }
    let Some([lo, hi]) = range else {
        return Err(DatasetError::Malformed(format!(
            "{}: grayscale infrared needs `infrared_range` in the manifest",
            path.display()
        )));
    };
    let img = open_image(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| lo + (hi - lo) * p[0] as f32 / u16::MAX as f32).collect();
    Ok(Tensor::new([h, w], data).expect("buffer sized from image"))
}

/// Nearest-neighbour resampling of a `[h, w]` map to `target`.
pub(crate) fn resample_nearest(map: &Tensor<f32>, target: ImageSize) -> Tensor<f32> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    Tensor::from_fn([target.height, target.width], |i| {
        let (y, x) = (i / target.width, i % target.width);
        let sy = y * h / target.height;
        let sx = x * w / target.width;
        map.data()[sy * w + sx]
    })
}

fn load_pair(
    dir: &Path,
    entry: &ManifestEntry,
    files: &FilePair,
    manifest: &DatasetManifest,
) -> Result<Sample> {
    let optical_path = dir.join(&files.optical);
    let infrared_path = dir.join(&files.infrared);
    let optical = read_optical(&optical_path)?;
    let mut infrared = read_infrared_any(&infrared_path, manifest.infrared_range)?;
    let size = ImageSize::new(optical.shape()[1], optical.shape()[2]);
    if size != manifest.image_size {
        return Err(DatasetError::SizeMismatch {
            id: entry.id.clone(),
            detail: format!("optical {size:?} differs from dataset size {:?}", manifest.image_size),
        });
    }
    let ir_size = ImageSize::new(infrared.shape()[0], infrared.shape()[1]);
    let mut resampled_from = entry.ir_resampled_from;
    if ir_size != size {
        // Only a uniform rescale can be undone without guessing a crop.
        if ir_size.height * size.width != ir_size.width * size.height {
            return Err(DatasetError::SizeMismatch {
                id: entry.id.clone(),
                detail: format!("optical {size:?} vs infrared {ir_size:?} differ in aspect ratio"),
            });
        }
        infrared = resample_nearest(&infrared, size);
        resampled_from = Some(ir_size);
    }
    let provenance = match &entry.scene {
        Some(scene) if resampled_from.is_none() => Provenance::Synthetic { scene: scene.clone() },
        _ => Provenance::External { optical: optical_path, infrared: infrared_path, ir_resampled_from: resampled_from },
    };
    Ok(Sample { optical, infrared, label: entry.label, provenance })
}

/// Reads a manifest (or a directory holding `manifest.json`) and every sample it lists.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DatasetError::Malformed(format!("{}: {e}", manifest_path.display())))?;
    match raw.get("schema_version").and_then(|v| v.as_u64()) {
        None => return Err(DatasetError::Malformed("missing integer `schema_version`".into())),
        Some(v) if v != MANIFEST_SCHEMA_VERSION as u64 => {
            return Err(DatasetError::UnsupportedVersion {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                supported: MANIFEST_SCHEMA_VERSION,
            })
        }
        Some(_) => {}
    }
    let manifest: DatasetManifest =
        serde_json::from_value(raw).map_err(|e| DatasetError::Malformed(format!("{}: {e}", manifest_path.display())))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if !seen.insert(entry.id.as_str()) {
            return Err(DatasetError::Malformed(format!("duplicate sample id {}", entry.id)));
        }
        if let Some(scene) = &entry.scene {
            if scene.runaway != (entry.label == Label::Runaway) {
                return Err(DatasetError::Malformed(format!("{}: label disagrees with scene", entry.id)));
            }
        }
        let sample = match (&entry.files, &entry.scene) {
            (Some(files), _) => load_pair(dir, entry, files, &manifest)?,
            (None, Some(scene)) => render_scene(scene, manifest.image_size)?,
            (None, None) => {
                return Err(DatasetError::Malformed(format!("{}: entry has neither files nor scene", entry.id)))
            }
        };
        items.push(DatasetItem { id: entry.id.clone(), split: entry.split, sample });
    }
    Ok(Dataset {
        image_size: manifest.image_size,
        generator_version: manifest.generator_version,
        root_seed: manifest.root_seed,
        items,
    })
}

/// Writes `manifest.json`, `optical/<id>.png` and `infrared/<id>.tir` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    for sub in ["optical", "infrared"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut entries = Vec::with_capacity(dataset.len());
    for item in &dataset.items {
        let files = FilePair {
            optical: PathBuf::from("optical").join(format!("{}.png", item.id)),
            infrared: PathBuf::from("infrared").join(format!("{}.tir", item.id)),
        };
        write_optical(&dir.join(&files.optical), &item.sample.optical)?;
        write_infrared(&dir.join(&files.infrared), &item.sample.infrared)?;
        let (scene, ir_resampled_from) = match &item.sample.provenance {
            Provenance::Synthetic { scene } => (Some(scene.clone()), None),
            Provenance::External { ir_resampled_from, .. } => (None, *ir_resampled_from),
        };
        entries.push(ManifestEntry {
            id: item.id.clone(),
            label: item.sample.label,
            split: item.split,
            files: Some(files),
            scene,
            ir_resampled_from,
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        image_size: dataset.image_size,
        generator_version: dataset.generator_version.clone(),
        root_seed: dataset.root_seed,
        infrared_range: None,
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}
