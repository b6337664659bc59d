use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

use super::{read_tensor, write_tensor, AnyTensor, Dataset, Sample};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub label: String,
}

/// `{"num_classes": K, "samples": [{"image": p, "label": p}, …]}`; paths
/// relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub samples: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

fn load_image(path: &Path) -> Result<Tensor<f32>> {
    match read_tensor(path)? {
        AnyTensor::F32(t) if t.rank() == 2 => {
            let shape = [&[1], t.shape()].concat();
            t.into_reshape(shape)
        }
        AnyTensor::F32(t) if t.rank() == 3 => Ok(t),
        AnyTensor::F32(t) => Err(Error::shape("image", format!("expected H×W or C×H×W, got {:?}", t.shape()))),
        other => Err(Error::DtypeMismatch { expected: "f32", found: other.dtype().name() }),
    }
}

fn load_label(path: &Path) -> Result<LabelMask> {
    match read_tensor(path)? {
        AnyTensor::U8(t) if t.rank() == 2 => LabelMask::from_u8(&t),
        AnyTensor::U8(t) => Err(Error::shape("label", format!("expected H×W, got {:?}", t.shape()))),
        other => Err(Error::DtypeMismatch { expected: "u8", found: other.dtype().name() }),
    }
}

/// Reads a manifest and every tensor it names, validating each sample.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Manifest, Dataset)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.num_classes < 2 {
        return Err(Error::InvalidArgument(format!("num_classes must be ≥ 2, got {}", manifest.num_classes)));
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (index, entry) in manifest.samples.iter().enumerate() {
        let wrap = |e: Error| Error::Validation { index, detail: e.to_string() };
        let image = load_image(&dir.join(&entry.image)).map_err(wrap)?;
        let label = load_label(&dir.join(&entry.label)).map_err(wrap)?;
        samples.push(Sample { image, label });
    }
    let dataset = Dataset::new(manifest.num_classes, samples)?;
    Ok((manifest, dataset))
}

/// Writes `image_NNNN.vkt` (f32 C×H×W), `label_NNNN.vkt` (u8 H×W) and
/// `manifest.json` into `dir`; returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset, split: Option<&str>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let entry = ManifestEntry {
            image: format!("image_{i:04}.vkt"),
            label: format!("label_{i:04}.vkt"),
        };
        write_tensor(dir.join(&entry.image), &s.image)?;
        write_tensor(dir.join(&entry.label), &s.label.to_u8()?)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        num_classes: dataset.num_classes,
        samples: entries,
        split: split.map(str::to_string),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
