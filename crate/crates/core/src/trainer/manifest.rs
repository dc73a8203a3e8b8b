use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::imagedata::{load_annotations, load_image};
use crate::kernel::load_kernel;

/// Paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub annotations: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Read every image and annotation file, plus kernels when `with_kernels`.
pub fn load_dataset(manifest_path: impl AsRef<Path>, with_kernels: bool) -> Result<Vec<Sample>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .samples
        .iter()
        .map(|entry| {
            let image = load_image(base.join(&entry.image))?;
            let annotations = load_annotations(base.join(&entry.annotations), image.height(), image.width())?;
            let mut sample = Sample::new(image, annotations);
            if with_kernels {
                if let Some(k) = &entry.kernel {
                    sample.kernel = Some(load_kernel(base.join(k))?);
                }
            }
            Ok(sample)
        })
        .collect()
}
