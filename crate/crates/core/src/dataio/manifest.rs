//! Manifest persistence: one JSON document plus one 16-bit PNG per slice.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BoxAnnotation, Counts, DatasetManifest, ImageRecord, Provenance, Split};
use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const MANIFEST_FILE: &str = "manifest.json";
const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub image_id: String,
    pub patient_id: String,
    pub slice_index: u32,
    pub path: String,
    pub provenance: Provenance,
}

/// On-disk manifest document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub split: Split,
    pub records: Vec<RecordEntry>,
    pub annotations: Vec<BoxAnnotation>,
    pub counts: Counts,
}

/// Write `manifest` into directory `dir` and return the manifest file path.
/// Image paths in the document are relative to `dir`.
pub fn save_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    manifest.validate()?;
    let img_dir = dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let rel = format!("{IMAGE_DIR}/{}.png", r.image_id);
        r.pixels.save_png(&dir.join(&rel))?;
        records.push(RecordEntry {
            image_id: r.image_id.clone(),
            patient_id: r.patient_id.clone(),
            slice_index: r.slice_index,
            path: rel,
            provenance: r.provenance,
        });
    }
    let doc = ManifestFile {
        name: manifest.name.clone(),
        split: manifest.split,
        records,
        annotations: manifest.annotations.clone(),
        counts: manifest.counts(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&doc).expect("manifest serialises");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load a manifest from its JSON file (or from the directory holding it).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let doc: ManifestFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::with_capacity(doc.records.len());
    for e in &doc.records {
        let img_path = base.join(&e.path);
        if !img_path.is_file() {
            return Err(Error::MissingImage(img_path));
        }
        records.push(ImageRecord {
            image_id: e.image_id.clone(),
            patient_id: e.patient_id.clone(),
            slice_index: e.slice_index,
            pixels: GrayImage::load_png(&img_path)?,
            provenance: e.provenance,
        });
    }
    let manifest = DatasetManifest {
        name: doc.name,
        split: doc.split,
        records,
        annotations: doc.annotations,
    };
    manifest.validate()?;
    let actual = manifest.counts();
    for (field, stored, actual) in [
        ("patients", doc.counts.patients, actual.patients),
        ("images", doc.counts.images, actual.images),
        ("boxes", doc.counts.boxes, actual.boxes),
    ] {
        if stored != actual {
            return Err(Error::CountMismatch {
                field,
                stored,
                actual,
            });
        }
    }
    Ok(manifest)
}
