//! Dataset model, manifest persistence, patient-level splitting and the
//! procedural phantom generator that stands in for clinical scans.

mod manifest;
mod phantom;
mod roughen;
mod split;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::GrayImage;

pub use manifest::{load_manifest, save_manifest, ManifestFile, RecordEntry, MANIFEST_FILE};
pub use phantom::{
    generate_phantom_dataset, outside_head_envelope, Ellipse, IntRange, LesionCount,
    PhantomConfig, PhantomDataset, RealRange, SliceTruth, TISSUE_MAX,
};
pub use roughen::{roughen_box, roughen_boxes, BoxJitter, RoughenSpec};
pub use split::{split_by_patient, SplitFractions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Synth,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub slice_index: u32,
    pub pixels: GrayImage,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub patients: usize,
    pub images: usize,
    pub boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub image_id: String,
    pub x_min: i32,
    pub y_min: i32,
    pub x_max: i32,
    pub y_max: i32,
}

impl BoxAnnotation {
    pub fn new(image_id: impl Into<String>, b: BBox) -> Self {
        BoxAnnotation {
            image_id: image_id.into(),
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub records: Vec<ImageRecord>,
    pub annotations: Vec<BoxAnnotation>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, split: Split) -> Self {
        DatasetManifest {
            name: name.into(),
            split,
            records: Vec::new(),
            annotations: Vec::new(),
        }
    }

    pub fn counts(&self) -> Counts {
        let patients: BTreeSet<&str> = self.records.iter().map(|r| r.patient_id.as_str()).collect();
        Counts {
            patients: patients.len(),
            images: self.records.len(),
            boxes: self.annotations.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct patient ids.
    pub fn patient_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.patient_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Boxes per image id, in annotation order.
    pub fn boxes_by_image(&self) -> HashMap<&str, Vec<BBox>> {
        let mut map: HashMap<&str, Vec<BBox>> = HashMap::new();
        for a in &self.annotations {
            map.entry(a.image_id.as_str()).or_default().push(a.bbox());
        }
        map
    }

    pub fn boxes_for(&self, image_id: &str) -> Vec<BBox> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(BoxAnnotation::bbox)
            .collect()
    }

    /// Records together with their boxes, in record order.
    pub fn samples(&self) -> Vec<(&ImageRecord, Vec<BBox>)> {
        let by = self.boxes_by_image();
        self.records
            .iter()
            .map(|r| (r, by.get(r.image_id.as_str()).cloned().unwrap_or_default()))
            .collect()
    }

    /// Keep the records matching `keep`, and their annotations.
    pub fn filter_records(&self, name: &str, split: Split, keep: impl Fn(&ImageRecord) -> bool) -> Self {
        let records: Vec<ImageRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let ids: BTreeSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
        let annotations = self
            .annotations
            .iter()
            .filter(|a| ids.contains(a.image_id.as_str()))
            .cloned()
            .collect();
        DatasetManifest {
            name: name.to_string(),
            split,
            records,
            annotations,
        }
    }

    /// Check the manifest invariants: unique ids, annotations attached to
    /// existing records, boxes inside their image.
    pub fn validate(&self) -> Result<()> {
        let mut dims: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for r in &self.records {
            if dims
                .insert(&r.image_id, (r.pixels.width(), r.pixels.height()))
                .is_some()
            {
                return Err(Error::DuplicateImageId(r.image_id.clone()));
            }
        }
        for a in &self.annotations {
            let Some(&(w, h)) = dims.get(a.image_id.as_str()) else {
                return Err(Error::DanglingAnnotation(a.image_id.clone()));
            };
            if !a.bbox().is_valid_in(w, h) {
                return Err(Error::MalformedEntry(format!(
                    "box {} of {} outside {w}x{h} frame",
                    a.bbox(),
                    a.image_id
                )));
            }
        }
        Ok(())
    }
}
