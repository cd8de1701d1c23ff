//! Bounding boxes rendered as binary condition masks.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BoxConditionMask {
    pub resolution: usize,
    /// Row-major `resolution x resolution`, entries 0 or 1.
    pub mask: Vec<u8>,
    /// Boxes in full-resolution coordinates.
    pub source_boxes: Vec<BBox>,
}

impl BoxConditionMask {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.mask[y * self.resolution + x]
    }

    pub fn ones(&self) -> usize {
        self.mask.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Rasterise boxes at `full_resolution`, then block max-pool down to
/// `mask_resolution`. Any covered pixel marks its block.
pub fn boxes_to_mask(boxes: &[BBox], full_resolution: usize, mask_resolution: usize) -> Result<BoxConditionMask> {
    if !mask_resolution.is_power_of_two()
        || !full_resolution.is_power_of_two()
        || mask_resolution > full_resolution
    {
        return Err(Error::InvalidInput(format!(
            "mask resolution {mask_resolution} must be a power of two <= {full_resolution}"
        )));
    }
    let full = full_resolution;
    let mut raster = vec![0u8; full * full];
    for b in boxes {
        let Some(c) = b.clip(full, full) else { continue };
        for y in c.y_min as usize..c.y_max as usize {
            raster[y * full + c.x_min as usize..y * full + c.x_max as usize].fill(1);
        }
    }
    let f = full / mask_resolution;
    let mut mask = vec![0u8; mask_resolution * mask_resolution];
    for y in 0..full {
        for x in 0..full {
            if raster[y * full + x] == 1 {
                mask[(y / f) * mask_resolution + x / f] = 1;
            }
        }
    }
    Ok(BoxConditionMask {
        resolution: mask_resolution,
        mask,
        source_boxes: boxes.to_vec(),
    })
}

/// Mask tensors `[N, 1, r, r]` for every stage resolution `4, 8, ..., 4 * 2^stage`.
pub fn mask_pyramid(box_sets: &[Vec<BBox>], full_resolution: usize, stage: usize) -> Result<Vec<Tensor>> {
    (0..=stage)
        .map(|s| {
            let r = super::config::resolution(s);
            let mut data = Vec::with_capacity(box_sets.len() * r * r);
            for boxes in box_sets {
                data.extend(boxes_to_mask(boxes, full_resolution, r)?.to_f64());
            }
            Ok(Tensor::new(&[box_sets.len(), 1, r, r], data))
        })
        .collect()
}
