//! Conditional sampling from a trained generator.

use super::config::GanConfig;
use super::mask::mask_pyramid;
use super::network::generator_forward;
use super::train::{sample_latent, latent_tensor, TrainState};
use crate::error::Result;
use crate::geometry::BBox;
use crate::image::GrayImage;
use crate::nn::{kernels, Graph, Tensor};

const CHUNK: usize = 16;

/// One image per condition set, at the target resolution with `alpha = 1`.
/// Boxes are returned unchanged and become the synthetic annotations.
/// If the checkpoint stopped below the target resolution its output is
/// nearest-upsampled.
pub fn generate_batch(
    state: &TrainState,
    config: &GanConfig,
    conditions: &[Vec<BBox>],
    seed: u64,
) -> Result<Vec<(GrayImage, Vec<BBox>)>> {
    let zs = sample_latent(conditions.len(), config, seed);
    let full = config.target_resolution;
    let mut out = Vec::with_capacity(conditions.len());
    for (chunk, z_chunk) in conditions.chunks(CHUNK).zip(zs.chunks(CHUNK)) {
        let masks = mask_pyramid(chunk, full, state.stage)?;
        let g = Graph::new();
        let p = state.generator.bind(&g, false);
        let mv: Vec<_> = masks.into_iter().map(|m| g.constant(m)).collect();
        let y = generator_forward(&p, config, g.constant(latent_tensor(z_chunk)), &mv, state.stage, 1.0)?;
        let mut img: Tensor = y.value().as_ref().clone();
        while img.shape()[2] < full {
            img = kernels::upsample2(&img);
        }
        for (i, boxes) in chunk.iter().enumerate() {
            let data = img
                .sample(i)
                .data()
                .iter()
                .map(|&v| (((v + 1.0) * 0.5).clamp(0.0, 1.0)) as f32)
                .collect();
            let mut pixels = GrayImage::from_vec(full, full, data)?;
            pixels.quantize16();
            out.push((pixels, boxes.clone()));
        }
    }
    Ok(out)
}
