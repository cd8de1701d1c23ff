//! Box-conditioned progressive GAN.

pub mod checkpoint;
pub mod config;
pub mod generate;
pub mod mask;
pub mod network;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{resolution, GanConfig, LatentDist};
pub use generate::generate_batch;
pub use mask::{boxes_to_mask, mask_pyramid, BoxConditionMask};
pub use network::{discriminator_forward, generator_forward};
pub use train::{
    alpha_schedule, gradient_penalty, grow, sample_latent, train_gan, train_step, LatentVector, StepLosses,
    TrainState, TrainingPool,
};
