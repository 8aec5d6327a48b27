//! Conditional DDIM model over per-ear prototypes.

mod sampler;
mod schedule;
mod train;
mod unet;

pub use sampler::{ddim_sample, NoisePredictor};
pub use schedule::{cfg_combine, DdimSchedule, SamplerConfig};
pub use train::{
    denoising_loss, prototype_batch, sample_prototypes, train_diffusion, DiffusionOutcome,
    DiffusionTrainConfig, UnetDenoiser,
};
pub use unet::{timestep_encoding, Guidance, PrototypeUnet, UnetConfig, UnetInputs};
