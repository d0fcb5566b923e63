//! Adversarial objectives, a small softplus discriminator, synthetic blob
//! data and a deterministic toy training loop.

mod data;
mod discriminator;
mod losses;
mod toy;

pub use data::{moment_distance, moments, BlobDataset};
pub use discriminator::{discriminate, DiscriminatorConfig, DiscriminatorParams, ToyDiscriminator};
pub use losses::{
    adversarial_loss_d, loss_discriminator, loss_generator, loss_vqhit, r1_from_logits, r1_penalty, DiscriminatorLoss,
    VqHitLoss, VqHitWeights,
};
pub use toy::{
    train_toy, train_toy_with, DiscriminatorAddend, GanHyper, ToySetup, Trace, TraceRow, TrainOutcome, TRACE_HEADER,
};
