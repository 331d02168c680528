//! Losses, the adversarial style discriminator and the training loops.

mod config;
mod cycle;
mod discriminator;
mod losses;
mod trainer;

pub use config::{GradApproxMode, LossWeights, TrainConfig};
pub use cycle::{cycle_only_training, mean_std, CycleRun, GeneratorKind};
pub use discriminator::Discriminator;
pub use losses::{
    cycle_graph, cycle_loss, first_pass, plan_self_reconstruction, plan_transfer, pseudo_alignment_bound, self_reconstruction_graph,
    self_reconstruction_loss, style_loss, style_terms, Batch, FirstPass, ReconstructionPlan, TransferPlan,
};
pub use trainer::{StepMetrics, Trainer};

#[cfg(test)]
mod tests;
