//! Embedding heads, losses with analytic gradients, batching, and the
//! clustering/fusion/fine-tuning loop.

mod batch;
mod head;
mod loss;
mod pipeline;

pub use batch::make_batches;
pub use head::{Classifier, EmbeddingHead};
pub use loss::{
    apply_sgd, batch_loss, classification_loss, gradients, triplet_loss, Gradients, LossBatch, LossBreakdown,
    LossWeights,
};
pub use pipeline::{
    run_fsac, snapshot, ClusterAlgorithm, ClusterConfig, EpochLog, EvalSets, EvalSnapshot, FusionScope, TrainConfig,
    TrainOutcome,
};
