//! Distillation of paired image/text embedding sets by hyperspherical
//! distribution matching.
//!
//! The crate synthesizes a small set of paired embedding vectors whose joint
//! geometry on the unit sphere matches a much larger real set: agreement and
//! discrepancy directions of each pair are compared across sets with
//! kernel-based energies, pairs are kept aligned with a contrastive loss,
//! and gradients flow through small two-branch projector networks that are
//! re-merged from a pool of finetuned experts at every step. Quality is
//! measured by training fresh projectors on the synthetic pairs and scoring
//! cross-modal retrieval on held-out data.

mod bytes;

pub mod dataio;
pub mod distill;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod losses;
pub mod numerics;
pub mod projector;
pub mod retrieval;
pub mod seeding;
pub mod sphere;

pub use dataio::{gen_toy, load_pairs, save_pairs, EmbeddingPairSet, PairManifest, ToySpec};
pub use distill::{
    distill_step, run, run_steps, DistillState, IterationLog, MdmConfig, SyntheticSet,
};
pub use error::{MdmError, Result};
pub use experts::{
    load_pool, merge_ratio, merge_weights, sample_and_merge, save_pool, train_expert, ExpertPool,
    MergeConfig, PoolMeta,
};
pub use gradcheck::{run_gradcheck, GradCheckReport, GradFault};
pub use losses::{gke, infonce, mdm_loss, GkeGrad, LossBreakdown};
pub use numerics::{Matrix, Rng, RngState};
pub use projector::{
    load_checkpoint, save_checkpoint, Activation, ArchSpec, Checkpoint, Projector, Wrt,
};
pub use retrieval::{
    cross_arch_sweep, evaluate_synthetic, recall_at_k, EvalTrainConfig, RetrievalReport,
};
pub use seeding::{herding, kcenter, kmeans_joint, random_selection, SeedMethod, SeedSelection};
pub use sphere::{
    angular_distance, kernel_eval, make_joint_batch, unit_normalize, JointBatch, KernelKind,
    KernelSpec,
};
