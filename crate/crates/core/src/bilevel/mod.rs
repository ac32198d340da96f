//! The bilevel distillation engine.
//!
//! The student's inner problem and the weighting network are abstracted by
//! [`InnerObjective`] and [`WeightGenerator`]. Hypergradients come from three
//! independent computations: autodiff through a recorded virtual step,
//! explicit alignment assembly, and central finite differences.

mod engine;
mod hypergrad;
mod objective;

pub use engine::{
    meta_update, student_update, BatchReport, Bilevel, BilevelConfig, HypergradAccumulator, HypergradPath,
};
pub use hypergrad::{
    explicit_hypergrad, fd_hypergrad, one_step_hypergrad, record_inner_step, virtual_step, InnerStepRecord,
    SampleGrads, VirtualStep,
};
pub use objective::{
    eval_weights, per_sample_grads_loop, Detached, DistillBatch, DistillObjective, InnerObjective, MetaNet,
    PinnedWeights, QuadraticToy, SigmoidGate, WeightGenerator,
};
