//! Dense 64-bit network engine: tensors, reverse-mode gradients, three
//! architectures and parameter updates.

mod graph;
mod model;
mod optim;
mod spec;
mod tensor;

pub use model::{
    argmax, Gradients, LossAndGrads, PrivacySpent, Reduction, TrainedModel, TrainingMeta,
    MODEL_FORMAT_VERSION,
};
pub use optim::{optimizer_step, OptimizerState, UpdateRule};
pub use spec::{init_params, Architecture, Block, BlockKind, Layout, ModelSpec};
pub use tensor::Tensor;
