//! Dense layers, the Concrete dropout wrapper with its analytic backward
//! pass, the MLP built from them, and model checkpoints.

pub mod checkpoint;
mod concrete;
mod model;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use concrete::{
    apply_concrete_dropout, concrete_drop_prob, sigmoid, softplus, Activation, ConcreteDropout,
    ConcreteDropoutLayer, DenseLayer, LayerGrads, LayerNoise, MaskRealisation, DEFAULT_TEMPERATURE,
    DROPOUT_EPS,
};
pub use model::{Model, ModelConfig, ModelGrads, ModelOutput, NoiseSource, PInit};
