//! Layers, architectures and parameter storage.

pub mod arch;
pub mod layers;
pub mod model;
pub mod params;

pub use arch::{param_count, ArchKind, ArchitectureSpec, ConvBlock, FlattenScope, InputShape, NAMED_ARCHITECTURES};
pub use layers::{
    conv3d_forward, cross_entropy_loss, dense_forward, dropout_apply, dropout_mask, lstm_layer_forward,
    lstm_layer_forward_masked, lstm_step, maxpool3d_forward, DropoutPlan, LstmVars, Mode,
};
pub use model::{accumulate_sample_gradient, model_forward, predicted_class, Model, SampleOutcome};
pub use params::{Layout, ModelParameters, Param, ParamGrads, ParamKind};
