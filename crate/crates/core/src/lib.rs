//! Conversational recommendation with dual self-attentive encoders over an
//! item history and a conversation's attribute sequence, pre-trained with
//! masked item prediction and substituted attribute discrimination.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod finetune;
pub mod model;
pub mod negsampler;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod simulator;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result, TensorError};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
