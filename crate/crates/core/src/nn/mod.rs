//! Small neural-network toolkit: autodiff tape, parameter storage, AdamW.

mod gradcheck;
pub mod layers;
mod optim;
mod params;
mod tape;

pub use gradcheck::{check_gradients, GradCheck};
pub use layers::{Attention, EncoderBlock, LayerNorm, Linear, Mlp};
pub use optim::{AdamW, AdamWConfig, StepSchedule};
pub use params::{Gradients, ParamGroup, ParamKey, ParamStore};
pub use tape::{sigmoid, softplus, Matrix, Tape, Var};
