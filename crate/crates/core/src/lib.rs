pub mod annotate;
pub mod decode;
pub mod error;
pub mod eval;
pub mod scalar;
pub mod synthdata;
pub mod termbase;
pub mod text;
pub mod util;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub mod model;
pub mod pipeline;
pub mod subword;
pub mod vocab;

pub type Transformer32 = model::Transformer<f32>;
pub type Transformer64 = model::Transformer<f64>;
pub type TrainState32 = model::TrainState<f32>;
pub type TrainState64 = model::TrainState<f64>;
