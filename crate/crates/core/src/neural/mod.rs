//! Minimal dense tensors, layers with manual backward passes and Adam.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tensor;

pub use attention::{EncoderBlock, EncoderCache, Mhsa, MhsaCache};
pub use gradcheck::grad_check;
pub use layers::{Conv1d, LayerNorm, Linear, Mlp};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::Tensor;
