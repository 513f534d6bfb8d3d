//! The three networks: a DenseNet-style visual embedding net with triplet,
//! affect and (student only) distillation heads; a VGG-style audio net over
//! log-mel spectrograms; and an LSTM fusion net over per-modality feature
//! sequences.

mod audio;
mod fusion;
mod layers;
mod visual;

pub use audio::{AudioNet, AudioNetConfig, AudioOutput};
pub use fusion::{FusionNet, FusionNetConfig, Mask};
pub use layers::{BatchNorm, Conv1d, Conv2d, Dense, Init, BN_EPS, BN_MOMENTUM};
pub use visual::{teacher_distill_target, Role, VisualNet, VisualNetConfig, VisualOutput};

use thiserror::Error;

use crate::tensor::{ParamStore, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("input too short: {got} time steps, the network needs at least {min}")]
    TooShort { got: usize, min: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("parameter mismatch: {0}")]
    Params(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Copy every entry of `src` into the freshly built `dst`, requiring the same
/// names and shapes in the same order.
pub(crate) fn load_params(dst: &mut ParamStore, src: ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(ModelError::Params(format!(
            "expected {} tensors, checkpoint has {}",
            dst.len(),
            src.len()
        )));
    }
    for (d, s) in dst.entries_mut().iter_mut().zip(src.entries()) {
        if d.name != s.name || d.value.shape() != s.value.shape() {
            return Err(ModelError::Params(format!(
                "expected {} {:?}, found {} {:?}",
                d.name,
                d.value.shape(),
                s.name,
                s.value.shape()
            )));
        }
        d.value = s.value.clone();
    }
    Ok(())
}
