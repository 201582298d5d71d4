//! Building blocks of a wavelet-guided, misalignment-aware visible-infrared
//! detector: Haar wavelet kernels, a small reverse-mode autograd, the
//! enhancement (WU-Net), interaction (CFM, SAWF) and fusion (MAF) modules,
//! and a synthetic misaligned-pair benchmark with detection metrics.

pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod wavelet;
pub mod wunet;
pub mod cfm;
pub mod xattn;
pub mod sawf;
pub mod maf;
pub mod metrics;
pub mod synth;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{FeatureMap, Real, Tensor, TokenSequence};
