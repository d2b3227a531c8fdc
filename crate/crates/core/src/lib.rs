//! Image-and-text-to-video latent diffusion with an appearance noise prior,
//! sized to train and verify on a desktop CPU.

pub mod config;
pub mod error;
pub mod eval;
pub mod net;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod study;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use net::{InjectionMode, UNet3D, UNetConfig};
pub use prior::{AppearancePrior, VideoClip};
pub use schedule::NoiseSchedule;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type UNet64 = UNet3D<f64>;
pub type UNet32 = UNet3D<f32>;
