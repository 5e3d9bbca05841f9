//! Synthetic equirectangular depth/normal datasets and joint depth + normal
//! estimation with the UBotNet family of networks.

pub mod autodiff;
pub mod dataio;
pub mod equirect;
pub mod error;
pub mod model;
pub mod nn;
pub mod objective;
pub mod panosim;
pub mod trainer;

pub use error::{Error, Result};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
