//! RGB-to-hyperspectral reconstruction with a multi-stage spectral-wise
//! transformer, built on a small deterministic autodiff engine.
//!
//! Modules:
//! - [`tensor`]: dense tensors, reverse-mode autodiff graph, seeded RNG, MAC ledger
//! - [`attention`]: spectral-wise attention plus global/window references and cost laws
//! - [`network`]: attention blocks, U-shaped stages, the full multi-stage model
//! - [`checkpoint`]: binary checkpoint format
//! - [`metrics`]: MRAE / RMSE / PSNR
//! - [`synth`]: synthetic spectral scenes, RGB projection, noise, patches, cube files
//! - [`train`]: MRAE loss, Adam, cosine schedule, training loop
//! - [`ensemble`]: self-, multi-scale, and top-K ensembling

pub mod attention;
pub mod checkpoint;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{CostLedger, Graph, PadMode, Rng, Tensor, Var};
