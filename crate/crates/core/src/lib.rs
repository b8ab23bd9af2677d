// Indexed loops mirror the scalar formulas the kernels implement and keep
// the test oracles literal; iterator rewrites would obscure both.
#![allow(clippy::needless_range_loop)]

//! Desk-scale MRI reconstruction toolkit.
//!
//! Implements the full mechanism stack of an unrolled, data-consistency
//! regularized reconstruction network: k-space acquisition simulation,
//! separable Laplacian frequency splitting, SE-guided global context,
//! a hierarchical shared-routed mixture-of-experts, a minimal selective
//! state-space token mixer, and a tape-based reverse-mode autodiff engine
//! that trains the whole cascade on synthetic phantoms.

pub mod autodiff;
pub mod error;
pub mod kspace;
pub mod lsgp;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod par;
pub mod phantom_io;
pub mod sflap;
pub mod ssm;

pub use error::{Error, Result};
