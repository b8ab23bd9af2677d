//! Library surface of the `kmoe` command-line tool, exposed so integration
//! and acceptance tests can drive the commands directly.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use commands::{cmd_ablate, cmd_reconstruct, cmd_simulate, cmd_spectra, cmd_train, Invocation};
pub use config::RunConfig;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

/// Maps toolkit errors onto the documented exit codes.
pub fn exit_code(err: &kmoe_core::Error) -> i32 {
    use kmoe_core::Error::*;
    match err {
        ShapeMismatch(_) | InvalidArgument(_) | CheckpointMismatch { .. } => exit::CONFIG,
        Io(_) | Format(_) => exit::IO,
        NonFinite(_) | Numerical(_) => exit::NUMERICAL,
    }
}
