//! Convolution kernels, model compression, schedule tuning and benchmarking
//! for small CNNs.

pub mod bench;
pub mod compress;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod tensor;
pub mod tune;

pub use compress::{PruneLevel, Technique};
pub use error::{Error, Result};
pub use graph::{LabeledDataset, Model, ScheduleMap};
pub use kernels::{Algorithm, ConvGeometry, ConvSpec, Schedule};
pub use tensor::{DType, QuantParams, Shape4, Tensor4};

/// Environment variable capping the worker threads used by parallel
/// schedules and evaluation.
pub const THREADS_ENV: &str = "CONVSTACK_THREADS";

/// Sizes the global thread pool from [`THREADS_ENV`] when it is set to a
/// positive integer; otherwise one thread per logical core. Returns the
/// pool size. Only the first call in a process has an effect.
pub fn init_thread_pool() -> Result<usize> {
    let requested = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|n| *n > 0).ok_or_else(|| {
            Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))
        })?),
        Err(_) => None,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = requested {
        builder = builder.num_threads(n);
    }
    // A pool that already exists (a second call) is fine.
    let _ = builder.build_global();
    Ok(rayon::current_num_threads())
}
