//! Array files, windowed inference, benchmarking and run artifacts.

pub mod array;
pub mod bench;
pub mod run;
pub mod window;

pub use array::{
    read_array, read_field, read_mask, write_array, write_field, write_mask, ArrayData, ArrayValues, DType,
};
pub use bench::{bench, BenchConfig, BenchReport};
pub use run::{config_hash, load_params, save_params, threads_from_env, RunManifest, THREADS_ENV};
pub use window::{plan_windows, sliding_refine, SlidingOutput, WindowPlan};
