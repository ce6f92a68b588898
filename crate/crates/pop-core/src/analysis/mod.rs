//! Cost accounting, benchmarking, drift diagnostics, and figure emission.
//!
//! Everything here is read-only with respect to model state: the functions
//! take weights and plans produced elsewhere and report on them. Numeric
//! outputs are deterministic for a fixed seed and independent of the worker
//! count, which makes them safe to freeze into regression baselines.

mod bench;
mod drift;
mod emit;
mod figures;
mod flops;

pub use bench::{bench_ttft, BenchStats};
pub(crate) use bench::synthetic_prompts;
pub use drift::{drift_diagnostics, DriftTrace, LayerDrift};
pub use emit::{csv_string, parse_csv, read_csv, svg_line_chart, write_csv, Series};
pub use figures::{reproduce_figures, FigurePaths, SWEEP_RATIOS};
pub(crate) use figures::{write_drift_csv, write_drift_svg};
pub use flops::{count_flops, FlopsReport, LayerFlops};
