//! CSV and SVG output, grid orchestration, post-hoc analysis and the CLI.

mod analysis;
mod cli;
mod csv;
mod grid;
mod svg;
mod verify;

pub use analysis::{
    analyze_norms, norms_csv, separability, separability_of, NormRow, Separability, NORMS_HEADER,
    NORMS_VERSION, PROJECTION_VERSION,
};
pub use cli::{cli_main, resolve_out, run, Cli, Command, DEFAULT_OUT, OUT_ENV};
pub use csv::{
    kd_direction_fraction, read_metrics, write_diagnostics, write_events, write_metrics,
    DIAGNOSTICS_VERSION, EVENTS_VERSION, METRICS_HEADER, METRICS_VERSION,
};
pub use grid::{
    cell_stem, mean_se, operating_point_csv, operating_points, run_grid, write_cell_outputs,
    GridOutcome, OperatingPoint, RunManifest, OPERATING_POINT_HEADER, OPERATING_POINT_VERSION,
};
pub use svg::{norms_svg, plot_curves};
pub use verify::{
    central_difference, check_cosine_gradient, check_encoder_gradient, check_frobenius_gradient,
    check_masked_stay_zero, check_mirsky, check_schedule, max_relative_error, run_all, CheckResult,
};
