//! Benchmark harness: pipeline configuration, the register / panel / report
//! runners behind the command-line tool, and RMSD reports.
//!
//! Timing covers the deformable registration call only; loading, resampling,
//! prealignment and writing outputs are excluded.

mod config;
mod report;
mod run;

pub use config::{
    PanelSettings, PipelineConfig, Preconditioning, ReportFormat, ResampleMethod, SimilarityCenter,
    SwdSettings,
};
pub use report::{
    rmsd_ratio, round_wall_seconds, Aggregate, CaseRow, RunReport, SkippedCase, CSV_HEADER,
};
pub use run::{
    basis_for, case_id, eval_volumes, intensity_centroid, reference_path, report_dir,
    run_panel_cases, run_panel_dir, run_register, similarity_center, swd_round_trip_error,
    write_panel, write_register_outputs, write_report_files, EvalRow, RegisterOutcome, MAP_FILE,
    PREALIGN_FILE, REPORT_STEM, SHELLS_FILE, WARPED_FILE,
};
