//! Experiment orchestration: configuration, the training/evaluation loops,
//! the comparison grid, the cross-game reuse run, and result emission.

pub mod config;
pub mod results;
pub mod runs;

pub use config::{DqnSettings, ExperimentConfig};
pub use results::{
    format_table, from_csv, read_csv, summarize, summarize_grid, to_csv, write_csv,
    write_summary_json, ResultRow, Summary, SummaryCell,
};
pub use runs::{
    build_prereqs, evaluate_agent, load_frozen_oae, mix_seed, populate_memory, run_cell,
    run_table, run_training, run_transfer, train_oae, EvalBlock, SeedPrereqs, TrainRun,
    TransferCell, TransferReport,
};
