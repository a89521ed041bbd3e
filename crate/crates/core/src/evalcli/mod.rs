//! Evaluation, experiment grids, reports and the command-line driver.

pub mod cli;
mod config;
mod eval;
mod grid;
pub mod gradsuite;
mod report;

pub use config::{init_model, load_corpus, prepare_data, DataConfig, EvalConfig, GridConfig, PreparedData, RunConfig};
pub use eval::{
    episode_accuracy, episode_examples, evaluate, evaluate_with, mean_and_ci, predict_episode, EvalReport, PROTOCOL,
};
pub use grid::{cell_config, grid_keys, run_cell, run_grid, CellKey, ExperimentGrid, GridCell};
pub use report::{parse_report, references_for, render_report, Reference, RenderedReport, REFERENCE_LABEL};
