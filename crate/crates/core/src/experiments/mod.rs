//! The ablation grid, random-forest importance and reporting.

pub mod ablation;
pub mod forest;
pub mod report;

pub use ablation::{ensure_splits, run_ablation, run_selection, AblationCell, AblationResult, CellRun, SplitRun};
pub use forest::{rf_importance, ImportanceReport, RandomForest};
