//! Exact evaluation: terminal enumeration, divergences, edit-distance error
//! rates and the synthetic hallucination benchmark.

mod benchmark;
mod divergence;
mod edit;
mod enumerate;
mod task;

pub use benchmark::{
    collect_samples, compare_reports, run_hallucination_benchmark, BenchmarkReport, Comparison, PromptReport,
    SampleRecord,
};
pub use divergence::{kl_divergence, total_variation};
pub use edit::{edit_distance, error_rate, levenshtein};
pub use enumerate::{
    enumerate_terminals, target_distribution, terminal_count, terminal_distribution, terminal_log_probs,
    TerminalTable, DEFAULT_BUDGET,
};
pub use task::SyntheticTask;
