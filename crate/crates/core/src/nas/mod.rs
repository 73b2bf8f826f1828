//! Latency tables, the latency regularizer, first-order bilevel search and
//! genotype discretization.

mod genotype;
mod latency;
mod search;

pub use genotype::{block_tag, Genotype, GenotypeBlock};
pub use latency::{
    alpha_entropy, benchmark_operator, build_latency_table, device_label, latency_regularizer, LatencyTable,
    TimingProtocol,
};
pub use search::{
    choose, discretize, run_search, search_log_csv, search_step, weight_step, write_search_log, SearchConfig,
    SearchLogRow, SearchOutcome, SearchState, StepReport,
};

#[cfg(test)]
mod tests;
