//! Ranking metrics, the training loss and analytic resource accounting.

mod metrics;
mod resources;

pub use metrics::{
    auc, clamped_probabilities, cross_entropy_loss, hitrate_at_k, mean_cross_entropy, ndcg_at_k, rank_of_positive, uauc,
    MetricAccumulator, MetricReport, PROBABILITY_FLOOR, REPORT_CUTOFFS,
};
pub use resources::{
    flops_self_attention, flops_ttt_block, peak_memory_estimate, resource_profile, resource_sweep, write_sweep_csv,
    MemoryStrategy, ResourceProfile, SelfAttentionFlops, SweepRow,
};
