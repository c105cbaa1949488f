//! Best-of-N metrics, spatial error fields, and attention-trace export.

mod metrics;
mod spatial;
mod trace;

pub use metrics::{cvar, evaluate, min_ade, min_fde, miss_rate, MetricsReport, PerSample};
pub use spatial::{spatial_error_field, GridSpec, SpatialField};
pub use trace::{export_attention_trace, trace_for_scene, AttentionTrace};
