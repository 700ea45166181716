//! Collaboration-constrained routing for mixture-of-experts layers.
//!
//! The crate is organised along the pipeline it simulates:
//!
//! * [`routing`] scores tokens against a gate and selects experts, either
//!   conventionally (top-K) or constrained to each expert's most frequent
//!   collaborators.
//! * [`expert`] holds a toy expert MLP and the weighted combine.
//! * [`profiler`] counts expert co-activation per layer, derives the
//!   entropy-based collaboration degree, and extracts collaborator tables.
//! * [`placement`] assigns experts to devices so that collaborating experts
//!   share a device.
//! * [`commsim`] counts all-to-all token copies with and without per-device
//!   deduplication and turns the savings into a speedup estimate.
//! * [`workload`] generates synthetic router outputs with planted expert
//!   groups and reads and writes routing traces.

pub mod commsim;
pub mod error;
pub mod expert;
pub mod placement;
pub mod profiler;
pub mod routing;
pub mod workload;

pub use commsim::{
    account_dispatch, estimate_speedup, redundancy_ratio, sweep_ep, CommFractionTable, DispatchAccount,
    FractionSource, SpeedupModel, SweepResult, SweepRow, REFERENCE_EP_SCALING,
};
pub use error::{Error, Result};
pub use expert::{expert_forward, moe_forward, ExpertParams};
pub use placement::{place, place_greedy, place_identity, score, PlacementMap, PlacementScore, PlacementStrategy};
pub use profiler::{extract_top_t, merge, profile, random_top_t, CollaborationMatrix, CollaborationProfile, TopTTable};
pub use routing::{
    gate_scores, route_c2r, route_topk, GateWeights, MoEConfig, RouterLogits, RoutingDecision, TokenEmbedding,
};
pub use workload::{generate, generate_layer, read_trace, write_trace, TracePayload, TraceRecord, WorkloadSpec};
