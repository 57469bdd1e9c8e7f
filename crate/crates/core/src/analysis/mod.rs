//! Static analyzers (receptive field, parameters, FLOPs, memory traffic) and
//! an execution-based check of the receptive-field recurrence.
//!
//! The receptive field reported here is the theoretical support: every input
//! pixel that can influence an output. Gradient-weighted "effective"
//! receptive fields are not computed.

pub mod impulse;
pub mod profile;
pub mod receptive;

pub use impulse::{impulse_support_oracle, ImpulseSupport};
pub use profile::{
    conv_weight_count, count_flops, count_params, memory_traffic_estimate, ProfileReport,
    ProfileRow, ProfileTotals,
};
pub use receptive::{receptive_field, receptive_fields, RFInfo, ReceptiveField};
