//! Dilated attention: split the sequence into segments of length `w`, keep
//! every `r`-th row of each segment (shifted per head), attend within the
//! kept rows, scatter back and mix several `(w, r)` patterns.

mod config;
mod forward;
mod index;
mod oracle;
mod pattern;

pub use config::{DilatedConfig, Geometric, Pattern, Scale, LONGNET_32K};
pub use forward::{
    dilated_backward, dilated_forward, dilated_forward_instrumented, dilated_forward_padded,
    dilated_forward_padded_instrumented,
};
pub(crate) use forward::{head_slices, segment_backward};
pub use index::{build_index_maps, segment_positions, SparseIndexMap};
pub use oracle::{attended_keys, gathered_softmax_oracle};
pub(crate) use pattern::attend_maps;
pub use pattern::{mix_patterns, single_pattern_attention, PatternOutput};
