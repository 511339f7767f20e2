//! Deterministic simulation of sequence-parallel dilated attention over
//! virtual devices, with a recorded communication transcript.
//!
//! Each device runs between collectives on its own thread and shares nothing
//! with its peers; collectives are barriers that combine payloads in rank
//! order, so outputs and transcripts do not depend on scheduling.

mod fabric;
mod report;
mod shard;
mod sim;

pub use fabric::{CommRecord, CommTranscript, KvPayload, Phase};
pub use report::{communication_report, communication_sweep, CommReport, CommRow, CommRun};
pub use shard::{shard_and_project, shard_qkv, split_rows, DeviceShard};
pub use sim::{
    distributed_dilated_backward, distributed_dilated_forward, DistributedGradients,
    DistributedOutput,
};
