//! Replays via analysis by synthesis.
mod cluster;
mod pipeline;
mod prompt;
mod providers;
mod universe;

pub use cluster::{cluster_points, cosine_distance, cut, dendrogram, merge_until, FlatCluster, Merge};
pub use pipeline::*;
pub use prompt::{compose_prompt, parse_prompt, Prompt, PROMPT_PREFIX};
pub use providers::*;
pub use universe::{TripletUniverse, UniverseEntry, UniverseFile, UniverseRow};
