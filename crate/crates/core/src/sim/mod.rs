//! Synthetic world and closed-loop episodes.
//!
//! The simulator provides what field hardware would: a terrain layout with
//! per-class latent embeddings and ground-truth roughness curves, a
//! forward-sector cell sensor with tree occlusion, and a proprioception
//! generator whose windows reproduce a target roughness under the active
//! parameters. Episodes close the loop at a fixed tick and are byte-for-byte
//! reproducible from (world seed, config, run seed).

mod episode;
mod log;
mod pipeline;
mod replay;
mod world;

pub use episode::{run_episode, EpisodeOutcome, LapMetrics};
pub use log::{read_log, write_log, HeaderRecord, LogRecord, TickRecord};
pub use pipeline::Pipeline;
pub use replay::{replay_episode, ReplayOutcome};
pub use world::{
    generate_world, sample_embeddings, sense, synthesize_proprio, ClassParams, TerrainClass,
    World, WorldSpec,
};
