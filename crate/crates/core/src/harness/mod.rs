//! Synthetic posed-scene harness: procedural rooms, a raycast renderer,
//! camera trajectories, context sampling strategies, TOML experiment
//! configs and the end-to-end train / sample / evaluate driver.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod render;
pub mod scene;
pub mod trajectory;

pub use config::ExperimentConfig;
pub use dataset::{caption, clip_condition, extract_clip, render_video, sample_context, tokenize, vocabulary, Clip, ClipSpec, ConditionOptions, ContextStrategy, Video};
pub use experiment::{checkpoint_meta, eval_clips, parse_checkpoint_meta, write_clips, evaluate, run_experiment, train_model, training_set, Corpus, Evaluation, ExperimentOutput};
pub use render::{raycast, render_view};
pub use scene::{generate_scene, Scene};
pub use trajectory::{make_trajectory, TrajectoryKind, TrajectoryParams};
