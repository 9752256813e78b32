//! Run configuration, checkpoints, evaluation metrics and map dumps.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod inspect;
pub mod metrics;
pub mod render;
pub mod run;

pub use checkpoint::Checkpoint;
pub use config::{EvalSection, ModelSection, RunConfig};
pub use eval::{draw_samples, evaluate, mean_accuracy, Accuracy, EvalReport, Sampler, SubsetNll};
pub use inspect::{inspect, teacher_forced_divergence, Inspection};
pub use metrics::{constraint_accuracy, frechet_distance, frechet_from_moments, moments, scene_features, BBOX_IOU_THRESHOLD};
pub use render::write_ppm;
pub use run::{ablate, fresh_state, held_out, train_run, write_ablation_csv, AblationMode, AblationRow, FINAL_CHECKPOINT, METRICS_CSV};
