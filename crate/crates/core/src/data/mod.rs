//! Synthetic composed-condition dataset, unified modality tokens and the
//! stage-1 vector-quantised autoencoder.

pub mod dataset;
pub mod modality;
pub mod scene;
pub mod vq;

pub use dataset::{
    derive_image_tokens, generate_dataset, make_example, random_coverage, read_jsonl, write_jsonl, DataConfig, Example,
    ImageTokenizer, ImageTokens,
};
pub use modality::{decode_bbox, derive_modality, edge_map, ConditionSet, CoverageMask, Layout, ModalityKind, TokenSequence};
pub use scene::{generate_scene, iou, SceneKnobs, SceneObject, SceneSpec};
pub use vq::{nearest_codewords, scene_patches, train_vq_autoencoder, vq_loss, Codebook, VqAutoencoder, VqConfig, VqReport};
