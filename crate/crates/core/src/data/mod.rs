//! Trajectory ingestion, windowing, normalization, social masking,
//! splitting, augmentation, and seeded synthetic data.

mod augment;
mod mask;
mod records;
mod scene;
mod split;
mod synthetic;
mod windows;

pub use augment::scale_augment;
pub use mask::{mask_matrix, pad_scenes, retain_neighbors};
pub use records::{parse_records, write_records, RawRecord};
pub use scene::{
    denormalize_prediction, normalize_scene, read_archive, validate_scene, write_archive,
    NormTransform, Point, Scene,
};
pub use split::temporal_split;
pub use synthetic::{generate_synthetic, GenConfig, Scenario};
pub use windows::{build_windows, NeighborTrack, Window};
