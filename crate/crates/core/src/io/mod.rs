//! Dataset ingestion, image export and checkpoint persistence.

mod checkpoint;
mod dataset;
pub mod idx;
mod image;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, param_checksum, restore,
    save_checkpoint, sha256_hex, NamedTensor, CHECKPOINT_MAGIC,
};
pub use dataset::{LabeledDataset, Split};
pub use idx::{load_idx_images, load_idx_labels, ImageSet};
pub use image::{decode_pnm, encode_pnm, read_image, tile, write_image, SourceRange};
