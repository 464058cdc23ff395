//! Dataset manifests, image codecs, weight archives and output maps.

mod archive;
mod codec;
mod manifest;

pub use archive::{
    archive_size, decode_weights, encode_weights, load_weights, save_weights, ArchiveMeta, MAGIC,
};
pub use codec::{
    binarize, probability_to_u8, read_gray16, read_gray8, read_mask, read_rgb,
    write_binary_map, write_gray16, write_gray8, write_mask, write_probability_map, write_rgb, MASK_THRESHOLD,
};
pub use manifest::{
    load_dataset, load_sample, Dataset, DatasetManifest, DatasetName, Fold, SampleRecord, SplitSpec,
};
