//! Corpus plumbing: SNR mixing, manifests, splits, image pairs and batching.

mod images;
mod manifest;
mod mix;
mod sampler;
pub mod synth;

pub use images::{image_pairs, ImagePair};
pub use manifest::{
    build_manifest, list_wavs, speakers_by_split, split_counts, Manifest, ManifestConfig, ManifestEntry, Split,
    DEFAULT_SPLIT_RATIOS, TEST_SNRS_DB, TRAIN_SNRS_DB,
};
pub use mix::{mix_at_snr, NoisyPair};
pub use sampler::BatchSampler;
