//! Chips, datasets, class splits and episode sampling.

pub mod chip;
pub mod episode;
pub mod header;
pub mod raster;
pub mod split;
pub mod store;
pub mod synth;

pub use chip::{ClassChips, Dataset, ImageChip, CHIP_PIXELS, CHIP_SIZE};
pub use episode::{sample_episode, Episode, EpisodeSpec, DEFAULT_QUERY};
pub use header::{parse_header, write_header, Header};
pub use raster::{decode_array, encode_array, load_chip, resize_bilinear};
pub use split::{make_split, DatasetSplit, SplitManifest};
pub use store::{ingest, load_dataset, save_dataset, DatasetManifest};
pub use synth::{generate_synthetic, SynthConfig, SynthGenerator};
