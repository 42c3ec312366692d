//! Volumes and masks, their file formats, rescaling, block splitting,
//! sliding-window tiling and the synthetic survey generator.

mod pgm;
mod preprocess;
mod segv;
mod split;
mod synth;
mod tiles;
mod volume;

pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use preprocess::{percentile, preprocess_rescale};
pub use segv::{
    decode_segv, encode_segv, load_masks, load_volume, read_segv, save_masks, save_volume, sidecar_path, write_segv,
    SegvArray, SegvPayload, SEGV_MAGIC,
};
pub use split::{evenly_spaced, split_blocks, Split, SplitConfig};
pub use synth::{generate_synthetic_volume, SynthConfig};
pub use tiles::{tile_count, tile_origins, tile_slice, tile_volume, EdgePolicy, Tile, TileConfig, TileSet};
pub use volume::{merge_classes, MaskVolume, Volume, VolumeMeta, MERGE_MAP};
