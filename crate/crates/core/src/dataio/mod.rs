//! On-disk formats: the `GMGV` volume container, the patient manifest, and
//! PGM slice exports.

mod export;
mod manifest;
mod volume_file;

pub use export::{export_heatmap_slices, write_pgm, SliceExport};
pub use manifest::{load_manifest, parse_manifest, write_manifest, Manifest, ManifestEntry};
pub use volume_file::{
    decode_volume, encode_volume, read_grid, read_volume, write_grid, write_volume, HEADER_LEN, VOLUME_MAGIC,
    VOLUME_VERSION,
};
