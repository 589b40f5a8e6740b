//! Volume and cohort I/O.
//!
//! Only the single-frame NIfTI-1 subset needed here is handled: 3D grids of
//! uint8, int16 or float32, either byte order, stored in a single `.nii` file
//! with the payload at `vox_offset`. Orientation fields are read but geometry
//! stays in voxel space.

mod header;
mod manifest;
mod volume;

pub use header::{
    encode_header, parse_header, Datatype, Endianness, VolumeHeader, HEADER_SIZE,
};
pub use manifest::{load_manifest, write_manifest, CohortManifest, CohortTag, SubjectRecord};
pub use volume::{
    decode_label_map, decode_volume, encode_label_map, encode_volume, flat_index,
    read_label_map, read_volume, write_label_map, write_volume, LabelEntry, LabelMap, Volume3D,
};
