//! NIfTI-1 header subset: single-frame 3D volumes stored as uint8, int16 or
//! float32 in one `.nii` file.

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;

/// Field byte offsets inside the 348-byte header.
mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const MAGIC: usize = 344;
}

const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";
/// `xyzt_units` value for millimetres, no time unit.
const UNITS_MM: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::Uint8),
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, Datatype::Float32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    /// Voxel edge lengths in millimetres.
    pub voxel_size: [f32; 3],
    pub datatype: Datatype,
    pub data_offset: usize,
    pub endianness: Endianness,
    /// 0 means "no scaling" and behaves like 1.
    pub scale_slope: f32,
    pub scale_intercept: f32,
    /// Orientation codes are kept for inspection only; geometry is voxel space.
    pub qform_code: i16,
    pub sform_code: i16,
    /// `false` for the two-file `ni1` variant.
    pub single_file: bool,
}

impl VolumeHeader {
    /// Header for a little-endian single-file volume with no scaling.
    pub fn new(dims: [usize; 3], voxel_size: [f32; 3], datatype: Datatype) -> Self {
        VolumeHeader {
            dims,
            voxel_size,
            datatype,
            data_offset: HEADER_SIZE,
            endianness: Endianness::Little,
            scale_slope: 1.0,
            scale_intercept: 0.0,
            qform_code: 0,
            sform_code: 0,
            single_file: true,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn payload_len(&self) -> usize {
        self.num_voxels() * self.datatype.bytes_per_voxel()
    }

    /// Slope with the "0 means identity" convention applied.
    pub fn effective_slope(&self) -> f32 {
        if self.scale_slope == 0.0 {
            1.0
        } else {
            self.scale_slope
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Header(format!("non-positive dims {:?}", self.dims)));
        }
        if self.dims.iter().any(|&d| d > i16::MAX as usize) {
            return Err(Error::Header(format!(
                "dims {:?} exceed the NIfTI-1 int16 limit",
                self.dims
            )));
        }
        if self.voxel_size.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Header(format!(
                "non-positive voxel size {:?}",
                self.voxel_size
            )));
        }
        if self.single_file && self.data_offset < HEADER_SIZE {
            return Err(Error::Header(format!(
                "data offset {} lies inside the header",
                self.data_offset
            )));
        }
        if !self.scale_slope.is_finite() || !self.scale_intercept.is_finite() {
            return Err(Error::Header("non-finite scaling".into()));
        }
        Ok(())
    }
}

/// Decode a NIfTI-1 header. Byte order is inferred from `sizeof_hdr`.
pub fn parse_header(raw: &[u8]) -> Result<VolumeHeader> {
    if raw.len() < HEADER_SIZE {
        return Err(Error::Header(format!(
            "short buffer: {} bytes, need {HEADER_SIZE}",
            raw.len()
        )));
    }
    let sizeof_hdr = &raw[offsets::SIZEOF_HDR..offsets::SIZEOF_HDR + 4];
    if LittleEndian::read_i32(sizeof_hdr) == HEADER_SIZE as i32 {
        parse_with::<LittleEndian>(raw, Endianness::Little)
    } else if BigEndian::read_i32(sizeof_hdr) == HEADER_SIZE as i32 {
        parse_with::<BigEndian>(raw, Endianness::Big)
    } else {
        Err(Error::Header(format!(
            "sizeof_hdr is {} (expected 348 in either byte order)",
            LittleEndian::read_i32(sizeof_hdr)
        )))
    }
}

fn parse_with<B: ByteOrder>(raw: &[u8], endianness: Endianness) -> Result<VolumeHeader> {
    let magic = &raw[offsets::MAGIC..offsets::MAGIC + 4];
    let single_file = if magic == MAGIC_SINGLE {
        true
    } else if magic == MAGIC_PAIR {
        false
    } else {
        return Err(Error::Header(format!("bad magic {magic:?}")));
    };

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&raw[offsets::DIM + 2 * i..]);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::Header(format!("dim[0] = {ndim} out of range")));
    }
    if ndim < 3 {
        return Err(Error::Header(format!("expected a 3D volume, dim[0] = {ndim}")));
    }
    // Trailing singleton axes are tolerated; real 4D data is not.
    if dim[4..=ndim as usize].iter().any(|&d| d != 1) {
        return Err(Error::Header(format!(
            "only single-frame volumes are supported, dim = {dim:?}"
        )));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::Header(format!("non-positive dims {:?}", &dim[1..4])));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = Datatype::from_code(B::read_i16(&raw[offsets::DATATYPE..]))?;
    let bitpix = B::read_i16(&raw[offsets::BITPIX..]);
    if bitpix as usize != datatype.bytes_per_voxel() * 8 {
        return Err(Error::Header(format!(
            "bitpix {bitpix} inconsistent with datatype {datatype:?}"
        )));
    }

    let mut voxel_size = [0f32; 3];
    for (i, v) in voxel_size.iter_mut().enumerate() {
        *v = B::read_f32(&raw[offsets::PIXDIM + 4 * (i + 1)..]);
    }

    let vox_offset = B::read_f32(&raw[offsets::VOX_OFFSET..]);
    if !(vox_offset >= 0.0) || !vox_offset.is_finite() || vox_offset.fract() != 0.0 {
        return Err(Error::Header(format!("invalid vox_offset {vox_offset}")));
    }

    let header = VolumeHeader {
        dims,
        voxel_size,
        datatype,
        data_offset: vox_offset as usize,
        endianness,
        scale_slope: B::read_f32(&raw[offsets::SCL_SLOPE..]),
        scale_intercept: B::read_f32(&raw[offsets::SCL_INTER..]),
        qform_code: B::read_i16(&raw[offsets::QFORM_CODE..]),
        sform_code: B::read_i16(&raw[offsets::SFORM_CODE..]),
        single_file,
    };
    header.validate()?;
    Ok(header)
}

/// Encode `header` into 348 bytes using its own byte order.
pub fn encode_header(header: &VolumeHeader) -> Result<[u8; HEADER_SIZE]> {
    header.validate()?;
    let mut raw = [0u8; HEADER_SIZE];
    match header.endianness {
        Endianness::Little => encode_with::<LittleEndian>(header, &mut raw),
        Endianness::Big => encode_with::<BigEndian>(header, &mut raw),
    }
    Ok(raw)
}

fn encode_with<B: ByteOrder>(header: &VolumeHeader, raw: &mut [u8; HEADER_SIZE]) {
    B::write_i32(&mut raw[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    let dim: [i16; 8] = [
        3,
        header.dims[0] as i16,
        header.dims[1] as i16,
        header.dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dim.iter().enumerate() {
        B::write_i16(&mut raw[offsets::DIM + 2 * i..], *d);
    }
    B::write_i16(&mut raw[offsets::DATATYPE..], header.datatype.code());
    B::write_i16(
        &mut raw[offsets::BITPIX..],
        (header.datatype.bytes_per_voxel() * 8) as i16,
    );
    let pixdim: [f32; 8] = [
        1.0,
        header.voxel_size[0],
        header.voxel_size[1],
        header.voxel_size[2],
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        B::write_f32(&mut raw[offsets::PIXDIM + 4 * i..], *p);
    }
    B::write_f32(&mut raw[offsets::VOX_OFFSET..], header.data_offset as f32);
    B::write_f32(&mut raw[offsets::SCL_SLOPE..], header.scale_slope);
    B::write_f32(&mut raw[offsets::SCL_INTER..], header.scale_intercept);
    raw[offsets::XYZT_UNITS] = UNITS_MM;
    B::write_i16(&mut raw[offsets::QFORM_CODE..], header.qform_code);
    B::write_i16(&mut raw[offsets::SFORM_CODE..], header.sform_code);
    let magic = if header.single_file {
        MAGIC_SINGLE
    } else {
        MAGIC_PAIR
    };
    raw[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(magic);
}
