use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::header::{encode_header, parse_header, Datatype, Endianness, VolumeHeader};
use crate::error::{Error, Result};

/// Flat row-major index: x varies fastest, then y, then z.
#[inline]
pub fn flat_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Scalar intensity grid. Values are stored as f32 after slope/intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    header: VolumeHeader,
    data: Vec<f32>,
}

impl Volume3D {
    /// Float32 little-endian volume.
    pub fn new(dims: [usize; 3], voxel_size: [f32; 3], data: Vec<f32>) -> Result<Self> {
        Self::with_header(VolumeHeader::new(dims, voxel_size, Datatype::Float32), data)
    }

    pub fn with_header(header: VolumeHeader, data: Vec<f32>) -> Result<Self> {
        header.validate()?;
        if data.len() != header.num_voxels() {
            return Err(Error::Shape(format!(
                "{} values for dims {:?}",
                data.len(),
                header.dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i} is {}", data[i])));
        }
        Ok(Volume3D { header, data })
    }

    pub fn filled(dims: [usize; 3], voxel_size: [f32; 3], value: f32) -> Result<Self> {
        Self::new(dims, voxel_size, vec![value; dims.iter().product()])
    }

    pub fn header(&self) -> &VolumeHeader {
        &self.header
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        self.header.voxel_size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[flat_index(self.header.dims, x, y, z)]
    }

    /// Same voxels, different on-disk encoding.
    pub fn with_encoding(
        mut self,
        datatype: Datatype,
        endianness: Endianness,
        slope: f32,
        intercept: f32,
    ) -> Result<Self> {
        self.header.datatype = datatype;
        self.header.endianness = endianness;
        self.header.scale_slope = slope;
        self.header.scale_intercept = intercept;
        self.header.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: u32,
    pub name: String,
}

impl LabelEntry {
    pub fn new(id: u32, name: impl Into<String>) -> Self {
        LabelEntry {
            id,
            name: name.into(),
        }
    }
}

/// Integer segmentation grid plus its label vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: [usize; 3],
    voxel_size: [f32; 3],
    labels: Vec<u32>,
    vocabulary: Vec<LabelEntry>,
    background_id: u32,
}

impl LabelMap {
    pub fn new(
        dims: [usize; 3],
        voxel_size: [f32; 3],
        labels: Vec<u32>,
        vocabulary: Vec<LabelEntry>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Labels(format!("non-positive dims {dims:?}")));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Labels(format!("non-positive voxel size {voxel_size:?}")));
        }
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        let known: BTreeSet<u32> = vocabulary.iter().map(|e| e.id).collect();
        if known.len() != vocabulary.len() {
            return Err(Error::Labels("duplicate id in vocabulary".into()));
        }
        if let Some(bad) = labels.iter().find(|l| !known.contains(l)) {
            return Err(Error::Labels(format!("label {bad} not in vocabulary")));
        }
        Ok(LabelMap {
            dims,
            voxel_size,
            labels,
            vocabulary,
            background_id: 0,
        })
    }

    /// Vocabulary built from the distinct values present, named `label_<id>`.
    pub fn from_labels(dims: [usize; 3], voxel_size: [f32; 3], labels: Vec<u32>) -> Result<Self> {
        let ids: BTreeSet<u32> = labels.iter().copied().chain(std::iter::once(0)).collect();
        let vocabulary = ids
            .into_iter()
            .map(|id| LabelEntry::new(id, format!("label_{id}")))
            .collect();
        Self::new(dims, voxel_size, labels, vocabulary)
    }

    /// Replace the vocabulary, checking every voxel is still covered.
    pub fn with_vocabulary(self, vocabulary: Vec<LabelEntry>) -> Result<Self> {
        let background_id = self.background_id;
        let mut map = Self::new(self.dims, self.voxel_size, self.labels, vocabulary)?;
        map.background_id = background_id;
        Ok(map)
    }

    pub fn with_background(mut self, background_id: u32) -> Self {
        self.background_id = background_id;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        self.voxel_size
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn vocabulary(&self) -> &[LabelEntry] {
        &self.vocabulary
    }

    pub fn background_id(&self) -> u32 {
        self.background_id
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[flat_index(self.dims, x, y, z)]
    }

    pub fn vocabulary_ids(&self) -> Vec<u32> {
        self.vocabulary.iter().map(|e| e.id).collect()
    }

    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Same geometry, new voxel labels (vocabulary kept).
    pub fn relabel(&self, labels: Vec<u32>) -> Result<Self> {
        let map = Self::new(self.dims, self.voxel_size, labels, self.vocabulary.clone())?;
        Ok(map.with_background(self.background_id))
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&raw)
}

pub fn decode_volume(raw: &[u8]) -> Result<Volume3D> {
    let header = parse_header(raw)?;
    let data = decode_payload(&header, raw)?;
    Volume3D::with_header(header, data)
}

fn decode_payload(header: &VolumeHeader, raw: &[u8]) -> Result<Vec<f32>> {
    if !header.single_file {
        return Err(Error::Header(
            "two-file (.hdr/.img) volumes are not supported".into(),
        ));
    }
    let expected = header.data_offset + header.payload_len();
    if raw.len() < expected {
        return Err(Error::PayloadLength {
            expected,
            found: raw.len(),
        });
    }
    let payload = &raw[header.data_offset..expected];
    Ok(match header.endianness {
        Endianness::Little => decode_with::<LittleEndian>(header, payload),
        Endianness::Big => decode_with::<BigEndian>(header, payload),
    })
}

fn decode_with<B: ByteOrder>(header: &VolumeHeader, payload: &[u8]) -> Vec<f32> {
    let slope = header.effective_slope() as f64;
    let inter = header.scale_intercept as f64;
    let scale = |v: f64| (v * slope + inter) as f32;
    let identity = slope == 1.0 && inter == 0.0;
    match header.datatype {
        Datatype::Uint8 => payload.iter().map(|&b| scale(b as f64)).collect(),
        Datatype::Int16 => payload
            .chunks_exact(2)
            .map(|c| scale(B::read_i16(c) as f64))
            .collect(),
        Datatype::Float32 => payload
            .chunks_exact(4)
            .map(|c| {
                let v = B::read_f32(c);
                // Keep float payloads bit-exact when no scaling applies.
                if identity {
                    v
                } else {
                    scale(v as f64)
                }
            })
            .collect(),
    }
}

pub fn write_volume(volume: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(volume)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_volume(volume: &Volume3D) -> Result<Vec<u8>> {
    let mut header = volume.header.clone();
    header.data_offset = super::header::HEADER_SIZE;
    header.single_file = true;
    let mut out = encode_header(&header)?.to_vec();
    out.reserve(header.payload_len());
    match header.endianness {
        Endianness::Little => encode_with::<LittleEndian>(&header, &volume.data, &mut out)?,
        Endianness::Big => encode_with::<BigEndian>(&header, &volume.data, &mut out)?,
    }
    Ok(out)
}

fn encode_with<B: ByteOrder>(header: &VolumeHeader, data: &[f32], out: &mut Vec<u8>) -> Result<()> {
    let slope = header.effective_slope() as f64;
    let inter = header.scale_intercept as f64;
    let identity = slope == 1.0 && inter == 0.0;
    let stored = |v: f32| (v as f64 - inter) / slope;
    match header.datatype {
        Datatype::Uint8 => {
            for &v in data {
                let s = stored(v).round();
                if !(0.0..=255.0).contains(&s) {
                    return Err(Error::Invalid(format!("value {v} does not fit uint8")));
                }
                out.push(s as u8);
            }
        }
        Datatype::Int16 => {
            let mut buf = [0u8; 2];
            for &v in data {
                let s = stored(v).round();
                if !(i16::MIN as f64..=i16::MAX as f64).contains(&s) {
                    return Err(Error::Invalid(format!("value {v} does not fit int16")));
                }
                B::write_i16(&mut buf, s as i16);
                out.extend_from_slice(&buf);
            }
        }
        Datatype::Float32 => {
            let mut buf = [0u8; 4];
            for &v in data {
                let s = if identity { v } else { stored(v) as f32 };
                B::write_f32(&mut buf, s);
                out.extend_from_slice(&buf);
            }
        }
    }
    Ok(())
}

/// Read an integer-typed volume as labels. Scaled values must stay integral
/// and non-negative.
pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_label_map(&raw)
}

pub fn decode_label_map(raw: &[u8]) -> Result<LabelMap> {
    let header = parse_header(raw)?;
    if !header.datatype.is_integer() {
        return Err(Error::Labels(format!(
            "label maps need an integer datatype, found {:?}",
            header.datatype
        )));
    }
    let values = decode_payload(&header, raw)?;
    let mut labels = Vec::with_capacity(values.len());
    for (i, v) in values.into_iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Labels(format!("voxel {i} has non-label value {v}")));
        }
        labels.push(v as u32);
    }
    LabelMap::from_labels(header.dims, header.voxel_size, labels)
}

pub fn write_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_label_map(map, Endianness::Little)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// uint8 when every label fits, int16 otherwise.
pub fn encode_label_map(map: &LabelMap, endianness: Endianness) -> Result<Vec<u8>> {
    let max = map.labels.iter().copied().max().unwrap_or(0);
    let datatype = if max <= u8::MAX as u32 {
        Datatype::Uint8
    } else if max <= i16::MAX as u32 {
        Datatype::Int16
    } else {
        return Err(Error::Labels(format!("label {max} exceeds int16 range")));
    };
    let mut header = VolumeHeader::new(map.dims, map.voxel_size, datatype);
    header.endianness = endianness;
    let data = map.labels.iter().map(|&l| l as f32).collect();
    encode_volume(&Volume3D::with_header(header, data)?)
}
