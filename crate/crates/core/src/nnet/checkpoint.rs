//! `TBNN` model checkpoints: one parameter set per tile plus the network
//! config, tile plan and label vocabulary needed to run them.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "TBNN" | version u32
//! in_channels u32 | hidden_channels u32 | hidden_layers u32 | num_classes u32 | normalize u8
//! volume_dims 3×u32 | tiles_per_axis 3×u32 | tile_shape 3×u32
//! n_labels u32 | (id u32, name_len u32, name bytes)*
//! regime_len u32 | regime bytes | selected_epoch u32
//! curve_len u32 | curve f64*
//! n_models u32 | per model: init_seed u64 | n_tensors u32 |
//!     per tensor: ndim u32 | shape u32* | values f32*
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::network::{ModelParams, NetworkConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::tiling::{plan_tiles, TilePlan};
use crate::volio::LabelEntry;

pub const MAGIC: &[u8; 4] = b"TBNN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub plan: TilePlan,
    /// Class index `c` of the network predicts `vocabulary[c].id`.
    pub vocabulary: Vec<LabelEntry>,
    pub regime: String,
    pub selected_epoch: u32,
    pub validation_curve: Vec<f64>,
    pub models: Vec<ModelParams<f32>>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.models.len() != self.plan.len() {
            return Err(Error::Checkpoint(format!(
                "{} models for {} tiles",
                self.models.len(),
                self.plan.len()
            )));
        }
        if self.vocabulary.len() != self.config.num_classes {
            return Err(Error::Checkpoint(format!(
                "{} vocabulary entries for {} classes",
                self.vocabulary.len(),
                self.config.num_classes
            )));
        }
        if self.models.iter().any(|m| m.config() != &self.config) {
            return Err(Error::Checkpoint("model config differs from header".into()));
        }
        Ok(())
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} overflows u32")))?;
    out.write_u32::<LittleEndian>(v).map_err(io_err)
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.write_all(s.as_bytes()).map_err(io_err)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    let c = &ck.config;
    for v in [c.in_channels, c.hidden_channels, c.hidden_layers, c.num_classes] {
        put_u32(&mut out, v)?;
    }
    out.push(c.normalize_input as u8);
    for triple in [ck.plan.volume_dims, ck.plan.tiles_per_axis, ck.plan.tile_shape] {
        for v in triple {
            put_u32(&mut out, v)?;
        }
    }
    put_u32(&mut out, ck.vocabulary.len())?;
    for e in &ck.vocabulary {
        put_u32(&mut out, e.id as usize)?;
        put_str(&mut out, &e.name)?;
    }
    put_str(&mut out, &ck.regime)?;
    put_u32(&mut out, ck.selected_epoch as usize)?;
    put_u32(&mut out, ck.validation_curve.len())?;
    for &v in &ck.validation_curve {
        out.write_f64::<LittleEndian>(v).map_err(io_err)?;
    }
    put_u32(&mut out, ck.models.len())?;
    for m in &ck.models {
        out.write_u64::<LittleEndian>(m.init_seed()).map_err(io_err)?;
        put_u32(&mut out, m.tensors().len())?;
        for t in m.tensors() {
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v).map_err(io_err)?;
            }
        }
    }
    Ok(out)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn u32(&mut self) -> Result<usize> {
        Ok(self.0.read_u32::<LittleEndian>().map_err(io_err)? as usize)
    }

    fn triple(&mut self) -> Result<[usize; 3]> {
        Ok([self.u32()?, self.u32()?, self.u32()?])
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if len > remaining {
            return Err(Error::Checkpoint("string runs past end of file".into()));
        }
        let mut buf = vec![0u8; len];
        self.0.read_exact(&mut buf).map_err(io_err)?;
        String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn decode_checkpoint(raw: &[u8]) -> Result<Checkpoint> {
    if raw.len() < 8 || &raw[..4] != MAGIC {
        return Err(Error::Checkpoint("missing TBNN magic".into()));
    }
    let mut r = Reader(Cursor::new(raw));
    r.0.set_position(4);
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = NetworkConfig {
        in_channels: r.u32()?,
        hidden_channels: r.u32()?,
        hidden_layers: r.u32()?,
        num_classes: r.u32()?,
        normalize_input: r.0.read_u8().map_err(io_err)? != 0,
    };
    config.validate()?;
    let (volume_dims, tiles_per_axis, tile_shape) = (r.triple()?, r.triple()?, r.triple()?);
    let plan = plan_tiles(volume_dims, tiles_per_axis, tile_shape)?;

    let n_labels = r.u32()?;
    let mut vocabulary = Vec::with_capacity(n_labels.min(1 << 16));
    for _ in 0..n_labels {
        let id = r.u32()? as u32;
        vocabulary.push(LabelEntry::new(id, r.string()?));
    }
    let regime = r.string()?;
    let selected_epoch = r.u32()? as u32;
    let curve_len = r.u32()?;
    let mut validation_curve = Vec::with_capacity(curve_len.min(1 << 16));
    for _ in 0..curve_len {
        validation_curve.push(r.0.read_f64::<LittleEndian>().map_err(io_err)?);
    }

    let shapes = config.param_shapes();
    let n_models = r.u32()?;
    let mut models = Vec::with_capacity(n_models.min(1 << 12));
    for _ in 0..n_models {
        let seed = r.0.read_u64::<LittleEndian>().map_err(io_err)?;
        let n_tensors = r.u32()?;
        if n_tensors != shapes.len() {
            return Err(Error::Checkpoint(format!(
                "model has {n_tensors} tensors, config implies {}",
                shapes.len()
            )));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for expected in &shapes {
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if &shape != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor shape {shape:?}, expected {expected:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.0.read_f32_into::<LittleEndian>(&mut data).map_err(io_err)?;
            tensors.push(Tensor::from_vec(&shape, data)?);
        }
        models.push(ModelParams::from_tensors(config.clone(), tensors, seed)?);
    }
    if (r.0.position() as usize) != raw.len() {
        return Err(Error::Checkpoint("trailing bytes after last model".into()));
    }
    let ck = Checkpoint {
        config,
        plan,
        vocabulary,
        regime,
        selected_epoch,
        validation_curve,
        models,
    };
    ck.validate()?;
    Ok(ck)
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ck)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&raw)
}
