//! On-disk formats. All binary formats are little-endian with a 4-byte magic
//! and a u16 version; unknown versions are rejected. The network description
//! is JSON and references weight blobs by byte offset into an SPWT file.

use crate::mapsearch::{InOutMap, MapEntry};
use crate::types::{
    kernel_offsets, validate_tensor, Coordinate, Features, KernelSize, LayerSpec, OpKind,
    QuantParams, SparseTensor, WeightTensor,
};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const SPVX_MAGIC: &[u8; 4] = b"SPVX";
pub const SPMP_MAGIC: &[u8; 4] = b"SPMP";
pub const SPWT_MAGIC: &[u8; 4] = b"SPWT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u16),
    #[error("file truncated at byte offset {0}")]
    Truncated(usize),
    #[error("trailing bytes after record {0}")]
    TrailingBytes(usize),
    #[error("coordinate ({0}, {1}, {2}) outside declared extent")]
    CoordOutOfExtent(u16, u16, u16),
    #[error("scene invalid: {0}")]
    BadTensor(#[from] crate::types::TensorError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("network invalid: {0}")]
    BadNetwork(String),
    #[error("bad field value: {0}")]
    BadValue(String),
}

/// A scene: sparse tensor plus its declared grid extent.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub tensor: SparseTensor,
    pub extent: [u16; 3],
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), FormatError> {
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(v));
        }
        Ok(())
    }

    fn done(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::TrailingBytes(self.pos));
        }
        Ok(())
    }
}

fn header(out: &mut Vec<u8>, magic: &[u8; 4]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
}

pub fn encode_scene(scene: &SceneFile) -> Vec<u8> {
    let t = &scene.tensor;
    let float = matches!(t.features, Features::F32(_));
    let mut out = Vec::new();
    header(&mut out, SPVX_MAGIC);
    out.push(float as u8);
    out.extend_from_slice(&(t.coords.len() as u64).to_le_bytes());
    out.extend_from_slice(&(t.channels as u16).to_le_bytes());
    for e in scene.extent {
        out.extend_from_slice(&e.to_le_bytes());
    }
    for (i, c) in t.coords.iter().enumerate() {
        out.extend_from_slice(&c.x.to_le_bytes());
        out.extend_from_slice(&c.y.to_le_bytes());
        out.extend_from_slice(&c.z.to_le_bytes());
        match &t.features {
            Features::F32(v) => {
                for x in &v[i * t.channels..(i + 1) * t.channels] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Features::I8(v) => {
                for x in &v[i * t.channels..(i + 1) * t.channels] {
                    out.push(*x as u8);
                }
            }
        }
    }
    out
}

pub fn decode_scene(buf: &[u8]) -> Result<SceneFile, FormatError> {
    let mut c = Cursor::new(buf);
    c.magic(SPVX_MAGIC)?;
    c.version()?;
    let flags = c.u8()?;
    if flags > 1 {
        return Err(FormatError::BadValue(format!("unknown flag bits {flags:#x}")));
    }
    let float = flags & 1 != 0;
    let n = c.u64()? as usize;
    let channels = c.u16()? as usize;
    let extent = [c.u16()?, c.u16()?, c.u16()?];
    if channels == 0 {
        return Err(FormatError::BadValue("channel count must be positive".into()));
    }
    let mut coords = Vec::with_capacity(n);
    let mut f32s = Vec::new();
    let mut i8s = Vec::new();
    for _ in 0..n {
        let (x, y, z) = (c.u16()?, c.u16()?, c.u16()?);
        if x >= extent[0] || y >= extent[1] || z >= extent[2] {
            return Err(FormatError::CoordOutOfExtent(x, y, z));
        }
        coords.push(Coordinate::new(x, y, z));
        if float {
            for _ in 0..channels {
                f32s.push(c.f32()?);
            }
        } else {
            for _ in 0..channels {
                i8s.push(c.u8()? as i8);
            }
        }
    }
    c.done()?;
    let features = if float { Features::F32(f32s) } else { Features::I8(i8s) };
    let tensor = SparseTensor { coords, features, channels };
    validate_tensor(&tensor)?;
    Ok(SceneFile { tensor, extent })
}

pub fn write_scene(path: &Path, scene: &SceneFile) -> Result<(), FormatError> {
    Ok(std::fs::write(path, encode_scene(scene))?)
}

pub fn read_scene(path: &Path) -> Result<SceneFile, FormatError> {
    decode_scene(&std::fs::read(path)?)
}

pub fn encode_map(map: &InOutMap) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, SPMP_MAGIC);
    out.extend_from_slice(&(map.entries.len() as u64).to_le_bytes());
    for e in &map.entries {
        out.extend_from_slice(&e.in_index.to_le_bytes());
        out.extend_from_slice(&e.out_index.to_le_bytes());
        out.push(e.offset_id);
    }
    out
}

/// Reads map entries. Output coordinates are not stored; they are a property
/// of the tensor the map was searched on.
pub fn decode_map(buf: &[u8]) -> Result<Vec<MapEntry>, FormatError> {
    let mut c = Cursor::new(buf);
    c.magic(SPMP_MAGIC)?;
    c.version()?;
    let n = c.u64()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        entries.push(MapEntry { in_index: c.u32()?, out_index: c.u32()?, offset_id: c.u8()? });
    }
    c.done()?;
    Ok(entries)
}

pub fn write_map(path: &Path, map: &InOutMap) -> Result<(), FormatError> {
    Ok(std::fs::write(path, encode_map(map))?)
}

pub fn read_map(path: &Path) -> Result<Vec<MapEntry>, FormatError> {
    decode_map(&std::fs::read(path)?)
}

/// Appends one weight tensor to an SPWT blob being built and returns its byte
/// offset for the network file.
pub fn append_weights(blob: &mut Vec<u8>, w: &WeightTensor) -> u64 {
    if blob.is_empty() {
        header(blob, SPWT_MAGIC);
    }
    let offset = blob.len() as u64;
    blob.push(match w.kernel {
        KernelSize::K2 => 2,
        KernelSize::K3 => 3,
    });
    blob.push(matches!(w.data, Features::F32(_)) as u8);
    blob.extend_from_slice(&(w.c_out as u32).to_le_bytes());
    blob.extend_from_slice(&(w.c_in as u32).to_le_bytes());
    blob.extend_from_slice(&w.scale.to_le_bytes());
    match &w.data {
        Features::F32(v) => {
            for x in v {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        Features::I8(v) => blob.extend(v.iter().map(|x| *x as u8)),
    }
    offset
}

/// Reads one weight tensor at the given offset of an SPWT blob.
pub fn read_weights_at(buf: &[u8], offset: u64) -> Result<WeightTensor, FormatError> {
    let mut head = Cursor::new(buf);
    head.magic(SPWT_MAGIC)?;
    head.version()?;
    if (offset as usize) < head.pos || offset as usize >= buf.len() {
        return Err(FormatError::BadValue(format!("weight offset {offset} out of range")));
    }
    let mut c = Cursor::new(buf);
    c.pos = offset as usize;
    let kernel = match c.u8()? {
        2 => KernelSize::K2,
        3 => KernelSize::K3,
        k => return Err(FormatError::BadValue(format!("bad kernel size {k}"))),
    };
    let float = match c.u8()? {
        0 => false,
        1 => true,
        f => return Err(FormatError::BadValue(format!("bad weight mode flag {f}"))),
    };
    let c_out = c.u32()? as usize;
    let c_in = c.u32()? as usize;
    let scale = c.f32()?;
    let n = kernel_offsets(kernel).len() * c_out * c_in;
    let data = if float {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(c.f32()?);
        }
        Features::F32(v)
    } else {
        Features::I8(c.take(n)?.iter().map(|b| *b as i8).collect())
    };
    Ok(WeightTensor { kernel, c_out, c_in, data, scale })
}

/// One layer of a network file: layer description plus where its weights live
/// in the companion SPWT file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkLayer {
    #[serde(flatten)]
    pub spec: LayerSpec,
    pub weight_offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    /// Reference f32 mode when true; int8 quantized otherwise.
    pub float: bool,
    pub layers: Vec<NetworkLayer>,
}

impl NetworkFile {
    /// Checks channel chaining and Tconv2 pairing.
    pub fn validate(&self) -> Result<(), FormatError> {
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].spec.c_out != w[1].spec.c_in {
                return Err(FormatError::BadNetwork(format!(
                    "layer {i} c_out {} != layer {} c_in {}",
                    w[0].spec.c_out,
                    i + 1,
                    w[1].spec.c_in
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            match (l.spec.op, l.spec.paired_layer) {
                (OpKind::Tconv2, Some(p)) => {
                    if p >= i || self.layers[p].spec.op != OpKind::Gconv2 {
                        return Err(FormatError::BadNetwork(format!(
                            "layer {i} (tconv2) must pair with an earlier gconv2, got {p}"
                        )));
                    }
                }
                (OpKind::Tconv2, None) => {
                    return Err(FormatError::BadNetwork(format!(
                        "layer {i} (tconv2) missing paired_layer"
                    )));
                }
                (_, Some(_)) => {
                    return Err(FormatError::BadNetwork(format!(
                        "layer {i} is not tconv2 but declares paired_layer"
                    )));
                }
                _ => {}
            }
            if !self.float && l.quant.is_none() {
                return Err(FormatError::BadNetwork(format!(
                    "layer {i} needs quant params in int8 mode"
                )));
            }
        }
        Ok(())
    }
}

pub fn write_network(path: &Path, net: &NetworkFile) -> Result<(), FormatError> {
    net.validate()?;
    Ok(std::fs::write(path, serde_json::to_vec_pretty(net)?)?)
}

pub fn read_network(path: &Path) -> Result<NetworkFile, FormatError> {
    let net: NetworkFile = serde_json::from_slice(&std::fs::read(path)?)?;
    net.validate()?;
    Ok(net)
}
