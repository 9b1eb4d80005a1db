//! Canonical data model shared by every module: sparse tensors in COO form,
//! weight tensors, layer descriptions and quantization parameters.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Voxel grid coordinate. Each component fits in 16 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coordinate {
    pub x: u16,
    pub y: u16,
    pub z: u16,
}

impl Coordinate {
    pub fn new(x: u16, y: u16, z: u16) -> Self {
        Coordinate { x, y, z }
    }

    /// Component-wise offset by a signed delta. Returns `None` when any
    /// component would leave the u16 range.
    pub fn offset(&self, delta: Offset) -> Option<Coordinate> {
        let x = self.x as i32 + delta.dx;
        let y = self.y as i32 + delta.dy;
        let z = self.z as i32 + delta.dz;
        if x < 0 || y < 0 || z < 0 || x > u16::MAX as i32 || y > u16::MAX as i32 || z > u16::MAX as i32 {
            return None;
        }
        Some(Coordinate::new(x as u16, y as u16, z as u16))
    }

    /// Packs the coordinate into a 48-bit key (z high, x low).
    pub fn packed(&self) -> u64 {
        ((self.z as u64) << 32) | ((self.y as u64) << 16) | self.x as u64
    }
}

/// Signed kernel offset from the window anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Offset {
    pub dx: i32,
    pub dy: i32,
    pub dz: i32,
}

impl Offset {
    pub fn new(dx: i32, dy: i32, dz: i32) -> Self {
        Offset { dx, dy, dz }
    }

    pub fn neg(&self) -> Offset {
        Offset::new(-self.dx, -self.dy, -self.dz)
    }

    pub fn is_center(&self) -> bool {
        self.dx == 0 && self.dy == 0 && self.dz == 0
    }
}

/// Kernel spatial extent. Only 2 and 3 are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelSize {
    K2,
    K3,
}

impl KernelSize {
    pub fn extent(&self) -> i32 {
        match self {
            KernelSize::K2 => 2,
            KernelSize::K3 => 3,
        }
    }

    pub fn tap_count(&self) -> usize {
        let k = self.extent() as usize;
        k * k * k
    }

    fn component_range(&self) -> std::ops::RangeInclusive<i32> {
        match self {
            KernelSize::K2 => 0..=1,
            KernelSize::K3 => -1..=1,
        }
    }
}

/// All kernel offsets in id order: lexicographic over (dz, dy, dx).
/// For K=3 this puts the center at id 13.
pub fn kernel_offsets(k: KernelSize) -> Vec<Offset> {
    let mut out = Vec::with_capacity(k.tap_count());
    for dz in k.component_range() {
        for dy in k.component_range() {
            for dx in k.component_range() {
                out.push(Offset::new(dx, dy, dz));
            }
        }
    }
    out
}

/// Maps an offset to its id under the lexicographic (dz, dy, dx) numbering.
/// Returns `None` when the offset lies outside the kernel.
pub fn offset_id(k: KernelSize, delta: Offset) -> Option<u8> {
    let range = k.component_range();
    if !range.contains(&delta.dx) || !range.contains(&delta.dy) || !range.contains(&delta.dz) {
        return None;
    }
    let e = k.extent();
    let lo = *range.start();
    Some((((delta.dz - lo) * e + (delta.dy - lo)) * e + (delta.dx - lo)) as u8)
}

/// Inverse of [`offset_id`].
pub fn offset_from_id(k: KernelSize, id: u8) -> Option<Offset> {
    if id as usize >= k.tap_count() {
        return None;
    }
    let e = k.extent();
    let lo = *k.component_range().start();
    let id = id as i32;
    Some(Offset::new(id % e + lo, (id / e) % e + lo, id / (e * e) + lo))
}

/// Feature storage: 32-bit float in reference mode, int8 in quantized mode.
/// Row-major, channel-contiguous per voxel.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl Features {
    pub fn len(&self) -> usize {
        match self {
            Features::F32(v) => v.len(),
            Features::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_float(&self) -> bool {
        matches!(self, Features::F32(_))
    }
}

/// COO sparse tensor: voxel coordinates plus per-voxel feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    pub coords: Vec<Coordinate>,
    pub features: Features,
    pub channels: usize,
}

impl SparseTensor {
    pub fn new(coords: Vec<Coordinate>, features: Features, channels: usize) -> Self {
        SparseTensor { coords, features, channels }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row_f32(&self, i: usize) -> &[f32] {
        match &self.features {
            Features::F32(v) => &v[i * self.channels..(i + 1) * self.channels],
            Features::I8(_) => panic!("row_f32 on quantized tensor"),
        }
    }

    pub fn row_i8(&self, i: usize) -> &[i8] {
        match &self.features {
            Features::I8(v) => &v[i * self.channels..(i + 1) * self.channels],
            Features::F32(_) => panic!("row_i8 on float tensor"),
        }
    }
}

/// Weight layout: `c_out` x `c_in` x K^3 values, indexed `[co][ci][offset_id]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub kernel: KernelSize,
    pub c_out: usize,
    pub c_in: usize,
    pub data: Features,
    /// Symmetric per-tensor scale; zero point is fixed at 0.
    pub scale: f32,
}

impl WeightTensor {
    pub fn taps(&self) -> usize {
        self.kernel.tap_count()
    }

    fn idx(&self, co: usize, ci: usize, tap: usize) -> usize {
        (co * self.c_in + ci) * self.taps() + tap
    }

    pub fn at_f32(&self, co: usize, ci: usize, tap: usize) -> f32 {
        match &self.data {
            Features::F32(v) => v[self.idx(co, ci, tap)],
            Features::I8(_) => panic!("at_f32 on quantized weights"),
        }
    }

    pub fn at_i8(&self, co: usize, ci: usize, tap: usize) -> i8 {
        match &self.data {
            Features::I8(v) => v[self.idx(co, ci, tap)],
            Features::F32(_) => panic!("at_i8 on float weights"),
        }
    }
}

/// Supported layer operators. Kernel size and stride follow from the operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Subm3,
    Gconv3,
    Gconv2,
    Tconv2,
}

impl OpKind {
    pub fn kernel(&self) -> KernelSize {
        match self {
            OpKind::Subm3 | OpKind::Gconv3 => KernelSize::K3,
            OpKind::Gconv2 | OpKind::Tconv2 => KernelSize::K2,
        }
    }

    pub fn stride(&self) -> u32 {
        match self {
            OpKind::Subm3 => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OpKind::Subm3 => "subm3",
            OpKind::Gconv3 => "gconv3",
            OpKind::Gconv2 => "gconv2",
            OpKind::Tconv2 => "tconv2",
        };
        f.write_str(s)
    }
}

/// One step of the per-layer postprocessing chain, applied in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PostprocessStep {
    /// Per-channel affine: `v*scale + bias`.
    BatchNorm { scale: Vec<f32>, bias: Vec<f32> },
    Relu,
    /// Int8 requantization; identity in reference (float) mode.
    Requantize,
}

/// Layer description. Kernel/stride are implied by `op`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub op: OpKind,
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default)]
    pub postprocess: Vec<PostprocessStep>,
    /// Tconv2 only: index of the Gconv2 layer whose map is reused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_layer: Option<usize>,
}

impl LayerSpec {
    pub fn new(op: OpKind, c_in: usize, c_out: usize) -> Self {
        LayerSpec { op, c_in, c_out, postprocess: Vec::new(), paired_layer: None }
    }
}

/// Symmetric per-tensor quantization parameters; accumulators are i32.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub input_scale: f32,
    pub weight_scale: f32,
    pub output_scale: f32,
}

impl Default for QuantParams {
    fn default() -> Self {
        QuantParams { input_scale: 1.0, weight_scale: 1.0, output_scale: 1.0 }
    }
}

impl QuantParams {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.input_scale <= 0.0 || self.weight_scale <= 0.0 || self.output_scale <= 0.0 {
            return Err(TensorError::InvalidScale);
        }
        Ok(())
    }

    /// The requantization multiplier applied to i32 accumulators.
    pub fn requant_multiplier(&self) -> f32 {
        self.input_scale * self.weight_scale / self.output_scale
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("duplicate coordinate at indices {0} and {1}")]
    DuplicateCoordinate(usize, usize),
    #[error("feature rows ({rows}) do not match coordinate count ({coords})")]
    ShapeMismatch { coords: usize, rows: usize },
    #[error("quantization scales must be strictly positive")]
    InvalidScale,
}

/// Checks the `SparseTensor` invariants: unique coordinates and a feature row
/// per coordinate. Duplicates are reported with both indices.
pub fn validate_tensor(t: &SparseTensor) -> Result<(), TensorError> {
    if t.channels == 0 || t.features.len() % t.channels != 0 {
        return Err(TensorError::ShapeMismatch { coords: t.coords.len(), rows: 0 });
    }
    let rows = t.features.len() / t.channels;
    if rows != t.coords.len() {
        return Err(TensorError::ShapeMismatch { coords: t.coords.len(), rows });
    }
    let mut seen: HashMap<u64, usize> = HashMap::with_capacity(t.coords.len());
    for (i, c) in t.coords.iter().enumerate() {
        if let Some(&first) = seen.get(&c.packed()) {
            return Err(TensorError::DuplicateCoordinate(first, i));
        }
        seen.insert(c.packed(), i);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(coords: Vec<Coordinate>, rows: usize, channels: usize) -> SparseTensor {
        SparseTensor::new(coords, Features::F32(vec![0.0; rows * channels]), channels)
    }

    #[test]
    fn minimal_valid_tensor() {
        let t = tensor(vec![Coordinate::new(0, 0, 0)], 1, 4);
        assert!(validate_tensor(&t).is_ok());
    }

    #[test]
    fn duplicate_coordinate_reported_with_indices() {
        let t = tensor(vec![Coordinate::new(1, 2, 3), Coordinate::new(1, 2, 3)], 2, 1);
        assert_eq!(validate_tensor(&t), Err(TensorError::DuplicateCoordinate(0, 1)));
    }

    #[test]
    fn feature_row_count_mismatch() {
        let t = tensor(vec![Coordinate::new(0, 0, 0), Coordinate::new(1, 0, 0)], 3, 1);
        assert_eq!(
            validate_tensor(&t),
            Err(TensorError::ShapeMismatch { coords: 2, rows: 3 })
        );
    }

    #[test]
    fn offset_ids_are_lexicographic_in_zyx() {
        // K=3 center is id 13.
        assert_eq!(offset_id(KernelSize::K3, Offset::new(0, 0, 0)), Some(13));
        assert_eq!(offset_id(KernelSize::K3, Offset::new(-1, -1, -1)), Some(0));
        assert_eq!(offset_id(KernelSize::K3, Offset::new(1, 1, 1)), Some(26));
        // K=2 spans {0,1}^3.
        assert_eq!(offset_id(KernelSize::K2, Offset::new(0, 0, 0)), Some(0));
        assert_eq!(offset_id(KernelSize::K2, Offset::new(1, 1, 1)), Some(7));
        assert_eq!(offset_id(KernelSize::K2, Offset::new(-1, 0, 0)), None);
    }

    #[test]
    fn offset_id_round_trip() {
        for k in [KernelSize::K2, KernelSize::K3] {
            for (id, off) in kernel_offsets(k).iter().enumerate() {
                assert_eq!(offset_id(k, *off), Some(id as u8));
                assert_eq!(offset_from_id(k, id as u8), Some(*off));
            }
            assert_eq!(kernel_offsets(k).len(), k.tap_count());
        }
    }

    #[test]
    fn layer_kind_implies_kernel_and_stride() {
        assert_eq!((OpKind::Subm3.kernel(), OpKind::Subm3.stride()), (KernelSize::K3, 1));
        assert_eq!((OpKind::Gconv3.kernel(), OpKind::Gconv3.stride()), (KernelSize::K3, 2));
        assert_eq!((OpKind::Gconv2.kernel(), OpKind::Gconv2.stride()), (KernelSize::K2, 2));
        assert_eq!((OpKind::Tconv2.kernel(), OpKind::Tconv2.stride()), (KernelSize::K2, 2));
    }

    #[test]
    fn quant_params_reject_non_positive_scales() {
        let mut q = QuantParams::default();
        assert!(q.validate().is_ok());
        q.weight_scale = 0.0;
        assert!(q.validate().is_err());
    }
}
