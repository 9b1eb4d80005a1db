//! Functional compute core: sparsity-aware gather / matrix-multiply / scatter
//! over an IN-OUT map, with output-stationary and input-stationary schedules
//! and the postprocessing chain (batch-norm, ReLU, requantize).

use crate::mapsearch::InOutMap;
use crate::types::{
    Features, LayerSpec, OpKind, PostprocessStep, QuantParams, SparseTensor, WeightTensor,
};
use thiserror::Error;

/// Channel group width matching the 16-lane PE geometry.
pub const LANE_GROUP: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("map entry references index out of range (in {in_index}, out {out_index})")]
    MapInconsistent { in_index: u32, out_index: u32 },
    #[error("channel mismatch: spec {spec}, tensor {tensor}, weights {weights}")]
    ChannelMismatch { spec: usize, tensor: usize, weights: usize },
    #[error("input and weight tensors must share the same element mode")]
    ModeMismatch,
    #[error("quantized layers must include a requantize step")]
    MissingRequantize,
    #[error("accumulator bound exceeded: c_in {0} > 512")]
    AccumulatorBound(usize),
    #[error("quantization scales must be strictly positive")]
    InvalidQuant,
}

/// Per-voxel bit vector over input channels; bit c is set iff the activation
/// at channel c is non-zero. Popcounts are cached per 16-channel group.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    bits: Vec<u64>,
    channels: usize,
    group_pop: Vec<u16>,
}

impl SparsityMask {
    fn from_nonzero<T, F: Fn(&T) -> bool>(row: &[T], nonzero: F) -> Self {
        let channels = row.len();
        let mut bits = vec![0u64; channels.div_ceil(64)];
        let mut group_pop = vec![0u16; channels.div_ceil(LANE_GROUP)];
        for (c, v) in row.iter().enumerate() {
            if nonzero(v) {
                bits[c / 64] |= 1u64 << (c % 64);
                group_pop[c / LANE_GROUP] += 1;
            }
        }
        SparsityMask { bits, channels, group_pop }
    }

    pub fn from_row_f32(row: &[f32]) -> Self {
        Self::from_nonzero(row, |v| *v != 0.0)
    }

    pub fn from_row_i8(row: &[i8]) -> Self {
        Self::from_nonzero(row, |v| *v != 0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_set(&self, c: usize) -> bool {
        self.bits[c / 64] >> (c % 64) & 1 == 1
    }

    pub fn popcount(&self) -> u32 {
        self.bits.iter().map(|w| w.count_ones()).sum()
    }

    pub fn group_popcounts(&self) -> &[u16] {
        &self.group_pop
    }

    pub fn density(&self) -> f64 {
        if self.channels == 0 {
            return 0.0;
        }
        self.popcount() as f64 / self.channels as f64
    }

    /// True when every 16-channel group is fully populated.
    pub fn dense_at_group_granularity(&self) -> bool {
        self.group_pop.iter().enumerate().all(|(g, &p)| {
            let width = LANE_GROUP.min(self.channels - g * LANE_GROUP);
            p as usize == width
        })
    }
}

/// One mask per voxel of the input tensor.
pub fn build_masks(input: &SparseTensor) -> Vec<SparsityMask> {
    (0..input.len())
        .map(|i| match &input.features {
            Features::F32(_) => SparsityMask::from_row_f32(input.row_f32(i)),
            Features::I8(_) => SparsityMask::from_row_i8(input.row_i8(i)),
        })
        .collect()
}

/// Compacts an activation row and its matching weight columns down to the
/// non-zero channels, order-preserving.
pub fn gather_compact<T: Copy, W: Clone>(
    row: &[T],
    mask: &SparsityMask,
    w_cols: &[W],
) -> (Vec<T>, Vec<W>) {
    assert_eq!(row.len(), mask.channels());
    assert_eq!(row.len(), w_cols.len());
    let mut acts = Vec::with_capacity(mask.popcount() as usize);
    let mut cols = Vec::with_capacity(acts.capacity());
    for c in 0..row.len() {
        if mask.is_set(c) {
            acts.push(row[c]);
            cols.push(w_cols[c].clone());
        }
    }
    (acts, cols)
}

/// Applies the postprocessing chain to a float accumulator row in place.
/// Requantize is an int8-mode concern and is the identity here.
pub fn postprocess_f32(row: &mut [f32], chain: &[PostprocessStep]) {
    for step in chain {
        match step {
            PostprocessStep::BatchNorm { scale, bias } => {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = *v * scale[c] + bias[c];
                }
            }
            PostprocessStep::Relu => row.iter_mut().for_each(|v| *v = v.max(0.0)),
            PostprocessStep::Requantize => {}
        }
    }
}

/// Applies the chain to an i32 accumulator row and materializes int8 output.
/// Requantize multiplies by the scale product, rounds half-to-even and clamps
/// to [-128, 127].
pub fn postprocess_quant(acc: &[i32], chain: &[PostprocessStep], q: &QuantParams) -> Vec<i8> {
    let mut v: Vec<f32> = acc.iter().map(|&a| a as f32).collect();
    for step in chain {
        match step {
            PostprocessStep::BatchNorm { scale, bias } => {
                for (c, x) in v.iter_mut().enumerate() {
                    *x = *x * scale[c] + bias[c];
                }
            }
            PostprocessStep::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            PostprocessStep::Requantize => {
                let m = q.requant_multiplier();
                for x in v.iter_mut() {
                    *x = (*x * m).round_ties_even().clamp(-128.0, 127.0);
                }
            }
        }
    }
    v.into_iter().map(|x| x.clamp(-128.0, 127.0) as i8).collect()
}

/// Accumulation schedule. Output-stationary keeps partial sums resident and
/// streams inputs; input-stationary broadcasts one input row and scatters
/// partial sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataflow {
    OutputStationary,
    InputStationary,
}

impl Dataflow {
    /// Default selection by operator kind.
    pub fn for_op(op: OpKind) -> Dataflow {
        match op {
            OpKind::Subm3 | OpKind::Gconv2 => Dataflow::OutputStationary,
            OpKind::Gconv3 | OpKind::Tconv2 => Dataflow::InputStationary,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExecOptions {
    /// When false, the gather unit is bypassed and zero activations are
    /// multiplied like any other value. Outputs are identical either way.
    pub sparse_gather: bool,
    pub dataflow: Option<Dataflow>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions { sparse_gather: true, dataflow: None }
    }
}

/// Instrumentation from one layer execution.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExecStats {
    pub gathered_nonzero: u64,
    pub skipped_zero: u64,
    /// Accumulation operations; equals the map entry count on success.
    pub scatter_ops: u64,
}

/// Partial-sum buffer with per-row completion counters. A row is emitted
/// exactly once, when the last entry of its window has been accumulated.
pub struct PsumBuffer {
    remaining: Vec<u32>,
    emitted: Vec<bool>,
}

impl PsumBuffer {
    pub fn new(entries_per_row: Vec<u32>) -> Self {
        let n = entries_per_row.len();
        PsumBuffer { remaining: entries_per_row, emitted: vec![false; n] }
    }

    /// Records one accumulation into `row`; returns true when the row just
    /// completed and must be emitted.
    pub fn accumulate(&mut self, row: usize) -> bool {
        assert!(!self.emitted[row], "accumulation into an emitted row");
        assert!(self.remaining[row] > 0, "more entries than the window declared");
        self.remaining[row] -= 1;
        if self.remaining[row] == 0 {
            self.emitted[row] = true;
            true
        } else {
            false
        }
    }

    pub fn all_emitted(&self) -> bool {
        self.emitted
            .iter()
            .zip(&self.remaining)
            .all(|(&e, &r)| e || r == 0)
    }
}

fn check_shapes(
    input: &SparseTensor,
    w: &WeightTensor,
    m: &InOutMap,
    spec: &LayerSpec,
) -> Result<(), ExecError> {
    if spec.c_in != input.channels || spec.c_in != w.c_in || spec.c_out != w.c_out {
        return Err(ExecError::ChannelMismatch {
            spec: spec.c_in,
            tensor: input.channels,
            weights: w.c_in,
        });
    }
    if input.features.is_float() != w.data.is_float() {
        return Err(ExecError::ModeMismatch);
    }
    for e in &m.entries {
        if e.in_index as usize >= input.len()
            || e.out_index as usize >= m.out_coords.len()
            || e.offset_id as usize >= spec.op.kernel().tap_count()
        {
            return Err(ExecError::MapInconsistent { in_index: e.in_index, out_index: e.out_index });
        }
    }
    Ok(())
}

/// Entry processing order for a schedule; stable so repeated runs agree.
fn schedule(m: &InOutMap, dataflow: Dataflow) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m.entries.len()).collect();
    match dataflow {
        Dataflow::OutputStationary => order.sort_by_key(|&i| m.entries[i].out_index),
        Dataflow::InputStationary => order.sort_by_key(|&i| m.entries[i].in_index),
    }
    order
}

/// Runs one layer over its IN-OUT map. Output rows are ordered by
/// `m.out_coords`; each row is the sum of `W_delta * f_in` over the window's
/// entries followed by the postprocessing chain.
pub fn execute_layer(
    input: &SparseTensor,
    w: &WeightTensor,
    m: &InOutMap,
    spec: &LayerSpec,
    q: &QuantParams,
    opts: &ExecOptions,
) -> Result<SparseTensor, ExecError> {
    execute_layer_stats(input, w, m, spec, q, opts).map(|(t, _)| t)
}

/// [`execute_layer`] with gather/scatter instrumentation.
pub fn execute_layer_stats(
    input: &SparseTensor,
    w: &WeightTensor,
    m: &InOutMap,
    spec: &LayerSpec,
    q: &QuantParams,
    opts: &ExecOptions,
) -> Result<(SparseTensor, ExecStats), ExecError> {
    check_shapes(input, w, m, spec)?;
    let dataflow = opts.dataflow.unwrap_or_else(|| Dataflow::for_op(spec.op));
    let order = schedule(m, dataflow);
    let n_out = m.out_coords.len();
    let (c_in, c_out) = (spec.c_in, spec.c_out);

    let mut entries_per_row = vec![0u32; n_out];
    for e in &m.entries {
        entries_per_row[e.out_index as usize] += 1;
    }
    let mut psums = PsumBuffer::new(entries_per_row);
    let mut stats = ExecStats::default();
    let masks = if opts.sparse_gather { Some(build_masks(input)) } else { None };

    let features = match &input.features {
        Features::F32(_) => {
            let mut acc = vec![0.0f32; n_out * c_out];
            for &ei in &order {
                let e = &m.entries[ei];
                let f = input.row_f32(e.in_index as usize);
                let tap = e.offset_id as usize;
                let out = &mut acc[e.out_index as usize * c_out..(e.out_index as usize + 1) * c_out];
                for ci in 0..c_in {
                    let skip = match &masks {
                        Some(ms) => !ms[e.in_index as usize].is_set(ci),
                        None => false,
                    };
                    if skip {
                        stats.skipped_zero += 1;
                        continue;
                    }
                    if masks.is_some() {
                        stats.gathered_nonzero += 1;
                    }
                    let fv = f[ci];
                    for (co, o) in out.iter_mut().enumerate() {
                        *o += w.at_f32(co, ci, tap) * fv;
                    }
                }
                stats.scatter_ops += 1;
                psums.accumulate(e.out_index as usize);
            }
            let mut out = acc;
            for row in out.chunks_mut(c_out) {
                postprocess_f32(row, &spec.postprocess);
            }
            Features::F32(out)
        }
        Features::I8(_) => {
            // Bound so K^3 * c_in * 127^2 stays below 2^31.
            if c_in > 512 {
                return Err(ExecError::AccumulatorBound(c_in));
            }
            if !spec.postprocess.iter().any(|s| matches!(s, PostprocessStep::Requantize)) {
                return Err(ExecError::MissingRequantize);
            }
            q.validate().map_err(|_| ExecError::InvalidQuant)?;
            let mut acc = vec![0i32; n_out * c_out];
            for &ei in &order {
                let e = &m.entries[ei];
                let f = input.row_i8(e.in_index as usize);
                let tap = e.offset_id as usize;
                let out = &mut acc[e.out_index as usize * c_out..(e.out_index as usize + 1) * c_out];
                for ci in 0..c_in {
                    let skip = match &masks {
                        Some(ms) => !ms[e.in_index as usize].is_set(ci),
                        None => false,
                    };
                    if skip {
                        stats.skipped_zero += 1;
                        continue;
                    }
                    if masks.is_some() {
                        stats.gathered_nonzero += 1;
                    }
                    let fv = f[ci] as i32;
                    for (co, o) in out.iter_mut().enumerate() {
                        *o += w.at_i8(co, ci, tap) as i32 * fv;
                    }
                }
                stats.scatter_ops += 1;
                psums.accumulate(e.out_index as usize);
            }
            let mut out = Vec::with_capacity(n_out * c_out);
            for row in acc.chunks(c_out) {
                out.extend(postprocess_quant(row, &spec.postprocess, q));
            }
            Features::I8(out)
        }
    };

    debug_assert!(psums.all_emitted());
    debug_assert_eq!(stats.scatter_ops, m.entries.len() as u64);
    Ok((SparseTensor::new(m.out_coords.clone(), features, c_out), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapsearch::MapEntry;
    use crate::types::{Coordinate, KernelSize};

    fn one_entry_map() -> InOutMap {
        InOutMap {
            entries: vec![MapEntry { in_index: 0, out_index: 0, offset_id: 13 }],
            out_coords: vec![Coordinate::new(0, 0, 0)],
        }
    }

    fn weights_center_column(vals: &[f32], c_in: usize) -> WeightTensor {
        // 1 output channel; only the K3 center tap is populated.
        let taps = KernelSize::K3.tap_count();
        let mut data = vec![0.0; c_in * taps];
        for (ci, &v) in vals.iter().enumerate() {
            data[ci * taps + 13] = v;
        }
        WeightTensor { kernel: KernelSize::K3, c_out: 1, c_in, data: Features::F32(data), scale: 1.0 }
    }

    fn input_row(vals: &[f32]) -> SparseTensor {
        SparseTensor::new(
            vec![Coordinate::new(0, 0, 0)],
            Features::F32(vals.to_vec()),
            vals.len(),
        )
    }

    #[test]
    fn single_entry_dot_product() {
        let t = input_row(&[1.0, 2.0]);
        let w = weights_center_column(&[3.0, 4.0], 2);
        let spec = LayerSpec::new(OpKind::Subm3, 2, 1);
        let out = execute_layer(&t, &w, &one_entry_map(), &spec, &QuantParams::default(), &ExecOptions::default()).unwrap();
        assert_eq!(out.row_f32(0), &[11.0]);
    }

    #[test]
    fn zero_skip_does_not_change_value() {
        let t = input_row(&[0.0, 2.0]);
        let w = weights_center_column(&[3.0, 4.0], 2);
        let spec = LayerSpec::new(OpKind::Subm3, 2, 1);
        let q = QuantParams::default();
        let (out, stats) =
            execute_layer_stats(&t, &w, &one_entry_map(), &spec, &q, &ExecOptions::default()).unwrap();
        assert_eq!(out.row_f32(0), &[8.0]);
        assert_eq!(stats.gathered_nonzero, 1);
        assert_eq!(stats.skipped_zero, 1);
        let dense = execute_layer(
            &t, &w, &one_entry_map(), &spec, &q,
            &ExecOptions { sparse_gather: false, ..Default::default() },
        ).unwrap();
        assert_eq!(dense.row_f32(0), out.row_f32(0));
    }

    #[test]
    fn channel_mismatch_detected() {
        let t = input_row(&[1.0]);
        let w = weights_center_column(&[3.0, 4.0], 2);
        let spec = LayerSpec::new(OpKind::Subm3, 2, 1);
        let err = execute_layer(&t, &w, &one_entry_map(), &spec, &QuantParams::default(), &ExecOptions::default());
        assert!(matches!(err, Err(ExecError::ChannelMismatch { .. })));
    }

    #[test]
    fn map_out_of_range_detected() {
        let t = input_row(&[1.0, 1.0]);
        let w = weights_center_column(&[1.0, 1.0], 2);
        let spec = LayerSpec::new(OpKind::Subm3, 2, 1);
        let m = InOutMap {
            entries: vec![MapEntry { in_index: 5, out_index: 0, offset_id: 13 }],
            out_coords: vec![Coordinate::new(0, 0, 0)],
        };
        let err = execute_layer(&t, &w, &m, &spec, &QuantParams::default(), &ExecOptions::default());
        assert!(matches!(err, Err(ExecError::MapInconsistent { .. })));
    }

    #[test]
    fn masks_count_nonzeros() {
        let m = SparsityMask::from_row_f32(&[0.0, 0.0, 0.0]);
        assert_eq!(m.popcount(), 0);
        let m = SparsityMask::from_row_f32(&[1.0, 0.0, 3.0, 0.0]);
        assert_eq!(m.popcount(), 2);
        assert!(m.is_set(0) && !m.is_set(1) && m.is_set(2) && !m.is_set(3));
        assert_eq!(m.density(), 0.5);
    }

    #[test]
    fn mask_density_matches_direct_count() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let row: Vec<i8> = (0..64)
                .map(|_| rng.gen_range(-128i16..=127).max(0) as i8)
                .collect();
            let mask = SparsityMask::from_row_i8(&row);
            let direct = row.iter().filter(|&&v| v != 0).count() as u32;
            assert_eq!(mask.popcount(), direct);
            assert!(mask.density() >= 0.0 && mask.density() <= 1.0);
        }
    }

    #[test]
    fn gather_compact_identity_and_skip() {
        let mask = SparsityMask::from_row_f32(&[1.0, 2.0]);
        let (a, c) = gather_compact(&[1.0, 2.0], &mask, &["c0", "c1"]);
        assert_eq!(a, vec![1.0, 2.0]);
        assert_eq!(c, vec!["c0", "c1"]);

        let mask = SparsityMask::from_row_f32(&[0.0, 2.0]);
        let (a, c) = gather_compact(&[0.0, 2.0], &mask, &["c0", "c1"]);
        assert_eq!(a, vec![2.0]);
        assert_eq!(c, vec!["c1"]);
    }

    #[test]
    fn compacted_dot_product_matches_full() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let row: Vec<f32> = (0..24)
                .map(|_| if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(-4.0..4.0) })
                .collect();
            let cols: Vec<f32> = (0..24).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let mask = SparsityMask::from_row_f32(&row);
            let (a, c) = gather_compact(&row, &mask, &cols);
            let compact: f64 = a.iter().zip(&c).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
            let full: f64 = row.iter().zip(&cols).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
            assert!((compact - full).abs() < 1e-9);
        }
    }

    #[test]
    fn postprocess_relu_and_requantize() {
        let mut row = [-5.0f32, 7.0];
        postprocess_f32(&mut row, &[PostprocessStep::Relu]);
        assert_eq!(row, [0.0, 7.0]);

        // scale product 0.5 on accumulator 100 -> 50.
        let q = QuantParams { input_scale: 0.5, weight_scale: 1.0, output_scale: 1.0 };
        let out = postprocess_quant(&[100], &[PostprocessStep::Requantize], &q);
        assert_eq!(out, vec![50]);

        // Empty chain is the identity on float rows.
        let mut row = [1.5f32, -2.5];
        postprocess_f32(&mut row, &[]);
        assert_eq!(row, [1.5, -2.5]);
    }

    #[test]
    fn requantize_rounds_half_to_even_and_clamps() {
        let q = QuantParams { input_scale: 0.5, weight_scale: 1.0, output_scale: 1.0 };
        assert_eq!(postprocess_quant(&[3], &[PostprocessStep::Requantize], &q), vec![2]); // 1.5 -> 2
        assert_eq!(postprocess_quant(&[5], &[PostprocessStep::Requantize], &q), vec![2]); // 2.5 -> 2
        assert_eq!(postprocess_quant(&[1000], &[PostprocessStep::Requantize], &q), vec![127]);
        assert_eq!(postprocess_quant(&[-1000], &[PostprocessStep::Requantize], &q), vec![-128]);
    }

    #[test]
    fn psum_rows_emit_exactly_once() {
        let mut b = PsumBuffer::new(vec![2, 1]);
        assert!(!b.accumulate(0));
        assert!(b.accumulate(1));
        assert!(b.accumulate(0));
        assert!(b.all_emitted());
    }
}
