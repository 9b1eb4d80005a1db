//! Whole-network runs: per-layer map search (or stored-map reuse for Tconv2),
//! functional execution, optional oracle cross-checks, and cycle/energy
//! accounting rolled up into one report.

use crate::exec::{build_masks, execute_layer, ExecError, ExecOptions};
use crate::formats::{read_weights_at, FormatError, NetworkFile, SceneFile};
use crate::mapsearch::{transpose_map, search_traced, InOutMap, SearchError, SearchTrace, VoxelCost};
use crate::mem::{
    energy_report, CacheConfig, EnergyReport, EnergyTable, MemError, TrafficLedger, WeightCache,
    WeightGeometry,
};
use crate::oracle::{dense_oracle_conv, OracleError, MAX_ORACLE_EXTENT};
use crate::sim::{
    simulate_pipeline, ComputeTrace, PipelineConfig, PipelineMode, SimError, SimReport,
};
use crate::types::{
    Coordinate, Features, KernelSize, OpKind, SparseTensor, TensorError, validate_tensor,
};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("oracle check failed at layer {layer}: {detail}")]
    OracleMismatch { layer: usize, detail: String },
    #[error("oracle unavailable at layer {layer}: {source}")]
    OracleUnavailable { layer: usize, source: OracleError },
    #[error("layer {layer}: weight kernel does not match the operator")]
    KernelMismatch { layer: usize },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub mode: PipelineMode,
    /// Sparse (gather-compacted) compute when true; dense PE occupancy when
    /// false. Functional output is identical either way.
    pub sparse_compute: bool,
    /// Total weight-cache capacity in bytes; no cache model when `None`.
    pub cache_total_bytes: Option<usize>,
    /// Equal per-partition split instead of the prioritized allocation.
    pub uniform_cache: bool,
    /// Cross-check every layer against the dense oracle (float mode only).
    pub oracle: bool,
    pub energy: EnergyTable,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pipeline: PipelineConfig::default(),
            mode: PipelineMode::Fine,
            sparse_compute: true,
            cache_total_bytes: None,
            uniform_cache: false,
            oracle: false,
            energy: EnergyTable::default(),
        }
    }
}

/// Full-run report; serialized as the `run` command's JSON output.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub layers: Vec<SimReport>,
    pub total_cycles: u64,
    pub ledger: TrafficLedger,
    pub energy: EnergyReport,
}

pub struct RunResult {
    pub output: SceneFile,
    pub report: RunReport,
}

/// A stored map is fetched, not searched: one dispatch cycle, after which all
/// entries stream into the map table.
fn stored_map_trace(map: &InOutMap) -> SearchTrace {
    let mut t = SearchTrace::empty(OpKind::Tconv2);
    t.voxels.push(VoxelCost {
        query_cycles: 1,
        candidates: 0,
        cross_block: 0,
        entries: map.entries.len() as u32,
    });
    t
}

/// Output grid extent of a stride-2 layer. K2 windows start at even sites
/// (ceil(e/2) sites per axis); K3 windows reach one site further.
fn strided_extent(extent: [u16; 3], k: KernelSize) -> [u16; 3] {
    let f = |e: u16| match k {
        KernelSize::K2 => e.div_ceil(2),
        KernelSize::K3 => e / 2 + 1,
    };
    [f(extent[0]), f(extent[1]), f(extent[2])]
}

fn rel_close(a: f32, b: f32) -> bool {
    (a - b).abs() <= 1e-4 * b.abs().max(1.0)
}

fn oracle_check(
    layer: usize,
    input: &SparseTensor,
    w: &crate::types::WeightTensor,
    spec: &crate::types::LayerSpec,
    extent: [u16; 3],
    produced: &SparseTensor,
    out_coords: &[Coordinate],
) -> Result<(), DriverError> {
    let ext = Coordinate::new(extent[0], extent[1], extent[2]);
    let expected = dense_oracle_conv(input, w, spec, ext)
        .map_err(|source| DriverError::OracleUnavailable { layer, source })?;
    let mismatch = |detail: String| DriverError::OracleMismatch { layer, detail };
    // Engine outputs must be a subset of oracle sites (equal for all ops but
    // Tconv2, whose stored map only targets the original fine voxels).
    for (i, c) in out_coords.iter().enumerate() {
        let Some(j) = expected.coords.iter().position(|e| e == c) else {
            return Err(mismatch(format!("engine emitted unexpected site {c:?}")));
        };
        let got = produced.row_f32(i);
        let want = expected.row_f32(j);
        for (ch, (a, b)) in got.iter().zip(want).enumerate() {
            if !rel_close(*a, *b) {
                return Err(mismatch(format!(
                    "site {c:?} channel {ch}: engine {a} vs oracle {b}"
                )));
            }
        }
    }
    if spec.op != OpKind::Tconv2 && expected.coords.len() != out_coords.len() {
        return Err(mismatch(format!(
            "site count {} vs oracle {}",
            out_coords.len(),
            expected.coords.len()
        )));
    }
    Ok(())
}

/// Runs every layer of `net` over `scene`, returning the output scene plus
/// the combined timing/traffic/energy report.
pub fn run_network(
    scene: &SceneFile,
    net: &NetworkFile,
    weight_blob: &[u8],
    cfg: &RunConfig,
) -> Result<RunResult, DriverError> {
    net.validate()?;
    validate_tensor(&scene.tensor)?;

    let mut tensor = scene.tensor.clone();
    let mut extent = scene.extent;
    let mut ledger = TrafficLedger::default();
    let mut reports = Vec::new();
    // Gconv2 maps and layer-input geometry kept for Tconv2 reuse.
    let mut stored: Vec<Option<(InOutMap, Vec<Coordinate>, [u16; 3])>> = Vec::new();

    for (li, layer) in net.layers.iter().enumerate() {
        let spec = &layer.spec;
        let w = read_weights_at(weight_blob, layer.weight_offset)?;
        if w.kernel != spec.op.kernel() || w.c_in != spec.c_in || w.c_out != spec.c_out {
            return Err(DriverError::KernelMismatch { layer: li });
        }

        let (map, trace, out_extent) = match spec.op {
            OpKind::Tconv2 => {
                let p = spec.paired_layer.expect("validated");
                let (gmap, fine_coords, fine_extent) =
                    stored[p].as_ref().expect("validated pairing").clone();
                let map = transpose_map(&gmap, &fine_coords)?;
                let trace = stored_map_trace(&map);
                (map, trace, fine_extent)
            }
            op => {
                let out = search_traced(&tensor, op);
                let out_extent = match op {
                    OpKind::Subm3 => extent,
                    _ => strided_extent(extent, op.kernel()),
                };
                (out.map, out.trace, out_extent)
            }
        };

        // Ledger: map table written once per entry, octree table once per
        // voxel (2-byte index entries), queries read the table.
        ledger.sram_writes.map_table += map.entries.len() as u64 * 9;
        ledger.sram_writes.octree_table += tensor.len() as u64 * 2;
        ledger.sram_reads.octree_table +=
            trace.voxels.iter().map(|v| v.candidates as u64 * 2).sum::<u64>();

        let masks = build_masks(&tensor);
        let elem_bytes = if matches!(tensor.features, Features::F32(_)) { 4 } else { 1 };
        let geom = WeightGeometry { kernel: w.kernel, c_in: spec.c_in, c_out: spec.c_out, elem_bytes };
        let mut cache = match cfg.cache_total_bytes {
            Some(total) => {
                let cache_cfg = if cfg.uniform_cache {
                    CacheConfig::uniform(total)
                } else {
                    CacheConfig::non_uniform(total, &geom)
                };
                Some(WeightCache::new(geom, cache_cfg, &mut ledger)?)
            }
            None => None,
        };
        let compute = ComputeTrace::build(
            &map,
            &masks,
            spec.c_in,
            spec.c_out,
            &cfg.pipeline,
            cache.as_mut(),
            Some(&mut ledger),
        );
        reports.push(simulate_pipeline(&trace, &compute, &cfg.pipeline, cfg.mode, cfg.sparse_compute)?);

        let q = layer.quant.unwrap_or_default();
        let opts = ExecOptions { sparse_gather: cfg.sparse_compute, dataflow: None };
        let out = execute_layer(&tensor, &w, &map, spec, &q, &opts)?;

        if cfg.oracle {
            if extent[0].max(extent[1]).max(extent[2]) > MAX_ORACLE_EXTENT {
                return Err(DriverError::OracleUnavailable {
                    layer: li,
                    source: OracleError::GridTooLarge(Coordinate::new(
                        extent[0], extent[1], extent[2],
                    )),
                });
            }
            oracle_check(li, &tensor, &w, spec, extent, &out, &map.out_coords)?;
        }

        stored.push(match spec.op {
            OpKind::Gconv2 => Some((map.clone(), tensor.coords.clone(), extent)),
            _ => None,
        });
        tensor = out;
        extent = out_extent;
    }

    let total_cycles = reports.iter().map(|r| r.total_cycles).sum();
    let energy = energy_report(&ledger, &cfg.energy);
    Ok(RunResult {
        output: SceneFile { tensor, extent },
        report: RunReport { layers: reports, total_cycles, ledger, energy },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{append_weights, NetworkLayer};
    use crate::gen::{gen_scene, gen_weights, SceneKind};
    use crate::types::LayerSpec;

    fn one_layer_net(op: OpKind, c_in: usize, c_out: usize) -> (NetworkFile, Vec<u8>) {
        let mut blob = Vec::new();
        let w = gen_weights(op.kernel(), c_out, c_in, true, 3);
        let off = append_weights(&mut blob, &w);
        let net = NetworkFile {
            float: true,
            layers: vec![NetworkLayer {
                spec: LayerSpec::new(op, c_in, c_out),
                weight_offset: off,
                quant: None,
            }],
        };
        (net, blob)
    }

    fn scene() -> SceneFile {
        SceneFile {
            tensor: gen_scene([24, 24, 16], 6, SceneKind::Uniform { density_millis: 150 }, true, 21),
            extent: [24, 24, 16],
        }
    }

    #[test]
    fn single_layer_runs_and_passes_oracle() {
        for op in [OpKind::Subm3, OpKind::Gconv2, OpKind::Gconv3] {
            let (net, blob) = one_layer_net(op, 6, 8);
            let cfg = RunConfig { oracle: true, ..Default::default() };
            let r = run_network(&scene(), &net, &blob, &cfg).unwrap();
            assert!(!r.output.tensor.is_empty());
            assert_eq!(r.report.layers.len(), 1);
            assert!(r.report.total_cycles > 0);
        }
    }

    #[test]
    fn identity_subm3_preserves_features() {
        // Identity kernel: center tap is the identity matrix, rest zero.
        let s = scene();
        let c = s.tensor.channels;
        let mut data = vec![0.0f32; 27 * c * c];
        for ch in 0..c {
            // Layout [co][ci][tap], center tap id 13.
            data[(ch * c + ch) * 27 + 13] = 1.0;
        }
        let w = crate::types::WeightTensor {
            kernel: KernelSize::K3,
            c_out: c,
            c_in: c,
            data: Features::F32(data),
            scale: 1.0,
        };
        let mut blob = Vec::new();
        let off = append_weights(&mut blob, &w);
        let net = NetworkFile {
            float: true,
            layers: vec![NetworkLayer {
                spec: LayerSpec::new(OpKind::Subm3, c, c),
                weight_offset: off,
                quant: None,
            }],
        };
        let cfg = RunConfig::default();
        let r = run_network(&s, &net, &blob, &cfg).unwrap();
        assert_eq!(r.output.tensor.coords, s.tensor.coords);
        let out = match &r.output.tensor.features {
            Features::F32(v) => v,
            _ => unreachable!(),
        };
        let inp = match &s.tensor.features {
            Features::F32(v) => v,
            _ => unreachable!(),
        };
        for (a, b) in out.iter().zip(inp) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gconv2_tconv2_round_trip_targets_fine_sites() {
        let s = scene();
        let mut blob = Vec::new();
        let w1 = gen_weights(KernelSize::K2, 8, 6, true, 1);
        let w2 = gen_weights(KernelSize::K2, 6, 8, true, 2);
        let o1 = append_weights(&mut blob, &w1);
        let o2 = append_weights(&mut blob, &w2);
        let mut t = LayerSpec::new(OpKind::Tconv2, 8, 6);
        t.paired_layer = Some(0);
        let net = NetworkFile {
            float: true,
            layers: vec![
                NetworkLayer { spec: LayerSpec::new(OpKind::Gconv2, 6, 8), weight_offset: o1, quant: None },
                NetworkLayer { spec: t, weight_offset: o2, quant: None },
            ],
        };
        let cfg = RunConfig { oracle: true, ..Default::default() };
        let r = run_network(&s, &net, &blob, &cfg).unwrap();
        // Tconv2 lands back on the original fine voxels and extent.
        assert_eq!(r.output.tensor.coords, s.tensor.coords);
        assert_eq!(r.output.extent, s.extent);
    }

    #[test]
    fn dense_vs_sparse_compute_same_output_different_cycles() {
        // c_in must span several 16-lane groups for the compacted schedule to
        // save whole PE passes.
        let (net, blob) = one_layer_net(OpKind::Subm3, 48, 8);
        let s = SceneFile {
            tensor: gen_scene([24, 24, 16], 48, SceneKind::Uniform { density_millis: 150 }, true, 21),
            extent: [24, 24, 16],
        };
        let sparse = run_network(&s, &net, &blob, &RunConfig::default()).unwrap();
        let dense = run_network(
            &s,
            &net,
            &blob,
            &RunConfig { sparse_compute: false, ..Default::default() },
        )
        .unwrap();
        assert_eq!(sparse.output.tensor, dense.output.tensor);
        assert!(sparse.report.layers[0].compute_only < dense.report.layers[0].compute_only);
    }

    #[test]
    fn cache_totals_flow_into_ledger_and_energy() {
        let (net, blob) = one_layer_net(OpKind::Subm3, 6, 8);
        let cfg = RunConfig { cache_total_bytes: Some(4096), ..Default::default() };
        let r = run_network(&scene(), &net, &blob, &cfg).unwrap();
        assert!(r.report.ledger.dram_weight_read_bytes > 0);
        assert!(r.report.energy.total_pj > 0.0);
    }
}
