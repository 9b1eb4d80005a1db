//! Cycle-approximate model of the two-core pipeline: query timing for the
//! search core, sparsity-dependent PE-array occupancy for the compute core,
//! and the FIFO map table coupling them. Trace-driven replay: the functional
//! pass runs first, timing is recomputed deterministically from its traces.

use crate::exec::{SparsityMask, LANE_GROUP};
use crate::mapsearch::{InOutMap, SearchTrace};
use crate::mem::{TrafficLedger, WeightCache};
use crate::types::OpKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid pipeline config: {0}")]
    ConfigInvalid(String),
    #[error("search trace produces {expected} entries but compute trace has {got}")]
    TraceMismatch { expected: u64, got: u64 },
}

/// Pipeline shape and penalties. Counts mirror the hardware: 8 query banks,
/// 8 map-table FIFOs, a 16x16 PE tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub fifo_count: usize,
    pub fifo_depth: usize,
    pub query_banks: usize,
    pub cross_block_penalty: u32,
    /// DRAM bytes transferred per core cycle (16 GB/s at 400 MHz -> 40).
    pub dram_bytes_per_cycle: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            fifo_count: 8,
            fifo_depth: 16,
            query_banks: 8,
            cross_block_penalty: 4,
            dram_bytes_per_cycle: 40,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !self.fifo_count.is_power_of_two() || !self.query_banks.is_power_of_two() {
            return Err(SimError::ConfigInvalid(
                "fifo_count and query_banks must be powers of two".into(),
            ));
        }
        if self.fifo_depth == 0 {
            return Err(SimError::ConfigInvalid("fifo_depth must be positive".into()));
        }
        if self.dram_bytes_per_cycle == 0 {
            return Err(SimError::ConfigInvalid("dram_bytes_per_cycle must be positive".into()));
        }
        Ok(())
    }

    pub fn map_table_capacity(&self) -> usize {
        self.fifo_count * self.fifo_depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Parallel,
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Fine,
    Coarse,
}

/// Search-core cycle breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchCycles {
    /// Stage 1 table build: one cycle per voxel.
    pub stage1: u64,
    /// Query dispatch cycles (8 per Subm3 voxel parallel, 1 for Gconv2).
    pub query: u64,
    pub cross_block_penalty: u64,
    /// Map-table write cycles beyond a voxel's last query cycle (the filter
    /// writes at most 8 entries per cycle).
    pub write: u64,
    pub total: u64,
}

/// Replays a search trace under the parallel or serial query model.
pub fn simulate_search(trace: &SearchTrace, mode: SearchMode, cfg: &PipelineConfig) -> SearchCycles {
    let mut out = SearchCycles { stage1: trace.voxels.len() as u64, ..Default::default() };
    for v in &trace.voxels {
        out.query += match mode {
            SearchMode::Parallel => v.query_cycles as u64,
            SearchMode::Serial => v.candidates as u64,
        };
        out.cross_block_penalty += v.cross_block as u64 * cfg.cross_block_penalty as u64;
        if mode == SearchMode::Parallel {
            out.write += (v.entries as u64).div_ceil(8).saturating_sub(1);
        }
    }
    out.total = out.stage1 + out.query + out.cross_block_penalty + out.write;
    out
}

/// Per-entry compute cost under both PE occupancy models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryCost {
    pub sparse_cycles: u32,
    pub dense_cycles: u32,
    /// Stall cycles from weight-line DRAM fetches on cache misses.
    pub weight_stall: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeTrace {
    pub entries: Vec<EntryCost>,
}

impl ComputeTrace {
    /// Builds per-entry costs from a map and the input sparsity masks. When a
    /// weight cache is supplied, misses are charged as compute stalls and
    /// logged to the ledger; ifmap/psum/map-table traffic is logged as well.
    pub fn build(
        map: &InOutMap,
        masks: &[SparsityMask],
        c_in: usize,
        c_out: usize,
        cfg: &PipelineConfig,
        mut cache: Option<&mut WeightCache>,
        ledger: Option<&mut TrafficLedger>,
    ) -> ComputeTrace {
        let tiles = c_out.div_ceil(LANE_GROUP) as u32;
        let dense_groups = c_in.div_ceil(LANE_GROUP) as u32;
        let mut scratch = TrafficLedger::default();
        let mut entries = Vec::with_capacity(map.entries.len());
        for e in &map.entries {
            let nnz = masks[e.in_index as usize].popcount();
            let sparse_groups = (nnz as usize).div_ceil(LANE_GROUP) as u32;
            let mut stall = 0u32;
            for tile in 0..tiles as usize {
                if let Some(cache) = cache.as_deref_mut() {
                    if let crate::mem::Access::Miss { bytes } =
                        cache.access_weight(e.offset_id, tile, &mut scratch)
                    {
                        stall += (bytes as u32).div_ceil(cfg.dram_bytes_per_cycle);
                    }
                }
            }
            scratch.sram_reads.ifmap += c_in as u64;
            scratch.sram_writes.psum += 4 * c_out as u64;
            scratch.sram_reads.map_table += 9;
            entries.push(EntryCost {
                sparse_cycles: sparse_groups * tiles,
                dense_cycles: dense_groups * tiles,
                weight_stall: stall,
            });
        }
        if let Some(ledger) = ledger {
            ledger.merge(&scratch);
        }
        ComputeTrace { entries }
    }

    fn cost(&self, i: usize, sparse: bool) -> u64 {
        let e = &self.entries[i];
        let base = if sparse { e.sparse_cycles } else { e.dense_cycles };
        // A map entry always occupies at least one dispatch cycle.
        base.max(1) as u64 + e.weight_stall as u64
    }
}

/// Total compute-core cycles without pipeline effects.
pub fn simulate_compute(trace: &ComputeTrace, sparse: bool) -> u64 {
    (0..trace.entries.len()).map(|i| trace.cost(i, sparse)).sum()
}

/// One simulated layer (or run) report. All fields derive deterministically
/// from the traces and config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub op: OpKind,
    pub entries: u64,
    pub total_cycles: u64,
    pub fine_total: u64,
    pub coarse_total: u64,
    pub search_only: u64,
    pub compute_only: u64,
    pub overlap_cycles: u64,
    pub stall_map_table_full: u64,
    pub stall_map_table_empty: u64,
    pub search: SearchCycles,
    pub serial_search: SearchCycles,
    /// 1 - parallel query cycles / serial query cycles.
    pub search_parallel_reduction: f64,
    pub sparse_compute_cycles: u64,
    pub dense_compute_cycles: u64,
    /// 1 - sparse / dense compute cycles.
    pub sparse_saving: f64,
}

/// Couples the two traces through the FIFO map table. Fine-grained mode uses
/// a bounded-buffer recurrence (producer blocks when the table is full,
/// consumer waits when it is empty); coarse-grained mode serializes the two
/// stages. Reported totals always satisfy
/// `max(search, compute) <= fine <= coarse = search + compute`.
pub fn simulate_pipeline(
    search_trace: &SearchTrace,
    compute_trace: &ComputeTrace,
    cfg: &PipelineConfig,
    mode: PipelineMode,
    sparse: bool,
) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let expected = search_trace.total_entries();
    if expected != compute_trace.entries.len() as u64 {
        return Err(SimError::TraceMismatch { expected, got: compute_trace.entries.len() as u64 });
    }

    let parallel = simulate_search(search_trace, SearchMode::Parallel, cfg);
    let serial = simulate_search(search_trace, SearchMode::Serial, cfg);
    let compute_only = simulate_compute(compute_trace, sparse);
    let search_only = parallel.total;
    let coarse_total = search_only + compute_only;

    // Producer work attributed to each entry: a voxel's query cycles land on
    // its first entry, filter write throughput adds one cycle per extra batch
    // of 8. Voxels with no entries contribute to the next entry (or the tail).
    let n = compute_trace.entries.len();
    let mut work = vec![0u64; n];
    let tail;
    {
        let mut next_entry = 0usize;
        let mut carried = search_trace.voxels.len() as u64; // stage-1 cycles
        for v in &search_trace.voxels {
            carried += v.query_cycles as u64 + v.cross_block as u64 * cfg.cross_block_penalty as u64;
            for k in 0..v.entries as usize {
                work[next_entry] = if k == 0 { carried } else { u64::from(k % 8 == 0) };
                carried = 0;
                next_entry += 1;
            }
        }
        tail = carried;
    }

    let cap = cfg.map_table_capacity();
    let mut prod_finish = vec![0u64; n];
    let mut cons_start = vec![0u64; n];
    let mut cons_finish = vec![0u64; n];
    let mut stall_full = 0u64;
    let mut stall_empty = 0u64;
    for i in 0..n {
        let ready = if i == 0 { work[0] } else { prod_finish[i - 1] + work[i] };
        let freed = if i >= cap { cons_start[i - cap] } else { 0 };
        prod_finish[i] = ready.max(freed);
        stall_full += prod_finish[i] - ready;
        let prev_done = if i == 0 { 0 } else { cons_finish[i - 1] };
        cons_start[i] = prod_finish[i].max(prev_done);
        stall_empty += cons_start[i].saturating_sub(prev_done);
        cons_finish[i] = cons_start[i] + compute_trace.cost(i, sparse);
    }
    let fine_total = if n == 0 {
        search_only
    } else {
        cons_finish[n - 1].max(prod_finish[n - 1] + tail)
    };

    debug_assert!(fine_total >= search_only.max(compute_only));
    debug_assert!(fine_total <= coarse_total);

    let sparse_cycles = simulate_compute(compute_trace, true);
    let dense_cycles = simulate_compute(compute_trace, false);
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { 1.0 - num as f64 / den as f64 };
    Ok(SimReport {
        op: search_trace.op,
        entries: expected,
        total_cycles: match mode {
            PipelineMode::Fine => fine_total,
            PipelineMode::Coarse => coarse_total,
        },
        fine_total,
        coarse_total,
        search_only,
        compute_only,
        overlap_cycles: coarse_total - fine_total,
        stall_map_table_full: stall_full,
        stall_map_table_empty: stall_empty,
        search: parallel,
        serial_search: serial,
        search_parallel_reduction: ratio(parallel.query, serial.query),
        sparse_compute_cycles: sparse_cycles,
        dense_compute_cycles: dense_cycles,
        sparse_saving: ratio(sparse_cycles, dense_cycles),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapsearch::VoxelCost;

    fn subm3_trace(per_voxel: &[(u32, u32)]) -> SearchTrace {
        // (candidates, entries) pairs; 8 parallel query cycles each.
        SearchTrace {
            op: OpKind::Subm3,
            voxels: per_voxel
                .iter()
                .map(|&(candidates, entries)| VoxelCost {
                    query_cycles: 8,
                    candidates,
                    cross_block: 0,
                    entries,
                })
                .collect(),
            query_batches: per_voxel.len() as u64 * 8,
        }
    }

    fn flat_compute(n: usize, cycles: u32) -> ComputeTrace {
        ComputeTrace {
            entries: vec![EntryCost { sparse_cycles: cycles, dense_cycles: cycles, weight_stall: 0 }; n],
        }
    }

    #[test]
    fn ten_interior_voxels_parallel_vs_serial() {
        let trace = subm3_trace(&[(27, 1); 10]);
        let cfg = PipelineConfig::default();
        let parallel = simulate_search(&trace, SearchMode::Parallel, &cfg);
        let serial = simulate_search(&trace, SearchMode::Serial, &cfg);
        assert_eq!(parallel.query, 80);
        assert_eq!(serial.query, 270);
        let reduction = 1.0 - parallel.query as f64 / serial.query as f64;
        assert!((reduction - 0.7037).abs() < 1e-3);
        assert_eq!(parallel.stage1, 10);
    }

    #[test]
    fn gconv2_one_cycle_per_voxel() {
        let trace = SearchTrace {
            op: OpKind::Gconv2,
            voxels: vec![VoxelCost { query_cycles: 1, candidates: 1, cross_block: 0, entries: 1 }; 17],
            query_batches: 17,
        };
        let parallel = simulate_search(&trace, SearchMode::Parallel, &PipelineConfig::default());
        assert_eq!(parallel.query, 17);
    }

    #[test]
    fn compute_cycle_formula() {
        // 1 entry, c_in = c_out = 16, dense row -> 1 cycle.
        let t = ComputeTrace {
            entries: vec![EntryCost { sparse_cycles: 1, dense_cycles: 1, weight_stall: 0 }],
        };
        assert_eq!(simulate_compute(&t, false), 1);
        // c_in = 32 with 10 non-zeros, c_out = 16 -> sparse 1 vs dense 2.
        let t = ComputeTrace {
            entries: vec![EntryCost { sparse_cycles: 1, dense_cycles: 2, weight_stall: 0 }],
        };
        assert_eq!(simulate_compute(&t, true), 1);
        assert_eq!(simulate_compute(&t, false), 2);
    }

    #[test]
    fn empty_compute_trace_total_is_search_only() {
        let trace = subm3_trace(&[(27, 0); 5]);
        let compute = flat_compute(0, 0);
        let r = simulate_pipeline(&trace, &compute, &PipelineConfig::default(), PipelineMode::Fine, true)
            .unwrap();
        assert_eq!(r.fine_total, r.search_only);
        assert_eq!(r.compute_only, 0);
    }

    #[test]
    fn compute_dominated_pipeline_approaches_compute_only() {
        // Heavy per-entry compute: pipeline benefit is confined to the short
        // search prologue.
        let trace = subm3_trace(&[(27, 1); 8]);
        let compute = flat_compute(8, 64);
        let cfg = PipelineConfig::default();
        let r = simulate_pipeline(&trace, &compute, &cfg, PipelineMode::Fine, true).unwrap();
        assert!(r.fine_total < r.coarse_total);
        // Within the first voxel's latency of the pure compute bound.
        assert!(r.fine_total <= r.compute_only + 8 + 8 + 1);
        assert!(r.fine_total >= r.compute_only);
    }

    #[test]
    fn deep_fifo_reaches_no_stall_bound() {
        let trace = subm3_trace(&[(27, 2); 50]);
        let compute = flat_compute(100, 3);
        let cfg = PipelineConfig { fifo_depth: 1024, ..Default::default() };
        let r = simulate_pipeline(&trace, &compute, &cfg, PipelineMode::Fine, true).unwrap();
        assert_eq!(r.stall_map_table_full, 0);
        // Fill latency only: first entry availability dominates the offset.
        assert!(r.fine_total >= r.search_only.max(r.compute_only));
        assert!(r.fine_total <= r.search_only.max(r.compute_only) + 9 + 8);
    }

    #[test]
    fn bounds_hold_on_random_traces() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let voxels: Vec<(u32, u32)> =
                (0..rng.gen_range(1..40)).map(|_| (27, rng.gen_range(0..6))).collect();
            let trace = subm3_trace(&voxels);
            let n = trace.total_entries() as usize;
            let compute = ComputeTrace {
                entries: (0..n)
                    .map(|_| EntryCost {
                        sparse_cycles: rng.gen_range(0..10),
                        dense_cycles: 10,
                        weight_stall: rng.gen_range(0..3),
                    })
                    .collect(),
            };
            let cfg = PipelineConfig {
                fifo_depth: rng.gen_range(1..32),
                ..Default::default()
            };
            for sparse in [false, true] {
                let r = simulate_pipeline(&trace, &compute, &cfg, PipelineMode::Fine, sparse).unwrap();
                assert!(r.fine_total >= r.search_only.max(r.compute_only));
                assert!(r.fine_total <= r.coarse_total);
                assert_eq!(r.coarse_total, r.search_only + r.compute_only);
            }
        }
    }

    #[test]
    fn fifo_depth_monotone() {
        let trace = subm3_trace(&[(27, 4); 30]);
        let compute = flat_compute(120, 5);
        let mut last = u64::MAX;
        for depth in [1usize, 2, 4, 8, 16, 64] {
            let cfg = PipelineConfig { fifo_depth: depth, ..Default::default() };
            let r = simulate_pipeline(&trace, &compute, &cfg, PipelineMode::Fine, true).unwrap();
            assert!(r.fine_total <= last);
            last = r.fine_total;
        }
    }

    #[test]
    fn config_validation() {
        let bad = PipelineConfig { fifo_count: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig { fifo_depth: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(PipelineConfig::default().validate().is_ok());
    }

    #[test]
    fn determinism() {
        let trace = subm3_trace(&[(27, 3); 21]);
        let compute = flat_compute(63, 7);
        let cfg = PipelineConfig::default();
        let a = simulate_pipeline(&trace, &compute, &cfg, PipelineMode::Fine, true).unwrap();
        let b = simulate_pipeline(&trace, &compute, &cfg, PipelineMode::Fine, true).unwrap();
        assert_eq!(a, b);
    }
}
