//! Non-uniform weight-cache model and traffic/energy accounting. Purely
//! observational: nothing here ever alters a functional result.

use crate::exec::LANE_GROUP;
use crate::types::{offset_from_id, KernelSize};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MemError {
    #[error("offset id {0} has no partition for this kernel size")]
    InvalidOffset(u8),
    #[error("center partition too small: needs {needed} bytes, has {have}")]
    CenterCapacity { needed: usize, have: usize },
    #[error("malformed energy table line: {0}")]
    BadEnergyTable(String),
}

/// Weight-kernel partition by the vertical offset component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Center,
    Mid,
    Up,
    Down,
}

pub const PARTITIONS: [Partition; 4] = [Partition::Center, Partition::Mid, Partition::Up, Partition::Down];

impl Partition {
    pub fn index(&self) -> usize {
        match self {
            Partition::Center => 0,
            Partition::Mid => 1,
            Partition::Up => 2,
            Partition::Down => 3,
        }
    }
}

/// Partition of a K=3 offset id: center for the zero offset, mid for the rest
/// of the dz=0 plane, up/down for dz = +1/-1. K=2 kernels stream and have no
/// partitioning.
pub fn classify_offset(id: u8, kernel: KernelSize) -> Result<Partition, MemError> {
    if kernel != KernelSize::K3 {
        return Err(MemError::InvalidOffset(id));
    }
    let delta = offset_from_id(kernel, id).ok_or(MemError::InvalidOffset(id))?;
    Ok(if delta.is_center() {
        Partition::Center
    } else if delta.dz == 0 {
        Partition::Mid
    } else if delta.dz == 1 {
        Partition::Up
    } else {
        Partition::Down
    })
}

/// Default cap on the mid partition.
pub const MID_CAP_BYTES: usize = 32 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CachePolicy {
    StaticResident,
    DirectMapped,
    StreamThrough,
}

/// Weight-cache shape: per-partition capacities in bytes and policies. The
/// line unit is one (offset, 16-output-channel, full C_in) weight slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity: [usize; 4],
    pub policy: [CachePolicy; 4],
}

/// Static layer geometry the cache is sized against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightGeometry {
    pub kernel: KernelSize,
    pub c_in: usize,
    pub c_out: usize,
    pub elem_bytes: usize,
}

impl WeightGeometry {
    pub fn line_bytes(&self) -> usize {
        LANE_GROUP * self.c_in * self.elem_bytes
    }

    pub fn cout_tiles(&self) -> usize {
        self.c_out.div_ceil(LANE_GROUP)
    }

    pub fn slices(&self) -> usize {
        self.kernel.tap_count() * self.cout_tiles()
    }

    pub fn total_bytes(&self) -> usize {
        self.slices() * self.line_bytes()
    }

    fn partition_slices(&self, p: Partition) -> usize {
        let taps = match p {
            Partition::Center => 1,
            Partition::Mid => 8,
            Partition::Up | Partition::Down => 9,
        };
        taps * self.cout_tiles()
    }
}

impl CacheConfig {
    /// Priority allocation: center fully resident, then mid (capped at 32KB),
    /// the remainder split between the direct-mapped up/down partitions.
    pub fn non_uniform(total_bytes: usize, geom: &WeightGeometry) -> CacheConfig {
        let line = geom.line_bytes();
        let center = (geom.partition_slices(Partition::Center) * line).min(total_bytes);
        let mut rest = total_bytes - center;
        let mid = (geom.partition_slices(Partition::Mid) * line).min(rest).min(MID_CAP_BYTES);
        rest -= mid;
        CacheConfig {
            capacity: [center, mid, rest / 2, rest - rest / 2],
            policy: [
                CachePolicy::StaticResident,
                CachePolicy::StaticResident,
                CachePolicy::DirectMapped,
                CachePolicy::DirectMapped,
            ],
        }
    }

    /// Equal split of the same total capacity, same per-partition policies.
    pub fn uniform(total_bytes: usize) -> CacheConfig {
        let q = total_bytes / 4;
        CacheConfig {
            capacity: [q, q, q, total_bytes - 3 * q],
            policy: [
                CachePolicy::StaticResident,
                CachePolicy::StaticResident,
                CachePolicy::DirectMapped,
                CachePolicy::DirectMapped,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Hit,
    Miss { bytes: usize },
}

/// Per-partition hit/miss counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PartitionStats {
    pub accesses: u64,
    pub misses: u64,
}

/// Weight cache for one K=3 layer (K=2 layers stream through a single
/// partition). Residency for static partitions is chosen greedily in
/// slice-index order at construction; the cold fill of the resident set is
/// charged to DRAM once, up front.
pub struct WeightCache {
    geom: WeightGeometry,
    cfg: CacheConfig,
    resident: Vec<bool>,
    // Direct-mapped line tags per partition (empty for other policies).
    dm_lines: [Vec<Option<u32>>; 4],
    pub stats: [PartitionStats; 4],
}

impl WeightCache {
    pub fn new(
        geom: WeightGeometry,
        cfg: CacheConfig,
        ledger: &mut TrafficLedger,
    ) -> Result<WeightCache, MemError> {
        let line = geom.line_bytes();
        let mut resident = vec![false; geom.slices()];
        let mut dm_lines: [Vec<Option<u32>>; 4] = Default::default();
        let mut fill_bytes = 0u64;

        if geom.kernel == KernelSize::K3 {
            let center_bytes = geom.partition_slices(Partition::Center) * line;
            if cfg.policy[0] == CachePolicy::StaticResident && cfg.capacity[0] < center_bytes {
                return Err(MemError::CenterCapacity { needed: center_bytes, have: cfg.capacity[0] });
            }
            for p in PARTITIONS {
                let pi = p.index();
                match cfg.policy[pi] {
                    CachePolicy::StaticResident => {
                        let mut budget = cfg.capacity[pi];
                        for slice in 0..geom.slices() {
                            let id = (slice / geom.cout_tiles()) as u8;
                            if classify_offset(id, geom.kernel) != Ok(p) {
                                continue;
                            }
                            if budget >= line {
                                resident[slice] = true;
                                budget -= line;
                                fill_bytes += line as u64;
                            }
                        }
                    }
                    CachePolicy::DirectMapped => {
                        // Power-of-two line count keeps miss counts monotone
                        // under capacity growth.
                        let lines = cfg.capacity[pi] / line;
                        let lines = if lines == 0 { 0 } else { prev_power_of_two(lines) };
                        dm_lines[pi] = vec![None; lines];
                    }
                    CachePolicy::StreamThrough => {}
                }
            }
        }

        ledger.dram_read_bytes += fill_bytes;
        ledger.dram_weight_read_bytes += fill_bytes;
        Ok(WeightCache { geom, cfg, resident, dm_lines, stats: Default::default() })
    }

    fn slice_id(&self, offset_id: u8, cout_tile: usize) -> u32 {
        (offset_id as usize * self.geom.cout_tiles() + cout_tile) as u32
    }

    /// One weight-slice access. Hits cost an SRAM read of one line; misses
    /// additionally charge a DRAM read of one line and update residency per
    /// the partition policy.
    pub fn access_weight(
        &mut self,
        offset_id: u8,
        cout_tile: usize,
        ledger: &mut TrafficLedger,
    ) -> Access {
        let line = self.geom.line_bytes();
        let slice = self.slice_id(offset_id, cout_tile);
        let partition = classify_offset(offset_id, self.geom.kernel).ok();

        let hit = match partition {
            None => false, // K=2: stream mode, every access fetched
            Some(p) => {
                let pi = p.index();
                self.stats[pi].accesses += 1;
                match self.cfg.policy[pi] {
                    CachePolicy::StaticResident => self.resident[slice as usize],
                    CachePolicy::StreamThrough => false,
                    CachePolicy::DirectMapped => {
                        let lines = &mut self.dm_lines[pi];
                        if lines.is_empty() {
                            false
                        } else {
                            let set = slice as usize % lines.len();
                            if lines[set] == Some(slice) {
                                true
                            } else {
                                lines[set] = Some(slice);
                                false
                            }
                        }
                    }
                }
            }
        };

        ledger.sram_reads.weight += line as u64;
        if hit {
            Access::Hit
        } else {
            if let Some(p) = partition {
                self.stats[p.index()].misses += 1;
            }
            ledger.dram_read_bytes += line as u64;
            ledger.dram_weight_read_bytes += line as u64;
            ledger.sram_writes.weight += line as u64;
            Access::Miss { bytes: line }
        }
    }

    pub fn total_misses(&self) -> u64 {
        self.stats.iter().map(|s| s.misses).sum()
    }
}

fn prev_power_of_two(n: usize) -> usize {
    debug_assert!(n > 0);
    1 << (usize::BITS - 1 - n.leading_zeros())
}

/// Byte counters per on-chip memory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SramCounters {
    pub weight: u64,
    pub ifmap: u64,
    pub psum: u64,
    pub octree_table: u64,
    pub map_table: u64,
}

impl SramCounters {
    fn dot(&self, c: &SramCosts) -> f64 {
        self.weight as f64 * c.weight
            + self.ifmap as f64 * c.ifmap
            + self.psum as f64 * c.psum
            + self.octree_table as f64 * c.octree_table
            + self.map_table as f64 * c.map_table
    }
}

/// Single-writer traffic accumulator for one simulation run. Energy is always
/// recomputed from these counters, never stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficLedger {
    pub dram_read_bytes: u64,
    pub dram_write_bytes: u64,
    /// Subset of `dram_read_bytes` attributable to weight fetches.
    pub dram_weight_read_bytes: u64,
    pub sram_reads: SramCounters,
    pub sram_writes: SramCounters,
}

impl TrafficLedger {
    pub fn merge(&mut self, other: &TrafficLedger) {
        self.dram_read_bytes += other.dram_read_bytes;
        self.dram_write_bytes += other.dram_write_bytes;
        self.dram_weight_read_bytes += other.dram_weight_read_bytes;
        for (a, b) in [
            (&mut self.sram_reads, &other.sram_reads),
            (&mut self.sram_writes, &other.sram_writes),
        ] {
            a.weight += b.weight;
            a.ifmap += b.ifmap;
            a.psum += b.psum;
            a.octree_table += b.octree_table;
            a.map_table += b.map_table;
        }
    }
}

/// Per-access SRAM costs in pJ/byte. These are configuration inputs, not
/// silicon measurements; override them from an energy table file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SramCosts {
    pub weight: f64,
    pub ifmap: f64,
    pub psum: f64,
    pub octree_table: f64,
    pub map_table: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTable {
    pub dram_pj_per_bit: f64,
    pub sram_read: SramCosts,
    pub sram_write: SramCosts,
}

impl Default for EnergyTable {
    fn default() -> Self {
        let sram = SramCosts { weight: 0.15, ifmap: 0.15, psum: 0.2, octree_table: 0.1, map_table: 0.1 };
        EnergyTable { dram_pj_per_bit: 15.0, sram_read: sram, sram_write: sram }
    }
}

impl EnergyTable {
    /// Parses the documented `key = value` text format. Unknown keys are
    /// rejected. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<EnergyTable, MemError> {
        let mut table = EnergyTable::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| MemError::BadEnergyTable(raw.to_string()))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| MemError::BadEnergyTable(raw.to_string()))?;
            let slot = match key.trim() {
                "dram.pj_per_bit" => &mut table.dram_pj_per_bit,
                "sram.weight.pj_per_byte" => &mut table.sram_read.weight,
                "sram.ifmap.pj_per_byte" => &mut table.sram_read.ifmap,
                "sram.psum.pj_per_byte" => &mut table.sram_read.psum,
                "sram.octree_table.pj_per_byte" => &mut table.sram_read.octree_table,
                "sram.map_table.pj_per_byte" => &mut table.sram_read.map_table,
                "sram.weight.write_pj_per_byte" => &mut table.sram_write.weight,
                "sram.ifmap.write_pj_per_byte" => &mut table.sram_write.ifmap,
                "sram.psum.write_pj_per_byte" => &mut table.sram_write.psum,
                "sram.octree_table.write_pj_per_byte" => &mut table.sram_write.octree_table,
                "sram.map_table.write_pj_per_byte" => &mut table.sram_write.map_table,
                other => return Err(MemError::BadEnergyTable(other.to_string())),
            };
            *slot = value;
        }
        Ok(table)
    }
}

/// Energy breakdown in picojoules, recomputable from the ledger counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub dram_pj: f64,
    pub sram_weight_pj: f64,
    pub sram_ifmap_pj: f64,
    pub sram_psum_pj: f64,
    pub sram_octree_table_pj: f64,
    pub sram_map_table_pj: f64,
    pub total_pj: f64,
}

pub fn energy_report(ledger: &TrafficLedger, table: &EnergyTable) -> EnergyReport {
    let dram_bits = (ledger.dram_read_bytes + ledger.dram_write_bytes) * 8;
    let dram_pj = dram_bits as f64 * table.dram_pj_per_bit;
    let per = |r: u64, w: u64, cr: f64, cw: f64| r as f64 * cr + w as f64 * cw;
    let rd = &ledger.sram_reads;
    let wr = &ledger.sram_writes;
    let (cr, cw) = (&table.sram_read, &table.sram_write);
    let report = EnergyReport {
        dram_pj,
        sram_weight_pj: per(rd.weight, wr.weight, cr.weight, cw.weight),
        sram_ifmap_pj: per(rd.ifmap, wr.ifmap, cr.ifmap, cw.ifmap),
        sram_psum_pj: per(rd.psum, wr.psum, cr.psum, cw.psum),
        sram_octree_table_pj: per(rd.octree_table, wr.octree_table, cr.octree_table, cw.octree_table),
        sram_map_table_pj: per(rd.map_table, wr.map_table, cr.map_table, cw.map_table),
        total_pj: 0.0,
    };
    let total = dram_pj
        + report.sram_weight_pj
        + report.sram_ifmap_pj
        + report.sram_psum_pj
        + report.sram_octree_table_pj
        + report.sram_map_table_pj;
    debug_assert!(((rd.dot(cr) + wr.dot(cw) + dram_pj) - total).abs() <= 1e-9 * total.abs());
    EnergyReport { total_pj: total, ..report }
}
