//! IN-OUT map (rulebook) construction. The table-aided searchers partition the
//! scene into 16^3 blocks, build one 8-bank octree table per block, then issue
//! conflict-free PNELUT query batches per window. Brute-force and hash
//! searchers provide independent oracles.

use crate::octree::{
    all_pneluts, block_local, build_octree_table, encode, parity, BlockId, OctreeTable,
    BLOCK_LEVELS,
};
use crate::types::{
    kernel_offsets, offset_id, Coordinate, KernelSize, Offset, OpKind, SparseTensor,
};
use std::collections::{BTreeMap, HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("map references input index {0} but the original tensor has {1} voxels")]
    MapMismatch(u32, usize),
}

/// One rulebook entry: gather row `in_index`, multiply by the weight slice of
/// `offset_id`, scatter into row `out_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MapEntry {
    pub in_index: u32,
    pub out_index: u32,
    pub offset_id: u8,
}

/// The rulebook driving gather/matmul/scatter, plus the output coordinate
/// order its `out_index` values refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct InOutMap {
    pub entries: Vec<MapEntry>,
    pub out_coords: Vec<Coordinate>,
}

impl InOutMap {
    pub fn empty() -> Self {
        InOutMap { entries: Vec::new(), out_coords: Vec::new() }
    }

    pub fn entry_set(&self) -> HashSet<(u32, u32, u8)> {
        self.entries.iter().map(|e| (e.in_index, e.out_index, e.offset_id)).collect()
    }

    /// Set equality of entry triples plus identical output coordinate order.
    pub fn same_map(&self, other: &InOutMap) -> bool {
        self.out_coords == other.out_coords && self.entry_set() == other.entry_set()
    }
}

/// Per-voxel search cost recorded while building the map; replayed by the
/// cycle model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelCost {
    /// Parallel query cycles for this voxel (8 for Subm3, 1 for Gconv2).
    pub query_cycles: u32,
    /// Candidate queries a serial searcher would issue (in-range neighbors).
    pub candidates: u32,
    /// Queries routed to a different block's table.
    pub cross_block: u32,
    /// Valid map entries produced by this voxel's window.
    pub entries: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTrace {
    pub op: OpKind,
    pub voxels: Vec<VoxelCost>,
    /// Conflict-free dispatch batches issued (checked at generation time).
    pub query_batches: u64,
}

impl SearchTrace {
    pub fn empty(op: OpKind) -> Self {
        SearchTrace { op, voxels: Vec::new(), query_batches: 0 }
    }

    pub fn total_entries(&self) -> u64 {
        self.voxels.iter().map(|v| v.entries as u64).sum()
    }
}

pub struct SearchOutput {
    pub map: InOutMap,
    pub trace: SearchTrace,
}

/// Sorted, deduplicated output coordinate order shared by the table-aided and
/// brute-force searchers.
fn canonical_out_coords(mut sites: Vec<Coordinate>) -> Vec<Coordinate> {
    sites.sort_unstable();
    sites.dedup();
    sites
}

fn local_code_key(local: Coordinate) -> u32 {
    let code = encode(local, BLOCK_LEVELS).expect("block-local coordinate");
    code.digits().iter().fold(0u32, |acc, &d| (acc << 3) | d as u32)
}

/// Voxels grouped by block in traversal order: block-major (Morton order of
/// BlockId), octree-code order within each block.
fn blocked_traversal(coords: &[Coordinate]) -> Vec<(BlockId, Vec<(Coordinate, u32)>)> {
    let mut blocks: BTreeMap<u64, (BlockId, Vec<(Coordinate, u32)>)> = BTreeMap::new();
    for (i, &c) in coords.iter().enumerate() {
        let bid = BlockId::of(c);
        blocks
            .entry(bid.morton())
            .or_insert_with(|| (bid, Vec::new()))
            .1
            .push((block_local(c), i as u32));
    }
    blocks
        .into_values()
        .map(|(bid, mut voxels)| {
            voxels.sort_unstable_by_key(|&(local, _)| local_code_key(local));
            (bid, voxels)
        })
        .collect()
}

/// Stage 1: octree tables for every block, keyed by BlockId.
fn build_block_tables(
    blocks: &[(BlockId, Vec<(Coordinate, u32)>)],
) -> HashMap<BlockId, OctreeTable> {
    blocks
        .iter()
        .map(|(bid, voxels)| (*bid, build_octree_table(voxels).expect("validated tensor")))
        .collect()
}

/// Table-aided Subm3 search. Every voxel acts as an output center; its window
/// is resolved in 8 PNELUT dispatch cycles, one bank-conflict-free batch per
/// cycle. Queries that leave the block are routed to the neighbor block's
/// table.
pub fn search_subm3_traced(input: &SparseTensor) -> SearchOutput {
    let pneluts = all_pneluts();
    let blocks = blocked_traversal(&input.coords);
    let tables = build_block_tables(&blocks);

    let mut trace = SearchTrace::empty(OpKind::Subm3);
    let mut entries = Vec::new();
    for (bid, voxels) in &blocks {
        for &(local, center_idx) in voxels {
            let center = input.coords[center_idx as usize];
            let lut = &pneluts[parity(local) as usize];
            let mut cost = VoxelCost { query_cycles: 8, candidates: 0, cross_block: 0, entries: 0 };
            let window_start = entries.len();
            for cnt in 0..lut.max_row_len() {
                let mut bank_mask = 0u8;
                for (row_idx, row) in lut.rows().iter().enumerate() {
                    let Some(desc) = row.get(cnt) else { continue };
                    // One query per row per cycle; rows map 1:1 onto banks.
                    assert_eq!(bank_mask & (1 << row_idx), 0, "bank conflict in query batch");
                    bank_mask |= 1 << row_idx;
                    let Some(neighbor) = center.offset(desc.delta) else { continue };
                    cost.candidates += 1;
                    let nbid = BlockId::of(neighbor);
                    if nbid != *bid {
                        cost.cross_block += 1;
                    }
                    let hit = tables
                        .get(&nbid)
                        .and_then(|t| t.lookup(block_local(neighbor)));
                    if let Some(in_idx) = hit {
                        entries.push(MapEntry {
                            in_index: in_idx,
                            out_index: center_idx,
                            offset_id: desc.offset_id,
                        });
                    }
                }
                trace.query_batches += 1;
            }
            cost.entries = (entries.len() - window_start) as u32;
            trace.voxels.push(cost);
        }
    }

    SearchOutput {
        map: InOutMap { entries, out_coords: input.coords.clone() },
        trace,
    }
}

pub fn search_subm3(input: &SparseTensor) -> InOutMap {
    search_subm3_traced(input).map
}

/// Gconv2 search: the window of a voxel collapses to its parity digit, so
/// each voxel yields exactly one entry in a single query cycle.
pub fn search_gconv2_traced(input: &SparseTensor) -> SearchOutput {
    let blocks = blocked_traversal(&input.coords);
    let out_coords = canonical_out_coords(
        input
            .coords
            .iter()
            .map(|c| Coordinate::new(c.x / 2, c.y / 2, c.z / 2))
            .collect(),
    );
    let out_index: HashMap<Coordinate, u32> =
        out_coords.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();

    let mut trace = SearchTrace::empty(OpKind::Gconv2);
    let mut per_out: Vec<Vec<MapEntry>> = vec![Vec::new(); out_coords.len()];
    for (_, voxels) in &blocks {
        for &(_, idx) in voxels {
            let c = input.coords[idx as usize];
            let parent = Coordinate::new(c.x / 2, c.y / 2, c.z / 2);
            // delta = theta mod 2, which is exactly the parity digit phi_1.
            let o = out_index[&parent];
            per_out[o as usize].push(MapEntry {
                in_index: idx,
                out_index: o,
                offset_id: parity(c),
            });
            trace.voxels.push(VoxelCost { query_cycles: 1, candidates: 1, cross_block: 0, entries: 1 });
            trace.query_batches += 1;
        }
    }
    // Windows contiguous in output order for the output-stationary schedule.
    let entries = per_out.into_iter().flatten().collect();

    SearchOutput { map: InOutMap { entries, out_coords }, trace }
}

pub fn search_gconv2(input: &SparseTensor) -> InOutMap {
    search_gconv2_traced(input).map
}

/// Gconv3 map built by direct scatter under the input-stationary dataflow:
/// each input voxel contributes to every stride-2 site whose window covers it.
pub fn search_gconv3_traced(input: &SparseTensor) -> SearchOutput {
    let blocks = blocked_traversal(&input.coords);
    let offsets = kernel_offsets(KernelSize::K3);

    let valid_sites = |c: Coordinate| {
        let mut sites = Vec::with_capacity(8);
        for d in &offsets {
            let (x, y, z) = (c.x as i32 - d.dx, c.y as i32 - d.dy, c.z as i32 - d.dz);
            if x < 0 || y < 0 || z < 0 || x % 2 != 0 || y % 2 != 0 || z % 2 != 0 {
                continue;
            }
            sites.push((
                Coordinate::new((x / 2) as u16, (y / 2) as u16, (z / 2) as u16),
                offset_id(KernelSize::K3, *d).unwrap(),
            ));
        }
        sites
    };

    let mut all_sites = Vec::new();
    for c in &input.coords {
        all_sites.extend(valid_sites(*c).into_iter().map(|(s, _)| s));
    }
    let out_coords = canonical_out_coords(all_sites);
    let out_index: HashMap<Coordinate, u32> =
        out_coords.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();

    let mut trace = SearchTrace::empty(OpKind::Gconv3);
    let mut entries = Vec::new();
    for (_, voxels) in &blocks {
        for &(_, idx) in voxels {
            let c = input.coords[idx as usize];
            let sites = valid_sites(c);
            for &(site, oid) in &sites {
                entries.push(MapEntry {
                    in_index: idx,
                    out_index: out_index[&site],
                    offset_id: oid,
                });
            }
            trace.voxels.push(VoxelCost {
                query_cycles: 1,
                candidates: sites.len() as u32,
                cross_block: 0,
                entries: sites.len() as u32,
            });
        }
    }

    SearchOutput { map: InOutMap { entries, out_coords }, trace }
}

pub fn search_gconv3(input: &SparseTensor) -> InOutMap {
    search_gconv3_traced(input).map
}

/// Builds the Tconv2 map from a stored Gconv2 map by swapping the in/out role
/// of every entry. `original_input_coords` is the coordinate order of the
/// Gconv2 layer's input, which becomes the output order here.
pub fn transpose_map(
    m: &InOutMap,
    original_input_coords: &[Coordinate],
) -> Result<InOutMap, SearchError> {
    let mut entries = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        if e.in_index as usize >= original_input_coords.len() {
            return Err(SearchError::MapMismatch(e.in_index, original_input_coords.len()));
        }
        entries.push(MapEntry {
            in_index: e.out_index,
            out_index: e.in_index,
            offset_id: e.offset_id,
        });
    }
    Ok(InOutMap { entries, out_coords: original_input_coords.to_vec() })
}

/// Reference O(n^2) searcher: for every output site, traverse every input
/// voxel and test the window offset. Canonical sorted entry order. For Tconv2
/// the input is the fine (pre-Gconv2) scene and the result is the transposed
/// Gconv2 map, mirroring how the layer reuses a stored map.
pub fn search_bruteforce(input: &SparseTensor, op: OpKind) -> InOutMap {
    match op {
        OpKind::Tconv2 => {
            let g = search_bruteforce(input, OpKind::Gconv2);
            return transpose_map(&g, &input.coords).expect("indices from same tensor");
        }
        OpKind::Subm3 | OpKind::Gconv2 | OpKind::Gconv3 => {}
    }
    let k = op.kernel();
    let stride = op.stride() as i32;
    let out_coords: Vec<Coordinate> = match op {
        OpKind::Subm3 => input.coords.clone(),
        _ => {
            let offsets = kernel_offsets(k);
            let mut sites = Vec::new();
            for c in &input.coords {
                for d in &offsets {
                    let (x, y, z) = (c.x as i32 - d.dx, c.y as i32 - d.dy, c.z as i32 - d.dz);
                    if x >= 0 && y >= 0 && z >= 0 && x % stride == 0 && y % stride == 0 && z % stride == 0 {
                        sites.push(Coordinate::new((x / stride) as u16, (y / stride) as u16, (z / stride) as u16));
                    }
                }
            }
            canonical_out_coords(sites)
        }
    };

    let mut entries = Vec::new();
    for (j, out) in out_coords.iter().enumerate() {
        for (i, inp) in input.coords.iter().enumerate() {
            let delta = Offset::new(
                inp.x as i32 - stride * out.x as i32,
                inp.y as i32 - stride * out.y as i32,
                inp.z as i32 - stride * out.z as i32,
            );
            if let Some(id) = offset_id(k, delta) {
                entries.push(MapEntry { in_index: i as u32, out_index: j as u32, offset_id: id });
            }
        }
    }
    InOutMap { entries, out_coords }
}

/// Open-addressing coordinate hash, the GPU-style second oracle.
pub struct CoordHash {
    keys: Vec<u64>, // packed key + 1; 0 marks an empty slot
    vals: Vec<u32>,
    mask: usize,
}

impl CoordHash {
    pub fn build(coords: &[Coordinate]) -> CoordHash {
        let cap = (coords.len() * 2).next_power_of_two().max(16);
        let mut h = CoordHash { keys: vec![0; cap], vals: vec![0; cap], mask: cap - 1 };
        for (i, c) in coords.iter().enumerate() {
            let key = c.packed() + 1;
            let mut slot = Self::hash(key) & h.mask;
            while h.keys[slot] != 0 {
                debug_assert_ne!(h.keys[slot], key, "duplicate coordinate");
                slot = (slot + 1) & h.mask;
            }
            h.keys[slot] = key;
            h.vals[slot] = i as u32;
        }
        h
    }

    fn hash(key: u64) -> usize {
        // Fibonacci hashing on the packed 48-bit coordinate.
        (key.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 16) as usize
    }

    pub fn get(&self, c: Coordinate) -> Option<u32> {
        let key = c.packed() + 1;
        let mut slot = Self::hash(key) & self.mask;
        loop {
            match self.keys[slot] {
                0 => return None,
                k if k == key => return Some(self.vals[slot]),
                _ => slot = (slot + 1) & self.mask,
            }
        }
    }
}

/// Hash-table searcher over the same window rules; independent of both the
/// octree tables and the brute-force loop.
pub fn search_hash(input: &SparseTensor, op: OpKind) -> InOutMap {
    assert_ne!(op, OpKind::Tconv2, "Tconv2 maps come from a stored Gconv2 map");
    let table = CoordHash::build(&input.coords);
    let k = op.kernel();
    let stride = op.stride() as i32;
    let offsets = kernel_offsets(k);

    let out_coords = match op {
        OpKind::Subm3 => input.coords.clone(),
        _ => search_bruteforce(input, op).out_coords,
    };
    let mut entries = Vec::new();
    for (j, out) in out_coords.iter().enumerate() {
        for d in &offsets {
            let (x, y, z) = (
                stride * out.x as i32 + d.dx,
                stride * out.y as i32 + d.dy,
                stride * out.z as i32 + d.dz,
            );
            if x < 0 || y < 0 || z < 0 || x > u16::MAX as i32 || y > u16::MAX as i32 || z > u16::MAX as i32 {
                continue;
            }
            if let Some(i) = table.get(Coordinate::new(x as u16, y as u16, z as u16)) {
                entries.push(MapEntry {
                    in_index: i,
                    out_index: j as u32,
                    offset_id: offset_id(k, *d).unwrap(),
                });
            }
        }
    }
    InOutMap { entries, out_coords }
}

/// Dispatches to the table-aided searcher for an operator kind (Tconv2 is
/// excluded; it reuses a stored Gconv2 map).
pub fn search_traced(input: &SparseTensor, op: OpKind) -> SearchOutput {
    match op {
        OpKind::Subm3 => search_subm3_traced(input),
        OpKind::Gconv2 => search_gconv2_traced(input),
        OpKind::Gconv3 => search_gconv3_traced(input),
        OpKind::Tconv2 => panic!("Tconv2 reuses the paired Gconv2 map"),
    }
}
