//! Octree coordinate encoding, 16^3 block partitioning, the 8-bank block-local
//! octree table and the parity-partitioned neighbor lookup table (PNELUT).

use crate::types::{offset_id, Coordinate, KernelSize, Offset};
use thiserror::Error;

/// Levels needed to address a 16^3 block.
pub const BLOCK_LEVELS: u32 = 4;
/// Block edge length in voxels.
pub const BLOCK_EDGE: u16 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum OctreeError {
    #[error("coordinate {0:?} does not fit in {1} levels")]
    CoordinateOutOfRange(Coordinate, u32),
    #[error("duplicate local coordinate {0:?}")]
    DuplicateCoordinate(Coordinate),
}

/// Octree code: octal digits stored most-significant first (phi_L .. phi_1).
/// Digit i interleaves the i-th bits of (z, y, x), z most significant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OctreeCode {
    digits: Vec<u8>,
}

impl OctreeCode {
    pub fn digits(&self) -> &[u8] {
        &self.digits
    }

    pub fn levels(&self) -> u32 {
        self.digits.len() as u32
    }

    /// Lowest-level digit phi_1 (the 3-bit parity of the coordinate).
    pub fn phi1(&self) -> u8 {
        *self.digits.last().expect("zero-level code")
    }

    /// The digits above phi_1 packed into one integer, phi_2 least significant.
    /// For a 4-level code this is the 9-bit bank address {phi4 phi3 phi2}.
    pub fn upper_address(&self) -> usize {
        self.digits[..self.digits.len() - 1]
            .iter()
            .fold(0usize, |acc, &d| (acc << 3) | d as usize)
    }
}

/// Bit-interleaves a coordinate into its octree code.
pub fn encode(theta: Coordinate, levels: u32) -> Result<OctreeCode, OctreeError> {
    let limit = 1u32 << levels;
    if (theta.x as u32) >= limit || (theta.y as u32) >= limit || (theta.z as u32) >= limit {
        return Err(OctreeError::CoordinateOutOfRange(theta, levels));
    }
    let mut digits = vec![0u8; levels as usize];
    for i in 0..levels {
        let xb = (theta.x >> i) & 1;
        let yb = (theta.y >> i) & 1;
        let zb = (theta.z >> i) & 1;
        digits[(levels - 1 - i) as usize] = ((zb << 2) | (yb << 1) | xb) as u8;
    }
    Ok(OctreeCode { digits })
}

/// Exact inverse of [`encode`] at the same level count.
pub fn decode(code: &OctreeCode) -> Coordinate {
    let levels = code.levels();
    let (mut x, mut y, mut z) = (0u16, 0u16, 0u16);
    for (pos, &d) in code.digits.iter().enumerate() {
        let i = levels - 1 - pos as u32;
        x |= ((d & 1) as u16) << i;
        y |= (((d >> 1) & 1) as u16) << i;
        z |= (((d >> 2) & 1) as u16) << i;
    }
    Coordinate::new(x, y, z)
}

/// 3-bit parity pattern of a coordinate: {z&1, y&1, x&1} packed as z<<2|y<<1|x.
pub fn parity(theta: Coordinate) -> u8 {
    (((theta.z & 1) << 2) | ((theta.y & 1) << 1) | (theta.x & 1)) as u8
}

/// Block coordinates at 16^3 granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId {
    pub bx: u16,
    pub by: u16,
    pub bz: u16,
}

impl BlockId {
    pub fn of(theta: Coordinate) -> BlockId {
        BlockId {
            bx: theta.x / BLOCK_EDGE,
            by: theta.y / BLOCK_EDGE,
            bz: theta.z / BLOCK_EDGE,
        }
    }

    /// Morton key used for block-major traversal order.
    pub fn morton(&self) -> u64 {
        let mut key = 0u64;
        for i in 0..16 {
            key |= (((self.bx >> i) & 1) as u64) << (3 * i);
            key |= (((self.by >> i) & 1) as u64) << (3 * i + 1);
            key |= (((self.bz >> i) & 1) as u64) << (3 * i + 2);
        }
        key
    }
}

/// Block-local coordinate (each component < 16).
pub fn block_local(theta: Coordinate) -> Coordinate {
    Coordinate::new(theta.x % BLOCK_EDGE, theta.y % BLOCK_EDGE, theta.z % BLOCK_EDGE)
}

pub const BANKS: usize = 8;
pub const SLOTS_PER_BANK: usize = 512;

/// Block-local table: 8 banks of 512 slots. Bank index is phi_1, slot address
/// is the packed {phi4 phi3 phi2} value, so every block-local coordinate has
/// exactly one slot.
pub struct OctreeTable {
    banks: Vec<Vec<Option<u32>>>,
    occupancy: usize,
}

impl OctreeTable {
    pub fn empty() -> Self {
        OctreeTable {
            banks: vec![vec![None; SLOTS_PER_BANK]; BANKS],
            occupancy: 0,
        }
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    pub fn empty_slots(&self) -> usize {
        BANKS * SLOTS_PER_BANK - self.occupancy
    }

    pub fn slot(&self, bank: usize, address: usize) -> Option<u32> {
        self.banks[bank][address]
    }

    /// Looks up a block-local coordinate.
    pub fn lookup(&self, local: Coordinate) -> Option<u32> {
        let code = encode(local, BLOCK_LEVELS).ok()?;
        self.banks[code.phi1() as usize][code.upper_address()]
    }
}

/// Builds the table from block-local voxels (stage 1 of the search).
pub fn build_octree_table(voxels: &[(Coordinate, u32)]) -> Result<OctreeTable, OctreeError> {
    let mut table = OctreeTable::empty();
    for &(local, index) in voxels {
        let code = encode(local, BLOCK_LEVELS)?;
        let slot = &mut table.banks[code.phi1() as usize][code.upper_address()];
        if slot.is_some() {
            return Err(OctreeError::DuplicateCoordinate(local));
        }
        *slot = Some(index);
        table.occupancy += 1;
    }
    Ok(table)
}

/// One PNELUT candidate: the neighbor offset and its kernel-offset id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborDesc {
    pub delta: Offset,
    pub offset_id: u8,
}

/// Parallel neighbor lookup table for one center parity: the 27 Subm3 window
/// offsets partitioned into 8 rows by the parity of the neighbor coordinate.
/// Queries from different rows target different banks, so one entry per row
/// can be issued per cycle without conflicts.
#[derive(Debug, Clone)]
pub struct Pnelut {
    rows: [Vec<NeighborDesc>; 8],
}

impl Pnelut {
    pub fn row(&self, phi1: u8) -> &[NeighborDesc] {
        &self.rows[phi1 as usize]
    }

    pub fn rows(&self) -> &[Vec<NeighborDesc>; 8] {
        &self.rows
    }

    pub fn max_row_len(&self) -> usize {
        self.rows.iter().map(Vec::len).max().unwrap()
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

/// Groups the 27 neighbor offsets of a Subm3 window by the resulting low-bit
/// parity `parity(center + delta)`.
pub fn build_pnelut(center_parity: u8) -> Pnelut {
    debug_assert!(center_parity < 8);
    let mut rows: [Vec<NeighborDesc>; 8] = Default::default();
    let (cx, cy, cz) = (
        (center_parity & 1) as i32,
        ((center_parity >> 1) & 1) as i32,
        ((center_parity >> 2) & 1) as i32,
    );
    for delta in crate::types::kernel_offsets(KernelSize::K3) {
        let px = (cx + delta.dx).rem_euclid(2);
        let py = (cy + delta.dy).rem_euclid(2);
        let pz = (cz + delta.dz).rem_euclid(2);
        let row = ((pz << 2) | (py << 1) | px) as usize;
        rows[row].push(NeighborDesc {
            delta,
            offset_id: offset_id(KernelSize::K3, delta).unwrap(),
        });
    }
    Pnelut { rows }
}

/// All 8 PNELUTs, indexed by center parity.
pub fn all_pneluts() -> Vec<Pnelut> {
    (0..8).map(build_pnelut).collect()
}
