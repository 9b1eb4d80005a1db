//! Dense reference convolution. Densifies a sparse tensor onto a small grid,
//! runs a straightforward dense 3D convolution and re-sparsifies. Ground truth
//! for every map and compute equivalence test; desk-scale only.

use crate::types::{
    kernel_offsets, Coordinate, Features, LayerSpec, OpKind, PostprocessStep, SparseTensor,
    WeightTensor,
};
use thiserror::Error;

/// Per-axis cap keeping the dense grid small enough to enumerate.
pub const MAX_ORACLE_EXTENT: u16 = 64;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("grid extent {0:?} exceeds the per-axis oracle limit of {MAX_ORACLE_EXTENT}")]
    GridTooLarge(Coordinate),
    #[error("oracle operates in reference (float) mode only")]
    UnsupportedOp,
}

struct DenseGrid {
    ex: usize,
    ey: usize,
    ez: usize,
    c: usize,
    values: Vec<f32>,
    occupied: Vec<bool>,
}

impl DenseGrid {
    fn from_tensor(t: &SparseTensor, extent: Coordinate) -> Self {
        let (ex, ey, ez) = (extent.x as usize, extent.y as usize, extent.z as usize);
        let c = t.channels;
        let mut grid = DenseGrid {
            ex,
            ey,
            ez,
            c,
            values: vec![0.0; ex * ey * ez * c],
            occupied: vec![false; ex * ey * ez],
        };
        for (i, coord) in t.coords.iter().enumerate() {
            let site = grid.site(coord.x as i32, coord.y as i32, coord.z as i32).unwrap();
            grid.occupied[site] = true;
            grid.values[site * c..(site + 1) * c].copy_from_slice(t.row_f32(i));
        }
        grid
    }

    fn site(&self, x: i32, y: i32, z: i32) -> Option<usize> {
        if x < 0 || y < 0 || z < 0 || x >= self.ex as i32 || y >= self.ey as i32 || z >= self.ez as i32 {
            return None;
        }
        Some((z as usize * self.ey + y as usize) * self.ex + x as usize)
    }

    fn row(&self, site: usize) -> &[f32] {
        &self.values[site * self.c..(site + 1) * self.c]
    }
}

fn apply_chain(row: &mut [f32], chain: &[PostprocessStep]) {
    for step in chain {
        match step {
            PostprocessStep::BatchNorm { scale, bias } => {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = *v * scale[c] + bias[c];
                }
            }
            PostprocessStep::Relu => {
                for v in row.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            // Requantize is an int8-mode concern; identity here.
            PostprocessStep::Requantize => {}
        }
    }
}

/// Dense reference convolution for all four operator kinds.
///
/// Output sites follow the operator rule: Subm3 masks outputs to the input
/// coordinate set; strided operators emit a site whenever some kernel tap
/// covers an occupied input voxel; Tconv2 emits at every fine site reachable
/// from an occupied coarse voxel. Output rows include the layer's
/// postprocessing chain (float semantics).
pub fn dense_oracle_conv(
    t: &SparseTensor,
    w: &WeightTensor,
    spec: &LayerSpec,
    grid_extent: Coordinate,
) -> Result<SparseTensor, OracleError> {
    if grid_extent.x > MAX_ORACLE_EXTENT
        || grid_extent.y > MAX_ORACLE_EXTENT
        || grid_extent.z > MAX_ORACLE_EXTENT
    {
        return Err(OracleError::GridTooLarge(grid_extent));
    }
    if !t.features.is_float() || !w.data.is_float() {
        return Err(OracleError::UnsupportedOp);
    }

    let grid = DenseGrid::from_tensor(t, grid_extent);
    let offsets = kernel_offsets(spec.op.kernel());
    let c_in = spec.c_in;
    let c_out = spec.c_out;

    let out_sites: Vec<Coordinate> = match spec.op {
        OpKind::Subm3 => t.coords.clone(),
        OpKind::Gconv2 | OpKind::Gconv3 => {
            // K2 windows start at 2o, so o < ceil(extent/2); K3 windows start
            // at 2o-1, admitting one more site per axis.
            let bound = |e: i32| match spec.op {
                OpKind::Gconv2 => (e + 1) / 2,
                _ => e / 2 + 1,
            };
            let mut sites = Vec::new();
            for z in 0..bound(grid_extent.z as i32) {
                for y in 0..bound(grid_extent.y as i32) {
                    for x in 0..bound(grid_extent.x as i32) {
                        let covered = offsets.iter().any(|d| {
                            grid.site(2 * x + d.dx, 2 * y + d.dy, 2 * z + d.dz)
                                .map(|s| grid.occupied[s])
                                .unwrap_or(false)
                        });
                        if covered {
                            sites.push(Coordinate::new(x as u16, y as u16, z as u16));
                        }
                    }
                }
            }
            sites
        }
        OpKind::Tconv2 => {
            // Fine grid is twice the coarse extent; a site is active when one
            // of its {0,1}^3 parents is occupied.
            let mut sites = Vec::new();
            for z in 0..2 * grid_extent.z as i32 {
                for y in 0..2 * grid_extent.y as i32 {
                    for x in 0..2 * grid_extent.x as i32 {
                        let covered = offsets.iter().any(|d| {
                            let (px, py, pz) = (x - d.dx, y - d.dy, z - d.dz);
                            if px % 2 != 0 || py % 2 != 0 || pz % 2 != 0 {
                                return false;
                            }
                            grid.site(px / 2, py / 2, pz / 2)
                                .map(|s| grid.occupied[s])
                                .unwrap_or(false)
                        });
                        if covered {
                            sites.push(Coordinate::new(x as u16, y as u16, z as u16));
                        }
                    }
                }
            }
            sites
        }
    };

    let mut features = vec![0.0f32; out_sites.len() * c_out];
    for (row_idx, out) in out_sites.iter().enumerate() {
        let row = &mut features[row_idx * c_out..(row_idx + 1) * c_out];
        for (tap, d) in offsets.iter().enumerate() {
            let input_site = match spec.op {
                OpKind::Subm3 => grid.site(
                    out.x as i32 + d.dx,
                    out.y as i32 + d.dy,
                    out.z as i32 + d.dz,
                ),
                OpKind::Gconv2 | OpKind::Gconv3 => grid.site(
                    2 * out.x as i32 + d.dx,
                    2 * out.y as i32 + d.dy,
                    2 * out.z as i32 + d.dz,
                ),
                OpKind::Tconv2 => {
                    let (px, py, pz) = (
                        out.x as i32 - d.dx,
                        out.y as i32 - d.dy,
                        out.z as i32 - d.dz,
                    );
                    if px % 2 != 0 || py % 2 != 0 || pz % 2 != 0 {
                        None
                    } else {
                        grid.site(px / 2, py / 2, pz / 2)
                    }
                }
            };
            let Some(site) = input_site else { continue };
            if !grid.occupied[site] {
                continue;
            }
            let f = grid.row(site);
            for co in 0..c_out {
                let mut acc = 0.0f32;
                for ci in 0..c_in {
                    acc += w.at_f32(co, ci, tap) * f[ci];
                }
                row[co] += acc;
            }
        }
        apply_chain(row, &spec.postprocess);
    }

    Ok(SparseTensor::new(out_sites, Features::F32(features), c_out))
}
