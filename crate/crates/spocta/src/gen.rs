//! Deterministic scene and weight generators. Everything is driven by a
//! ChaCha stream seeded from a user seed, so any (params, seed) pair
//! reproduces bit-identical tensors on every platform.

use crate::types::{
    Coordinate, Features, KernelSize, SparseTensor, WeightTensor, kernel_offsets,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fraction of feature channels forced to exactly zero, mimicking a
/// post-ReLU activation profile.
pub const FEATURE_ZERO_PROB: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Independent per-site occupancy with the given probability (in per
    /// mille to keep the parameterization integral and hashable).
    Uniform { density_millis: u32 },
    /// Single-voxel-thick heightfield surface, the geometry profile of
    /// outdoor scans: most neighbor pairs sit in the same z-plane.
    Surface,
}

fn gen_coords(extent: [u16; 3], kind: SceneKind, rng: &mut ChaCha8Rng) -> Vec<Coordinate> {
    let mut coords = Vec::new();
    match kind {
        SceneKind::Uniform { density_millis } => {
            let p = density_millis as f64 / 1000.0;
            for z in 0..extent[2] {
                for y in 0..extent[1] {
                    for x in 0..extent[0] {
                        if rng.gen_bool(p) {
                            coords.push(Coordinate::new(x, y, z));
                        }
                    }
                }
            }
        }
        SceneKind::Surface => {
            // Smooth height profile plus small jitter; roughly 90% of sites
            // on the surface are occupied.
            let zmax = extent[2].saturating_sub(1) as f64;
            for y in 0..extent[1] {
                for x in 0..extent[0] {
                    if !rng.gen_bool(0.9) {
                        continue;
                    }
                    let fx = x as f64 / extent[0].max(1) as f64;
                    let fy = y as f64 / extent[1].max(1) as f64;
                    let h = 0.5
                        + 0.12 * (std::f64::consts::TAU * fx).sin()
                        + 0.08 * (std::f64::consts::TAU * fy).cos();
                    let jitter = rng.gen_range(-0.006..0.006);
                    let z = ((h + jitter).clamp(0.0, 1.0) * zmax).round() as u16;
                    coords.push(Coordinate::new(x, y, z));
                }
            }
        }
    }
    coords
}

fn gen_rows_f32(n: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n * channels)
        .map(|_| {
            if rng.gen_bool(FEATURE_ZERO_PROB) {
                0.0
            } else {
                rng.gen_range(-1.0f32..1.0)
            }
        })
        .collect()
}

fn gen_rows_i8(n: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<i8> {
    (0..n * channels)
        .map(|_| {
            if rng.gen_bool(FEATURE_ZERO_PROB) {
                0
            } else {
                rng.gen_range(-127i8..=127)
            }
        })
        .collect()
}

/// Generates a scene with features. `float` selects f32 vs int8 features.
pub fn gen_scene(
    extent: [u16; 3],
    channels: usize,
    kind: SceneKind,
    float: bool,
    seed: u64,
) -> SparseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = gen_coords(extent, kind, &mut rng);
    let n = coords.len();
    let features = if float {
        Features::F32(gen_rows_f32(n, channels, &mut rng))
    } else {
        Features::I8(gen_rows_i8(n, channels, &mut rng))
    };
    SparseTensor { coords, features, channels }
}

/// Generates a dense random weight tensor.
pub fn gen_weights(
    kernel: KernelSize,
    c_out: usize,
    c_in: usize,
    float: bool,
    seed: u64,
) -> WeightTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57454947);
    let taps = kernel_offsets(kernel).len();
    let n = taps * c_in * c_out;
    if float {
        WeightTensor {
            kernel,
            c_out,
            c_in,
            data: Features::F32((0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect()),
            scale: 1.0,
        }
    } else {
        WeightTensor {
            kernel,
            c_out,
            c_in,
            data: Features::I8((0..n).map(|_| rng.gen_range(-127i8..=127)).collect()),
            scale: 1.0 / 127.0,
        }
    }
}
