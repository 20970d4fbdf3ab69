//! Deterministic parallel reductions, counter-based random draws, and
//! small statistics helpers.
//!
//! Every reduction that feeds a reported number goes through the fixed
//! chunk tree below, so results do not depend on the rayon worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Chunk width of the fixed reduction tree.
pub const REDUCE_CHUNK: usize = 4096;

/// Deterministic parallel sum of `f(0) + f(1) + ... + f(n-1)`.
///
/// Chunks of fixed width are summed independently (in parallel) and the
/// per-chunk partials are then folded in index order, so the floating-point
/// result is identical for any thread count.
pub fn det_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Deterministic parallel accumulation of per-index vectors of length `len`.
pub fn det_sum_vec<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            let mut acc = vec![0.0; len];
            for i in lo..hi {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; len];
    for p in &partials {
        for (o, v) in out.iter_mut().zip(p.iter()) {
            *o += v;
        }
    }
    out
}

/// Mean and standard error of `f(i)` over `i in 0..n`.
pub fn mean_se<F>(n: usize, f: F) -> (f64, f64)
where
    F: Fn(usize) -> f64 + Sync,
{
    assert!(n >= 2, "need at least two samples");
    let sums = det_sum_vec(n, 2, |i, acc| {
        let x = f(i);
        acc[0] += x;
        acc[1] += x * x;
    });
    let nf = n as f64;
    let mean = sums[0] / nf;
    let var = ((sums[1] / nf) - mean * mean).max(0.0) * nf / (nf - 1.0);
    (mean, (var / nf).sqrt())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based RNG keyed by `(seed, path, step)`.
///
/// Each (path, step) cell gets an independent ChaCha8 stream, so draws are
/// identical no matter how paths are scheduled across workers.
pub fn cell_rng(seed: u64, path: u64, step: u64) -> ChaCha8Rng {
    let a = splitmix64(seed ^ 0x243f_6a88_85a3_08d3);
    let b = splitmix64(a ^ splitmix64(path));
    let c = splitmix64(b ^ splitmix64(step ^ 0x1319_8a2e_0370_7344));
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..].copy_from_slice(&splitmix64(c).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// `count` standard normal draws for the `(seed, path, step)` cell.
pub fn cell_normals(seed: u64, path: u64, step: u64, count: usize, out: &mut [f64]) {
    debug_assert!(out.len() >= count);
    let mut rng = cell_rng(seed, path, step);
    for slot in out.iter_mut().take(count) {
        *slot = StandardNormal.sample(&mut rng);
    }
}

/// Additive-recurrence (Kronecker) low-discrepancy point in `[0,1)^dim`.
///
/// Used for coefficient-bound sampling inside a state box; deterministic
/// and well spread without an RNG.
pub fn kronecker_point(index: usize, dim: usize, out: &mut [f64]) {
    debug_assert!(out.len() >= dim);
    // Generalized golden-ratio constants (R_d sequence).
    let phi = |d: usize| -> f64 {
        let mut x = 2.0f64;
        for _ in 0..40 {
            x = (1.0 + x).powf(1.0 / (d as f64 + 1.0));
        }
        x
    };
    let g = phi(dim);
    let mut a = 1.0 / g;
    for slot in out.iter_mut().take(dim) {
        let v = (0.5 + a * (index as f64 + 1.0)).fract();
        *slot = v;
        a /= g;
    }
}
