//! Fixed embedding tables: 2D sin-cos positions and timestep frequency
//! features. Computed in f64 and cast once so all precision modes share
//! the same tables.

use alloc::vec::Vec;

use crate::real::{cos64, exp64, ln64, sin64};

/// 2D sin-cos positional table for a `side x side` token grid, width `n`
/// (divisible by 4). Half the channels encode the row index, half the
/// column index, each as interleaved sin/cos ladders.
pub fn pos_embed_2d(side: usize, n: usize) -> Vec<f64> {
    assert!(n % 4 == 0, "positional table needs width divisible by 4");
    let quarter = n / 4;
    let mut out = Vec::with_capacity(side * side * n);
    for i in 0..side {
        for j in 0..side {
            for pos in [i, j] {
                for k in 0..quarter {
                    let omega = exp64(-ln64(10_000.0) * k as f64 / quarter as f64);
                    out.push(sin64(pos as f64 * omega));
                    out.push(cos64(pos as f64 * omega));
                }
            }
        }
    }
    debug_assert_eq!(out.len(), side * side * n);
    out
}

/// Sinusoidal timestep features of even size `dim`: `dim/2` sines
/// followed by `dim/2` cosines over a geometric frequency ladder.
pub fn freq_features(t: f64, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "freq_features needs an even dim");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = exp64(-ln64(10_000.0) * k as f64 / half as f64);
        out.push(sin64(t * omega));
    }
    for k in 0..half {
        let omega = exp64(-ln64(10_000.0) * k as f64 / half as f64);
        out.push(cos64(t * omega));
    }
    out
}
