//! Exact squared Euclidean distance transform (separable lower-envelope
//! construction), shared by the morphology and surface-metric code.

use rayon::prelude::*;

/// 1D squared distance transform: d[p] = min_q f[q] + w * (p - q)^2.
/// Entries of `f` may be infinite (no source at that position).
fn dt1d(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(out.len(), n);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + w * qf * qf) - (f[v[k]] + w * p * p)) / (2.0 * w * (qf - p));
            if s <= z[k] {
                if k == 0 {
                    // replace the lone parabola
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !started {
        for o in out.iter_mut() {
            *o = f64::INFINITY;
        }
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *o = w * (qf - p) * (qf - p) + f[v[k]];
    }
}

/// 3D squared Euclidean distance transform over a `dims` grid with per-axis
/// squared weights (`weights[a]` = spacing along axis a, squared). Sources
/// are the voxels where `source` returns true; the result at a source is 0.
/// Layout is row-major with axis 2 fastest.
pub fn sedt3(
    source: impl Fn(usize, usize, usize) -> bool + Sync,
    dims: [usize; 3],
    weights: [f64; 3],
) -> Vec<f64> {
    let (d0, d1, d2) = (dims[0], dims[1], dims[2]);
    let mut dist = vec![0.0f64; d0 * d1 * d2];

    // Pass along axis 2 (contiguous rows).
    dist.par_chunks_mut(d2).enumerate().for_each(|(row, out)| {
        let i = row / d1;
        let j = row % d1;
        let f: Vec<f64> = (0..d2)
            .map(|k| if source(i, j, k) { 0.0 } else { f64::INFINITY })
            .collect();
        dt1d(&f, weights[2], out);
    });

    // Pass along axis 1: lines are (i, k) with j varying.
    let lines: Vec<usize> = (0..d0 * d2).collect();
    let columns: Vec<Vec<f64>> = lines
        .par_iter()
        .map(|&line| {
            let i = line / d2;
            let k = line % d2;
            let f: Vec<f64> = (0..d1).map(|j| dist[(i * d1 + j) * d2 + k]).collect();
            let mut out = vec![0.0f64; d1];
            dt1d(&f, weights[1], &mut out);
            out
        })
        .collect();
    for (line, col) in lines.iter().zip(columns.iter()) {
        let i = line / d2;
        let k = line % d2;
        for (j, &v) in col.iter().enumerate() {
            dist[(i * d1 + j) * d2 + k] = v;
        }
    }

    // Pass along axis 0: lines are (j, k) with i varying.
    let lines: Vec<usize> = (0..d1 * d2).collect();
    let columns: Vec<Vec<f64>> = lines
        .par_iter()
        .map(|&line| {
            let j = line / d2;
            let k = line % d2;
            let f: Vec<f64> = (0..d0).map(|i| dist[(i * d1 + j) * d2 + k]).collect();
            let mut out = vec![0.0f64; d0];
            dt1d(&f, weights[0], &mut out);
            out
        })
        .collect();
    for (line, col) in lines.iter().zip(columns.iter()) {
        let j = line / d2;
        let k = line % d2;
        for (i, &v) in col.iter().enumerate() {
            dist[(i * d1 + j) * d2 + k] = v;
        }
    }

    dist
}
