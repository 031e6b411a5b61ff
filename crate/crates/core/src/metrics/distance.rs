//! Boundary extraction and the 95th-percentile Hausdorff distance.

use rayon::prelude::*;

use super::BinaryMask;
use crate::error::{Error, Result};
use crate::field::GridShape;

/// Mask cells with a face neighbour outside the mask or on the domain edge.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let shape = mask.shape();
    let full = 2 * shape.dim();
    BinaryMask::from_fn(shape.clone(), |p| {
        if !mask.is_set(p) {
            return false;
        }
        let mut inside = 0;
        let mut all_set = true;
        shape.for_each_neighbor(p, |q| {
            inside += 1;
            all_set &= mask.is_set(q);
        });
        inside < full || !all_set
    })
}

/// Lower envelope of parabolas along one line (Felzenszwalb–Huttenlocher),
/// with `w = spacing²` as the parabola curvature.
fn envelope_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let fq = f[q] + w * (q * q) as f64;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let vk = v[k as usize];
            let fv = f[vk] + w * (vk * vk) as f64;
            let s = (fq - fv) / (2.0 * w * (q - vk) as f64);
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = w * d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance (in physical units) from every cell to
/// the nearest set cell of `seeds`. Infinite everywhere if `seeds` is empty.
pub fn squared_distance_transform(seeds: &BinaryMask) -> Vec<f64> {
    let shape: &GridShape = seeds.shape();
    let ext = shape.extents();
    let strides = shape.strides();
    let mut d: Vec<f64> = seeds
        .bits()
        .iter()
        .map(|&b| if b != 0 { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in 0..shape.dim() {
        let n = ext[axis];
        let stride = strides[axis];
        let w = shape.spacing()[axis] * shape.spacing()[axis];
        // starting offsets of every line along `axis`
        let starts: Vec<usize> = (0..shape.len())
            .filter(|&p| (p / stride) % n == 0)
            .collect();
        let lines: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&s| {
                let f: Vec<f64> = (0..n).map(|i| d[s + i * stride]).collect();
                let mut out = vec![0.0; n];
                let mut v = vec![0usize; n];
                let mut z = vec![0.0; n + 1];
                envelope_1d(&f, w, &mut out, &mut v, &mut z);
                out
            })
            .collect();
        for (&s, line) in starts.iter().zip(lines) {
            for (i, val) in line.into_iter().enumerate() {
                d[s + i * stride] = val;
            }
        }
    }
    d
}

/// Linear-interpolation percentile of an ascending slice, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    let (a, b) = (sorted[lo], sorted[hi]);
    if frac == 0.0 || a == b {
        return a;
    }
    if b.is_infinite() {
        // interpolating toward an infinite value
        return b;
    }
    a + (b - a) * frac
}

fn directed_p95(from: &BinaryMask, to_sq: &[f64]) -> f64 {
    let mut d: Vec<f64> = from
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b != 0)
        .map(|(p, _)| to_sq[p].sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    percentile(&d, 0.95)
}

/// 95th-percentile symmetric boundary distance, scaled by the spacing of `gt`.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.shape().extents() != gt.shape().extents() {
        return Err(Error::Domain("mask extents differ".into()));
    }
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "hd95",
            reason: format!(
                "{} mask is empty",
                if pred.is_empty() { "predicted" } else { "ground-truth" }
            ),
        });
    }
    let spacing = gt.shape().spacing().to_vec();
    let bp = boundary(pred).with_spacing(&spacing)?;
    let bg = boundary(gt).with_spacing(&spacing)?;
    let dp = squared_distance_transform(&bp);
    let dg = squared_distance_transform(&bg);
    Ok(directed_p95(&bp, &dg).max(directed_p95(&bg, &dp)))
}
