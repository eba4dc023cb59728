//! Hand-picked Lenia statistics: mass, volume, density, centeredness and
//! rotation-invariant image moments.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;

use crate::grid::Grid;

use super::{FeatureKind, FeatureVector};

/// Cells above this value count towards the activated volume.
pub const ACTIVE_EPSILON: f64 = 1e-4;

type C = Complex<f64>;

fn circular_mean(weights: impl Iterator<Item = (usize, f64)>, period: usize) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (i, w) in weights {
        let ang = 2.0 * PI * i as f64 / period as f64;
        s += w * ang.sin();
        c += w * ang.cos();
    }
    (s.atan2(c) / (2.0 * PI) * period as f64).rem_euclid(period as f64)
}

/// Intensity-weighted circular mean position `(y, x)` on the torus.
pub fn toroidal_centroid(o: &Grid) -> (f64, f64) {
    let (h, w) = o.shape();
    let rows = (0..h).map(|y| (y, (0..w).map(|x| o.get(y, x)).sum::<f64>()));
    let cols = (0..w).map(|x| (x, (0..h).map(|y| o.get(y, x)).sum::<f64>()));
    (circular_mean(rows, h), circular_mean(cols, w))
}

fn wrapped_offset(p: f64, center: f64, period: usize) -> f64 {
    let n = period as f64;
    (p - center + n / 2.0).rem_euclid(n) - n / 2.0
}

/// Signed `ln(1 + |v|)`. Moment invariants of faint, spread-out grids grow
/// without bound as the mass vanishes; this keeps them on a usable scale.
pub fn compress(v: f64) -> f64 {
    v.signum() * v.abs().ln_1p()
}

/// 17 features: mass, volume, density, centeredness, Hu 1-7 and six
/// further invariants (the missing third-order independent invariant and
/// the fourth-order complex-moment invariants). Moment invariants are
/// passed through [`compress`].
pub fn lenia_statistics_fv(o: &Grid) -> FeatureVector {
    let (h, w) = o.shape();
    let cells = (h * w) as f64;
    let total = o.sum();
    let mass = total / cells;
    let volume = o.values().iter().filter(|&&v| v > ACTIVE_EPSILON).count() as f64 / cells;
    let density = if volume > 0.0 { mass / volume } else { 0.0 };
    if total <= 0.0 {
        let mut values = vec![0.0; 17];
        values[1] = volume;
        return FeatureVector::new(FeatureKind::Statistics, values);
    }

    let (cy, cx) = toroidal_centroid(o);
    let max_dist = (h as f64 / 2.0).hypot(w as f64 / 2.0);
    let mut centered = 0.0;
    // Central moments mu_pq for p + q ≤ 3, and complex moments up to order 4.
    let mut mu = [[0.0f64; 4]; 4];
    let mut z_pows = [C::new(0.0, 0.0); 5];
    let mut c22 = 0.0;
    let mut c31 = C::new(0.0, 0.0);
    let mut c12 = C::new(0.0, 0.0);
    let mut c40 = C::new(0.0, 0.0);
    for y in 0..h {
        let dy = wrapped_offset(y as f64, cy, h);
        for x in 0..w {
            let v = o.get(y, x);
            if v == 0.0 {
                continue;
            }
            let dx = wrapped_offset(x as f64, cx, w);
            let d = dx.hypot(dy);
            centered += (1.0 - d / max_dist).powi(2) * v;
            let (mut xp, mut row) = (1.0, [0.0; 4]);
            for r in row.iter_mut() {
                *r = xp;
                xp *= dx;
            }
            let mut yq = 1.0;
            for q in 0..4 {
                for p in 0..4 - q {
                    mu[p][q] += row[p] * yq * v;
                }
                yq *= dy;
            }
            let z = C::new(dx, dy);
            z_pows[0] = C::new(1.0, 0.0);
            for k in 1..5 {
                z_pows[k] = z_pows[k - 1] * z;
            }
            let r2 = dx * dx + dy * dy;
            c22 += r2 * r2 * v;
            c31 += z_pows[2] * r2 * v;
            c12 += z.conj() * r2 * v;
            c40 += z_pows[4] * v;
        }
    }
    centered /= total;

    let m00 = total;
    let eta = |p: usize, q: usize| mu[p][q] / m00.powf(1.0 + (p + q) as f64 / 2.0);
    let (n20, n02, n11) = (eta(2, 0), eta(0, 2), eta(1, 1));
    let (n30, n03, n21, n12) = (eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2));

    let s1 = n30 + n12;
    let s2 = n21 + n03;
    let t1 = n30 - 3.0 * n12;
    let t2 = 3.0 * n21 - n03;
    let hu = [
        n20 + n02,
        (n20 - n02).powi(2) + 4.0 * n11 * n11,
        t1 * t1 + t2 * t2,
        s1 * s1 + s2 * s2,
        t1 * s1 * (s1 * s1 - 3.0 * s2 * s2) + t2 * s2 * (3.0 * s1 * s1 - s2 * s2),
        (n20 - n02) * (s1 * s1 - s2 * s2) + 4.0 * n11 * s1 * s2,
        t2 * s1 * (s1 * s1 - 3.0 * s2 * s2) - t1 * s2 * (3.0 * s1 * s1 - s2 * s2),
    ];
    let hu8 = n11 * (s1 * s1 - s2 * s2) - (n20 - n02) * s1 * s2;

    let norm = |order: i32| m00.powf(1.0 + order as f64 / 2.0);
    let c22 = c22 / norm(4);
    let c31 = c31 / norm(4);
    let c12 = c12 / norm(3);
    let c40 = c40 / norm(4);
    let f10 = c31 * c12 * c12;
    let f12 = c40 * c12.powi(4);

    let mut values = vec![mass, volume, density, centered];
    values.extend(hu.into_iter().chain([hu8, c22, f10.re, f10.im, f12.re, f12.im]).map(compress));
    FeatureVector::new(FeatureKind::Statistics, values)
}
