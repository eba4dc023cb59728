//! Ring-aggregated power spectrum.

use crate::error::{Error, Result};
use crate::fft::dft2_full;
use crate::grid::Grid;

use super::{FeatureKind, FeatureVector};

pub const SPECTRUM_RINGS: usize = 20;

/// `[μ₁, σ₁, …, μ₂₀, σ₂₀]` of the thresholded power spectrum over 20 rings.
///
/// The spectrum is normalized by `1/N²`. Only the half plane
/// `0 ≤ u ≤ N/2` (Nyquist row included), `−N/2 ≤ v < N/2` is kept, and
/// values below its mean are zeroed. Ring `i` holds the bins with
/// `(i·N/40)² ≤ u² + v² ≤ ((i+1)·N/40)²`; bins on a shared radius belong to
/// both rings.
pub fn spectrum_fourier_fv(o: &Grid) -> Result<FeatureVector> {
    let (h, w) = o.shape();
    if h != w {
        return Err(Error::ShapeMismatch { expected: "square grid".into(), got: format!("{h}x{w}") });
    }
    let n = h;
    let half = (n / 2) as i64;
    let norm = 1.0 / (n * n) as f64;
    let spectrum = dft2_full(o.values(), n, n);
    let power = |u: i64, v: i64| {
        let c = spectrum[u.rem_euclid(n as i64) as usize * n + v.rem_euclid(n as i64) as usize] * norm;
        c.re * c.re + c.im * c.im
    };

    let mut bins: Vec<(f64, f64)> = Vec::with_capacity((half as usize + 1) * n);
    for u in 0..=half {
        for v in -half..(n as i64 - half) {
            bins.push(((u * u + v * v) as f64, power(u, v)));
        }
    }
    let mean = bins.iter().map(|b| b.1).sum::<f64>() / bins.len() as f64;
    for b in &mut bins {
        if b.1 < mean {
            b.1 = 0.0;
        }
    }

    let mut values = Vec::with_capacity(2 * SPECTRUM_RINGS);
    let max_radius = n as f64 / 2.0;
    for i in 0..SPECTRUM_RINGS {
        let r1 = i as f64 / SPECTRUM_RINGS as f64 * max_radius;
        let r2 = (i + 1) as f64 / SPECTRUM_RINGS as f64 * max_radius;
        let (lo, hi) = (r1 * r1, r2 * r2);
        let ring: Vec<f64> = bins.iter().filter(|b| b.0 >= lo && b.0 <= hi).map(|b| b.1).collect();
        if ring.is_empty() {
            values.extend([0.0, 0.0]);
            continue;
        }
        let mu = ring.iter().sum::<f64>() / ring.len() as f64;
        let var = ring.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / ring.len() as f64;
        values.extend([mu, var.sqrt()]);
    }
    Ok(FeatureVector::new(FeatureKind::Spectrum, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn uniform_grid_only_populates_dc_ring() {
        let fv = spectrum_fourier_fv(&Grid::filled(32, 32, 0.4)).unwrap();
        assert!(fv.values[0] > 0.0);
        for v in &fv.values[2..] {
            assert_eq!(*v, 0.0);
        }
    }

    /// Naive O(N⁴) DFT power at one frequency.
    fn naive_power(g: &Grid, u: i64, v: i64) -> f64 {
        let n = g.height();
        let (mut re, mut im) = (0.0, 0.0);
        for y in 0..n {
            for x in 0..n {
                let ang = -2.0 * PI * ((u * y as i64) as f64 + (v * x as i64) as f64) / n as f64;
                re += g.get(y, x) * ang.cos();
                im += g.get(y, x) * ang.sin();
            }
        }
        let s = 1.0 / (n * n) as f64;
        (re * s).powi(2) + (im * s).powi(2)
    }

    #[test]
    fn stripes_concentrate_in_their_frequency_ring() {
        let n = 32;
        let period = 4.0;
        let g = Grid::from_fn(n, n, |_, x| 0.5 + 0.5 * (2.0 * PI * x as f64 / period).cos());
        let fv = spectrum_fourier_fv(&g).unwrap();
        // Oracle: the strongest non-DC bin of the naive DFT and its ring.
        let mut best = (0.0, 0, 0);
        for u in 0..=16i64 {
            for v in -16..16i64 {
                if (u, v) == (0, 0) {
                    continue;
                }
                let p = naive_power(&g, u, v);
                if p > best.0 {
                    best = (p, u, v);
                }
            }
        }
        let radius = ((best.1 * best.1 + best.2 * best.2) as f64).sqrt();
        assert!((radius - n as f64 / period).abs() < 1e-9);
        let ring = (radius / (n as f64 / 2.0) * SPECTRUM_RINGS as f64).floor() as usize;
        let means: Vec<f64> = (0..SPECTRUM_RINGS).map(|i| fv.values[2 * i]).collect();
        let top = (1..SPECTRUM_RINGS).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
        assert!(top == ring || top + 1 == ring, "top ring {top}, expected {ring}");
        for (i, m) in means.iter().enumerate().skip(1) {
            if i != ring && i + 1 != ring {
                assert_eq!(*m, 0.0, "ring {i}");
            }
        }
    }

    #[test]
    fn non_square_rejected() {
        assert!(spectrum_fourier_fv(&Grid::zeros(8, 16)).is_err());
    }
}
