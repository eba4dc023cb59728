//! Elliptical Fourier descriptors of the dominant blob's outline.

use std::f64::consts::PI;

use crate::grid::Grid;

use super::contour::{extract_contour, Contour};
use super::{FeatureKind, FeatureVector};

pub const HARMONICS: usize = 25;

/// Per-harmonic `[a, b, c, d]`, harmonic 1 first.
#[derive(Clone, Debug, PartialEq)]
pub struct EfdCoefficients {
    pub harmonics: Vec<[f64; 4]>,
}

impl EfdCoefficients {
    pub fn flatten(&self) -> Vec<f64> {
        self.harmonics.iter().flatten().copied().collect()
    }
}

/// Raw coefficients of the closed polyline. `None` when the contour has
/// fewer than three points or zero length.
pub fn efd_coefficients(contour: &Contour, harmonics: usize) -> Option<EfdCoefficients> {
    let pts = &contour.points;
    if pts.len() < 3 {
        return None;
    }
    let segs: Vec<(f64, f64, f64)> = (0..pts.len())
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            (dx, dy, dx.hypot(dy))
        })
        .filter(|s| s.2 > 0.0)
        .collect();
    let period: f64 = segs.iter().map(|s| s.2).sum();
    if period <= 0.0 {
        return None;
    }
    let mut out = Vec::with_capacity(harmonics);
    for n in 1..=harmonics {
        let nf = n as f64;
        let omega = 2.0 * nf * PI / period;
        let mut acc = [0.0; 4];
        let mut t_prev = 0.0;
        for &(dx, dy, dt) in &segs {
            let t = t_prev + dt;
            let dcos = (omega * t).cos() - (omega * t_prev).cos();
            let dsin = (omega * t).sin() - (omega * t_prev).sin();
            acc[0] += dx / dt * dcos;
            acc[1] += dx / dt * dsin;
            acc[2] += dy / dt * dcos;
            acc[3] += dy / dt * dsin;
            t_prev = t;
        }
        let scale = period / (2.0 * nf * nf * PI * PI);
        out.push(acc.map(|v| v * scale));
    }
    Some(EfdCoefficients { harmonics: out })
}

/// Removes dependence on starting point, orientation and size.
///
/// The starting phase is aligned with the first harmonic's major axis, the
/// result rotated so that axis lies along +x, and everything scaled by its
/// semi-major length. The two candidate phases differ by a half turn, which
/// only negates the even harmonics; the even harmonic coefficient of largest
/// magnitude is made positive to pick one.
pub fn standardize_efd(raw: &EfdCoefficients) -> Option<EfdCoefficients> {
    let [a1, b1, c1, d1] = *raw.harmonics.first()?;
    let theta = 0.5 * (2.0 * (a1 * b1 + c1 * d1)).atan2(a1 * a1 - b1 * b1 + c1 * c1 - d1 * d1);

    let phased: Vec<[f64; 4]> = raw
        .harmonics
        .iter()
        .enumerate()
        .map(|(i, &[a, b, c, d])| {
            let (s, co) = ((i + 1) as f64 * theta).sin_cos();
            [a * co + b * s, -a * s + b * co, c * co + d * s, -c * s + d * co]
        })
        .collect();
    let [a1s, _, c1s, _] = phased[0];
    let semi_major = a1s.hypot(c1s);
    if !(semi_major > 1e-12) {
        return None;
    }
    let (sp, cp) = c1s.atan2(a1s).sin_cos();
    let mut harmonics: Vec<[f64; 4]> = phased
        .iter()
        .map(|&[a, b, c, d]| {
            [
                (cp * a + sp * c) / semi_major,
                (cp * b + sp * d) / semi_major,
                (-sp * a + cp * c) / semi_major,
                (-sp * b + cp * d) / semi_major,
            ]
        })
        .collect();

    let pivot = harmonics
        .iter()
        .skip(1)
        .step_by(2)
        .flatten()
        .copied()
        .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
    if pivot < 0.0 {
        for h in harmonics.iter_mut().skip(1).step_by(2) {
            for v in h.iter_mut() {
                *v = -*v;
            }
        }
    }
    Some(EfdCoefficients { harmonics })
}

/// 100-D standardized descriptor; the zero vector when no usable outline.
pub fn elliptical_fourier_fv(o: &Grid) -> FeatureVector {
    let contour = extract_contour(o);
    let values = efd_coefficients(&contour, HARMONICS)
        .and_then(|raw| standardize_efd(&raw))
        .map(|c| c.flatten())
        .unwrap_or_else(|| vec![0.0; 4 * HARMONICS]);
    FeatureVector::new(FeatureKind::Elliptical, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ellipse_contour(rx: f64, ry: f64, rot: f64, n: usize, phase: f64) -> Contour {
        let (s, c) = rot.sin_cos();
        Contour {
            points: (0..n)
                .map(|i| {
                    let t = phase + 2.0 * PI * i as f64 / n as f64;
                    let (x, y) = (rx * t.cos(), ry * t.sin());
                    [c * x - s * y + 5.0, s * x + c * y - 3.0]
                })
                .collect(),
        }
    }

    #[test]
    fn circle_is_a_unit_first_harmonic() {
        let raw = efd_coefficients(&ellipse_contour(7.0, 7.0, 0.0, 720, 0.2), 5).unwrap();
        let std = standardize_efd(&raw).unwrap();
        let [a, b, c, d] = std.harmonics[0];
        assert!((a - 1.0).abs() < 1e-9 && b.abs() < 1e-9 && c.abs() < 1e-9);
        assert!((d.abs() - 1.0).abs() < 1e-4, "d = {d}");
        for h in &std.harmonics[1..] {
            assert!(h.iter().all(|v| v.abs() < 1e-4));
        }
    }

    #[test]
    fn ellipse_keeps_its_axis_ratio_roughly() {
        let raw = efd_coefficients(&ellipse_contour(10.0, 4.0, 0.3, 400, 0.0), 5).unwrap();
        let std = standardize_efd(&raw).unwrap();
        let [a, b, c, d] = std.harmonics[0];
        assert!((a - 1.0).abs() < 1e-9 && b.abs() < 1e-9 && c.abs() < 1e-9);
        assert!(d.abs() > 0.3 && d.abs() < 0.6, "d = {d}");
    }

    #[test]
    fn invariant_to_start_rotation_and_scale() {
        // A non-elliptic outline so higher harmonics matter.
        let shape = |scale: f64, rot: f64, phase: f64| Contour {
            points: (0..360)
                .map(|i| {
                    let t = phase + 2.0 * PI * i as f64 / 360.0;
                    let r = scale * (1.0 + 0.3 * (3.0 * t).cos() + 0.1 * (2.0 * t).sin());
                    let (x, y) = (r * t.cos(), 0.7 * r * t.sin());
                    let (s, c) = rot.sin_cos();
                    [c * x - s * y, s * x + c * y]
                })
                .collect(),
        };
        let base = standardize_efd(&efd_coefficients(&shape(1.0, 0.0, 0.0), 10).unwrap()).unwrap().flatten();
        let step = 2.0 * PI / 360.0;
        let other =
            standardize_efd(&efd_coefficients(&shape(3.5, 1.1, 17.0 * step), 10).unwrap()).unwrap().flatten();
        for (x, y) in base.iter().zip(&other) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn degenerate_outline_gives_zero_vector() {
        let mut g = Grid::zeros(16, 16);
        g.set(4, 4, 1.0);
        g.set(4, 5, 1.0);
        assert!(elliptical_fourier_fv(&g).values.iter().all(|&v| v == 0.0));
        assert!(elliptical_fourier_fv(&Grid::zeros(16, 16)).values.iter().all(|&v| v == 0.0));
    }
}
