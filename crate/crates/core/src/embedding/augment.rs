//! Online data augmentation on the torus.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability of a random toroidal shift of up to half the size per axis.
    pub translate_p: f64,
    pub flip_horizontal_p: f64,
    pub flip_vertical_p: f64,
    /// Rotation about the center with bilinear toroidal sampling. Off by default.
    pub rotate_p: f64,
    pub max_rotation_degrees: f64,
    /// Zoom-in about the center by a factor in `[1, max_zoom]`. Off by default.
    pub zoom_p: f64,
    pub max_zoom: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            translate_p: 0.6,
            flip_horizontal_p: 0.2,
            flip_vertical_p: 0.2,
            rotate_p: 0.0,
            max_rotation_degrees: 20.0,
            zoom_p: 0.0,
            max_zoom: 3.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { translate_p: 0.0, flip_horizontal_p: 0.0, flip_vertical_p: 0.0, rotate_p: 0.0, zoom_p: 0.0, ..Self::default() }
    }
}

fn bilinear_wrapped(o: &Grid, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let v00 = o.get_wrapped(y0, x0);
    let v01 = o.get_wrapped(y0, x0 + 1);
    let v10 = o.get_wrapped(y0 + 1, x0);
    let v11 = o.get_wrapped(y0 + 1, x0 + 1);
    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
}

/// Resamples `o` through an inverse map from output to source coordinates
/// (relative to the grid center).
fn resample(o: &Grid, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Grid {
    let (h, w) = o.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Grid::from_fn(h, w, |y, x| {
        let (sy, sx) = inverse(y as f64 - cy, x as f64 - cx);
        bilinear_wrapped(o, sy + cy, sx + cx).clamp(0.0, 1.0)
    })
}

pub fn augment<R: Rng + ?Sized>(o: &Grid, cfg: &AugmentConfig, rng: &mut R) -> Grid {
    let mut out = o.clone();
    if cfg.rotate_p > 0.0 && rng.gen_bool(cfg.rotate_p.min(1.0)) {
        let angle = rng.gen_range(-1.0..=1.0) * cfg.max_rotation_degrees.to_radians();
        let (s, c) = angle.sin_cos();
        out = resample(&out, |y, x| (c * y - s * x, s * y + c * x));
    }
    if cfg.zoom_p > 0.0 && rng.gen_bool(cfg.zoom_p.min(1.0)) {
        let factor = rng.gen_range(1.0..=cfg.max_zoom.max(1.0));
        out = resample(&out, |y, x| (y / factor, x / factor));
    }
    if cfg.translate_p > 0.0 && rng.gen_bool(cfg.translate_p.min(1.0)) {
        let (h, w) = out.shape();
        let dy = rng.gen_range(-(h as isize / 2)..=h as isize / 2);
        let dx = rng.gen_range(-(w as isize / 2)..=w as isize / 2);
        out = out.shifted(dy, dx);
    }
    if cfg.flip_horizontal_p > 0.0 && rng.gen_bool(cfg.flip_horizontal_p.min(1.0)) {
        out = out.flipped_horizontal();
    }
    if cfg.flip_vertical_p > 0.0 && rng.gen_bool(cfg.flip_vertical_p.min(1.0)) {
        out = out.flipped_vertical();
    }
    out
}
