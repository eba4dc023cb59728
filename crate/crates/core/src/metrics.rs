//! Evaluation instruments: binning diversity, set diversity, linear CKA,
//! the SLP/TLP heuristic classifier and representative-set selection.

use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bc::ACTIVE_EPSILON;
use crate::error::{Error, Result};
use crate::grid::Grid;

fn bin_key(d: &[f64], bins: usize) -> Vec<usize> {
    d.iter().map(|&v| ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1)).collect()
}

/// Number of occupied cells after clipping to the unit cube.
pub fn binning_diversity(descriptors: &[Vec<f64>], bins: usize) -> usize {
    let bins = bins.max(1);
    descriptors.iter().map(|d| bin_key(d, bins)).collect::<HashSet<_>>().len()
}

/// Occupied-cell count after each prefix of `descriptors`.
pub fn binning_curve(descriptors: &[Vec<f64>], bins: usize) -> Vec<usize> {
    let bins = bins.max(1);
    let mut seen = HashSet::new();
    descriptors
        .iter()
        .map(|d| {
            seen.insert(bin_key(d, bins));
            seen.len()
        })
        .collect()
}

/// Dispersion `M`, effective-pair count `H`, evenness `E` and their
/// combination `D` for a point set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetDiversity {
    pub magnitude: f64,
    pub effective_pairs: f64,
    pub evenness: f64,
    pub diversity: f64,
}

pub fn distance_diversity(points: &[Vec<f64>]) -> Result<SetDiversity> {
    let s = points.len();
    if s < 2 {
        return Err(Error::Degenerate("set diversity needs at least two points".into()));
    }
    let mut d = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            d[i * s + j] = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
    }
    let total: f64 = d.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all points are identical".into()));
    }
    let sf = s as f64;
    let magnitude = sf / (sf - 1.0) * total / (sf * sf);
    let effective_pairs = 1.0 / d.iter().map(|v| (v / total).powi(2)).sum::<f64>();
    let evenness = (1.0 + (1.0 + 4.0 * effective_pairs).sqrt()) / (2.0 * sf);
    Ok(SetDiversity { magnitude, effective_pairs, evenness, diversity: 1.0 + (sf - 1.0) * evenness * magnitude })
}

fn centered(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::ShapeMismatch { expected: format!("rows of length {k}"), got: "ragged rows".into() });
    }
    let mut m = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(m)
}

/// Linear CKA between two response matrices over the same `n` stimuli.
pub fn cka(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::ShapeMismatch { expected: "equal row counts ≥ 2".into(), got: format!("{} and {}", a.len(), b.len()) });
    }
    let (x, y) = (centered(a)?, centered(b)?);
    let cross = (x.transpose() * &y).norm_squared();
    let den = (x.transpose() * &x).norm() * (y.transpose() * &y).norm();
    if !(den > 0.0) {
        return Err(Error::Degenerate("a centered response matrix is zero".into()));
    }
    Ok(cross / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PatternClass {
    Slp,
    Tlp,
    Dead,
}

impl PatternClass {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slp" => Some(Self::Slp),
            "tlp" => Some(Self::Tlp),
            "dead" => Some(Self::Dead),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Patterns whose activated volume is below this are dead.
    pub dead_volume: f64,
    pub component_threshold: f64,
    pub min_mass_fraction: f64,
    /// Largest allowed toroidal bounding-box extent, as a grid fraction.
    pub max_extent: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { dead_volume: 1e-4, component_threshold: 0.1, min_mass_fraction: 0.9, max_extent: 0.6 }
    }
}

/// Smallest arc covering every occupied index on a ring of length `n`.
fn circular_extent(occupied: &[bool]) -> usize {
    let n = occupied.len();
    let Some(start) = occupied.iter().position(|&o| o) else {
        return 0;
    };
    let (mut gap, mut best) = (0usize, 0usize);
    for k in 1..=n {
        if occupied[(start + k) % n] {
            best = best.max(gap);
            gap = 0;
        } else {
            gap += 1;
        }
    }
    n - best
}

/// Heuristic stand-in for a learned soliton detector: one compact blob
/// holding most of the mass is SLP, anything else alive is TLP.
pub fn classify_pattern(o: &Grid, cfg: &ClassifierConfig) -> PatternClass {
    let (h, w) = o.shape();
    let volume = o.values().iter().filter(|&&v| v > ACTIVE_EPSILON).count() as f64 / (h * w) as f64;
    if volume < cfg.dead_volume {
        return PatternClass::Dead;
    }
    let total = o.sum();
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(f64, usize)> = None;
    let mut stack = Vec::new();
    let mut id = 0;
    for s in 0..h * w {
        if o.values()[s] <= cfg.component_threshold || label[s] != usize::MAX {
            continue;
        }
        let mut mass = 0.0;
        label[s] = id;
        stack.push(s);
        while let Some(i) = stack.pop() {
            mass += o.values()[i];
            let (y, x) = (i / w, i % w);
            for dy in [h - 1, 0, 1] {
                for dx in [w - 1, 0, 1] {
                    let j = ((y + dy) % h) * w + (x + dx) % w;
                    if o.values()[j] > cfg.component_threshold && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        if best.map_or(true, |(m, _)| mass > m) {
            best = Some((mass, id));
        }
        id += 1;
    }
    let Some((mass, comp)) = best else {
        return PatternClass::Tlp;
    };
    let (mut rows, mut cols) = (vec![false; h], vec![false; w]);
    for (i, &l) in label.iter().enumerate() {
        if l == comp {
            rows[i / w] = true;
            cols[i % w] = true;
        }
    }
    let compact = (circular_extent(&rows) as f64) < cfg.max_extent * h as f64
        && (circular_extent(&cols) as f64) < cfg.max_extent * w as f64;
    if mass >= cfg.min_mass_fraction * total && compact {
        PatternClass::Slp
    } else {
        PatternClass::Tlp
    }
}

/// Per-leaf count of patterns of the preferred class; every leaf is present.
pub fn score_leaves<'a>(
    leaves: &[String],
    placements: impl IntoIterator<Item = (&'a str, PatternClass)>,
    preference: PatternClass,
) -> BTreeMap<String, f64> {
    let mut scores: BTreeMap<String, f64> = leaves.iter().map(|l| (l.clone(), 0.0)).collect();
    for (leaf, class) in placements {
        if class == preference {
            if let Some(s) = scores.get_mut(leaf) {
                *s += 1.0;
            }
        }
    }
    scores
}

/// Draws `candidates` random subsets of `size` and keeps the most diverse
/// one. Returns sorted indices; the whole population when it is small.
pub fn representative_set<R: Rng + ?Sized>(points: &[Vec<f64>], size: usize, candidates: usize, rng: &mut R) -> Vec<usize> {
    if points.len() <= size {
        return (0..points.len()).collect();
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..candidates.max(1) {
        let mut idx = sample(rng, points.len(), size).into_vec();
        idx.sort_unstable();
        let subset: Vec<Vec<f64>> = idx.iter().map(|&i| points[i].clone()).collect();
        let d = distance_diversity(&subset).map_or(1.0, |s| s.diversity);
        if best.as_ref().map_or(true, |(b, _)| d > *b) {
            best = Some((d, idx));
        }
    }
    best.map(|(_, idx)| idx).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binning_basics() {
        assert_eq!(binning_diversity(&[vec![0.3; 8]], 20), 1);
        assert_eq!(binning_diversity(&vec![vec![0.3; 8]; 5], 20), 1);
        assert_eq!(binning_diversity(&[vec![1.0], vec![0.99], vec![1.7], vec![-0.2], vec![0.0]], 10), 2);
        let curve = binning_curve(&[vec![0.1], vec![0.1], vec![0.9]], 4);
        assert_eq!(curve, vec![1, 1, 2]);
    }

    #[test]
    fn binning_matches_bruteforce_occupancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<Vec<f64>> = (0..200).map(|_| (0..8).map(|_| rng.gen_range(-0.2..1.2)).collect()).collect();
        let mut occupied = vec![false; 3usize.pow(8)];
        for p in &pts {
            let mut code = 0;
            for &v in p {
                let b = if v >= 1.0 { 2 } else if v < 0.0 { 0 } else { (v * 3.0) as usize };
                code = code * 3 + b;
            }
            occupied[code] = true;
        }
        assert_eq!(binning_diversity(&pts, 3), occupied.iter().filter(|&&o| o).count());
    }

    #[test]
    fn two_point_diversity() {
        let s = distance_diversity(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert!((s.magnitude - 5.0).abs() < 1e-12);
        assert!((s.effective_pairs - 2.0).abs() < 1e-12);
        assert!((s.evenness - 1.0).abs() < 1e-12);
        assert!((s.diversity - 6.0).abs() < 1e-12);
        assert!(distance_diversity(&[vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn diversity_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..6).map(|_| (0..8).map(|_| rng.gen()).collect()).collect();
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v * 3.0).collect()).collect();
        let (a, b) = (distance_diversity(&pts).unwrap(), distance_diversity(&scaled).unwrap());
        assert!((b.magnitude - 3.0 * a.magnitude).abs() < 1e-12);
        assert!((b.evenness - a.evenness).abs() < 1e-12);
        assert!(a.evenness > 0.0 && a.evenness <= 1.0);
    }

    #[test]
    fn cka_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
        assert!((cka(&z, &z).unwrap() - 1.0).abs() < 1e-10);
        let (s, c) = 0.7f64.sin_cos();
        let rotated: Vec<Vec<f64>> = z.iter().map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1], -r[2]]).collect();
        assert!((cka(&z, &rotated).unwrap() - 1.0).abs() < 1e-8);
        let other: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
        let v = cka(&z, &other).unwrap();
        assert!((v - cka(&other, &z).unwrap()).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&v));
        assert!(cka(&vec![vec![1.0, 2.0]; 4], &z[..4]).is_err());
    }

    #[test]
    fn cka_matches_sample_gram_oracle() {
        let a = vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0], vec![-2.0, 1.5]];
        let b = vec![vec![0.2, 1.0], vec![1.0, 1.0], vec![-0.3, 2.0], vec![0.7, -0.4]];
        let center = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let means: Vec<f64> = (0..2).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / 4.0).collect();
            m.iter().map(|r| r.iter().zip(&means).map(|(v, mu)| v - mu).collect()).collect()
        };
        let (x, y) = (center(&a), center(&b));
        let dot = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(s, t)| s * t).sum::<f64>();
        let gram = |p: &Vec<Vec<f64>>| -> Vec<f64> {
            let mut g = Vec::with_capacity(16);
            for i in 0..4 {
                for j in 0..4 {
                    g.push(dot(&p[i], &p[j]));
                }
            }
            g
        };
        // Alignment of the two n×n sample Gram matrices.
        let (k, l) = (gram(&x), gram(&y));
        let expect = dot(&k, &l) / (dot(&k, &k).sqrt() * dot(&l, &l).sqrt());
        assert!((cka(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    fn blob(n: usize, size: usize, y0: usize, x0: usize) -> Grid {
        Grid::from_fn(n, n, |y, x| if (y0..y0 + size).contains(&y) && (x0..x0 + size).contains(&x) { 0.8 } else { 0.0 })
    }

    #[test]
    fn classifier_cases() {
        let cfg = ClassifierConfig::default();
        assert_eq!(classify_pattern(&Grid::zeros(128, 128), &cfg), PatternClass::Dead);
        assert_eq!(classify_pattern(&blob(128, 20, 30, 40), &cfg), PatternClass::Slp);
        // Wrapping blob is still compact.
        assert_eq!(classify_pattern(&blob(128, 20, 30, 40).shifted(100, 100), &cfg), PatternClass::Slp);
        let stripes = Grid::from_fn(128, 128, |_, x| if x % 8 < 4 { 0.9 } else { 0.0 });
        assert_eq!(classify_pattern(&stripes, &cfg), PatternClass::Tlp);
        let mut two = blob(128, 20, 10, 10);
        for y in 80..100 {
            for x in 80..100 {
                two.set(y, x, 0.8);
            }
        }
        assert_eq!(classify_pattern(&two, &cfg), PatternClass::Tlp);
    }

    #[test]
    fn circular_extent_wraps() {
        let mut occ = vec![false; 10];
        occ[9] = true;
        occ[0] = true;
        occ[1] = true;
        assert_eq!(circular_extent(&occ), 3);
        assert_eq!(circular_extent(&[true; 4]), 4);
    }

    #[test]
    fn leaf_scores_partition() {
        let leaves = vec!["00".to_string(), "01".to_string()];
        let placed = [("00", PatternClass::Slp), ("01", PatternClass::Dead), ("00", PatternClass::Slp), ("01", PatternClass::Tlp)];
        let s = score_leaves(&leaves, placed, PatternClass::Slp);
        assert_eq!(s["00"], 2.0);
        assert_eq!(s["01"], 0.0);
    }

    #[test]
    fn representative_set_spans_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.gen::<f64>() * 0.01, 0.0]).collect();
        pts.extend((0..20).map(|_| vec![10.0 + rng.gen::<f64>() * 0.01, 0.0]));
        let idx = representative_set(&pts, 6, 750, &mut rng);
        assert_eq!(idx.len(), 6);
        assert!(idx.iter().any(|&i| i < 20) && idx.iter().any(|&i| i >= 20));
        assert_eq!(representative_set(&pts[..4], 6, 750, &mut rng), vec![0, 1, 2, 3]);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(representative_set(&pts, 6, 50, &mut r1), representative_set(&pts, 6, 50, &mut r2));
    }
}
