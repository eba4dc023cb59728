//! PCA reduction to 8 dimensions with percentile normalization.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

use super::{FeatureKind, FeatureVector};

pub const DESCRIPTOR_DIM: usize = 8;
const LOW_PERCENTILE: f64 = 0.01;
const HIGH_PERCENTILE: f64 = 99.9;
const MAGIC: &[u8; 4] = b"BCPJ";
const VERSION: u8 = 1;

/// Fitted linear map from a feature vector to a normalized descriptor.
/// Values outside the reference range are not clipped.
#[derive(Clone, Debug, PartialEq)]
pub struct BcProjection {
    pub kind: FeatureKind,
    pub mean: Vec<f64>,
    /// Row-major `DESCRIPTOR_DIM × dim`.
    pub components: Vec<f64>,
    pub zmin: Vec<f64>,
    pub zmax: Vec<f64>,
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn fit_projection(kind: FeatureKind, reference: &[FeatureVector]) -> Result<BcProjection> {
    let dim = kind.dim();
    if let Some(bad) = reference.iter().find(|f| f.kind != kind || f.values.len() != dim) {
        return Err(Error::ShapeMismatch { expected: format!("{kind} ({dim})"), got: format!("{} ({})", bad.kind, bad.values.len()) });
    }
    let n = reference.len();
    if n <= DESCRIPTOR_DIM {
        return Err(Error::RankDeficient { rank: n.saturating_sub(1), needed: DESCRIPTOR_DIM });
    }
    let mut mean = vec![0.0; dim];
    for f in reference {
        for (m, v) in mean.iter_mut().zip(&f.values) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| reference[i].values[j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > top * 1e-12 && eig.eigenvalues[i] > 0.0).count();
    if rank < DESCRIPTOR_DIM {
        return Err(Error::RankDeficient { rank, needed: DESCRIPTOR_DIM });
    }

    let mut components = Vec::with_capacity(DESCRIPTOR_DIM * dim);
    for &i in order.iter().take(DESCRIPTOR_DIM) {
        let col = eig.eigenvectors.column(i);
        let pivot = col.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| v * sign));
    }
    let mut proj = BcProjection { kind, mean, components, zmin: vec![0.0; DESCRIPTOR_DIM], zmax: vec![1.0; DESCRIPTOR_DIM] };
    let raw: Vec<Vec<f64>> = reference.iter().map(|f| proj.raw(&f.values)).collect();
    for k in 0..DESCRIPTOR_DIM {
        let col: Vec<f64> = raw.iter().map(|r| r[k]).collect();
        let (lo, hi) = (percentile(&col, LOW_PERCENTILE), percentile(&col, HIGH_PERCENTILE));
        if !(hi > lo) {
            return Err(Error::Degenerate(format!("{kind} component {k} has no spread")));
        }
        proj.zmin[k] = lo;
        proj.zmax[k] = hi;
    }
    Ok(proj)
}

impl BcProjection {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn raw(&self, values: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        (0..DESCRIPTOR_DIM)
            .map(|k| {
                self.components[k * dim..(k + 1) * dim]
                    .iter()
                    .zip(values.iter().zip(&self.mean))
                    .map(|(c, (v, m))| c * (v - m))
                    .sum()
            })
            .collect()
    }

    pub fn project(&self, fv: &FeatureVector) -> Result<Vec<f64>> {
        if fv.kind != self.kind || fv.values.len() != self.dim() {
            return Err(Error::ShapeMismatch { expected: format!("{} ({})", self.kind, self.dim()), got: format!("{} ({})", fv.kind, fv.values.len()) });
        }
        Ok(self.raw(&fv.values).iter().enumerate().map(|(k, z)| (z - self.zmin[k]) / (self.zmax[k] - self.zmin[k])).collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u8(VERSION)?;
        w.write_u8(self.kind.tag())?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_u32::<LittleEndian>(DESCRIPTOR_DIM as u32)?;
        for v in self.mean.iter().chain(&self.components).chain(&self.zmin).chain(&self.zmax) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a projection file".into()));
        }
        let version = r.read_u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported projection version {version}")));
        }
        let kind = FeatureKind::from_tag(r.read_u8()?).ok_or_else(|| Error::Format("unknown feature kind".into()))?;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let k = r.read_u32::<LittleEndian>()? as usize;
        if dim != kind.dim() || k != DESCRIPTOR_DIM {
            return Err(Error::Format(format!("projection shape {k}x{dim} does not match {kind}")));
        }
        let mut read = |len: usize| -> Result<Vec<f64>> { (0..len).map(|_| Ok(r.read_f64::<LittleEndian>()?)).collect() };
        Ok(Self { kind, mean: read(dim)?, components: read(k * dim)?, zmin: read(k)?, zmax: read(k)? })
    }

    pub fn file_name(kind: FeatureKind) -> String {
        format!("bc_{kind}.proj")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(dir.join(Self::file_name(self.kind)), buf)?;
        Ok(())
    }

    pub fn load(dir: &Path, kind: FeatureKind) -> Result<Self> {
        let bytes = std::fs::read(dir.join(Self::file_name(kind)))?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn population(n: usize, seed: u64) -> Vec<FeatureVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = (0..17).map(|j| rng.gen::<f64>() * (1.0 + j as f64)).collect();
                FeatureVector::new(FeatureKind::Statistics, v)
            })
            .collect()
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!((percentile(&v, 50.0) - 2.5).abs() < 1e-12);
        assert!((percentile(&v, 10.0) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn reference_maps_into_unit_range_at_the_percentiles() {
        let pop = population(400, 1);
        let proj = fit_projection(FeatureKind::Statistics, &pop).unwrap();
        let z: Vec<Vec<f64>> = pop.iter().map(|f| proj.project(f).unwrap()).collect();
        for k in 0..DESCRIPTOR_DIM {
            let col: Vec<f64> = z.iter().map(|r| r[k]).collect();
            assert!(percentile(&col, LOW_PERCENTILE).abs() < 1e-9);
            assert!((percentile(&col, HIGH_PERCENTILE) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn components_are_orthonormal_and_ordered() {
        let proj = fit_projection(FeatureKind::Statistics, &population(300, 2)).unwrap();
        let d = proj.dim();
        for a in 0..DESCRIPTOR_DIM {
            for b in 0..DESCRIPTOR_DIM {
                let dot: f64 = (0..d).map(|j| proj.components[a * d + j] * proj.components[b * d + j]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let pop: Vec<FeatureVector> = (0..50)
            .map(|i| {
                let mut v = vec![0.0; 17];
                v[0] = i as f64;
                v[1] = (i * i) as f64;
                FeatureVector::new(FeatureKind::Statistics, v)
            })
            .collect();
        match fit_projection(FeatureKind::Statistics, &pop) {
            Err(Error::RankDeficient { rank, needed }) => assert_eq!((rank, needed), (2, 8)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let proj = fit_projection(FeatureKind::Statistics, &population(100, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        proj.save(dir.path()).unwrap();
        assert_eq!(BcProjection::load(dir.path(), FeatureKind::Statistics).unwrap(), proj);
        assert!(BcProjection::read_from(&b"nope"[..]).is_err());
    }
}
