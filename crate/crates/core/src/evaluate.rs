//! Post-hoc evaluation of a stored run: diversity curves in a chosen
//! behavioral space and leaf-to-leaf representational similarity.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::bc::{percentile, AnalyticBc, BcProjection, FeatureKind};
use crate::error::{Error, Result};
use crate::imgep::{reference_space, ExplorationConfig};
use crate::metrics::{binning_curve, cka, classify_pattern, ClassifierConfig, PatternClass};
use crate::store::{load_pattern, load_run, LoadedRun};
use crate::tree::ROOT_ID;

/// Behavioral space a run is evaluated in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BcSelector {
    Analytic(FeatureKind),
    /// The learned space of one tree node, normalized over the run's own
    /// population.
    Leaf(String),
}

impl FromStr for BcSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(id) = s.strip_prefix("leaf:") {
            return Ok(Self::Leaf(id.to_string()));
        }
        FeatureKind::parse(s)
            .map(Self::Analytic)
            .ok_or_else(|| Error::Config(format!("unknown behavioral space {s:?}; expected spectrum, elliptical, statistics or leaf:<id>")))
    }
}

impl fmt::Display for BcSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Analytic(k) => write!(f, "{k}"),
            Self::Leaf(id) => write!(f, "leaf:{id}"),
        }
    }
}

/// Which discoveries count towards a curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassFilter {
    #[default]
    All,
    Only(PatternClass),
}

impl ClassFilter {
    pub fn admits(self, class: PatternClass) -> bool {
        match self {
            Self::All => true,
            Self::Only(c) => c == class,
        }
    }
}

impl FromStr for ClassFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Self::All),
            "slp" => Ok(Self::Only(PatternClass::Slp)),
            "tlp" => Ok(Self::Only(PatternClass::Tlp)),
            _ => Err(Error::Config(format!("unknown class filter {s:?}; expected all, slp or tlp"))),
        }
    }
}

/// Analytic space for evaluating the run in `dir`: the run's own goal-space
/// projection of that kind if present, else one cached under `eval/`, else a
/// reference space fitted now and cached.
pub fn evaluation_space(dir: &Path, config: &ExplorationConfig, kind: FeatureKind) -> Result<AnalyticBc> {
    let cache = dir.join("eval");
    for d in [dir, cache.as_path()] {
        if d.join(BcProjection::file_name(kind)).exists() {
            return Ok(AnalyticBc { projection: BcProjection::load(d, kind)? });
        }
    }
    let bc = reference_space(config, kind)?;
    fs::create_dir_all(&cache)?;
    bc.projection.save(&cache)?;
    Ok(bc)
}

/// Rescales each dimension so the population's 0.01 and 99.9 percentiles map
/// to 0 and 1.
fn normalize_population(points: &mut [Vec<f64>]) {
    let Some(dim) = points.first().map(Vec::len) else { return };
    for d in 0..dim {
        let column: Vec<f64> = points.iter().map(|p| p[d]).collect();
        let (lo, hi) = (percentile(&column, 0.01), percentile(&column, 99.9));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for p in points.iter_mut() {
            p[d] = (p[d] - lo) / span;
        }
    }
}

/// Descriptor and class of every stored discovery, in run order.
pub fn describe_run(dir: &Path, run: &LoadedRun, selector: &BcSelector) -> Result<(Vec<Vec<f64>>, Vec<PatternClass>)> {
    let size = run.config.grid_size;
    let classifier = ClassifierConfig::default();
    let analytic = match selector {
        BcSelector::Analytic(kind) => Some(evaluation_space(dir, &run.config, *kind)?),
        BcSelector::Leaf(id) => {
            match run.tree() {
                Some(t) => {
                    t.node(id)?;
                }
                None if id == ROOT_ID => {}
                None => return Err(Error::UnknownNode(id.clone())),
            }
            None
        }
    };
    let mut descriptors = Vec::with_capacity(run.records.len());
    let mut classes = Vec::with_capacity(run.records.len());
    for rec in &run.records {
        let o = load_pattern(dir, size, rec.run)?;
        classes.push(classify_pattern(&o, &classifier));
        descriptors.push(match (selector, &analytic, run.tree()) {
            (_, Some(bc), _) => bc.describe(&o)?,
            (BcSelector::Leaf(id), None, Some(tree)) => tree.embed_at(id, &tree.input(&o)?)?,
            (BcSelector::Leaf(id), None, None) => {
                rec.emb.get(id).cloned().ok_or_else(|| Error::Format(format!("run {} has no embedding at {id}", rec.run)))?
            }
            (BcSelector::Analytic(_), None, _) => unreachable!("analytic spaces are resolved above"),
        });
    }
    if matches!(selector, BcSelector::Leaf(_)) {
        normalize_population(&mut descriptors);
    }
    Ok((descriptors, classes))
}

/// Cumulative occupied bins after each run; runs outside `filter` add nothing.
pub fn diversity_curve(descriptors: &[Vec<f64>], classes: &[PatternClass], filter: ClassFilter, bins: usize) -> Vec<usize> {
    let admitted: Vec<usize> = (0..descriptors.len()).filter(|&i| filter.admits(classes[i])).collect();
    let kept: Vec<Vec<f64>> = admitted.iter().map(|&i| descriptors[i].clone()).collect();
    let partial = binning_curve(&kept, bins);
    let mut curve = Vec::with_capacity(descriptors.len());
    let mut next = 0;
    let mut current = 0;
    for i in 0..descriptors.len() {
        if admitted.get(next) == Some(&i) {
            current = partial[next];
            next += 1;
        }
        curve.push(current);
    }
    curve
}

/// Loads the run in `dir` and returns its `(run index, occupied bins)` curve.
pub fn evaluate_diversity(dir: &Path, selector: &BcSelector, bins: usize, filter: ClassFilter) -> Result<Vec<(usize, usize)>> {
    if bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }
    let run = load_run(dir)?;
    let (descriptors, classes) = describe_run(dir, &run, selector)?;
    Ok(diversity_curve(&descriptors, &classes, filter, bins).into_iter().enumerate().collect())
}

/// Pairwise linear CKA between the leaves of the latest committed tree, using
/// every stored discovery as a stimulus.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub leaves: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn leaf_similarity(dir: &Path) -> Result<SimilarityMatrix> {
    let run = load_run(dir)?;
    let tree = run.tree().ok_or_else(|| Error::Config("run has no committed HOLMES tree".into()))?;
    let leaves = tree.leaves();
    let mut responses = vec![Vec::with_capacity(run.records.len()); leaves.len()];
    for rec in &run.records {
        let input = tree.input(&load_pattern(dir, run.config.grid_size, rec.run)?)?;
        for (leaf, out) in leaves.iter().zip(&mut responses) {
            out.push(tree.embed_at(leaf, &input)?);
        }
    }
    let n = leaves.len();
    let mut values = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cka(&responses[i], &responses[j])?;
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(SimilarityMatrix { leaves, values })
}

/// Distinct labels in a class sequence, for summaries.
pub fn class_counts(classes: &[PatternClass]) -> Vec<(PatternClass, usize)> {
    let kinds: BTreeSet<PatternClass> = classes.iter().copied().collect();
    kinds.into_iter().map(|k| (k, classes.iter().filter(|&&c| c == k).count())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selectors_parse() {
        assert_eq!("statistics".parse::<BcSelector>().unwrap(), BcSelector::Analytic(FeatureKind::Statistics));
        assert_eq!("leaf:010".parse::<BcSelector>().unwrap(), BcSelector::Leaf("010".into()));
        assert!("moments".parse::<BcSelector>().is_err());
        assert_eq!("TLP".parse::<ClassFilter>().unwrap(), ClassFilter::Only(PatternClass::Tlp));
        assert!("dead".parse::<ClassFilter>().is_err());
    }

    #[test]
    fn curve_skips_filtered_runs() {
        let d = vec![vec![0.1], vec![0.9], vec![0.5], vec![0.1]];
        let c = [PatternClass::Slp, PatternClass::Tlp, PatternClass::Slp, PatternClass::Slp];
        assert_eq!(diversity_curve(&d, &c, ClassFilter::All, 4), vec![1, 2, 3, 3]);
        assert_eq!(diversity_curve(&d, &c, ClassFilter::Only(PatternClass::Slp), 4), vec![1, 1, 2, 2]);
        assert_eq!(diversity_curve(&d, &c, ClassFilter::Only(PatternClass::Dead), 4), vec![0, 0, 0, 0]);
    }

    #[test]
    fn population_normalization_spans_unit_interval() {
        let mut pts: Vec<Vec<f64>> = (0..101).map(|i| vec![i as f64 * 3.0 - 7.0, 5.0]).collect();
        normalize_population(&mut pts);
        let col: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        assert!(col.iter().cloned().fold(f64::INFINITY, f64::min) <= 1e-3);
        assert!((percentile(&col, 99.9) - 1.0).abs() < 1e-12);
        assert!(pts.iter().all(|p| p[1] == 0.0));
    }

    #[test]
    fn class_counts_cover_population() {
        let c = [PatternClass::Dead, PatternClass::Slp, PatternClass::Dead];
        assert_eq!(class_counts(&c), vec![(PatternClass::Slp, 1), (PatternClass::Dead, 2)]);
    }
}
