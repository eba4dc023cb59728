//! The HOLMES hierarchy: a binary tree of embedding modules grown by
//! splitting saturated leaves along a 2-means boundary.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{module_input, Architecture, EmbeddingModule, Trace};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const ROOT_ID: &str = "0";

pub fn child_ids(id: &str) -> (String, String) {
    (format!("{id}0"), format!("{id}1"))
}

pub fn parent_id(id: &str) -> Option<&str> {
    (id.len() > 1).then(|| &id[..id.len() - 1])
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Two centroids in the parent's latent space; fixed once fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl Boundary {
    /// Nearest centroid; equidistant points go left.
    pub fn side(&self, r: &[f64]) -> Side {
        if sq_dist(r, &self.right) < sq_dist(r, &self.left) {
            Side::Right
        } else {
            Side::Left
        }
    }
}

pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 300;

/// Result of one Lloyd run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: [Vec<f64>; 2],
    pub inertia: f64,
}

fn lloyd(points: &[Vec<f64>], mut c: [Vec<f64>; 2]) -> KMeansFit {
    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let k = usize::from(sq_dist(p, &c[1]) < sq_dist(p, &c[0]));
            changed |= *a != k;
            *a = k;
        }
        if !changed {
            break;
        }
        for (k, ck) in c.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            *ck = (0..dim).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
        }
    }
    let inertia = points.iter().map(|p| sq_dist(p, &c[0]).min(sq_dist(p, &c[1]))).sum();
    KMeansFit { centroids: c, inertia }
}

/// Every restart's solution, in draw order.
pub fn kmeans_restarts<R: Rng + ?Sized>(points: &[Vec<f64>], restarts: usize, rng: &mut R) -> Result<Vec<KMeansFit>> {
    let first = points.first().ok_or_else(|| Error::Degenerate("no points to cluster".into()))?;
    if points.iter().all(|p| p == first) {
        return Err(Error::Degenerate("all embeddings are identical".into()));
    }
    let mut fits = Vec::with_capacity(restarts);
    for _ in 0..restarts {
        let i = rng.gen_range(0..points.len());
        let j = loop {
            let j = rng.gen_range(0..points.len());
            if points[j] != points[i] {
                break j;
            }
        };
        fits.push(lloyd(points, [points[i].clone(), points[j].clone()]));
    }
    Ok(fits)
}

/// Lloyd's algorithm with k = 2, keeping the lowest-inertia restart.
pub fn fit_boundary<R: Rng + ?Sized>(points: &[Vec<f64>], rng: &mut R) -> Result<Boundary> {
    let fits = kmeans_restarts(points, KMEANS_RESTARTS, rng)?;
    let best = fits.into_iter().fold(None::<KMeansFit>, |best, f| match best {
        Some(b) if b.inertia <= f.inertia => Some(b),
        _ => Some(f),
    });
    let [left, right] = best.expect("at least one restart").centroids;
    Ok(Boundary { left, right })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPolicy {
    pub plateau_eps: f64,
    pub plateau_window: usize,
    pub min_population: usize,
    pub min_epochs: usize,
    pub min_explored: usize,
    pub max_splits: usize,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self { plateau_eps: 20.0, plateau_window: 50, min_population: 500, min_epochs: 200, min_explored: 2000, max_splits: 11 }
    }
}

impl SplitPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_eps > 0.0) || self.plateau_window == 0 {
            return Err(Error::Config("split plateau settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub module: EmbeddingModule,
    pub boundary: Option<Boundary>,
    pub population: usize,
    /// Set when a split attempt found a degenerate boundary.
    pub split_ineligible: bool,
}

/// One visited node on a routing path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub node: String,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitOutcome {
    Split { parent: String, left: String, right: String },
    /// The boundary was degenerate; the node will not be offered again.
    Degenerate,
    Refused(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HolmesTree {
    arch: Architecture,
    nodes: BTreeMap<String, Node>,
    splits: usize,
}

impl HolmesTree {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let module = EmbeddingModule::new(arch, false, rng)?;
        let mut nodes = BTreeMap::new();
        nodes.insert(ROOT_ID.to_string(), Node { module, boundary: None, population: 0, split_ineligible: false });
        Ok(Self { arch, nodes, splits: 0 })
    }

    pub(crate) fn from_parts(arch: Architecture, nodes: BTreeMap<String, Node>) -> Result<Self> {
        let tree = Self { arch, splits: nodes.values().filter(|n| n.boundary.is_some()).count(), nodes };
        tree.check_structure()?;
        Ok(tree)
    }

    fn check_structure(&self) -> Result<()> {
        if !self.nodes.contains_key(ROOT_ID) {
            return Err(Error::Format("tree has no root".into()));
        }
        for (id, node) in &self.nodes {
            let (l, r) = child_ids(id);
            let has_children = self.nodes.contains_key(&l) && self.nodes.contains_key(&r);
            if node.boundary.is_some() != has_children {
                return Err(Error::Format(format!("node {id}: boundary and children disagree")));
            }
            if node.boundary.is_some() && !node.module.frozen {
                return Err(Error::Format(format!("internal node {id} is not frozen")));
            }
            if let Some(p) = parent_id(id) {
                if !self.nodes.contains_key(p) {
                    return Err(Error::Format(format!("node {id} has no parent")));
                }
            }
            if node.module.is_connected() != (id != ROOT_ID) {
                return Err(Error::Format(format!("node {id}: lateral connections do not match its position")));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn splits(&self) -> usize {
        self.splits
    }

    pub fn nodes(&self) -> &BTreeMap<String, Node> {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Result<&Node> {
        self.nodes.get(id).ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn node_mut(&mut self, id: &str) -> Result<&mut Node> {
        self.nodes.get_mut(id).ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn is_leaf(&self, id: &str) -> bool {
        self.nodes.get(id).is_some_and(|n| n.boundary.is_none())
    }

    pub fn leaves(&self) -> Vec<String> {
        self.nodes.iter().filter(|(_, n)| n.boundary.is_none()).map(|(id, _)| id.clone()).collect()
    }

    pub fn input(&self, o: &Grid) -> Result<Grid> {
        module_input(o, &self.arch)
    }

    /// Encodes a pooled input along the given ancestor chain, returning the
    /// embedding and trace of every node on it.
    fn encode_chain(&self, chain: &[&str], input: &Grid) -> Result<Vec<(Vec<f64>, Trace<f32>)>> {
        let mut out: Vec<(Vec<f64>, Trace<f32>)> = Vec::with_capacity(chain.len());
        for id in chain {
            let parent = out.last().map(|(_, t)| t);
            out.push(self.node(id)?.module.encode(input, parent)?);
        }
        Ok(out)
    }

    fn ancestry(id: &str) -> Vec<&str> {
        (1..=id.len()).map(|k| &id[..k]).collect()
    }

    /// Parent trace for training or encoding the module at `id`.
    pub fn parent_trace(&self, id: &str, input: &Grid) -> Result<Option<Trace<f32>>> {
        match parent_id(id) {
            None => Ok(None),
            Some(p) => Ok(self.encode_chain(&Self::ancestry(p), input)?.pop().map(|(_, t)| t)),
        }
    }

    /// Embedding of a pooled input at one node (ancestors encoded on the way).
    pub fn embed_at(&self, id: &str, input: &Grid) -> Result<Vec<f64>> {
        self.node(id)?;
        Ok(self.encode_chain(&Self::ancestry(id), input)?.pop().expect("non-empty chain").0)
    }

    /// Descends from the root following boundary sides.
    pub fn route(&self, o: &Grid) -> Result<Vec<PathStep>> {
        let input = self.input(o)?;
        self.route_input(&input)
    }

    pub fn route_input(&self, input: &Grid) -> Result<Vec<PathStep>> {
        let mut path = Vec::new();
        let mut id = ROOT_ID.to_string();
        let mut trace: Option<Trace<f32>> = None;
        loop {
            let node = self.node(&id)?;
            let (embedding, t) = node.module.encode(input, trace.as_ref())?;
            let next = node.boundary.as_ref().map(|b| {
                let (l, r) = child_ids(&id);
                if b.side(&embedding) == Side::Left { l } else { r }
            });
            path.push(PathStep { node: id, embedding });
            match next {
                Some(n) => {
                    id = n;
                    trace = Some(t);
                }
                None => return Ok(path),
            }
        }
    }

    pub fn is_saturated(&self, id: &str, policy: &SplitPolicy, total_explored: usize) -> Result<bool> {
        let node = self.node(id)?;
        if !self.is_leaf(id) || node.split_ineligible || self.splits >= policy.max_splits {
            return Ok(false);
        }
        let hist = &node.module.loss_history;
        if hist.len() < policy.plateau_window {
            return Ok(false);
        }
        let recent = &hist[hist.len() - policy.plateau_window..];
        let mean = recent.iter().sum::<f64>() / recent.len() as f64;
        Ok(mean < policy.plateau_eps
            && node.population >= policy.min_population
            && node.module.train_epochs >= policy.min_epochs
            && total_explored >= policy.min_explored)
    }

    /// The saturated leaf with the largest population (smallest id on ties).
    pub fn split_candidate(&self, policy: &SplitPolicy, total_explored: usize) -> Result<Option<String>> {
        let mut best: Option<(&String, usize)> = None;
        for (id, node) in &self.nodes {
            if self.is_saturated(id, policy, total_explored)? && best.map_or(true, |(_, p)| node.population > p) {
                best = Some((id, node.population));
            }
        }
        Ok(best.map(|(id, _)| id.clone()))
    }

    /// Freezes `id`, fits its boundary on `embeddings` (the node's current
    /// population) and attaches two fresh connected children.
    pub fn split<R: Rng + ?Sized>(&mut self, id: &str, embeddings: &[Vec<f64>], max_splits: usize, rng: &mut R) -> Result<SplitOutcome> {
        if !self.is_leaf(id) {
            self.node(id)?;
            return Ok(SplitOutcome::Refused(format!("{id} is not a leaf")));
        }
        if self.splits >= max_splits {
            return Ok(SplitOutcome::Refused(format!("split limit {max_splits} reached")));
        }
        let boundary = match fit_boundary(embeddings, rng) {
            Ok(b) => b,
            Err(Error::Degenerate(_)) => {
                self.node_mut(id)?.split_ineligible = true;
                return Ok(SplitOutcome::Degenerate);
            }
            Err(e) => return Err(e),
        };
        let left = EmbeddingModule::new(self.arch, true, rng)?;
        let right = EmbeddingModule::new(self.arch, true, rng)?;
        let node = self.node_mut(id)?;
        node.module.frozen = true;
        node.boundary = Some(boundary);
        let (l, r) = child_ids(id);
        for (cid, module) in [(l.clone(), left), (r.clone(), right)] {
            self.nodes.insert(cid, Node { module, boundary: None, population: 0, split_ineligible: false });
        }
        self.splits += 1;
        Ok(SplitOutcome::Split { parent: id.to_string(), left: l, right: r })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn small() -> Architecture {
        Architecture { input_size: 16, latent_dim: 4, channels: 4, hidden: 8 }
    }

    #[test]
    fn ids() {
        assert_eq!(child_ids("01"), ("010".to_string(), "011".to_string()));
        assert_eq!(parent_id("011"), Some("01"));
        assert_eq!(parent_id("0"), None);
    }

    #[test]
    fn ties_route_left() {
        let b = Boundary { left: vec![0.0, 0.0], right: vec![2.0, 0.0] };
        assert_eq!(b.side(&[1.0, 5.0]), Side::Left);
        assert_eq!(b.side(&[1.1, 0.0]), Side::Right);
    }

    #[test]
    fn two_points_become_the_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = fit_boundary(&[vec![0.0, 1.0], vec![3.0, 4.0]], &mut rng).unwrap();
        let mut c = [b.left, b.right];
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, [vec![0.0, 1.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(fit_boundary(&vec![vec![1.0]; 5], &mut rng), Err(Error::Degenerate(_))));
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let c = if i % 2 == 0 { 0.0 } else { 10.0 };
            pts.push((0..16).map(|_| c / 4.0 + n.sample(&mut rng)).collect::<Vec<f64>>());
            truth.push(i % 2);
        }
        // Centers 10σ apart along the diagonal: offset 2.5 in each of 16 dims.
        let b = fit_boundary(&pts, &mut rng).unwrap();
        let labels: Vec<usize> = pts.iter().map(|p| usize::from(b.side(p) == Side::Right)).collect();
        let agree = labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        let agree = agree.max(200 - agree);
        assert!(agree >= 198, "agreement {agree}");
    }

    #[test]
    fn best_restart_has_lowest_inertia() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let fits = kmeans_restarts(&pts, KMEANS_RESTARTS, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let b = fit_boundary(&pts, &mut r2).unwrap();
        let inertia: f64 = pts.iter().map(|p| sq_dist(p, &b.left).min(sq_dist(p, &b.right))).sum();
        assert!(fits.iter().all(|f| inertia <= f.inertia + 1e-12));
    }

    #[test]
    fn saturation_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tree = HolmesTree::new(small(), &mut rng).unwrap();
        let policy = SplitPolicy::default();
        {
            let n = tree.node_mut(ROOT_ID).unwrap();
            n.module.loss_history = vec![19.9; 49];
            n.module.train_epochs = 200;
            n.population = 500;
        }
        assert!(!tree.is_saturated(ROOT_ID, &policy, 2000).unwrap());
        tree.node_mut(ROOT_ID).unwrap().module.loss_history.push(19.9);
        assert!(tree.is_saturated(ROOT_ID, &policy, 2000).unwrap());
        tree.node_mut(ROOT_ID).unwrap().population = 499;
        assert!(!tree.is_saturated(ROOT_ID, &policy, 2000).unwrap());
        tree.node_mut(ROOT_ID).unwrap().population = 500;
        assert!(!tree.is_saturated(ROOT_ID, &policy, 1999).unwrap());
        tree.node_mut(ROOT_ID).unwrap().module.loss_history.push(30.0);
        assert!(!tree.is_saturated(ROOT_ID, &policy, 2000).unwrap());
    }

    #[test]
    fn split_builds_connected_children_and_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tree = HolmesTree::new(small(), &mut rng).unwrap();
        let grids: Vec<Grid> = (0..12).map(|i| Grid::from_fn(16, 16, |y, x| ((y * x + i * 7) % 5) as f64 / 4.0)).collect();
        let embs: Vec<Vec<f64>> = grids.iter().map(|g| tree.route(g).unwrap()[0].embedding.clone()).collect();
        assert!(grids.iter().all(|g| tree.route(g).unwrap().len() == 1));
        let out = tree.split(ROOT_ID, &embs, 11, &mut rng).unwrap();
        assert_eq!(out, SplitOutcome::Split { parent: "0".into(), left: "00".into(), right: "01".into() });
        assert_eq!(tree.leaves(), vec!["00".to_string(), "01".to_string()]);
        let b = tree.node(ROOT_ID).unwrap().boundary.clone().unwrap();
        for (g, e) in grids.iter().zip(&embs) {
            let path = tree.route(g).unwrap();
            assert_eq!(path.len(), 2);
            assert_eq!(&path[0].embedding, e);
            let expect = if sq_dist(e, &b.right) < sq_dist(e, &b.left) { "01" } else { "00" };
            assert_eq!(path[1].node, expect);
            assert_eq!(tree.embed_at(&path[1].node, &tree.input(g).unwrap()).unwrap(), path[1].embedding);
        }
        assert!(tree.node(ROOT_ID).unwrap().module.frozen);
        assert!(matches!(tree.split(ROOT_ID, &embs, 11, &mut rng).unwrap(), SplitOutcome::Refused(_)));
        assert!(matches!(tree.split("00", &embs, 1, &mut rng).unwrap(), SplitOutcome::Refused(_)));
    }

    #[test]
    fn degenerate_split_marks_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tree = HolmesTree::new(small(), &mut rng).unwrap();
        assert_eq!(tree.split(ROOT_ID, &vec![vec![0.0; 4]; 3], 11, &mut rng).unwrap(), SplitOutcome::Degenerate);
        assert!(tree.node(ROOT_ID).unwrap().split_ineligible);
        assert_eq!(tree.leaves().len(), 1);
    }
}
