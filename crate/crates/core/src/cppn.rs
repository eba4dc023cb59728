//! Compositional pattern-producing network genomes for the initial state.
//!
//! A genome is a small acyclic graph evaluated at every cell on the inputs
//! `(x, y, d)`, all in `[-1, 1]`. The output node is squashed to `[0, 1]`
//! with `(tanh(v) + 1) / 2` and, by default, masked to a centered disc.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::lenia::UpdateRuleParams;

pub const INPUT_X: u32 = 0;
pub const INPUT_Y: u32 = 1;
pub const INPUT_D: u32 = 2;
pub const OUTPUT: u32 = 3;
const FIRST_HIDDEN: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sine,
    Gaussian,
    Sigmoid,
    Tanh,
    Absolute,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Identity,
        Activation::Sine,
        Activation::Gaussian,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Absolute,
    ];

    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Sine => v.sin(),
            Activation::Gaussian => (-v * v).exp(),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Tanh => v.tanh(),
            Activation::Absolute => v.abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeGene {
    pub id: u32,
    pub act: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnGene {
    pub src: u32,
    pub dst: u32,
    pub w: f64,
    pub on: bool,
}

/// Serialized as `{nodes:[{id,act}], conns:[{src,dst,w,on}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CppnGenome {
    pub nodes: Vec<NodeGene>,
    pub conns: Vec<ConnGene>,
}

/// Rendering options shared by every genome of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Radius of the centered support disc as a fraction of the grid size;
    /// `None` renders the whole grid.
    pub mask_radius_fraction: Option<f64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { mask_radius_fraction: Some(0.25) }
    }
}

/// Probabilities of the structural and parametric mutation operators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationConfig {
    pub weight_jitter_prob: f64,
    pub weight_jitter_std: f64,
    pub add_node_prob: f64,
    pub add_conn_prob: f64,
    pub activation_swap_prob: f64,
    pub min_hidden: usize,
    pub max_hidden: usize,
    pub init_weight_range: f64,
}

impl Default for MutationConfig {
    fn default() -> Self {
        Self {
            weight_jitter_prob: 0.8,
            weight_jitter_std: 0.5,
            add_node_prob: 0.1,
            add_conn_prob: 0.15,
            activation_swap_prob: 0.1,
            min_hidden: 1,
            max_hidden: 4,
            init_weight_range: 3.0,
        }
    }
}

impl MutationConfig {
    pub fn disabled() -> Self {
        Self {
            weight_jitter_prob: 0.0,
            add_node_prob: 0.0,
            add_conn_prob: 0.0,
            activation_swap_prob: 0.0,
            ..Self::default()
        }
    }
}

impl CppnGenome {
    pub fn hidden_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.id >= FIRST_HIDDEN).count()
    }

    fn next_id(&self) -> u32 {
        self.nodes.iter().map(|n| n.id + 1).max().unwrap_or(FIRST_HIDDEN).max(FIRST_HIDDEN)
    }

    /// Checks the structural invariants and returns an evaluation order.
    pub fn topological_order(&self) -> Result<Vec<u32>> {
        let ids: BTreeSet<u32> = self.nodes.iter().map(|n| n.id).collect();
        if ids.len() != self.nodes.len() {
            return Err(Error::InvalidGenome("duplicate node id".into()));
        }
        for required in [INPUT_X, INPUT_Y, INPUT_D, OUTPUT] {
            if !ids.contains(&required) {
                return Err(Error::InvalidGenome(format!("missing node {required}")));
            }
        }
        let mut indegree: BTreeMap<u32, usize> = ids.iter().map(|&id| (id, 0)).collect();
        let mut out: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for c in &self.conns {
            if !ids.contains(&c.src) || !ids.contains(&c.dst) {
                return Err(Error::InvalidGenome(format!("dangling connection {}->{}", c.src, c.dst)));
            }
            if c.dst <= INPUT_D {
                return Err(Error::InvalidGenome(format!("connection into input {}", c.dst)));
            }
            if c.src == OUTPUT {
                return Err(Error::InvalidGenome("connection out of the output node".into()));
            }
            if !c.w.is_finite() {
                return Err(Error::InvalidGenome(format!("non-finite weight on {}->{}", c.src, c.dst)));
            }
            *indegree.get_mut(&c.dst).unwrap() += 1;
            out.entry(c.src).or_default().push(c.dst);
        }
        let mut ready: Vec<u32> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
        ready.reverse();
        let mut order = Vec::with_capacity(ids.len());
        while let Some(id) = ready.pop() {
            order.push(id);
            if let Some(dsts) = out.get(&id) {
                for &d in dsts {
                    let e = indegree.get_mut(&d).unwrap();
                    *e -= 1;
                    if *e == 0 {
                        ready.push(d);
                    }
                }
            }
        }
        if order.len() != ids.len() {
            return Err(Error::InvalidGenome("connection graph has a cycle".into()));
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        self.topological_order().map(|_| ())
    }

    /// True when `to` is reachable from `from` over any connection.
    fn reaches(&self, from: u32, to: u32) -> bool {
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if seen.insert(n) {
                stack.extend(self.conns.iter().filter(|c| c.src == n).map(|c| c.dst));
            }
        }
        false
    }
}

/// Compiled genome for fast per-cell evaluation.
struct Program {
    /// (node slot, activation, incoming (slot, weight) list) in evaluation order.
    steps: Vec<(usize, Activation, Vec<(usize, f64)>)>,
    slots: usize,
    output: usize,
}

impl Program {
    fn compile(genome: &CppnGenome) -> Result<Self> {
        let order = genome.topological_order()?;
        let slot: BTreeMap<u32, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let act: BTreeMap<u32, Activation> = genome.nodes.iter().map(|n| (n.id, n.act)).collect();
        let mut steps = Vec::new();
        for &id in &order {
            if id <= INPUT_D {
                continue;
            }
            let incoming = genome
                .conns
                .iter()
                .filter(|c| c.on && c.dst == id)
                .map(|c| (slot[&c.src], c.w))
                .collect();
            steps.push((slot[&id], act[&id], incoming));
        }
        Ok(Self { steps, slots: order.len(), output: slot[&OUTPUT] })
    }

    fn eval(&self, inputs: [(usize, f64); 3], values: &mut [f64]) -> f64 {
        for (s, v) in inputs {
            values[s] = v;
        }
        for (s, act, incoming) in &self.steps {
            let sum: f64 = incoming.iter().map(|&(src, w)| w * values[src]).sum();
            values[*s] = act.apply(sum);
        }
        values[self.output]
    }
}

/// Output squashing applied at the output node.
#[inline]
pub fn squash(v: f64) -> f64 {
    (v.tanh() + 1.0) / 2.0
}

/// Normalized input coordinates of a cell: `x, y ∈ [-1, 1]` and the distance
/// to the grid center rescaled from `[0, 1]` to `[-1, 1]`.
pub fn cell_inputs(y: usize, x: usize, height: usize, width: usize) -> (f64, f64, f64) {
    let norm = |i: usize, n: usize| if n > 1 { (2 * i) as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    let (xv, yv) = (norm(x, width), norm(y, height));
    let d = (xv * xv + yv * yv).sqrt() / std::f64::consts::SQRT_2;
    (xv, yv, 2.0 * d - 1.0)
}

pub fn render_init_state(
    genome: &CppnGenome,
    height: usize,
    width: usize,
    config: &RenderConfig,
) -> Result<Grid> {
    let program = Program::compile(genome)?;
    let order = genome.topological_order()?;
    let slot_of = |id: u32| order.iter().position(|&o| o == id).unwrap();
    let (sx, sy, sd) = (slot_of(INPUT_X), slot_of(INPUT_Y), slot_of(INPUT_D));
    let mut values = vec![0.0; program.slots];
    let mask_radius = config.mask_radius_fraction.map(|f| f * height.min(width) as f64);
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    Ok(Grid::from_fn(height, width, |y, x| {
        if let Some(r) = mask_radius {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if dy * dy + dx * dx > r * r {
                return 0.0;
            }
        }
        let (xv, yv, dv) = cell_inputs(y, x, height, width);
        squash(program.eval([(sx, xv), (sy, yv), (sd, dv)], &mut values))
    }))
}

fn input_and_output_nodes() -> Vec<NodeGene> {
    [INPUT_X, INPUT_Y, INPUT_D, OUTPUT]
        .into_iter()
        .map(|id| NodeGene { id, act: Activation::Identity })
        .collect()
}

/// Fully feed-forward genome with a uniformly drawn number of hidden nodes.
pub fn random_genome<R: Rng + ?Sized>(rng: &mut R, config: &MutationConfig) -> CppnGenome {
    let hidden = rng.gen_range(config.min_hidden..=config.max_hidden);
    let mut nodes = input_and_output_nodes();
    let hidden_ids: Vec<u32> = (0..hidden as u32).map(|i| FIRST_HIDDEN + i).collect();
    for &id in &hidden_ids {
        let act = *Activation::ALL.choose(rng).unwrap();
        nodes.push(NodeGene { id, act });
    }
    let range = config.init_weight_range;
    let mut conns = Vec::new();
    let mut connect = |src: u32, dst: u32, rng: &mut R| {
        conns.push(ConnGene { src, dst, w: rng.gen_range(-range..=range), on: true });
    };
    // Sources in order: inputs, then hidden nodes; each feeds every later node.
    let mut sources = vec![INPUT_X, INPUT_Y, INPUT_D];
    for &h in &hidden_ids {
        for &s in &sources {
            connect(s, h, rng);
        }
        sources.push(h);
    }
    for &s in &sources {
        connect(s, OUTPUT, rng);
    }
    CppnGenome { nodes, conns }
}

/// Applies weight jitter, add-node, add-connection and activation swaps.
pub fn mutate_genome<R: Rng + ?Sized>(genome: &CppnGenome, rng: &mut R, config: &MutationConfig) -> CppnGenome {
    let mut g = genome.clone();
    let jitter = Normal::new(0.0, config.weight_jitter_std.max(0.0)).expect("finite std");
    for c in &mut g.conns {
        if rng.gen::<f64>() < config.weight_jitter_prob {
            c.w += jitter.sample(rng);
        }
    }
    if rng.gen::<f64>() < config.add_node_prob {
        let enabled: Vec<usize> = (0..g.conns.len()).filter(|&i| g.conns[i].on).collect();
        if let Some(&i) = enabled.choose(rng) {
            let id = g.next_id();
            let (src, dst, w) = (g.conns[i].src, g.conns[i].dst, g.conns[i].w);
            g.conns[i].on = false;
            g.nodes.push(NodeGene { id, act: *Activation::ALL.choose(rng).unwrap() });
            g.conns.push(ConnGene { src, dst: id, w: 1.0, on: true });
            g.conns.push(ConnGene { src: id, dst, w, on: true });
        }
    }
    if rng.gen::<f64>() < config.add_conn_prob {
        let ids: Vec<u32> = g.nodes.iter().map(|n| n.id).collect();
        for _ in 0..32 {
            let src = *ids.choose(rng).unwrap();
            let dst = *ids.choose(rng).unwrap();
            let valid = src != OUTPUT
                && dst > INPUT_D
                && src != dst
                && !g.conns.iter().any(|c| c.src == src && c.dst == dst)
                && !g.reaches(dst, src);
            if valid {
                let range = config.init_weight_range;
                g.conns.push(ConnGene { src, dst, w: rng.gen_range(-range..=range), on: true });
                break;
            }
        }
    }
    for n in g.nodes.iter_mut().filter(|n| n.id >= FIRST_HIDDEN) {
        if rng.gen::<f64>() < config.activation_swap_prob {
            n.act = *Activation::ALL.choose(rng).unwrap();
        }
    }
    debug_assert!(g.validate().is_ok());
    g
}

/// The controllable parameter vector θ: update rule plus initial-state genome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub rule: UpdateRuleParams,
    pub genome: CppnGenome,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_genome(c: f64) -> CppnGenome {
        let mut nodes = input_and_output_nodes();
        nodes.push(NodeGene { id: FIRST_HIDDEN, act: Activation::Gaussian });
        let w = (2.0 * c - 1.0).atanh();
        CppnGenome { nodes, conns: vec![ConnGene { src: FIRST_HIDDEN, dst: OUTPUT, w, on: true }] }
    }

    #[test]
    fn constant_genome_renders_uniform_grid() {
        let g = render_init_state(&constant_genome(0.3), 12, 10, &RenderConfig { mask_radius_fraction: None })
            .unwrap();
        assert!(g.values().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn radial_genome_is_symmetric() {
        let mut nodes = input_and_output_nodes();
        nodes.push(NodeGene { id: FIRST_HIDDEN, act: Activation::Gaussian });
        let genome = CppnGenome {
            nodes,
            conns: vec![
                ConnGene { src: INPUT_D, dst: FIRST_HIDDEN, w: 2.0, on: true },
                ConnGene { src: FIRST_HIDDEN, dst: OUTPUT, w: 1.5, on: true },
            ],
        };
        let cfg = RenderConfig::default();
        let g = render_init_state(&genome, 32, 32, &cfg).unwrap();
        assert!(g.max_abs_diff(&g.rotated90()) < 1e-12);
        assert!(g.max_abs_diff(&g.flipped_horizontal()) < 1e-12);
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn cycles_are_rejected() {
        let mut g = constant_genome(0.5);
        g.nodes.push(NodeGene { id: 5, act: Activation::Tanh });
        g.conns.push(ConnGene { src: FIRST_HIDDEN, dst: 5, w: 1.0, on: true });
        g.conns.push(ConnGene { src: 5, dst: FIRST_HIDDEN, w: 1.0, on: true });
        assert!(matches!(render_init_state(&g, 4, 4, &RenderConfig::default()), Err(Error::InvalidGenome(_))));
    }

    #[test]
    fn same_seed_same_genome() {
        let cfg = MutationConfig::default();
        let a = random_genome(&mut ChaCha8Rng::seed_from_u64(5), &cfg);
        let b = random_genome(&mut ChaCha8Rng::seed_from_u64(5), &cfg);
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!((1..=4).contains(&a.hidden_count()));
    }

    #[test]
    fn disabled_mutation_is_identity() {
        let cfg = MutationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_genome(&mut rng, &cfg);
        assert_eq!(mutate_genome(&g, &mut rng, &MutationConfig::disabled()), g);
    }

    #[test]
    fn genome_json_shape() {
        let v = serde_json::to_value(constant_genome(0.5)).unwrap();
        assert_eq!(v["nodes"][4]["act"], "gaussian");
        assert_eq!(v["conns"][0]["on"], true);
        assert!(v["conns"][0].get("w").is_some());
    }
}
