//! Immutable views of a run published at stage boundaries.

use std::collections::BTreeMap;

use holmes_core::imgep::{InterestScores, Record, Representation};
use holmes_core::tree::{child_ids, parent_id, HolmesTree, ROOT_ID};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeSummary {
    pub id: String,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub leaf: bool,
    pub frozen: bool,
    /// Discoveries whose routing path visits this node.
    pub population: usize,
}

/// Tree and placements as of one committed stage.
#[derive(Clone, Debug, Default)]
pub struct Snapshot {
    pub stage: usize,
    pub runs_done: usize,
    pub nodes: Vec<NodeSummary>,
    pub scores: InterestScores,
    /// Per leaf: member runs and their embeddings in that leaf's space.
    members: BTreeMap<String, Vec<(usize, Vec<f64>)>>,
}

impl Snapshot {
    /// Builds a snapshot from the first `runs_done` records.
    pub fn build(
        stage: usize,
        runs_done: usize,
        tree: Option<&HolmesTree>,
        records: &[Record],
        scores: &InterestScores,
    ) -> Self {
        let records = &records[..runs_done.min(records.len())];
        let mut population: BTreeMap<&str, usize> = BTreeMap::new();
        for r in records {
            for id in &r.path {
                *population.entry(id.as_str()).or_default() += 1;
            }
        }
        let nodes = match tree {
            Some(t) => t
                .nodes()
                .iter()
                .map(|(id, node)| {
                    let leaf = t.is_leaf(id);
                    let children = if leaf {
                        Vec::new()
                    } else {
                        let (l, r) = child_ids(id);
                        vec![l, r]
                    };
                    NodeSummary {
                        id: id.clone(),
                        parent: parent_id(id).map(str::to_string),
                        children,
                        leaf,
                        frozen: node.module.frozen,
                        population: population.get(id.as_str()).copied().unwrap_or(0),
                    }
                })
                .collect(),
            None => vec![NodeSummary {
                id: ROOT_ID.to_string(),
                parent: None,
                children: Vec::new(),
                leaf: true,
                frozen: false,
                population: records.len(),
            }],
        };
        let mut members: BTreeMap<String, Vec<(usize, Vec<f64>)>> =
            nodes.iter().filter(|n| n.leaf).map(|n| (n.id.clone(), Vec::new())).collect();
        for r in records {
            if let Some(list) = members.get_mut(r.leaf()) {
                if let Some(e) = r.emb.get(r.leaf()) {
                    list.push((r.run, e.clone()));
                }
            }
        }
        Self { stage, runs_done: records.len(), nodes, scores: scores.clone(), members }
    }

    pub fn from_representation(
        stage: usize,
        runs_done: usize,
        repr: &Representation,
        records: &[Record],
        scores: &InterestScores,
    ) -> Self {
        Self::build(stage, runs_done, repr.tree(), records, scores)
    }

    pub fn node(&self, id: &str) -> Option<&NodeSummary> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn leaves(&self) -> Vec<String> {
        self.nodes.iter().filter(|n| n.leaf).map(|n| n.id.clone()).collect()
    }

    pub fn members(&self, leaf: &str) -> &[(usize, Vec<f64>)] {
        self.members.get(leaf).map_or(&[], Vec::as_slice)
    }
}
