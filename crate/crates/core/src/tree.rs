//! Finite scenario-tree market models: a rooted tree of nodes carrying branch
//! probabilities and d-dimensional price vectors, one filtration atom per node.
//! Immutable after load; validation happens at construction.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Read;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("invalid probabilities at node {node}: children sum to {sum}")]
    InvalidProbabilities { node: i64, sum: f64 },
    #[error("broken filiation: {0}")]
    BrokenFiliation(String),
    #[error("node {node} is a leaf")]
    LeafNode { node: i64 },
    #[error("tree has {nodes} nodes, limit is {max}")]
    TooLarge { nodes: usize, max: usize },
}

pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Node {
    /// External id from the input file; arbitrary but unique.
    pub id: i64,
    pub time: usize,
    /// Internal index of the parent; None for the root.
    pub parent: Option<usize>,
    /// Conditional probability of reaching this node from its parent.
    pub branch_prob: f64,
    pub prices: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScenarioTree {
    d: usize,
    horizon: usize,
    nodes: Vec<Node>,
    root: usize,
    children: Vec<Vec<usize>>,
    path_prob: Vec<f64>,
    by_time: Vec<Vec<usize>>,
}

/// One increment distribution at a non-leaf node. Increments with identical
/// vectors among siblings are merged, probabilities added: the support set,
/// not the multiplicity, drives the geometry.
#[derive(Debug, Clone)]
pub struct ConditionalDist {
    pub parent: usize,
    pub increments: Vec<(Vec<f64>, f64)>,
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TreeJson {
    d: usize,
    #[serde(rename = "T")]
    horizon: usize,
    nodes: Vec<NodeJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeJson {
    id: i64,
    parent: Option<i64>,
    prob: ProbJson,
    prices: Vec<f64>,
}

/// Probabilities are accepted as JSON numbers or decimal strings; either way
/// they parse to binary floats. Dyadic inputs are therefore exact.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ProbJson {
    Number(f64),
    Text(String),
}

impl ProbJson {
    fn value(&self) -> Result<f64, TreeError> {
        match self {
            ProbJson::Number(v) => Ok(*v),
            ProbJson::Text(s) => s
                .trim()
                .parse::<f64>()
                .map_err(|e| TreeError::MalformedInput(format!("bad probability {s:?}: {e}"))),
        }
    }
}

/// Node description for programmatic construction.
#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub id: i64,
    pub parent: Option<i64>,
    pub prob: f64,
    pub prices: Vec<f64>,
}

impl ScenarioTree {
    pub fn load<R: Read>(mut source: R, max_nodes: usize) -> Result<Self, TreeError> {
        let mut buf = String::new();
        source
            .read_to_string(&mut buf)
            .map_err(|e| TreeError::MalformedInput(e.to_string()))?;
        Self::from_json_str(&buf, max_nodes)
    }

    pub fn from_json_str(s: &str, max_nodes: usize) -> Result<Self, TreeError> {
        let parsed: TreeJson =
            serde_json::from_str(s).map_err(|e| TreeError::MalformedInput(e.to_string()))?;
        let mut specs = Vec::with_capacity(parsed.nodes.len());
        for n in &parsed.nodes {
            specs.push(NodeSpec {
                id: n.id,
                parent: n.parent,
                prob: n.prob.value()?,
                prices: n.prices.clone(),
            });
        }
        Self::from_parts(parsed.d, parsed.horizon, specs, max_nodes)
    }

    pub fn from_parts(
        d: usize,
        horizon: usize,
        specs: Vec<NodeSpec>,
        max_nodes: usize,
    ) -> Result<Self, TreeError> {
        if horizon < 1 {
            return Err(TreeError::MalformedInput("horizon T must be >= 1".into()));
        }
        if d < 1 {
            return Err(TreeError::MalformedInput("asset count d must be >= 1".into()));
        }
        if specs.len() > max_nodes {
            return Err(TreeError::TooLarge { nodes: specs.len(), max: max_nodes });
        }
        let mut index_of: HashMap<i64, usize> = HashMap::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            if index_of.insert(s.id, i).is_some() {
                return Err(TreeError::MalformedInput(format!("duplicate node id {}", s.id)));
            }
        }

        let mut nodes = Vec::with_capacity(specs.len());
        let mut root = None;
        for s in &specs {
            if s.prices.len() != d {
                return Err(TreeError::MalformedInput(format!(
                    "node {}: expected {d} prices, got {}",
                    s.id,
                    s.prices.len()
                )));
            }
            if s.prices.iter().any(|p| !p.is_finite()) {
                return Err(TreeError::MalformedInput(format!("node {}: non-finite price", s.id)));
            }
            if !(s.prob > 0.0 && s.prob <= 1.0) {
                return Err(TreeError::MalformedInput(format!(
                    "node {}: branch probability {} not in (0,1]",
                    s.id, s.prob
                )));
            }
            let parent = match s.parent {
                None => {
                    if root.is_some() {
                        return Err(TreeError::BrokenFiliation("more than one root".into()));
                    }
                    root = Some(nodes.len());
                    None
                }
                Some(pid) => Some(*index_of.get(&pid).ok_or_else(|| {
                    TreeError::BrokenFiliation(format!("node {}: unknown parent {pid}", s.id))
                })?),
            };
            nodes.push(Node { id: s.id, time: 0, parent, branch_prob: s.prob, prices: s.prices.clone() });
        }
        let root = root.ok_or_else(|| TreeError::BrokenFiliation("no root node".into()))?;
        if nodes[root].branch_prob != 1.0 {
            return Err(TreeError::MalformedInput("root branch probability must be 1".into()));
        }

        // times by walking up; also rejects cycles
        let mut times: Vec<Option<usize>> = vec![None; nodes.len()];
        times[root] = Some(0);
        for i in 0..nodes.len() {
            let mut chain = Vec::new();
            let mut cur = i;
            while times[cur].is_none() {
                chain.push(cur);
                match nodes[cur].parent {
                    Some(p) => {
                        if chain.len() > nodes.len() {
                            return Err(TreeError::BrokenFiliation("parent cycle".into()));
                        }
                        cur = p;
                    }
                    None => break,
                }
            }
            let base = times[cur].ok_or_else(|| {
                TreeError::BrokenFiliation(format!("node {} not connected to root", nodes[i].id))
            })?;
            for (k, &n) in chain.iter().rev().enumerate() {
                times[n] = Some(base + k + 1);
            }
        }
        for (i, t) in times.iter().enumerate() {
            nodes[i].time = t.unwrap();
            if nodes[i].time > horizon {
                return Err(TreeError::BrokenFiliation(format!(
                    "node {} at time {} beyond horizon {horizon}",
                    nodes[i].id, nodes[i].time
                )));
            }
        }

        let mut children = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                children[p].push(i);
            }
        }
        // leaves all at the horizon, children probabilities sum to one
        for (i, n) in nodes.iter().enumerate() {
            if children[i].is_empty() {
                if n.time != horizon {
                    return Err(TreeError::BrokenFiliation(format!(
                        "leaf {} at time {} != horizon {horizon}",
                        n.id, n.time
                    )));
                }
            } else {
                let sum: f64 = children[i].iter().map(|&c| nodes[c].branch_prob).sum();
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(TreeError::InvalidProbabilities { node: n.id, sum });
                }
            }
        }

        let mut path_prob = vec![0.0; nodes.len()];
        let mut by_time = vec![Vec::new(); horizon + 1];
        let mut order: Vec<usize> = (0..nodes.len()).collect();
        order.sort_by_key(|&i| (nodes[i].time, nodes[i].id));
        for &i in &order {
            path_prob[i] = match nodes[i].parent {
                None => 1.0,
                Some(p) => path_prob[p] * nodes[i].branch_prob,
            };
            if !(path_prob[i] > 0.0 && path_prob[i] <= 1.0) {
                return Err(TreeError::MalformedInput(format!(
                    "node {}: path probability {} not in (0,1]",
                    nodes[i].id, path_prob[i]
                )));
            }
            by_time[nodes[i].time].push(i);
        }
        for (i, ch) in children.iter_mut().enumerate() {
            ch.sort_by_key(|&c| nodes[c].id);
            let _ = i;
        }

        Ok(ScenarioTree { d, horizon, nodes, root, children, path_prob, by_time })
    }

    pub fn to_json_string(&self) -> String {
        let nodes: Vec<NodeJson> = {
            let mut order: Vec<usize> = (0..self.nodes.len()).collect();
            order.sort_by_key(|&i| (self.nodes[i].time, self.nodes[i].id));
            order
                .into_iter()
                .map(|i| {
                    let n = &self.nodes[i];
                    NodeJson {
                        id: n.id,
                        parent: n.parent.map(|p| self.nodes[p].id),
                        prob: ProbJson::Number(n.branch_prob),
                        prices: n.prices.clone(),
                    }
                })
                .collect()
        };
        let doc = TreeJson { d: self.d, horizon: self.horizon, nodes };
        serde_json::to_string_pretty(&doc).expect("serializable")
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, ix: usize) -> &Node {
        &self.nodes[ix]
    }

    pub fn index_of(&self, id: i64) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn children(&self, ix: usize) -> &[usize] {
        &self.children[ix]
    }

    pub fn is_leaf(&self, ix: usize) -> bool {
        self.children[ix].is_empty()
    }

    pub fn path_prob(&self, ix: usize) -> f64 {
        self.path_prob[ix]
    }

    pub fn nodes_at(&self, t: usize) -> &[usize] {
        &self.by_time[t]
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_time[self.horizon].iter().copied()
    }

    pub fn non_leaf_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| !self.is_leaf(i))
    }

    /// Price increment from the parent of `child` to `child`.
    pub fn increment(&self, child: usize) -> Vec<f64> {
        let p = self.nodes[child].parent.expect("non-root");
        self.nodes[child]
            .prices
            .iter()
            .zip(self.nodes[p].prices.iter())
            .map(|(a, b)| a - b)
            .collect()
    }

    /// Regular conditional distribution of the next increment at a node,
    /// with duplicate increment vectors merged.
    pub fn conditional_dist(&self, ix: usize) -> Result<ConditionalDist, TreeError> {
        if self.is_leaf(ix) {
            return Err(TreeError::LeafNode { node: self.nodes[ix].id });
        }
        let mut increments: Vec<(Vec<f64>, f64)> = Vec::new();
        for &c in &self.children[ix] {
            let y = self.increment(c);
            match increments.iter_mut().find(|(v, _)| v == &y) {
                Some((_, p)) => *p += self.nodes[c].branch_prob,
                None => increments.push((y, self.nodes[c].branch_prob)),
            }
        }
        Ok(ConditionalDist { parent: ix, increments })
    }
}
