//! Road-network representation: weighted directed adjacency, transition
//! matrices, diffusion priors, hop-limited directed neighborhoods, and
//! vector-autoregression edge weights.

pub mod embedding;

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::data::SpeedTable;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use embedding::{line_embed, load_embeddings, save_embeddings, EmbeddingTable};

/// A directed edge in the input description of a road network.
#[derive(Clone, Debug)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub distance: f64,
}

/// How raw edge distances become adjacency weights.
#[derive(Clone, Debug)]
pub enum Weighting {
    /// `A[i][j] = exp(-dist^2 / sigma^2)`, zeroed below `cutoff`.
    /// `sigma` defaults to the population standard deviation of all
    /// edge distances.
    Gaussian { sigma: Option<f64>, cutoff: f64 },
    /// Edge distances used directly as weights.
    Raw,
    /// Gaussian kernel weight multiplied by a per-edge VAR correlation
    /// weight (aligned with the edge list).
    VarAugmented {
        sigma: Option<f64>,
        cutoff: f64,
        var_weights: Vec<f64>,
    },
}

impl Weighting {
    pub fn gaussian_default() -> Self {
        Weighting::Gaussian {
            sigma: None,
            cutoff: 0.1,
        }
    }
}

/// Attention direction over the road graph. Heads at odd indices attend
/// inflow (predecessor) nodes, even indices outflow (successor) nodes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Direction {
    Inflow,
    Outflow,
}

impl Direction {
    /// Direction assigned to attention head `h` by index parity.
    pub fn for_head(h: usize) -> Direction {
        if h % 2 == 1 {
            Direction::Inflow
        } else {
            Direction::Outflow
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Direction::Inflow => "inflow",
            Direction::Outflow => "outflow",
        }
    }
}

/// Directed weighted sensor graph. `adjacency[i][j] > 0` means an edge
/// from node `i` to node `j`.
#[derive(Clone, Debug)]
pub struct RoadGraph {
    node_ids: Vec<String>,
    index: HashMap<String, usize>,
    adjacency: Matrix,
    pub coordinates: Option<Vec<(f64, f64)>>,
}

impl RoadGraph {
    pub fn from_adjacency(node_ids: Vec<String>, adjacency: Matrix) -> Result<Self> {
        let n = node_ids.len();
        if adjacency.shape() != (n, n) {
            return Err(Error::Graph(format!(
                "adjacency {:?} for {} nodes",
                adjacency.shape(),
                n
            )));
        }
        if adjacency.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Graph("adjacency weights must be finite and nonnegative".into()));
        }
        let mut index = HashMap::new();
        for (i, id) in node_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node id {id}")));
            }
        }
        Ok(RoadGraph {
            node_ids,
            index,
            adjacency,
            coordinates: None,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.data().iter().filter(|&&v| v > 0.0).count()
    }

    /// Direct successors of `i` (targets of edges leaving `i`).
    pub fn successors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.node_count();
        (0..n).filter(move |&j| self.adjacency.get(i, j) > 0.0)
    }

    /// Direct predecessors of `i` (sources of edges entering `i`).
    pub fn predecessors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.node_count();
        (0..n).filter(move |&j| self.adjacency.get(j, i) > 0.0)
    }
}

/// Builds a [`RoadGraph`] from an edge list under the chosen weighting.
pub fn build_graph(nodes: &[String], edges: &[Edge], weighting: &Weighting) -> Result<RoadGraph> {
    let n = nodes.len();
    let mut index = HashMap::new();
    for (i, id) in nodes.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(Error::Graph(format!("duplicate node id {id}")));
        }
    }
    for e in edges {
        if e.distance <= 0.0 || !e.distance.is_finite() {
            return Err(Error::Graph(format!(
                "edge {} -> {}: distance must be positive, got {}",
                e.from, e.to, e.distance
            )));
        }
    }
    if let Weighting::VarAugmented { var_weights, .. } = weighting {
        if var_weights.len() != edges.len() {
            return Err(Error::Graph(format!(
                "{} VAR weights for {} edges",
                var_weights.len(),
                edges.len()
            )));
        }
    }

    let lookup = |id: &str| -> Result<usize> {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Graph(format!("unknown node id {id}")))
    };

    let sigma_of = |sigma: &Option<f64>| -> f64 {
        sigma.unwrap_or_else(|| {
            let ds: Vec<f64> = edges.iter().map(|e| e.distance).collect();
            let mean = ds.iter().sum::<f64>() / ds.len() as f64;
            let var = ds.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / ds.len() as f64;
            var.sqrt()
        })
    };

    let mut adjacency = Matrix::zeros(n, n);
    for (k, e) in edges.iter().enumerate() {
        let (i, j) = (lookup(&e.from)?, lookup(&e.to)?);
        let w = match weighting {
            Weighting::Raw => e.distance,
            Weighting::Gaussian { sigma, cutoff } => {
                let s = sigma_of(sigma);
                let w = (-e.distance * e.distance / (s * s)).exp();
                if w < *cutoff {
                    0.0
                } else {
                    w
                }
            }
            Weighting::VarAugmented { sigma, cutoff, var_weights } => {
                let s = sigma_of(sigma);
                let w = (-e.distance * e.distance / (s * s)).exp();
                if w < *cutoff {
                    0.0
                } else {
                    w * var_weights[k]
                }
            }
        };
        adjacency.set(i, j, w);
    }
    RoadGraph::from_adjacency(nodes.to_vec(), adjacency)
}

/// Row-stochastic transition matrices of the diffusion process:
/// outgoing `D_O^-1 A` and incoming `D_I^-1 A^T`. Zero-degree rows stay
/// all-zero.
#[derive(Clone, Debug)]
pub struct TransitionPair {
    pub outgoing: Matrix,
    pub incoming: Matrix,
}

pub fn transition_matrices(g: &RoadGraph) -> TransitionPair {
    let n = g.node_count();
    let a = g.adjacency();
    let mut outgoing = Matrix::zeros(n, n);
    let mut incoming = Matrix::zeros(n, n);
    for i in 0..n {
        let out_deg: f64 = a.row(i).iter().sum();
        if out_deg > 0.0 {
            for j in 0..n {
                outgoing.set(i, j, a.get(i, j) / out_deg);
            }
        }
        let in_deg: f64 = (0..n).map(|j| a.get(j, i)).sum();
        if in_deg > 0.0 {
            for j in 0..n {
                incoming.set(i, j, a.get(j, i) / in_deg);
            }
        }
    }
    TransitionPair { outgoing, incoming }
}

/// Per-layer, per-head diffusion-prior weights `beta[layer][head][k]`
/// for `k = 0..=K`.
#[derive(Clone, Debug)]
pub struct DiffusionPriorParams {
    pub beta: Vec<Vec<Vec<f64>>>,
    pub truncation: usize,
}

impl DiffusionPriorParams {
    pub fn new(layers: usize, heads: usize, truncation: usize, init: impl Fn() -> f64) -> Self {
        let beta = (0..layers)
            .map(|_| {
                (0..heads)
                    .map(|_| (0..=truncation).map(|_| init()).collect())
                    .collect()
            })
            .collect();
        DiffusionPriorParams { beta, truncation }
    }
}

/// Powers `M^0..=M^K` of the transition matrix for one direction.
/// `M^0` is the identity.
pub fn transition_powers(pair: &TransitionPair, direction: Direction, truncation: usize) -> Vec<Matrix> {
    let m = match direction {
        Direction::Inflow => &pair.incoming,
        Direction::Outflow => &pair.outgoing,
    };
    let n = m.rows();
    let mut powers = Vec::with_capacity(truncation + 1);
    powers.push(Matrix::identity(n));
    for k in 1..=truncation {
        let next = powers[k - 1].matmul(m).expect("square");
        powers.push(next);
    }
    powers
}

/// Diffusion prior for head `head_index`: odd heads sum powers of the
/// incoming transition matrix, even heads of the outgoing one, weighted
/// by `beta[k]`.
pub fn diffusion_prior(
    pair: &TransitionPair,
    beta: &[f64],
    head_index: usize,
    truncation: usize,
) -> Result<Matrix> {
    if beta.len() != truncation + 1 {
        return Err(Error::Contract(format!(
            "diffusion_prior: beta has {} entries, need K+1 = {}",
            beta.len(),
            truncation + 1
        )));
    }
    let powers = transition_powers(pair, Direction::for_head(head_index), truncation);
    let n = powers[0].rows();
    let mut out = Matrix::zeros(n, n);
    for (b, p) in beta.iter().zip(&powers) {
        for (o, &x) in out.data_mut().iter_mut().zip(p.data()) {
            *o += b * x;
        }
    }
    Ok(out)
}

/// Nodes reachable within `range` directed hops of `i`, inclusive of
/// `i` itself. Inflow follows edges backwards (predecessors), outflow
/// forwards (successors).
pub fn neighborhood(
    g: &RoadGraph,
    i: usize,
    direction: Direction,
    range: usize,
) -> Result<BTreeSet<usize>> {
    if i >= g.node_count() {
        return Err(Error::Graph(format!(
            "node index {} out of range (N = {})",
            i,
            g.node_count()
        )));
    }
    if range == 0 {
        return Err(Error::Contract("neighborhood: range must be >= 1".into()));
    }
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    seen.insert(i);
    let mut queue = VecDeque::new();
    queue.push_back((i, 0usize));
    while let Some((node, depth)) = queue.pop_front() {
        if depth == range {
            continue;
        }
        let next: Vec<usize> = match direction {
            Direction::Inflow => g.predecessors(node).collect(),
            Direction::Outflow => g.successors(node).collect(),
        };
        for nb in next {
            if seen.insert(nb) {
                queue.push_back((nb, depth + 1));
            }
        }
    }
    Ok(seen)
}

/// `mask[i * N + j]` is true iff `j` is in `neighborhood(i, direction, range)`.
pub fn neighborhood_mask(g: &RoadGraph, direction: Direction, range: usize) -> Result<Vec<bool>> {
    let n = g.node_count();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in neighborhood(g, i, direction, range)? {
            mask[i * n + j] = true;
        }
    }
    Ok(mask)
}

/// VAR cross-coefficient weight for one ordered node pair.
#[derive(Clone, Copy, Debug)]
pub struct VarEdgeWeight {
    /// `|cross coefficient|` clipped to `[0, 1]`.
    pub weight: f64,
    /// Set when the regression was singular (e.g. constant series) and
    /// the weight was forced to zero.
    pub degenerate: bool,
}

/// Fits a bivariate vector autoregression per `(i, j)` pair on the
/// training speeds and returns the influence of `j`'s past on `i`'s
/// present as an edge weight.
pub fn var_edge_weights(
    train_speeds: &SpeedTable,
    pairs: &[(String, String)],
    lag: usize,
) -> Result<Vec<VarEdgeWeight>> {
    if lag == 0 {
        return Err(Error::Contract("var_edge_weights: lag must be >= 1".into()));
    }
    let t_total = train_speeds.len();
    if t_total < 10 * lag {
        return Err(Error::Data(format!(
            "var_edge_weights: need at least {} observations, got {}",
            10 * lag,
            t_total
        )));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (to_id, from_id) in pairs {
        let i = train_speeds
            .node_index(to_id)
            .ok_or_else(|| Error::Graph(format!("unknown node id {to_id}")))?;
        let j = train_speeds
            .node_index(from_id)
            .ok_or_else(|| Error::Graph(format!("unknown node id {from_id}")))?;
        out.push(fit_bivariate_var(train_speeds, i, j, lag)?);
    }
    Ok(out)
}

/// Least-squares fit of `x_i(t) = c + sum_l a_l x_i(t-l) + sum_l b_l x_j(t-l)`;
/// the weight is `|sum_l b_l|` clipped to `[0, 1]`.
fn fit_bivariate_var(table: &SpeedTable, i: usize, j: usize, lag: usize) -> Result<VarEdgeWeight> {
    let t_total = table.len();
    let dim = 2 * lag + 1;
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for t in lag..t_total {
        let mut ok = table.observed(t, i);
        let mut x = Vec::with_capacity(dim);
        for l in 1..=lag {
            ok &= table.observed(t - l, i) && table.observed(t - l, j);
            x.push(table.speed(t - l, i));
        }
        for l in 1..=lag {
            x.push(table.speed(t - l, j));
        }
        x.push(1.0);
        if ok {
            rows.push((x, table.speed(t, i)));
        }
    }
    if rows.len() < 10 * lag {
        return Err(Error::Data(format!(
            "var_edge_weights: only {} usable rows after masking, need {}",
            rows.len(),
            10 * lag
        )));
    }

    // Normal equations X^T X b = X^T y.
    let mut xtx = vec![vec![0.0; dim]; dim];
    let mut xty = vec![0.0; dim];
    for (x, y) in &rows {
        for a in 0..dim {
            for b in 0..dim {
                xtx[a][b] += x[a] * x[b];
            }
            xty[a] += x[a] * y;
        }
    }
    match solve_linear(&mut xtx, &mut xty) {
        Some(coeffs) => {
            let cross: f64 = coeffs[lag..2 * lag].iter().sum();
            Ok(VarEdgeWeight {
                weight: cross.abs().clamp(0.0, 1.0),
                degenerate: false,
            })
        }
        None => Ok(VarEdgeWeight {
            weight: 0.0,
            degenerate: true,
        }),
    }
}

/// Gaussian elimination with partial pivoting; `None` on singularity.
fn solve_linear(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[pivot][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    Some(x)
}
