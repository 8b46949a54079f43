//! Spatial attention with sentinel vectors, diffusion priors, and
//! direction-split heads, plus temporal multi-head attention.
//!
//! Hidden states are handled in two row layouts (see
//! [`crate::numerics::tape`]): spatial attention treats each contiguous
//! block of `N` rows as the nodes of one time step, temporal attention
//! treats row `t * seqs + s` as step `t` of sequence `s`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{neighborhood_mask, transition_matrices, transition_powers, Direction, RoadGraph, TransitionPair};
use crate::numerics::tape::{ParamId, ParamStore, Tape, TensorId};
use crate::numerics::{xavier_init, Matrix};
use rand::Rng;

/// Per-head spatial attention parameters. The sentinel key/value
/// projections transform the query node itself; `beta` holds the K+1
/// diffusion-prior weights.
#[derive(Clone, Debug)]
pub struct SpatialHeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_ks: ParamId,
    pub w_v: ParamId,
    pub w_vs: ParamId,
    pub beta: ParamId,
    pub direction: Direction,
}

#[derive(Clone, Debug)]
pub struct SpatialAttentionLayerParams {
    pub heads: Vec<SpatialHeadParams>,
    pub w_o: ParamId,
}

impl SpatialAttentionLayerParams {
    /// Registers all head parameters under `prefix`. Weight matrices use
    /// Xavier initialization; prior weights draw uniformly from
    /// `beta_range`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        truncation: usize,
        beta_range: (f64, f64),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be divisible by head count {heads}"
            )));
        }
        let dk = d_model / heads;
        let mut head_params = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut mat = |name: &str| {
                store.register(format!("{prefix}.head{h}.{name}"), xavier_init(d_model, dk, rng))
            };
            let w_q = mat("w_q");
            let w_k = mat("w_k");
            let w_ks = mat("w_ks");
            let w_v = mat("w_v");
            let w_vs = mat("w_vs");
            let beta = store.register(
                format!("{prefix}.head{h}.beta"),
                Matrix::from_fn(1, truncation + 1, |_, _| {
                    rng.random_range(beta_range.0..=beta_range.1)
                }),
            );
            head_params.push(SpatialHeadParams {
                w_q,
                w_k,
                w_ks,
                w_v,
                w_vs,
                beta,
                direction: Direction::for_head(h),
            });
        }
        let w_o = store.register(format!("{prefix}.w_o"), xavier_init(d_model, d_model, rng));
        Ok(SpatialAttentionLayerParams { heads: head_params, w_o })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Masking {
    None,
    Causal,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AttentionMode {
    SelfAttention,
    EncoderDecoder,
}

#[derive(Clone, Debug)]
pub struct TemporalHeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug)]
pub struct TemporalAttentionParams {
    pub heads: Vec<TemporalHeadParams>,
    pub w_o: ParamId,
    pub masking: Masking,
    pub mode: AttentionMode,
}

impl TemporalAttentionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        masking: Masking,
        mode: AttentionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be divisible by head count {heads}"
            )));
        }
        if masking == Masking::Causal && mode == AttentionMode::EncoderDecoder {
            return Err(Error::Contract(
                "causal masking applies only to self attention".into(),
            ));
        }
        let dk = d_model / heads;
        let head_params = (0..heads)
            .map(|h| {
                let mut mat = |name: &str| {
                    store.register(format!("{prefix}.head{h}.{name}"), xavier_init(d_model, dk, rng))
                };
                TemporalHeadParams {
                    w_q: mat("w_q"),
                    w_k: mat("w_k"),
                    w_v: mat("w_v"),
                }
            })
            .collect();
        let w_o = store.register(format!("{prefix}.w_o"), xavier_init(d_model, d_model, rng));
        Ok(TemporalAttentionParams { heads: head_params, w_o, masking, mode })
    }
}

/// One query's attention weights, captured during a recording forward
/// pass. For spatial attention `query` is a node and `weights` are
/// keyed by node; for temporal attention `query` is a node whose
/// weights are keyed by key time step.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub direction: Option<Direction>,
    pub time_step: usize,
    pub query: usize,
    /// `(key, weight)` pairs; exact zeros omitted.
    pub weights: Vec<(usize, f64)>,
    pub sentinel_weight: Option<f64>,
}

/// Graph-derived constants shared by every spatial attention layer:
/// directed neighborhood masks and truncated transition-matrix powers.
#[derive(Clone, Debug)]
pub struct GraphArtifacts {
    pub n: usize,
    pub range: usize,
    pub truncation: usize,
    pub pair: TransitionPair,
    inflow_mask: Vec<bool>,
    outflow_mask: Vec<bool>,
    union_mask: Vec<bool>,
    powers_inflow: Arc<Vec<Matrix>>,
    powers_outflow: Arc<Vec<Matrix>>,
}

impl GraphArtifacts {
    pub fn new(g: &RoadGraph, truncation: usize, range: usize) -> Result<Self> {
        let pair = transition_matrices(g);
        let inflow_mask = neighborhood_mask(g, Direction::Inflow, range)?;
        let outflow_mask = neighborhood_mask(g, Direction::Outflow, range)?;
        let union_mask = inflow_mask
            .iter()
            .zip(&outflow_mask)
            .map(|(&a, &b)| a || b)
            .collect();
        let powers_inflow = Arc::new(transition_powers(&pair, Direction::Inflow, truncation));
        let powers_outflow = Arc::new(transition_powers(&pair, Direction::Outflow, truncation));
        Ok(GraphArtifacts {
            n: g.node_count(),
            range,
            truncation,
            pair,
            inflow_mask,
            outflow_mask,
            union_mask,
            powers_inflow,
            powers_outflow,
        })
    }

    pub fn powers(&self, direction: Direction) -> Arc<Vec<Matrix>> {
        match direction {
            Direction::Inflow => Arc::clone(&self.powers_inflow),
            Direction::Outflow => Arc::clone(&self.powers_outflow),
        }
    }

    /// `N x N` neighborhood mask; `None` yields the inflow/outflow union.
    pub fn node_mask(&self, direction: Option<Direction>) -> &[bool] {
        match direction {
            Some(Direction::Inflow) => &self.inflow_mask,
            Some(Direction::Outflow) => &self.outflow_mask,
            None => &self.union_mask,
        }
    }

    /// Mask for the blocked spatial logit matrix: the `N x N` pattern
    /// tiled `groups` times, with an always-allowed sentinel column
    /// appended when `sentinel` is set.
    pub fn spatial_mask(
        &self,
        direction: Option<Direction>,
        groups: usize,
        sentinel: bool,
    ) -> Arc<Vec<bool>> {
        let n = self.n;
        let base = self.node_mask(direction);
        let width = n + usize::from(sentinel);
        let mut mask = Vec::with_capacity(groups * n * width);
        for _ in 0..groups {
            for i in 0..n {
                mask.extend_from_slice(&base[i * n..(i + 1) * n]);
                if sentinel {
                    mask.push(true);
                }
            }
        }
        Arc::new(mask)
    }
}

/// `mask[q * t + k]` allows key step `k` for query step `q` iff `k <= q`.
pub fn causal_mask(t: usize) -> Result<Vec<bool>> {
    if t == 0 {
        return Err(Error::Contract("causal_mask: T must be >= 1".into()));
    }
    let mut mask = vec![false; t * t];
    for q in 0..t {
        for k in 0..=q {
            mask[q * t + k] = true;
        }
    }
    Ok(mask)
}

/// Mask for the sequence-layout score matrix `(tq*seqs) x tk`.
pub fn temporal_mask(tq: usize, tk: usize, seqs: usize, causal: bool) -> Result<Arc<Vec<bool>>> {
    if causal && tq != tk {
        return Err(Error::Contract(
            "causal temporal mask requires matching query/key lengths".into(),
        ));
    }
    let mut mask = vec![true; tq * seqs * tk];
    if causal {
        for q in 0..tq {
            for s in 0..seqs {
                for k in q + 1..tk {
                    mask[(q * seqs + s) * tk + k] = false;
                }
            }
        }
    }
    Ok(Arc::new(mask))
}

/// Behavior toggles for one spatial attention call.
#[derive(Clone, Copy, Debug)]
pub struct SpatialOpts {
    pub use_sentinel: bool,
    pub use_prior: bool,
    /// When false every head attends the inflow/outflow union.
    pub directed: bool,
    /// Keep the sentinel energy un-exponentiated in the denominator.
    pub literal_sentinel_denominator: bool,
    /// Attention-weight dropout rate; active only when `rng` is given.
    pub dropout: f64,
}

impl SpatialOpts {
    pub fn standard(dropout: f64) -> Self {
        SpatialOpts {
            use_sentinel: true,
            use_prior: true,
            directed: true,
            literal_sentinel_denominator: false,
            dropout,
        }
    }
}

/// Spatial attention over contiguous node blocks. `z` is
/// `(groups * N) x d_model`; each block of `N` rows is one time step
/// whose nodes attend their directed neighborhoods plus (optionally)
/// their sentinel. Returns the `(groups * N) x d_model` output.
///
/// Recording assumes `groups` are the time steps of a single example
/// and labels records accordingly (`time_base + group`).
#[allow(clippy::too_many_arguments)]
pub fn spatial_attention(
    tape: &mut Tape,
    store: &ParamStore,
    art: &GraphArtifacts,
    z: TensorId,
    groups: usize,
    params: &SpatialAttentionLayerParams,
    opts: &SpatialOpts,
    mut rng: Option<&mut ChaCha8Rng>,
    mut records: Option<(&mut Vec<AttentionRecord>, usize, usize)>,
) -> Result<TensorId> {
    let n = art.n;
    let d_model = store.get(params.w_o).rows();
    let rows = tape.value(z).rows();
    if rows != groups * n || tape.value(z).cols() != d_model {
        return Err(Error::Shape(format!(
            "spatial_attention: z {:?}, expected {}x{}",
            tape.value(z).shape(),
            groups * n,
            d_model
        )));
    }
    let heads = params.heads.len();
    let dk = d_model / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(heads);
    for (h, head) in params.heads.iter().enumerate() {
        let direction = if opts.directed { Some(head.direction) } else { None };

        let w_q = tape.param(store, head.w_q);
        let w_k = tape.param(store, head.w_k);
        let w_v = tape.param(store, head.w_v);
        let q = tape.matmul(z, w_q)?;
        let k = tape.matmul(z, w_k)?;
        let v = tape.matmul(z, w_v)?;

        let raw = tape.block_attend(q, k, n)?;
        let mut logits = tape.scale(raw, scale);
        if opts.use_prior {
            let beta = tape.param(store, head.beta);
            let prior = tape.linear_combo(beta, art.powers(head.direction))?;
            logits = tape.add_block_broadcast(logits, prior)?;
        }

        let output = if opts.use_sentinel {
            let w_ks = tape.param(store, head.w_ks);
            let w_vs = tape.param(store, head.w_vs);
            let ks = tape.matmul(z, w_ks)?;
            let vs = tape.matmul(z, w_vs)?;
            let raw_s = tape.rowwise_dot(q, ks)?;
            let sentinel_logit = tape.scale(raw_s, scale);

            let (alpha_nodes, sentinel_coeff) = if opts.literal_sentinel_denominator {
                // As printed: alpha = exp(e_ij) / (e_is + sum_j exp(e_ij)).
                let node_mask = art.spatial_mask(direction, groups, false);
                let exps = tape.masked_exp(logits, node_mask)?;
                let neighbor_sum = tape.row_sum(exps);
                let denom = tape.add(neighbor_sum, sentinel_logit)?;
                let alpha_nodes = tape.div_col_vec(exps, denom)?;
                let alpha_sum = tape.row_sum(alpha_nodes);
                let ones = tape.constant(Matrix::filled(rows, 1, 1.0));
                let sentinel_coeff = tape.sub(ones, alpha_sum)?;
                (alpha_nodes, sentinel_coeff)
            } else {
                let mask = art.spatial_mask(direction, groups, true);
                let full = tape.concat_cols(&[logits, sentinel_logit])?;
                let mut alpha_full = tape.masked_softmax(full, mask)?;
                if let Some((sink, layer, time_base)) = records.as_mut() {
                    record_spatial(tape, alpha_full, n, *layer, h, head.direction, *time_base, sink);
                }
                if opts.dropout > 0.0 {
                    if let Some(r) = rng.as_deref_mut() {
                        alpha_full = tape.dropout(alpha_full, opts.dropout, r)?;
                    }
                }
                let alpha_nodes = tape.slice_cols(alpha_full, 0, n)?;
                let sentinel_coeff = tape.slice_cols(alpha_full, n, n + 1)?;
                (alpha_nodes, sentinel_coeff)
            };

            let mixed = tape.block_mix(alpha_nodes, v, n)?;
            let kept = tape.mul_col_vec(vs, sentinel_coeff)?;
            tape.add(mixed, kept)?
        } else {
            let mask = art.spatial_mask(direction, groups, false);
            let mut alpha = tape.masked_softmax(logits, mask)?;
            if let Some((sink, layer, time_base)) = records.as_mut() {
                record_spatial(tape, alpha, n, *layer, h, head.direction, *time_base, sink);
            }
            if opts.dropout > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    alpha = tape.dropout(alpha, opts.dropout, r)?;
                }
            }
            tape.block_mix(alpha, v, n)?
        };
        head_outputs.push(output);
    }

    let concat = tape.concat_cols(&head_outputs)?;
    let w_o = tape.param(store, params.w_o);
    tape.matmul(concat, w_o)
}

#[allow(clippy::too_many_arguments)]
fn record_spatial(
    tape: &Tape,
    alpha: TensorId,
    n: usize,
    layer: usize,
    head: usize,
    direction: Direction,
    time_base: usize,
    sink: &mut Vec<AttentionRecord>,
) {
    let value = tape.value(alpha);
    let has_sentinel = value.cols() == n + 1;
    for row in 0..value.rows() {
        let (group, node) = (row / n, row % n);
        let weights: Vec<(usize, f64)> = value.row(row)[..n]
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(j, &w)| (j, w))
            .collect();
        sink.push(AttentionRecord {
            layer,
            head,
            direction: Some(direction),
            time_step: time_base + group,
            query: node,
            weights,
            sentinel_weight: has_sentinel.then(|| value.get(row, n)),
        });
    }
}

/// Multi-head scaled-dot-product attention across time, applied
/// independently per sequence. `x` is `(tq*seqs) x d_model` in sequence
/// layout and provides queries; `key_source` provides keys and values
/// (`x` itself in self mode, encoder memory in encoder-decoder mode).
#[allow(clippy::too_many_arguments)]
pub fn temporal_attention(
    tape: &mut Tape,
    store: &ParamStore,
    x: TensorId,
    key_source: TensorId,
    seqs: usize,
    params: &TemporalAttentionParams,
    causal_override: Option<bool>,
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
    mut records: Option<(&mut Vec<AttentionRecord>, usize)>,
) -> Result<TensorId> {
    if params.masking == Masking::Causal && params.mode == AttentionMode::EncoderDecoder {
        return Err(Error::Contract(
            "causal masking applies only to self attention".into(),
        ));
    }
    if params.mode == AttentionMode::SelfAttention && x != key_source {
        return Err(Error::Contract(
            "self attention requires key_source to be the query sequence".into(),
        ));
    }
    let d_model = store.get(params.w_o).rows();
    let (xq, xk) = (tape.value(x), tape.value(key_source));
    if xq.cols() != d_model || xk.cols() != d_model || xq.rows() % seqs != 0 || xk.rows() % seqs != 0
    {
        return Err(Error::Shape(format!(
            "temporal_attention: x {:?}, key_source {:?}, seqs {seqs}",
            xq.shape(),
            xk.shape()
        )));
    }
    let tq = xq.rows() / seqs;
    let tk = xk.rows() / seqs;
    let causal = causal_override.unwrap_or(params.masking == Masking::Causal);
    let mask = temporal_mask(tq, tk, seqs, causal)?;

    let heads = params.heads.len();
    let dk = d_model / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(heads);
    for (h, head) in params.heads.iter().enumerate() {
        let w_q = tape.param(store, head.w_q);
        let w_k = tape.param(store, head.w_k);
        let w_v = tape.param(store, head.w_v);
        let q = tape.matmul(x, w_q)?;
        let k = tape.matmul(key_source, w_k)?;
        let v = tape.matmul(key_source, w_v)?;

        let raw = tape.seq_attend(q, k, seqs)?;
        let logits = tape.scale(raw, scale);
        let mut alpha = tape.masked_softmax(logits, Arc::clone(&mask))?;
        if let Some((sink, layer)) = records.as_mut() {
            record_temporal(tape, alpha, seqs, *layer, h, sink);
        }
        if dropout > 0.0 {
            if let Some(r) = rng.as_deref_mut() {
                alpha = tape.dropout(alpha, dropout, r)?;
            }
        }
        head_outputs.push(tape.seq_mix(alpha, v, seqs)?);
    }

    let concat = tape.concat_cols(&head_outputs)?;
    let w_o = tape.param(store, params.w_o);
    tape.matmul(concat, w_o)
}

fn record_temporal(
    tape: &Tape,
    alpha: TensorId,
    seqs: usize,
    layer: usize,
    head: usize,
    sink: &mut Vec<AttentionRecord>,
) {
    let value = tape.value(alpha);
    for row in 0..value.rows() {
        let (step, seq) = (row / seqs, row % seqs);
        let weights: Vec<(usize, f64)> = value
            .row(row)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(j, &w)| (j, w))
            .collect();
        sink.push(AttentionRecord {
            layer,
            head,
            direction: None,
            time_step: step,
            query: seq,
            weights,
            sentinel_weight: None,
        });
    }
}
