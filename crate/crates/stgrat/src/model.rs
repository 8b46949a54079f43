//! The full sequence-to-sequence forecaster: embedding layer, encoder
//! stack, autoregressive decoder, and output projection.
//!
//! Hidden states are one `(T * B * N) x d_model` matrix, row
//! `t*(B*N) + b*N + n`. Consecutive blocks of `N` rows are the nodes of
//! one (time step, example) pair for spatial attention, and the same
//! layout read with stride `B*N` gives per-node sequences for temporal
//! attention.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    spatial_attention, temporal_attention, AttentionMode, AttentionRecord, GraphArtifacts,
    Masking, SpatialAttentionLayerParams, SpatialOpts, TemporalAttentionParams,
};
use crate::data::{NormalizationStats, WindowedDataset};
use crate::error::{Error, Result};
use crate::graph::EmbeddingTable;
use crate::numerics::tape::{ParamId, ParamStore, Tape, TensorId};
use crate::numerics::{xavier_init, Matrix};

/// Architecture and ablation knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Encoder and decoder layer count.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Diffusion-prior truncation steps K.
    pub truncation: usize,
    /// Neighborhood hop range.
    pub range: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub dropout: f64,
    pub embedding_dim: usize,
    pub directed_heads: bool,
    pub use_prior: bool,
    pub use_sentinel: bool,
    /// Study flag: keep the sentinel energy un-exponentiated in the
    /// attention denominator, as printed.
    pub literal_sentinel_denominator: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 128,
            heads: 4,
            truncation: 2,
            range: 2,
            t_in: 12,
            t_out: 12,
            dropout: 0.3,
            embedding_dim: 64,
            directed_heads: true,
            use_prior: true,
            use_sentinel: true,
            literal_sentinel_denominator: false,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 {
            return Err(Error::Config("d_model and heads must be >= 1".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for positional encoding".into()));
        }
        if self.directed_heads && self.heads % 2 != 0 {
            return Err(Error::Config(
                "directed heads require an even head count (inflow/outflow pairs)".into(),
            ));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::Config("t_in and t_out must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.range == 0 {
            return Err(Error::Config("range must be >= 1".into()));
        }
        Ok(())
    }

    fn spatial_opts(&self, dropout: f64) -> SpatialOpts {
        SpatialOpts {
            use_sentinel: self.use_sentinel,
            use_prior: self.use_prior,
            directed: self.directed_heads,
            literal_sentinel_denominator: self.literal_sentinel_denominator,
            dropout,
        }
    }

    /// Canonical `key = value` text, keys sorted; the checkpoint format
    /// and run-config echo both use this.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("d_model = {}\n", self.d_model));
        s.push_str(&format!("directed_heads = {}\n", self.directed_heads));
        s.push_str(&format!("dropout = {}\n", self.dropout));
        s.push_str(&format!("embedding_dim = {}\n", self.embedding_dim));
        s.push_str(&format!("heads = {}\n", self.heads));
        s.push_str(&format!("layer_norm_eps = {}\n", self.layer_norm_eps));
        s.push_str(&format!("layers = {}\n", self.layers));
        s.push_str(&format!(
            "literal_sentinel_denominator = {}\n",
            self.literal_sentinel_denominator
        ));
        s.push_str(&format!("range = {}\n", self.range));
        s.push_str(&format!("t_in = {}\n", self.t_in));
        s.push_str(&format!("t_out = {}\n", self.t_out));
        s.push_str(&format!("truncation = {}\n", self.truncation));
        s.push_str(&format!("use_prior = {}\n", self.use_prior));
        s.push_str(&format!("use_sentinel = {}\n", self.use_sentinel));
        s
    }

    pub fn from_kv_text(text: &str) -> Result<ModelConfig> {
        let mut config = ModelConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            config.apply_kv(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Sets one configuration key from its text form.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
        }
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "directed_heads" => self.directed_heads = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "literal_sentinel_denominator" => {
                self.literal_sentinel_denominator = parse(key, value)?
            }
            "range" => self.range = parse(key, value)?,
            "t_in" => self.t_in = parse(key, value)?,
            "t_out" => self.t_out = parse(key, value)?,
            "truncation" => self.truncation = parse(key, value)?,
            "use_prior" => self.use_prior = parse(key, value)?,
            "use_sentinel" => self.use_sentinel = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown model config key {other:?}"))),
        }
        Ok(())
    }
}

/// Sinusoidal positional encodings, `T x d_model`.
pub fn positional_encoding(t: usize, d_model: usize) -> Result<Matrix> {
    if d_model % 2 != 0 {
        return Err(Error::Contract(format!(
            "positional_encoding: d_model must be even, got {d_model}"
        )));
    }
    Ok(Matrix::from_fn(t, d_model, |pos, j| {
        let i = j / 2;
        let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    fn init(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        FfnParams {
            w1: store.register(format!("{prefix}.w1"), xavier_init(d_model, d_model, rng)),
            b1: store.register(format!("{prefix}.b1"), Matrix::zeros(1, d_model)),
            w2: store.register(format!("{prefix}.w2"), xavier_init(d_model, d_model, rng)),
            b2: store.register(format!("{prefix}.b2"), Matrix::zeros(1, d_model)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, prefix: &str, d_model: usize) -> Self {
        LayerNormParams {
            gain: store.register(format!("{prefix}.gain"), Matrix::filled(1, d_model, 1.0)),
            bias: store.register(format!("{prefix}.bias"), Matrix::zeros(1, d_model)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub spatial: SpatialAttentionLayerParams,
    pub temporal: TemporalAttentionParams,
    pub ffn: FfnParams,
    pub norms: [LayerNormParams; 3],
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub spatial: SpatialAttentionLayerParams,
    pub self_attn: TemporalAttentionParams,
    pub cross_attn: TemporalAttentionParams,
    pub ffn: FfnParams,
    pub norms: [LayerNormParams; 4],
}

/// All learnable weights, addressable by name through the store.
#[derive(Clone)]
pub struct ModelParams {
    pub store: ParamStore,
    pub input_w: ParamId,
    pub input_b: ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub start_token: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// The assembled forecaster.
#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub embedding: EmbeddingTable,
}

impl Model {
    /// Builds a freshly initialized model: Xavier for weight matrices,
    /// zero biases, unit layer-norm gains, diffusion-prior weights
    /// uniform on `beta_range`.
    pub fn new(
        config: ModelConfig,
        embedding: EmbeddingTable,
        beta_range: (f64, f64),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if embedding.dim != config.embedding_dim {
            return Err(Error::Config(format!(
                "embedding table dim {} does not match config embedding_dim {}",
                embedding.dim, config.embedding_dim
            )));
        }
        let d = config.d_model;
        let mut store = ParamStore::new();
        let input_w = store.register(
            "input.w",
            xavier_init(2 + config.embedding_dim, d, rng),
        );
        let input_b = store.register("input.b", Matrix::zeros(1, d));

        let mut encoder = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("encoder.layer{l}");
            encoder.push(EncoderLayerParams {
                spatial: SpatialAttentionLayerParams::init(
                    &mut store,
                    &format!("{p}.spatial"),
                    d,
                    config.heads,
                    config.truncation,
                    beta_range,
                    rng,
                )?,
                temporal: TemporalAttentionParams::init(
                    &mut store,
                    &format!("{p}.temporal"),
                    d,
                    config.heads,
                    Masking::None,
                    AttentionMode::SelfAttention,
                    rng,
                )?,
                ffn: FfnParams::init(&mut store, &format!("{p}.ffn"), d, rng),
                norms: [
                    LayerNormParams::init(&mut store, &format!("{p}.norm0"), d),
                    LayerNormParams::init(&mut store, &format!("{p}.norm1"), d),
                    LayerNormParams::init(&mut store, &format!("{p}.norm2"), d),
                ],
            });
        }

        let mut decoder = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("decoder.layer{l}");
            decoder.push(DecoderLayerParams {
                spatial: SpatialAttentionLayerParams::init(
                    &mut store,
                    &format!("{p}.spatial"),
                    d,
                    config.heads,
                    config.truncation,
                    beta_range,
                    rng,
                )?,
                self_attn: TemporalAttentionParams::init(
                    &mut store,
                    &format!("{p}.self"),
                    d,
                    config.heads,
                    Masking::Causal,
                    AttentionMode::SelfAttention,
                    rng,
                )?,
                cross_attn: TemporalAttentionParams::init(
                    &mut store,
                    &format!("{p}.cross"),
                    d,
                    config.heads,
                    Masking::None,
                    AttentionMode::EncoderDecoder,
                    rng,
                )?,
                ffn: FfnParams::init(&mut store, &format!("{p}.ffn"), d, rng),
                norms: [
                    LayerNormParams::init(&mut store, &format!("{p}.norm0"), d),
                    LayerNormParams::init(&mut store, &format!("{p}.norm1"), d),
                    LayerNormParams::init(&mut store, &format!("{p}.norm2"), d),
                    LayerNormParams::init(&mut store, &format!("{p}.norm3"), d),
                ],
            });
        }

        let start_token = store.register("decoder.start_token", xavier_init(1, d, rng));
        let out_w = store.register("output.w", xavier_init(d, 1, rng));
        let out_b = store.register("output.b", Matrix::zeros(1, 1));

        Ok(Model {
            config,
            params: ModelParams {
                store,
                input_w,
                input_b,
                encoder,
                decoder,
                start_token,
                out_w,
                out_b,
            },
            embedding,
        })
    }

    pub fn graph_artifacts(&self, g: &crate::graph::RoadGraph) -> Result<GraphArtifacts> {
        GraphArtifacts::new(g, self.config.truncation, self.config.range)
    }

    /// Exact number of scalar parameters.
    pub fn census(&self) -> usize {
        self.params.store.census()
    }

    /// Node count the model was built for.
    pub fn node_count(&self) -> usize {
        self.embedding.node_count()
    }

    /// Projects per-(step, node) features through the input layer and
    /// adds positional encodings: rows of `features` follow the hidden
    /// layout with `t_steps` time blocks.
    pub fn embed_inputs(
        &self,
        tape: &mut Tape,
        features: Matrix,
        t_steps: usize,
        position_base: usize,
    ) -> Result<TensorId> {
        let store = &self.params.store;
        let rows = features.rows();
        if t_steps == 0 || rows % t_steps != 0 {
            return Err(Error::Shape(format!(
                "embed_inputs: {} rows for {} time blocks",
                rows, t_steps
            )));
        }
        if features.cols() != 2 + self.config.embedding_dim {
            return Err(Error::Shape(format!(
                "embed_inputs: {} feature columns, expected {}",
                features.cols(),
                2 + self.config.embedding_dim
            )));
        }
        let per_step = rows / t_steps;
        let pe = positional_encoding(position_base + t_steps, self.config.d_model)?;
        let mut pe_tiled = Matrix::zeros(rows, self.config.d_model);
        for t in 0..t_steps {
            for s in 0..per_step {
                pe_tiled
                    .row_mut(t * per_step + s)
                    .copy_from_slice(pe.row(position_base + t));
            }
        }
        let x = tape.constant(features);
        let w = tape.param(store, self.params.input_w);
        let b = tape.param(store, self.params.input_b);
        let proj = tape.matmul(x, w)?;
        let proj = tape.add_row_vec(proj, b)?;
        let pe_c = tape.constant(pe_tiled);
        tape.add(proj, pe_c)
    }

    fn ffn(&self, tape: &mut Tape, x: TensorId, p: &FfnParams) -> Result<TensorId> {
        let store = &self.params.store;
        let w1 = tape.param(store, p.w1);
        let b1 = tape.param(store, p.b1);
        let w2 = tape.param(store, p.w2);
        let b2 = tape.param(store, p.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_vec(h, b1)?;
        let h = tape.gelu(h);
        let out = tape.matmul(h, w2)?;
        tape.add_row_vec(out, b2)
    }

    /// `LayerNorm(x + Dropout(sub))`, the residual wrapper around every
    /// sub-layer.
    fn residual_norm(
        &self,
        tape: &mut Tape,
        x: TensorId,
        sub: TensorId,
        norm: &LayerNormParams,
        dropout: f64,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let store = &self.params.store;
        let sub = match (dropout > 0.0, rng.as_deref_mut()) {
            (true, Some(r)) => tape.dropout(sub, dropout, r)?,
            _ => sub,
        };
        let sum = tape.add(x, sub)?;
        let gain = tape.param(store, norm.gain);
        let bias = tape.param(store, norm.bias);
        tape.layer_norm(sum, gain, bias, self.config.layer_norm_eps)
    }

    /// Runs the encoder stack over embedded inputs. `t_blocks` spatial
    /// blocks of `batch * N` rows each; `seqs = batch * N` temporal
    /// sequences.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        tape: &mut Tape,
        art: &GraphArtifacts,
        embedded: TensorId,
        batch: usize,
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
        mut records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<TensorId> {
        let store = &self.params.store;
        let seqs = batch * art.n;
        let rows = tape.value(embedded).rows();
        if rows % seqs != 0 {
            return Err(Error::Shape(format!(
                "encode: {rows} rows for {seqs} sequences"
            )));
        }
        let t_blocks = rows / art.n;
        let opts = self.config.spatial_opts(dropout);
        let mut x = embedded;
        for (l, layer) in self.params.encoder.iter().enumerate() {
            let attn = spatial_attention(
                tape,
                store,
                art,
                x,
                t_blocks,
                &layer.spatial,
                &opts,
                rng.as_deref_mut(),
                records.as_deref_mut().map(|r| (r, l, 0)),
            )?;
            x = self.residual_norm(tape, x, attn, &layer.norms[0], dropout, &mut rng)?;

            let attn = temporal_attention(
                tape,
                store,
                x,
                x,
                seqs,
                &layer.temporal,
                None,
                dropout,
                rng.as_deref_mut(),
                None,
            )?;
            x = self.residual_norm(tape, x, attn, &layer.norms[1], dropout, &mut rng)?;

            let f = self.ffn(tape, x, &layer.ffn)?;
            x = self.residual_norm(tape, x, f, &layer.norms[2], dropout, &mut rng)?;
        }
        Ok(x)
    }

    fn project_output(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let store = &self.params.store;
        let w = tape.param(store, self.params.out_w);
        let b = tape.param(store, self.params.out_b);
        let y = tape.matmul(x, w)?;
        tape.add_row_vec(y, b)
    }
}

/// Per-layer decoder caches: hidden-state keys/values for masked self
/// attention grow step by step; encoder keys/values are fixed.
struct DecoderCaches {
    self_k: Vec<Vec<Option<TensorId>>>,
    self_v: Vec<Vec<Option<TensorId>>>,
    cross_k: Vec<Vec<TensorId>>,
    cross_v: Vec<Vec<TensorId>>,
}

/// How the decoder picks each step's input during decoding.
pub enum DecodeMode<'a> {
    /// Inference: always feed back the model's own previous prediction.
    FreeRunning,
    /// Training with per-(step, example) coin flips:
    /// `feed_truth[(p-1) * batch + b]` decides the input to position `p`.
    Scheduled { feed_truth: &'a [bool] },
    /// Always feed ground truth.
    TeacherForced,
}

/// One supervised minibatch in hidden-layout order.
#[derive(Clone)]
pub struct Batch {
    pub size: usize,
    pub n: usize,
    pub t_in: usize,
    pub t_out: usize,
    /// `(t_in * size * n) x (2 + emb)` encoder features.
    pub encoder_features: Matrix,
    /// `(t_out * size * n) x 1` ground-truth speeds in mph.
    pub target_raw: Arc<Matrix>,
    /// Observation mask over `target_raw`.
    pub target_mask: Arc<Vec<bool>>,
    /// Normalized ground-truth speeds (missing entries 0), for teacher
    /// forcing.
    pub target_norm: Matrix,
    /// Time-of-day of target step `p` for example `b` at `p * size + b`.
    pub target_tod: Vec<f64>,
    /// Absolute table rows of each example's targets, for slicing.
    pub target_starts: Vec<usize>,
    pub stats: NormalizationStats,
}

impl Batch {
    /// Assembles a batch from dataset examples `indices`. The dataset's
    /// table must hold raw (mph) speeds; `stats` supplies normalization.
    pub fn build(
        dataset: &WindowedDataset,
        indices: &[usize],
        stats: &NormalizationStats,
        embedding: &EmbeddingTable,
    ) -> Result<Batch> {
        let table = dataset.table();
        let n = table.node_count();
        if embedding.node_count() != n {
            return Err(Error::Shape(format!(
                "embedding covers {} nodes, table has {}",
                embedding.node_count(),
                n
            )));
        }
        let b = indices.len();
        let (t_in, t_out) = (dataset.t_in, dataset.t_out);
        let emb = embedding.dim;

        let mut features = Matrix::zeros(t_in * b * n, 2 + emb);
        for (bi, &ex) in indices.iter().enumerate() {
            let start = dataset.start(ex);
            for t in 0..t_in {
                let row_t = start + t;
                let tod = table.time_of_day(row_t);
                for node in 0..n {
                    let row = features.row_mut(t * b * n + bi * n + node);
                    row[0] = if table.observed(row_t, node) {
                        stats.normalize_value(table.speed(row_t, node))
                    } else {
                        0.0
                    };
                    row[1] = tod;
                    row[2..].copy_from_slice(embedding.vector(node));
                }
            }
        }

        let mut target_raw = Matrix::zeros(t_out * b * n, 1);
        let mut target_norm = Matrix::zeros(t_out * b * n, 1);
        let mut target_mask = vec![false; t_out * b * n];
        let mut target_tod = vec![0.0; t_out * b];
        let mut target_starts = Vec::with_capacity(b);
        for (bi, &ex) in indices.iter().enumerate() {
            let t_start = dataset.start(ex) + t_in;
            target_starts.push(t_start);
            for p in 0..t_out {
                let row_t = t_start + p;
                target_tod[p * b + bi] = table.time_of_day(row_t);
                for node in 0..n {
                    let k = p * b * n + bi * n + node;
                    if table.observed(row_t, node) {
                        target_raw.set(k, 0, table.speed(row_t, node));
                        target_norm.set(k, 0, stats.normalize_value(table.speed(row_t, node)));
                        target_mask[k] = true;
                    }
                }
            }
        }

        Ok(Batch {
            size: b,
            n,
            t_in,
            t_out,
            encoder_features: features,
            target_raw: Arc::new(target_raw),
            target_mask: Arc::new(target_mask),
            target_norm,
            target_tod,
            target_starts,
            stats: *stats,
        })
    }
}

/// Result of a decode pass: normalized predictions as a tape tensor in
/// target layout, plus scheduled-sampling instrumentation.
pub struct DecodeOutput {
    pub predictions_norm: TensorId,
    pub fed_truth: usize,
    pub fed_prediction: usize,
}

impl Model {
    fn cross_caches(
        &self,
        tape: &mut Tape,
        memory: TensorId,
    ) -> Result<(Vec<Vec<TensorId>>, Vec<Vec<TensorId>>)> {
        let store = &self.params.store;
        let mut ks = Vec::with_capacity(self.params.decoder.len());
        let mut vs = Vec::with_capacity(self.params.decoder.len());
        for layer in &self.params.decoder {
            let mut layer_k = Vec::with_capacity(layer.cross_attn.heads.len());
            let mut layer_v = Vec::with_capacity(layer.cross_attn.heads.len());
            for head in &layer.cross_attn.heads {
                let wk = tape.param(store, head.w_k);
                let wv = tape.param(store, head.w_v);
                layer_k.push(tape.matmul(memory, wk)?);
                layer_v.push(tape.matmul(memory, wv)?);
            }
            ks.push(layer_k);
            vs.push(layer_v);
        }
        Ok((ks, vs))
    }

    /// Multi-head attention of a single-step query block against cached
    /// keys/values in sequence layout.
    #[allow(clippy::too_many_arguments)]
    fn attend_cached(
        &self,
        tape: &mut Tape,
        x: TensorId,
        params: &TemporalAttentionParams,
        keys: &[TensorId],
        values: &[TensorId],
        seqs: usize,
        dropout: f64,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let store = &self.params.store;
        let dk = store.get(params.heads[0].w_q).cols();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outputs = Vec::with_capacity(params.heads.len());
        for (h, head) in params.heads.iter().enumerate() {
            let wq = tape.param(store, head.w_q);
            let q = tape.matmul(x, wq)?;
            let raw = tape.seq_attend(q, keys[h], seqs)?;
            let logits = tape.scale(raw, scale);
            let tk = tape.value(keys[h]).rows() / seqs;
            let mask = Arc::new(vec![true; seqs * tk]);
            let mut alpha = tape.masked_softmax(logits, mask)?;
            if dropout > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    alpha = tape.dropout(alpha, dropout, r)?;
                }
            }
            outputs.push(tape.seq_mix(alpha, values[h], seqs)?);
        }
        let concat = tape.concat_cols(&outputs)?;
        let wo = tape.param(store, params.w_o);
        tape.matmul(concat, wo)
    }

    /// One decoder step over all layers for the block at `position`,
    /// updating the self-attention caches.
    #[allow(clippy::too_many_arguments)]
    fn decoder_step_block(
        &self,
        tape: &mut Tape,
        art: &GraphArtifacts,
        caches: &mut DecoderCaches,
        input: TensorId,
        batch: usize,
        position: usize,
        dropout: f64,
        rng: &mut Option<&mut ChaCha8Rng>,
        records: &mut Option<&mut Vec<AttentionRecord>>,
    ) -> Result<TensorId> {
        let store = &self.params.store;
        let seqs = batch * art.n;
        let opts = self.config.spatial_opts(dropout);
        let mut x = input;
        for (l, layer) in self.params.decoder.iter().enumerate() {
            let attn = spatial_attention(
                tape,
                store,
                art,
                x,
                batch,
                &layer.spatial,
                &opts,
                rng.as_deref_mut(),
                records
                    .as_deref_mut()
                    .map(|r| (r, l, self.config.t_in + position)),
            )?;
            x = self.residual_norm(tape, x, attn, &layer.norms[0], dropout, rng)?;

            // Append this step's keys/values, then attend the full cache;
            // with only past and present entries present, no causal mask
            // is needed.
            for (h, head) in layer.self_attn.heads.iter().enumerate() {
                let wk = tape.param(store, head.w_k);
                let wv = tape.param(store, head.w_v);
                let k_new = tape.matmul(x, wk)?;
                let v_new = tape.matmul(x, wv)?;
                caches.self_k[l][h] = Some(match caches.self_k[l][h] {
                    Some(prev) => tape.concat_rows(&[prev, k_new])?,
                    None => k_new,
                });
                caches.self_v[l][h] = Some(match caches.self_v[l][h] {
                    Some(prev) => tape.concat_rows(&[prev, v_new])?,
                    None => v_new,
                });
            }
            let keys: Vec<TensorId> = caches.self_k[l].iter().map(|t| t.unwrap()).collect();
            let values: Vec<TensorId> = caches.self_v[l].iter().map(|t| t.unwrap()).collect();
            let attn =
                self.attend_cached(tape, x, &layer.self_attn, &keys, &values, seqs, dropout, rng)?;
            x = self.residual_norm(tape, x, attn, &layer.norms[1], dropout, rng)?;

            let attn = self.attend_cached(
                tape,
                x,
                &layer.cross_attn,
                &caches.cross_k[l],
                &caches.cross_v[l],
                seqs,
                dropout,
                rng,
            )?;
            x = self.residual_norm(tape, x, attn, &layer.norms[2], dropout, rng)?;

            let f = self.ffn(tape, x, &layer.ffn)?;
            x = self.residual_norm(tape, x, f, &layer.norms[3], dropout, rng)?;
        }
        Ok(x)
    }

    /// Start-token block for decoder position 0: the learned token tiled
    /// over every (example, node) row, plus the position encoding.
    fn start_block(&self, tape: &mut Tape, rows: usize) -> Result<TensorId> {
        let store = &self.params.store;
        let ones = tape.constant(Matrix::filled(rows, 1, 1.0));
        let token = tape.param(store, self.params.start_token);
        let tiled = tape.matmul(ones, token)?;
        let pe = positional_encoding(1, self.config.d_model)?;
        let pe_c = tape.constant(pe);
        tape.add_row_vec(tiled, pe_c)
    }

    /// Decoder input block for position `p >= 1`: the previous step's
    /// speed (truth or prediction, already normalized) re-embedded with
    /// that step's time-of-day.
    fn step_features(
        &self,
        batch: &Batch,
        speeds_norm: &[f64],
        step: usize,
    ) -> Matrix {
        let (b, n, emb) = (batch.size, batch.n, self.embedding.dim);
        let mut features = Matrix::zeros(b * n, 2 + emb);
        for bi in 0..b {
            let tod = batch.target_tod[step * b + bi];
            for node in 0..n {
                let row = features.row_mut(bi * n + node);
                row[0] = speeds_norm[bi * n + node];
                row[1] = tod;
                row[2..].copy_from_slice(self.embedding.vector(node));
            }
        }
        features
    }

    /// Autoregressive decode of `t_out` steps. Predictions come back as
    /// one `(t_out * batch * n) x 1` tensor of normalized speeds.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        art: &GraphArtifacts,
        memory: TensorId,
        batch: &Batch,
        mode: DecodeMode<'_>,
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
        mut records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<DecodeOutput> {
        let (b, n, t_out) = (batch.size, batch.n, batch.t_out);
        let rows = b * n;
        if let DecodeMode::Scheduled { feed_truth } = &mode {
            if feed_truth.len() != (t_out.saturating_sub(1)) * b {
                return Err(Error::Contract(format!(
                    "decode: {} sampling decisions for {} steps x {} examples",
                    feed_truth.len(),
                    t_out - 1,
                    b
                )));
            }
        }
        let (cross_k, cross_v) = self.cross_caches(tape, memory)?;
        let mut caches = DecoderCaches {
            self_k: vec![vec![None; self.config.heads]; self.params.decoder.len()],
            self_v: vec![vec![None; self.config.heads]; self.params.decoder.len()],
            cross_k,
            cross_v,
        };

        let mut fed_truth = 0;
        let mut fed_prediction = 0;
        let mut step_outputs = Vec::with_capacity(t_out);
        let mut prev_pred: Vec<f64> = Vec::new();

        for p in 0..t_out {
            let input = if p == 0 {
                self.start_block(tape, rows)?
            } else {
                let speeds: Vec<f64> = (0..rows)
                    .map(|k| {
                        let bi = k / n;
                        let use_truth = match &mode {
                            DecodeMode::FreeRunning => false,
                            DecodeMode::TeacherForced => true,
                            DecodeMode::Scheduled { feed_truth } => feed_truth[(p - 1) * b + bi],
                        };
                        if use_truth {
                            batch.target_norm.get((p - 1) * rows + k, 0)
                        } else {
                            prev_pred[k]
                        }
                    })
                    .collect();
                match &mode {
                    DecodeMode::FreeRunning => fed_prediction += rows,
                    DecodeMode::TeacherForced => fed_truth += rows,
                    DecodeMode::Scheduled { feed_truth } => {
                        for bi in 0..b {
                            if feed_truth[(p - 1) * b + bi] {
                                fed_truth += n;
                            } else {
                                fed_prediction += n;
                            }
                        }
                    }
                }
                let features = self.step_features(batch, &speeds, p - 1);
                self.embed_inputs(tape, features, 1, p)?
            };

            let hidden = self.decoder_step_block(
                tape,
                art,
                &mut caches,
                input,
                b,
                p,
                dropout,
                &mut rng,
                &mut records,
            )?;
            let out = self.project_output(tape, hidden)?;
            // Feedback is treated as a constant input: the next step reads
            // the value, not the gradient path.
            prev_pred = tape.value(out).data().to_vec();
            step_outputs.push(out);
        }

        let predictions_norm = tape.concat_rows(&step_outputs)?;
        Ok(DecodeOutput {
            predictions_norm,
            fed_truth,
            fed_prediction,
        })
    }

    /// Full eval-mode forecast for a batch of windows: encode, decode
    /// free-running, denormalize. Returns one `t_out x N` matrix per
    /// example.
    pub fn forecast_batch(
        &self,
        art: &GraphArtifacts,
        dataset: &WindowedDataset,
        indices: &[usize],
        stats: &NormalizationStats,
    ) -> Result<Vec<Matrix>> {
        let batch = Batch::build(dataset, indices, stats, &self.embedding)?;
        self.forecast_batch_inner(art, &batch, None)
    }

    /// Forecast with attention recording enabled (single example).
    pub fn forecast_recorded(
        &self,
        art: &GraphArtifacts,
        dataset: &WindowedDataset,
        index: usize,
        stats: &NormalizationStats,
    ) -> Result<(Matrix, Vec<AttentionRecord>)> {
        let batch = Batch::build(dataset, &[index], stats, &self.embedding)?;
        let mut records = Vec::new();
        let mut preds = self.forecast_batch_inner(art, &batch, Some(&mut records))?;
        Ok((preds.remove(0), records))
    }

    /// Forecast for an already-assembled batch.
    pub fn forecast_prepared(&self, art: &GraphArtifacts, batch: &Batch) -> Result<Vec<Matrix>> {
        self.forecast_batch_inner(art, batch, None)
    }

    fn forecast_batch_inner(
        &self,
        art: &GraphArtifacts,
        batch: &Batch,
        records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let mut records = records;
        let embedded =
            self.embed_inputs(&mut tape, batch.encoder_features.clone(), batch.t_in, 0)?;
        let memory = self.encode(
            &mut tape,
            art,
            embedded,
            batch.size,
            0.0,
            None,
            records.as_deref_mut(),
        )?;
        let out = self.decode(
            &mut tape,
            art,
            memory,
            batch,
            DecodeMode::FreeRunning,
            0.0,
            None,
            records,
        )?;
        let norm = tape.value(out.predictions_norm);
        let (b, n, t_out) = (batch.size, batch.n, batch.t_out);
        let mut per_example = vec![Matrix::zeros(t_out, n); b];
        for p in 0..t_out {
            for bi in 0..b {
                for node in 0..n {
                    let v = norm.get(p * b * n + bi * n + node, 0);
                    per_example[bi].set(p, node, batch.stats.denormalize_value(v));
                }
            }
        }
        Ok(per_example)
    }
}
