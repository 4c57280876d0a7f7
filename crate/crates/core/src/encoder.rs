//! Thin-deep transformer encoder producing L2-normalized CLS embeddings.
//!
//! Token and learned position embeddings feed `L` post-norm transformer
//! blocks (`LN(x + MHA(x))`, then `LN(y + FFN(y))`, GELU inside the FFN).
//! The state at position 0 goes through a tanh pooler dense and is then
//! normalized to unit length.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::nn::{truncated_normal, Dense, Norm, INIT_STDDEV};

/// Vocabulary size assumed when reporting parameter counts for the presets.
pub const PRESET_VOCAB_SIZE: usize = 501_000;
/// Maximum sequence length of the presets.
pub const PRESET_MAX_SEQ_LEN: usize = 128;

/// Additive attention bias on padded key positions.
const MASKED_SCORE: f64 = -1e9;

/// `(layers, hidden, ffn, heads)` for presets `#0`..`#12`. `#0` is the
/// 12-layer, 768-wide reference shape; `#5`..`#9` are thin-deep 24-layer
/// shapes and `#10`..`#12` keep the FFN as wide as the hidden state.
pub const PRESETS: [(usize, usize, usize, usize); 13] = [
    (12, 768, 3072, 12),
    (6, 768, 3072, 12),
    (3, 768, 3072, 12),
    (12, 384, 1536, 12),
    (12, 192, 768, 12),
    (24, 384, 1536, 12),
    (24, 256, 1024, 8),
    (24, 192, 768, 12),
    (24, 128, 512, 8),
    (24, 64, 256, 8),
    (24, 256, 256, 4),
    (24, 192, 192, 4),
    (24, 128, 128, 4),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EncoderConfig {
    /// Preset `#n` with the preset vocabulary size and sequence length.
    pub fn preset(n: usize) -> Result<Self> {
        let &(layers, hidden, ffn, heads) = PRESETS
            .get(n)
            .ok_or_else(|| Error::Config(format!("unknown preset #{n}; expected #0..#12")))?;
        Ok(Self {
            layers,
            hidden,
            ffn,
            heads,
            vocab_size: PRESET_VOCAB_SIZE,
            max_seq_len: PRESET_MAX_SEQ_LEN,
            seed: 0,
        })
    }

    /// Parses `"#8"` or `"8"`.
    pub fn preset_named(name: &str) -> Result<Self> {
        let n = name
            .trim_start_matches('#')
            .parse()
            .map_err(|_| Error::Config(format!("bad preset name {name:?}")))?;
        Self::preset(n)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config(format!(
                "max_seq_len must be at least 2, got {}",
                self.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Encoder parameters excluding token and position embeddings, and the full
/// total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    pub encoder: u64,
    pub total: u64,
}

/// Closed-form parameter count.
///
/// Per layer: four `d×d` attention projections with biases, the two FFN
/// matrices with biases, and two layer norms. The pooler dense is counted in
/// the encoder; the token and position tables only in the total.
pub fn parameter_count(config: &EncoderConfig) -> ParameterCount {
    let [l, d, f, v, s] = [
        config.layers,
        config.hidden,
        config.ffn,
        config.vocab_size,
        config.max_seq_len,
    ]
    .map(|x| x as u64);
    let per_layer = 4 * (d * d + d) + 2 * d * f + f + d + 4 * d;
    let encoder = l * per_layer + d * d + d;
    ParameterCount {
        encoder,
        total: encoder + v * d + s * d,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerWeights {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub attention_norm: Norm,
    pub ffn_in: Dense,
    pub ffn_out: Dense,
    pub ffn_norm: Norm,
}

impl LayerWeights {
    fn params(&self) -> Vec<ParamId> {
        [self.query, self.key, self.value, self.output]
            .iter()
            .flat_map(Dense::params)
            .chain(self.attention_norm.params())
            .chain(self.ffn_in.params())
            .chain(self.ffn_out.params())
            .chain(self.ffn_norm.params())
            .collect()
    }
}

/// Handles to one encoder's tensors inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerWeights>,
    pub pooler: Dense,
}

impl EncoderWeights {
    /// Truncated-normal weights (stddev 0.02), zero biases, unit layer-norm
    /// gains. Deterministic in `config.seed`.
    pub fn init(config: &EncoderConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.hidden, config.ffn);
        let table = |rows: usize, rng: &mut ChaCha8Rng| {
            Tensor::new(vec![rows, d], truncated_normal(rng, rows * d, INIT_STDDEV))
        };
        let token_embedding = store.add(
            format!("{prefix}embeddings.token"),
            table(config.vocab_size, &mut rng)?,
        )?;
        let position_embedding = store.add(
            format!("{prefix}embeddings.position"),
            table(config.max_seq_len, &mut rng)?,
        )?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{prefix}layers.{i}");
            layers.push(LayerWeights {
                query: Dense::init(store, &format!("{p}.attention.query"), d, d, &mut rng)?,
                key: Dense::init(store, &format!("{p}.attention.key"), d, d, &mut rng)?,
                value: Dense::init(store, &format!("{p}.attention.value"), d, d, &mut rng)?,
                output: Dense::init(store, &format!("{p}.attention.output"), d, d, &mut rng)?,
                attention_norm: Norm::init(store, &format!("{p}.attention.norm"), d)?,
                ffn_in: Dense::init(store, &format!("{p}.ffn.in"), d, f, &mut rng)?,
                ffn_out: Dense::init(store, &format!("{p}.ffn.out"), f, d, &mut rng)?,
                ffn_norm: Norm::init(store, &format!("{p}.ffn.norm"), d)?,
            });
        }
        let pooler = Dense::init(store, &format!("{prefix}pooler"), d, d, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            pooler,
        })
    }

    /// Looks up an existing encoder's tensors by name, checking every shape.
    pub fn bind(config: &EncoderConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.hidden, config.ffn);
        let token_embedding = store.expect(&format!("{prefix}embeddings.token"), &[config.vocab_size, d])?;
        let position_embedding =
            store.expect(&format!("{prefix}embeddings.position"), &[config.max_seq_len, d])?;
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("{prefix}layers.{i}");
                Ok(LayerWeights {
                    query: Dense::bind(store, &format!("{p}.attention.query"), d, d)?,
                    key: Dense::bind(store, &format!("{p}.attention.key"), d, d)?,
                    value: Dense::bind(store, &format!("{p}.attention.value"), d, d)?,
                    output: Dense::bind(store, &format!("{p}.attention.output"), d, d)?,
                    attention_norm: Norm::bind(store, &format!("{p}.attention.norm"), d)?,
                    ffn_in: Dense::bind(store, &format!("{p}.ffn.in"), d, f)?,
                    ffn_out: Dense::bind(store, &format!("{p}.ffn.out"), f, d)?,
                    ffn_norm: Norm::bind(store, &format!("{p}.ffn.norm"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pooler = Dense::bind(store, &format!("{prefix}pooler"), d, d)?;
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            pooler,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        out.extend(self.layers.iter().flat_map(LayerWeights::params));
        out.extend(self.pooler.params());
        out
    }

    pub fn param_count(&self, store: &ParamStore) -> u64 {
        self.params().iter().map(|&id| store.get(id).numel() as u64).sum()
    }

    /// Pooled CLS state `tanh(W·h₀ + b)` before normalization, `[N, d]`.
    pub fn pooled<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        batch: &TokenBatch,
    ) -> Result<NodeId> {
        let (n, s, d) = (batch.rows, batch.seq_len, self.config.hidden);
        if n == 0 {
            return Err(Error::Contract("cannot encode an empty batch".into()));
        }
        if s > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {s} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..s).collect();
        let tok_table = g.param(store, self.token_embedding);
        let pos_table = g.param(store, self.position_embedding);
        let tok = g.gather_rows(tok_table, &ids)?;
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut states = g.add(tok, pos)?;
        let mask = g.constant(attention_bias(batch, self.config.heads));
        for layer in &self.layers {
            states = forward_layer(g, store, layer, &self.config, states, (n, s), mask)?;
        }
        let cls_rows: Vec<usize> = (0..n).map(|r| r * s).collect();
        let cls = g.gather_rows(states, &cls_rows)?;
        debug_assert_eq!(g.shape(cls), &[n, d]);
        let pooled = self.pooler.forward(g, store, cls)?;
        Ok(g.tanh(pooled))
    }

    /// Unit-norm sentence embeddings `[N, d]`.
    pub fn encode_graph<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        batch: &TokenBatch,
    ) -> Result<NodeId> {
        let pooled = self.pooled(g, store, batch)?;
        Ok(g.l2_normalize_rows(pooled))
    }

    /// Frozen forward pass; returns the embeddings as a plain tensor.
    pub fn encode(&self, store: &ParamStore, batch: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.encode_graph(&mut g, store, batch)?;
        Ok(g.value(out).clone())
    }
}

/// `[N·H, S, S]` additive bias: zero on real keys, a large negative value on
/// padded keys.
fn attention_bias(batch: &TokenBatch, heads: usize) -> Tensor {
    let (n, s) = (batch.rows, batch.seq_len);
    let mut data = Vec::with_capacity(n * heads * s * s);
    for r in 0..n {
        let key_bias: Vec<f64> = batch
            .row_mask(r)
            .iter()
            .map(|&m| if m == 1 { 0.0 } else { MASKED_SCORE })
            .collect();
        for _ in 0..heads * s {
            data.extend_from_slice(&key_bias);
        }
    }
    Tensor::new(vec![n * heads, s, s], data).expect("consistent mask shape")
}

/// One post-norm transformer block over `states: [N·S, d]`.
pub fn forward_layer<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    layer: &LayerWeights,
    config: &EncoderConfig,
    states: NodeId,
    (n, s): (usize, usize),
    mask: NodeId,
) -> Result<NodeId> {
    let (d, h) = (config.hidden, config.heads);
    let dk = config.head_dim();
    let split = |g: &mut Graph<'p>, x: NodeId| -> Result<NodeId> {
        let x = g.reshape(x, &[n, s, h, dk])?;
        let x = g.swap_axes12(x)?;
        g.reshape(x, &[n * h, s, dk])
    };
    let q = layer.query.forward(g, store, states)?;
    let k = layer.key.forward(g, store, states)?;
    let v = layer.value.forward(g, store, states)?;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);

    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let scores = g.add(scores, mask)?;
    let probs = g.softmax_rows(scores);
    let ctx = g.batch_matmul(probs, v, false)?;
    let ctx = g.reshape(ctx, &[n, h, s, dk])?;
    let ctx = g.swap_axes12(ctx)?;
    let ctx = g.reshape(ctx, &[n * s, d])?;

    let attended = layer.output.forward(g, store, ctx)?;
    let residual = g.add(states, attended)?;
    let y = layer.attention_norm.forward(g, store, residual)?;

    let hidden = layer.ffn_in.forward(g, store, y)?;
    let hidden = g.gelu(hidden);
    let ff = layer.ffn_out.forward(g, store, hidden)?;
    let residual = g.add(y, ff)?;
    layer.ffn_norm.forward(g, store, residual)
}
