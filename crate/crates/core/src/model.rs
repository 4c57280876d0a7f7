//! A vocabulary, an encoder and its optional output heads, owned together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::corpus::{TokenBatch, Vocab};
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::eval::worker_pool;
use crate::nn::Dense;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const BRIDGE_UP: &str = "bridge.up";
pub const BRIDGE_DOWN: &str = "bridge.down";
pub const REDUCER: &str = "reducer";

/// Rows per chunk when embedding many sentences.
pub const EMBED_CHUNK: usize = 64;

/// Distill-first head: the pooled state is lifted to the teacher width, where
/// the feature loss applies, then brought back down to the embedding width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bridge {
    pub up: Dense,
    pub down: Dense,
}

#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: EncoderWeights,
    pub bridge: Option<Bridge>,
    /// Dense applied to the normalized encoder output of a frozen teacher.
    pub reducer: Option<Dense>,
}

/// Graph handles from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// Unit-norm sentence embeddings.
    pub embedding: NodeId,
    /// The same rows before the final normalization.
    pub unnormalized: NodeId,
    /// Teacher-width state of the distill-first head.
    pub intermediate: Option<NodeId>,
}

impl EmbeddingModel {
    /// Freshly initialized encoder. `config.vocab_size` must cover `vocab`.
    pub fn new(config: EncoderConfig, vocab: Vocab) -> Result<Self> {
        check_vocab(&config, &vocab)?;
        let mut store = ParamStore::new();
        let encoder = EncoderWeights::init(&config, &mut store, ENCODER_PREFIX)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            bridge: None,
            reducer: None,
        })
    }

    /// Rebinds a model from named tensors, picking up whichever heads exist.
    pub fn from_store(config: EncoderConfig, vocab: Vocab, store: ParamStore) -> Result<Self> {
        check_vocab(&config, &vocab)?;
        let encoder = EncoderWeights::bind(&config, &store, ENCODER_PREFIX)?;
        let bridge = match (
            Dense::bind_any(&store, BRIDGE_UP).transpose()?,
            Dense::bind_any(&store, BRIDGE_DOWN).transpose()?,
        ) {
            (Some(up), Some(down)) => {
                if up.input != config.hidden || down.input != up.output {
                    return Err(Error::Data(format!(
                        "bridge shapes {}x{} and {}x{} do not chain from hidden size {}",
                        up.input, up.output, down.input, down.output, config.hidden
                    )));
                }
                Some(Bridge { up, down })
            }
            (None, None) => None,
            _ => return Err(Error::Data("bridge needs both up and down projections".into())),
        };
        let reducer = Dense::bind_any(&store, REDUCER).transpose()?;
        if let Some(r) = &reducer {
            if r.input != config.hidden {
                return Err(Error::Data(format!(
                    "reducer input {} does not match hidden size {}",
                    r.input, config.hidden
                )));
            }
        }
        if bridge.is_some() && reducer.is_some() {
            return Err(Error::Data("a model cannot carry both a bridge and a reducer".into()));
        }
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            bridge,
            reducer,
        })
    }

    /// Adds a distill-first head lifting to `teacher_dim`.
    pub fn add_bridge(&mut self, teacher_dim: usize, seed: u64) -> Result<()> {
        if self.bridge.is_some() || self.reducer.is_some() {
            return Err(Error::Config("model already has an output head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6272_6964_6765);
        let d = self.config.hidden;
        let up = Dense::init(&mut self.store, BRIDGE_UP, d, teacher_dim, &mut rng)?;
        let down = Dense::init(&mut self.store, BRIDGE_DOWN, teacher_dim, d, &mut rng)?;
        self.bridge = Some(Bridge { up, down });
        Ok(())
    }

    /// Installs a trained reducer given its weight `[hidden, d]` and bias `[d]`.
    pub fn attach_reducer(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        if self.bridge.is_some() || self.reducer.is_some() {
            return Err(Error::Config("model already has an output head".into()));
        }
        self.store.add(format!("{REDUCER}.weight"), weight)?;
        self.store.add(format!("{REDUCER}.bias"), bias)?;
        self.reducer = Some(Dense::bind_any(&self.store, REDUCER).expect("just added")?);
        Ok(())
    }

    /// Width of the produced embeddings.
    pub fn dim(&self) -> usize {
        self.reducer.map_or(self.config.hidden, |r| r.output)
    }

    pub fn tokenize(&self, sentences: &[&str]) -> TokenBatch {
        TokenBatch::encode(sentences, &self.vocab, self.config.max_seq_len, 1)
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, batch: &TokenBatch) -> Result<ModelOutput> {
        let pooled = self.encoder.pooled(g, &self.store, batch)?;
        let (unnormalized, intermediate) = match (&self.bridge, &self.reducer) {
            (Some(b), _) => {
                let mid = b.up.forward(g, &self.store, pooled)?;
                (b.down.forward(g, &self.store, mid)?, Some(mid))
            }
            (None, Some(r)) => {
                let base = g.l2_normalize_rows(pooled);
                (r.forward(g, &self.store, base)?, None)
            }
            (None, None) => (pooled, None),
        };
        Ok(ModelOutput {
            embedding: g.l2_normalize_rows(unnormalized),
            unnormalized,
            intermediate,
        })
    }

    pub fn embed(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch)?;
        Ok(g.value(out.embedding).clone())
    }

    /// Embeds sentences in fixed chunks on the worker pool; the result does
    /// not depend on the number of workers.
    pub fn embed_sentences(&self, sentences: &[&str]) -> Result<Tensor> {
        let dim = self.dim();
        if sentences.is_empty() {
            return Err(Error::Data("no sentences to embed".into()));
        }
        let chunks: Vec<&[&str]> = sentences.chunks(EMBED_CHUNK).collect();
        let parts = worker_pool()?.install(|| {
            chunks
                .par_iter()
                .map(|c| self.embed(&self.tokenize(c)))
                .collect::<Result<Vec<_>>>()
        })?;
        let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![sentences.len(), dim], data)
    }
}

fn check_vocab(config: &EncoderConfig, vocab: &Vocab) -> Result<()> {
    config.validate()?;
    if vocab.len() > config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the encoder only {} embedding rows",
            vocab.len(),
            config.vocab_size
        )));
    }
    Ok(())
}
