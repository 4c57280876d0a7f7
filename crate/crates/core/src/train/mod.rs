//! Training loops: AMS teacher training, distillation into a student, and
//! fitting a dimension reducer on a frozen teacher.

mod adamw;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::corpus::{make_batches, CorpusSplit, ParallelBatch, SentencePair, Vocab};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{p_at_1, EmbeddingStore};
use crate::losses::{
    ams_loss, combined_loss, cosine_matrix, distill_first_loss, feature_distill_loss, logit_distill_loss,
    synchronized_loss, LossComponents, LossWeights, ProjectionHead,
};
use crate::model::{EmbeddingModel, REDUCER};
use crate::nn::Dense;

pub use adamw::AdamW;

/// Where the feature loss is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillVariant {
    /// Projection head from the student embedding up to the teacher width.
    #[default]
    Combined,
    /// Inside the student: a teacher-width layer followed by a dense back
    /// down to the embedding width.
    DistillFirst,
    /// Against teacher embeddings already reduced to the student width.
    Synchronized,
}

/// Which student vectors enter the feature loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    Normalized,
    Unnormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Steps between logged records; 0 logs only the final step.
    pub eval_every: usize,
    pub variant: DistillVariant,
    pub feature_mode: FeatureMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 100,
            variant: DistillVariant::Combined,
            feature_mode: FeatureMode::Normalized,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for in-batch negatives, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("bad weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// `1e-3` for hidden sizes above 384, `5e-4` otherwise.
pub fn paper_learning_rate(hidden: usize) -> f64 {
    if hidden > 384 {
        1e-3
    } else {
        5e-4
    }
}

/// Frozen teacher embeddings for the training pairs.
#[derive(Debug, Clone, Copy)]
pub enum TeacherSource<'a> {
    None,
    Model(&'a EmbeddingModel),
    /// Vectors keyed by the pair's line index in the original corpus.
    Embeddings {
        source: &'a EmbeddingStore,
        target: &'a EmbeddingStore,
    },
}

impl TeacherSource<'_> {
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::None => None,
            Self::Model(m) => Some(m.dim()),
            Self::Embeddings { source, .. } => Some(source.dim()),
        }
    }

    fn validate(&self, corpus: &CorpusSplit) -> Result<()> {
        let Self::Embeddings { source, target } = self else {
            return Ok(());
        };
        if source.dim() != target.dim() {
            return Err(Error::Data(format!(
                "teacher source vectors have {} dims, target vectors {}",
                source.dim(),
                target.dim()
            )));
        }
        for j in 0..corpus.train.len() {
            let key = CorpusSplit::train_line_index(j).to_string();
            for (side, store) in [("source", source), ("target", target)] {
                if store.position(&key).is_err() {
                    return Err(Error::Data(format!(
                        "no teacher {side} vector for training sentence {key}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `[n, d]` teacher embeddings of the given training pairs.
    fn embed(&self, train: &[SentencePair], indices: &[usize]) -> Result<Option<(Tensor, Tensor)>> {
        match self {
            Self::None => Ok(None),
            Self::Model(m) => {
                let src: Vec<&str> = indices.iter().map(|&i| train[i].source.as_str()).collect();
                let tgt: Vec<&str> = indices.iter().map(|&i| train[i].target.as_str()).collect();
                Ok(Some((m.embed(&m.tokenize(&src))?, m.embed(&m.tokenize(&tgt))?)))
            }
            Self::Embeddings { source, target } => {
                let gather = |store: &EmbeddingStore| -> Result<Tensor> {
                    let mut data = Vec::with_capacity(indices.len() * store.dim());
                    for &i in indices {
                        data.extend_from_slice(store.get(&CorpusSplit::train_line_index(i).to_string())?);
                    }
                    Tensor::new(vec![indices.len(), store.dim()], data)
                };
                Ok(Some((gather(source)?, gather(target)?)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossComponents,
    pub dev_p_at_1: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn final_dev_p_at_1(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.dev_p_at_1)
    }

    /// One JSON object per record.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

/// Bidirectional P@1 over the dev pairs, each pair its own gold.
pub fn dev_p_at_1(model: &EmbeddingModel, dev: &[SentencePair]) -> Result<Option<f64>> {
    if dev.len() < 2 {
        return Ok(None);
    }
    let src: Vec<&str> = dev.iter().map(|p| p.source.as_str()).collect();
    let tgt: Vec<&str> = dev.iter().map(|p| p.target.as_str()).collect();
    retrieval_p_at_1(&model.embed_sentences(&src)?, &model.embed_sentences(&tgt)?).map(Some)
}

fn retrieval_p_at_1(x: &Tensor, y: &Tensor) -> Result<f64> {
    let gold: Vec<(String, String)> = (0..x.rows()).map(|i| (i.to_string(), i.to_string())).collect();
    p_at_1(&EmbeddingStore::from_tensor(x)?, &EmbeddingStore::from_tensor(y)?, &gold, true)
}

/// Batches of the training pairs, reshuffled every epoch.
struct BatchStream<'a> {
    train: &'a [SentencePair],
    vocab: &'a Vocab,
    batch_size: usize,
    max_seq_len: usize,
    seed: u64,
    epoch: u64,
    queue: std::vec::IntoIter<ParallelBatch>,
}

impl<'a> BatchStream<'a> {
    fn new(train: &'a [SentencePair], vocab: &'a Vocab, config: &TrainConfig, max_seq_len: usize) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 training pairs, got {}",
                train.len()
            )));
        }
        Ok(Self {
            train,
            vocab,
            batch_size: config.batch_size,
            max_seq_len,
            seed: config.seed,
            epoch: 0,
            queue: Vec::new().into_iter(),
        })
    }

    fn next_batch(&mut self) -> Result<ParallelBatch> {
        loop {
            if let Some(b) = self.queue.next() {
                return Ok(b);
            }
            let seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.epoch);
            self.queue = make_batches(self.train, self.vocab, self.batch_size, self.max_seq_len, seed)?.into_iter();
            self.epoch += 1;
        }
    }
}

fn check_loss(step: usize, c: &LossComponents) -> Result<()> {
    let values = [Some(c.total), Some(c.ams), c.feature, c.logit];
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "loss diverged at step {step}: total {} ams {} feature {:?} logit {:?}",
            c.total, c.ams, c.feature, c.logit
        )));
    }
    Ok(())
}

fn is_log_step(step: usize, config: &TrainConfig) -> bool {
    step == config.steps || (config.eval_every > 0 && step % config.eval_every == 0)
}

/// Trains an encoder from scratch with the margin softmax alone.
pub fn train_teacher(
    corpus: &CorpusSplit,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    weights: &LossWeights,
) -> Result<(EmbeddingModel, TrainReport)> {
    distill_student(corpus, encoder, TeacherSource::None, config, weights)
}

/// Builds the vocabulary from the training pairs and sizes the embedding
/// table to it.
pub fn model_for_corpus(corpus: &CorpusSplit, encoder: &EncoderConfig) -> Result<EmbeddingModel> {
    let vocab = Vocab::build(&corpus.train, 1);
    let config = EncoderConfig {
        vocab_size: vocab.len(),
        ..encoder.clone()
    };
    EmbeddingModel::new(config, vocab)
}

/// Trains a fresh student against `teacher` with the weighted sum of the
/// margin softmax, feature distillation and logit distillation.
pub fn distill_student(
    corpus: &CorpusSplit,
    student: &EncoderConfig,
    teacher: TeacherSource<'_>,
    config: &TrainConfig,
    weights: &LossWeights,
) -> Result<(EmbeddingModel, TrainReport)> {
    let mut model = model_for_corpus(corpus, student)?;
    let report = fit(&mut model, corpus, teacher, config, weights)?;
    Ok((model, report))
}

/// Optimizes `model` in place.
pub fn fit(
    model: &mut EmbeddingModel,
    corpus: &CorpusSplit,
    teacher: TeacherSource<'_>,
    config: &TrainConfig,
    weights: &LossWeights,
) -> Result<TrainReport> {
    config.validate()?;
    weights.validate()?;
    if weights.uses_teacher() && matches!(teacher, TeacherSource::None) {
        return Err(Error::Config(
            "distillation weights beta/gamma are nonzero but no teacher was given".into(),
        ));
    }
    teacher.validate(corpus)?;
    let student_dim = model.dim();
    let mut aux = ParamStore::new();
    let mut head = None;
    if let Some(td) = teacher.dim() {
        match config.variant {
            DistillVariant::Combined if weights.beta > 0.0 => {
                head = Some(ProjectionHead::init(&mut aux, student_dim, td, config.seed)?);
            }
            DistillVariant::Combined => {}
            DistillVariant::DistillFirst => {
                if model.bridge.is_none() {
                    model.add_bridge(td, config.seed)?;
                }
                let up = model.bridge.expect("bridge present").up;
                if up.output != td {
                    return Err(Error::Config(format!(
                        "distill-first layer has width {} but the teacher {td}",
                        up.output
                    )));
                }
            }
            DistillVariant::Synchronized => {
                if td != student_dim {
                    return Err(Error::Config(format!(
                        "synchronized distillation needs a frozen reducer taking the teacher to {student_dim} dims; teacher has {td}"
                    )));
                }
            }
        }
    } else if config.variant == DistillVariant::DistillFirst {
        return Err(Error::Config("distill-first training needs a teacher".into()));
    }

    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
    let vocab = model.vocab.clone();
    let mut stream = BatchStream::new(&corpus.train, &vocab, config, model.config.max_seq_len)?;
    let mut report = TrainReport::default();
    let started = Instant::now();
    for step in 1..=config.steps {
        let batch = stream.next_batch()?;
        let teacher_vectors = teacher.embed(&corpus.train, &batch.pair_indices)?;
        let mut g = Graph::new();
        let xs = model.forward(&mut g, &batch.source)?;
        let ys = model.forward(&mut g, &batch.target)?;
        let s = cosine_matrix(&mut g, xs.embedding, ys.embedding)?;
        let ams = ams_loss(&mut g, s, weights.margin)?;
        let (mut feature, mut logit) = (None, None);
        if let Some((tx, ty)) = teacher_vectors {
            let (xt, yt) = (g.constant(tx), g.constant(ty));
            let (fx, fy) = match config.feature_mode {
                FeatureMode::Normalized => (xs.embedding, ys.embedding),
                FeatureMode::Unnormalized => (xs.unnormalized, ys.unnormalized),
            };
            feature = match config.variant {
                DistillVariant::Combined => match &head {
                    Some(h) => Some(feature_distill_loss(&mut g, &aux, h, xt, yt, fx, fy)?),
                    None => None,
                },
                DistillVariant::DistillFirst => Some(distill_first_loss(
                    &mut g,
                    xt,
                    yt,
                    xs.intermediate.expect("bridge present"),
                    ys.intermediate.expect("bridge present"),
                )?),
                DistillVariant::Synchronized => Some(synchronized_loss(&mut g, Some((xt, yt)), fx, fy)?),
            };
            let st = teacher_similarity(&mut g, xt, yt)?;
            logit = Some(logit_distill_loss(&mut g, st, s, weights.temperature)?);
        }
        let (total, components) = combined_loss(&mut g, ams, feature, logit, weights)?;
        check_loss(step, &components)?;
        let grads = g.backward(total)?;
        drop(g);
        optimizer.step(&mut [&mut model.store, &mut aux], &grads)?;

        if is_log_step(step, config) {
            let record = TrainRecord {
                step,
                loss: components,
                dev_p_at_1: dev_p_at_1(model, &corpus.dev)?,
                elapsed_secs: started.elapsed().as_secs_f64(),
            };
            log::info!("{}", serde_json::to_string(&record).expect("records serialize"));
            report.records.push(record);
        }
    }
    Ok(report)
}

fn teacher_similarity(g: &mut Graph<'_>, xt: NodeId, yt: NodeId) -> Result<NodeId> {
    let st = cosine_matrix(g, xt, yt)?;
    let value = g.value(st).clone();
    Ok(g.constant(value))
}

/// Teacher embeddings of every sentence on both sides of `pairs`.
fn embed_pairs(teacher: &EmbeddingModel, pairs: &[SentencePair]) -> Result<(Tensor, Tensor)> {
    let src: Vec<&str> = pairs.iter().map(|p| p.source.as_str()).collect();
    let tgt: Vec<&str> = pairs.iter().map(|p| p.target.as_str()).collect();
    Ok((teacher.embed_sentences(&src)?, teacher.embed_sentences(&tgt)?))
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), t.last_dim()], data).expect("consistent rows")
}

/// A trained reducer: weight `[teacher_dim, d]` and bias `[d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducerWeights {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ReducerWeights {
    /// Applies the reducer and normalizes the rows.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut store = ParamStore::new();
        store.add(format!("{REDUCER}.weight"), self.weight.clone())?;
        store.add(format!("{REDUCER}.bias"), self.bias.clone())?;
        let dense = Dense::bind_any(&store, REDUCER).expect("just added")?;
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let out = dense.forward(&mut g, &store, input)?;
        let out = g.l2_normalize_rows(out);
        Ok(g.value(out).clone())
    }
}

/// Fits a dense map from fixed teacher embeddings down to `target_dim` with
/// the margin softmax. `train` holds the teacher vectors of the training
/// pairs and `dev` those of the dev pairs.
pub fn fit_reducer(
    train: (&Tensor, &Tensor),
    dev: Option<(&Tensor, &Tensor)>,
    target_dim: usize,
    margin: f64,
    config: &TrainConfig,
) -> Result<(ReducerWeights, TrainReport)> {
    config.validate()?;
    let (tx, ty) = train;
    let teacher_dim = tx.last_dim();
    if target_dim == 0 || target_dim >= teacher_dim {
        return Err(Error::Config(format!(
            "reduced dimension must be between 1 and {} (teacher dimension {teacher_dim}), got {target_dim}",
            teacher_dim.saturating_sub(1)
        )));
    }
    if tx.rows() < 2 || tx.shape() != ty.shape() {
        return Err(Error::Data(format!(
            "reducer needs matching teacher matrices with at least 2 rows, got {:?} and {:?}",
            tx.shape(),
            ty.shape()
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7265_6475_6365);
    let dense = Dense::init(&mut store, REDUCER, teacher_dim, target_dim, &mut rng)?;
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
    let mut report = TrainReport::default();
    let started = Instant::now();
    let n = tx.rows();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let weights_now = |store: &ParamStore| ReducerWeights {
        weight: store.get(dense.weight).clone(),
        bias: store.get(dense.bias).clone(),
    };
    for step in 1..=config.steps {
        if cursor + 2 > order.len() {
            use rand::seq::SliceRandom;
            order = (0..n).collect();
            let seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            cursor = 0;
            epoch += 1;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let rows = &order[cursor..end];
        cursor = end;
        let mut g = Graph::new();
        let x = g.constant(gather(tx, rows));
        let y = g.constant(gather(ty, rows));
        let rx = dense.forward(&mut g, &store, x)?;
        let ry = dense.forward(&mut g, &store, y)?;
        let s = cosine_matrix(&mut g, rx, ry)?;
        let ams = ams_loss(&mut g, s, margin)?;
        let value = g.value(ams).item();
        let components = LossComponents {
            ams: value,
            feature: None,
            logit: None,
            total: value,
        };
        check_loss(step, &components)?;
        let grads = g.backward(ams)?;
        drop(g);
        optimizer.step(&mut [&mut store], &grads)?;
        if is_log_step(step, config) {
            let dev_p = match dev {
                Some((dx, dy)) if dx.rows() >= 2 => {
                    let w = weights_now(&store);
                    Some(retrieval_p_at_1(&w.apply(dx)?, &w.apply(dy)?)?)
                }
                _ => None,
            };
            let record = TrainRecord {
                step,
                loss: components,
                dev_p_at_1: dev_p,
                elapsed_secs: started.elapsed().as_secs_f64(),
            };
            log::info!("{}", serde_json::to_string(&record).expect("records serialize"));
            report.records.push(record);
        }
    }
    Ok((weights_now(&store), report))
}

/// Adds a `hidden → target_dim` reducer on top of a frozen teacher. The
/// teacher is only read; the returned model is a copy carrying the reducer.
pub fn reduce_dimension(
    teacher: &EmbeddingModel,
    corpus: &CorpusSplit,
    target_dim: usize,
    margin: f64,
    config: &TrainConfig,
) -> Result<(EmbeddingModel, TrainReport)> {
    if teacher.bridge.is_some() || teacher.reducer.is_some() {
        return Err(Error::Config("the teacher for reduction must be a plain encoder".into()));
    }
    if target_dim >= teacher.dim() {
        return Err(Error::Config(format!(
            "reduced dimension {target_dim} must be smaller than the teacher dimension {}",
            teacher.dim()
        )));
    }
    config.validate()?;
    let (tx, ty) = embed_pairs(teacher, &corpus.train)?;
    let dev = if corpus.dev.is_empty() {
        None
    } else {
        Some(embed_pairs(teacher, &corpus.dev)?)
    };
    let (reducer, report) = fit_reducer((&tx, &ty), dev.as_ref().map(|(a, b)| (a, b)), target_dim, margin, config)?;
    let mut reduced = teacher.clone();
    reduced.attach_reducer(reducer.weight, reducer.bias)?;
    Ok((reduced, report))
}
