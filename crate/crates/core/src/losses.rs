//! Training objectives over in-batch similarity matrices and embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::Dense;

pub const PROJECTION: &str = "projection";
/// Default teacher embedding width.
pub const TEACHER_DIM: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Additive margin on the true pair's similarity.
    pub margin: f64,
    /// Logit distillation temperature.
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::distillation(false)
    }
}

impl LossWeights {
    /// `alpha = 1`, `beta = 1e3` (`1e4` for large students), `gamma = 1e-2`,
    /// temperature 100 and margin 0.3.
    pub fn distillation(large: bool) -> Self {
        Self {
            margin: 0.3,
            temperature: 100.0,
            alpha: 1.0,
            beta: if large { 1e4 } else { 1e3 },
            gamma: 1e-2,
        }
    }

    pub fn ams_only() -> Self {
        Self {
            beta: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.margin, self.temperature, self.alpha, self.beta, self.gamma];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if [self.margin, self.alpha, self.beta, self.gamma].iter().any(|&v| v < 0.0) {
            return Err(Error::Config("margin and loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn uses_teacher(&self) -> bool {
        self.beta > 0.0 || self.gamma > 0.0
    }
}

/// Trainable dense map from the student width to the teacher width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionHead {
    pub dense: Dense,
}

impl ProjectionHead {
    pub fn init(store: &mut ParamStore, student_dim: usize, teacher_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f6a);
        Ok(Self {
            dense: Dense::init(store, PROJECTION, student_dim, teacher_dim, &mut rng)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.dense.output
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: NodeId) -> Result<NodeId> {
        self.dense.forward(g, store, x)
    }
}

/// Pairwise cosine similarities `[N, M]` between the rows of `x` and `y`.
pub fn cosine_matrix(g: &mut Graph<'_>, x: NodeId, y: NodeId) -> Result<NodeId> {
    for (side, id) in [("x", x), ("y", y)] {
        let t = g.value(id);
        if t.shape().len() != 2 {
            return Err(Error::Contract(format!("{side} must be a matrix, got {:?}", t.shape())));
        }
        if let Some(r) = (0..t.rows()).find(|&r| t.row(r).iter().all(|&v| v == 0.0)) {
            return Err(Error::Contract(format!("row {r} of {side} is zero; cosine undefined")));
        }
    }
    let xn = g.l2_normalize_rows(x);
    let yn = g.l2_normalize_rows(y);
    let yt = g.transpose(yn)?;
    g.matmul(xn, yt)
}

/// Bidirectional additive-margin softmax over a square similarity matrix:
/// the mean over rows of the row-wise and column-wise cross-entropies of the
/// diagonal, with `margin` subtracted from the diagonal first.
pub fn ams_loss(g: &mut Graph<'_>, s: NodeId, margin: f64) -> Result<NodeId> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape {
            op: "ams_loss",
            left: shape.clone(),
            right: shape,
        });
    }
    let n = shape[0];
    let mut m = Tensor::identity(n);
    m.data_mut().iter_mut().for_each(|v| *v *= margin);
    let m = g.constant(m);
    let shifted = g.sub(s, m)?;
    let rows = g.log_softmax_rows(shifted);
    let flipped = g.transpose(shifted)?;
    let cols = g.log_softmax_rows(flipped);
    let both = g.add(rows, cols)?;
    let eye = g.constant(Tensor::identity(n));
    let diag = g.mul(both, eye)?;
    let total = g.sum(diag);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// `(Σᵢ ‖xtᵢ − xsᵢ‖² + ‖ytᵢ − ysᵢ‖²) / N`.
pub fn pair_mse(g: &mut Graph<'_>, xt: NodeId, yt: NodeId, xs: NodeId, ys: NodeId) -> Result<NodeId> {
    let n = g.shape(xt)[0];
    let dx = g.sub(xt, xs)?;
    let dy = g.sub(yt, ys)?;
    let sx = g.sum_squares(dx);
    let sy = g.sum_squares(dy);
    let total = g.add(sx, sy)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Feature distillation: student embeddings mapped through `head` to the
/// teacher width, then [`pair_mse`] against the teacher embeddings.
#[allow(clippy::too_many_arguments)]
pub fn feature_distill_loss<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    head: &ProjectionHead,
    xt: NodeId,
    yt: NodeId,
    xs: NodeId,
    ys: NodeId,
) -> Result<NodeId> {
    let teacher_dim = g.shape(xt)[1];
    if teacher_dim != head.output_dim() {
        return Err(Error::Config(format!(
            "teacher embeddings have {teacher_dim} dims but the projection head outputs {}",
            head.output_dim()
        )));
    }
    let px = head.forward(g, store, xs)?;
    let py = head.forward(g, store, ys)?;
    pair_mse(g, xt, yt, px, py)
}

/// `Σᵢⱼ ((stᵢⱼ − ssᵢⱼ)/T)² / N²`. `st` should be a constant.
pub fn logit_distill_loss(g: &mut Graph<'_>, st: NodeId, ss: NodeId, temperature: f64) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let n = g.shape(st)[0] as f64;
    let diff = g.sub(st, ss)?;
    let scaled = g.scale(diff, 1.0 / temperature);
    let sq = g.sum_squares(scaled);
    Ok(g.scale(sq, 1.0 / (n * n)))
}

/// Feature loss of the distill-first head: the teacher-width intermediate
/// states against the teacher embeddings.
pub fn distill_first_loss(
    g: &mut Graph<'_>,
    xt: NodeId,
    yt: NodeId,
    x_mid: NodeId,
    y_mid: NodeId,
) -> Result<NodeId> {
    pair_mse(g, xt, yt, x_mid, y_mid)
}

/// Feature loss against teacher embeddings already brought down to the
/// student width by a frozen reducer.
pub fn synchronized_loss(
    g: &mut Graph<'_>,
    reduced_teacher: Option<(NodeId, NodeId)>,
    xs: NodeId,
    ys: NodeId,
) -> Result<NodeId> {
    let (xt, yt) = reduced_teacher.ok_or_else(|| {
        Error::Config("synchronized distillation needs a frozen dimension reducer on the teacher".into())
    })?;
    let (td, sd) = (g.shape(xt)[1], g.shape(xs)[1]);
    if td != sd {
        return Err(Error::Config(format!(
            "reduced teacher width {td} differs from student width {sd}"
        )));
    }
    pair_mse(g, xt, yt, xs, ys)
}

/// Unweighted component values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ams: f64,
    pub feature: Option<f64>,
    pub logit: Option<f64>,
    pub total: f64,
}

/// `alpha·ams + beta·feature + gamma·logit`. Terms with zero weight are left
/// out of the total but still reported when present.
pub fn combined_loss(
    g: &mut Graph<'_>,
    ams: NodeId,
    feature: Option<NodeId>,
    logit: Option<NodeId>,
    weights: &LossWeights,
) -> Result<(NodeId, LossComponents)> {
    let mut total = g.scale(ams, weights.alpha);
    for (name, term, w) in [("feature", feature, weights.beta), ("logit", logit, weights.gamma)] {
        if w == 0.0 {
            continue;
        }
        let term = term.ok_or_else(|| {
            Error::Config(format!("{name} distillation weight is {w} but no teacher term was computed"))
        })?;
        let weighted = g.scale(term, w);
        total = g.add(total, weighted)?;
    }
    let components = LossComponents {
        ams: g.value(ams).item(),
        feature: feature.map(|f| g.value(f).item()),
        logit: logit.map(|l| g.value(l).item()),
        total: g.value(total).item(),
    };
    Ok((total, components))
}
