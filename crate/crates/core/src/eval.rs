//! Exact-search bitext retrieval: P@1, ratio-margin scoring and mining F1.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 4;
pub const THREADS_ENV: &str = "LEALLA_THREADS";

/// Worker pool sized by `LEALLA_THREADS` (unset or 0 means every core).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?,
        _ => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Identified vectors of one width.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f64>,
    index: HashMap<String, usize>,
    normalized: bool,
}

impl EmbeddingStore {
    pub fn new(dim: usize, ids: Vec<String>, vectors: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("embedding dimension must be positive".into()));
        }
        if vectors.len() != ids.len() * dim {
            return Err(Error::Data(format!(
                "{} ids but {} values for dimension {dim}",
                ids.len(),
                vectors.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate embedding id {id:?}")));
            }
        }
        let normalized = vectors
            .chunks(dim)
            .all(|v| (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-6);
        Ok(Self {
            dim,
            ids,
            vectors,
            index,
            normalized,
        })
    }

    /// Rows of `[n, d]` labelled `0..n`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let ids = (0..t.rows()).map(|i| i.to_string()).collect();
        Self::new(t.last_dim(), ids, t.data().to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown embedding id {id:?}")))
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        Ok(self.vector(self.position(id)?))
    }

    /// Text format: `dim <d> count <n>`, then `id<TAB>v1 … vd` per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty embedding file".into()))?;
        let (dim, count) = match header.split_whitespace().collect::<Vec<_>>()[..] {
            ["dim", d, "count", n] => (
                d.parse::<usize>().map_err(|_| Error::Format(format!("bad dim in header {header:?}")))?,
                n.parse::<usize>().map_err(|_| Error::Format(format!("bad count in header {header:?}")))?,
            ),
            _ => return Err(Error::Format(format!("bad embedding header {header:?}"))),
        };
        let mut ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count * dim);
        for (n, line) in lines.enumerate() {
            let line_no = n + 2;
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {line_no}: missing tab")))?;
            let before = vectors.len();
            for tok in rest.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("line {line_no}: bad number {tok:?}")))?;
                vectors.push(v);
            }
            if vectors.len() - before != dim {
                return Err(Error::Format(format!(
                    "line {line_no}: expected {dim} values, found {}",
                    vectors.len() - before
                )));
            }
            ids.push(id.to_string());
        }
        if ids.len() != count {
            return Err(Error::Format(format!(
                "header announces {count} vectors, file has {}",
                ids.len()
            )));
        }
        Self::new(dim, ids, vectors)
    }

    /// Values are written as 32-bit reals.
    pub fn to_text(&self) -> String {
        let mut out = format!("dim {} count {}\n", self.dim, self.len());
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            out.push('\t');
            for (j, v) in self.vector(i).iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                write!(out, "{}", *v as f32).expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// `src_id<TAB>tgt_id` per line; blank lines are ignored.
pub fn parse_gold(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_once('\t')
                .map(|(s, t)| (s.to_string(), t.to_string()))
                .ok_or_else(|| Error::Format(format!("gold line {}: missing tab", n + 1)))
        })
        .collect()
}

pub fn read_gold(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    parse_gold(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Index of the row of `store` most similar to `query`; the lowest index wins
/// ties.
pub fn nearest(query: &[f64], store: &EmbeddingStore) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..store.len() {
        let c = cosine(query, store.vector(i));
        if c > best.1 {
            best = (i, c);
        }
    }
    best.0
}

fn check_dims(src: &EmbeddingStore, tgt: &EmbeddingStore) -> Result<()> {
    if src.dim != tgt.dim {
        return Err(Error::Data(format!(
            "source vectors have {} dims, target vectors {}",
            src.dim, tgt.dim
        )));
    }
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Data("embedding stores must be nonempty".into()));
    }
    Ok(())
}

/// Fraction of gold pairs whose exact nearest neighbour is the gold
/// counterpart; bidirectional averages source→target and target→source.
pub fn p_at_1(
    src: &EmbeddingStore,
    tgt: &EmbeddingStore,
    gold: &[(String, String)],
    bidirectional: bool,
) -> Result<f64> {
    check_dims(src, tgt)?;
    if gold.is_empty() {
        return Err(Error::Data("gold pair list is empty".into()));
    }
    let pairs = gold
        .iter()
        .map(|(s, t)| Ok((src.position(s)?, tgt.position(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let pool = worker_pool()?;
    let hits = |a: &EmbeddingStore, b: &EmbeddingStore, flip: bool| -> usize {
        pool.install(|| {
            pairs
                .par_iter()
                .filter(|&&(s, t)| {
                    let (q, want) = if flip { (t, s) } else { (s, t) };
                    nearest(a.vector(q), b) == want
                })
                .count()
        })
    };
    let forward = hits(src, tgt, false) as f64 / pairs.len() as f64;
    if !bidirectional {
        return Ok(forward);
    }
    let backward = hits(tgt, src, true) as f64 / pairs.len() as f64;
    Ok((forward + backward) / 2.0)
}

/// Sum of the `k` largest cosines between `query` and the rows of `store`,
/// added in descending order.
fn top_k_sum(query: &[f64], store: &EmbeddingStore, k: usize) -> f64 {
    let mut sims: Vec<f64> = (0..store.len()).map(|i| cosine(query, store.vector(i))).collect();
    sims.sort_by(|a, b| b.total_cmp(a));
    sims[..k].iter().sum()
}

fn check_k(k: usize, src: &EmbeddingStore, tgt: &EmbeddingStore) -> Result<()> {
    if k == 0 || k > src.len() || k > tgt.len() {
        return Err(Error::Config(format!(
            "k must be between 1 and the smaller store size ({}), got {k}",
            src.len().min(tgt.len())
        )));
    }
    Ok(())
}

/// Ratio margin `cos(x, y) / (Σ NNₖ(x)/(2k) + Σ NNₖ(y)/(2k))`, neighbourhoods
/// taken over the opposite store.
pub fn margin_score(x: &str, y: &str, src: &EmbeddingStore, tgt: &EmbeddingStore, k: usize) -> Result<f64> {
    check_dims(src, tgt)?;
    check_k(k, src, tgt)?;
    let (xv, yv) = (src.get(x)?, tgt.get(y)?);
    let denom = 2.0 * k as f64;
    Ok(cosine(xv, yv) / (top_k_sum(xv, tgt, k) / denom + top_k_sum(yv, src, k) / denom))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub src: String,
    pub tgt: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiningResult {
    /// One best-margin target per source item, in source order.
    pub candidates: Vec<Candidate>,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when the gold list is empty; the metrics are then reported as 0.
    pub no_gold: bool,
    /// One point per distinct candidate score, highest threshold first.
    pub sweep: Vec<SweepPoint>,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Forward mining: each source item proposes its best-margin target, and the
/// candidate list is thresholded at the F1-maximizing score.
pub fn mine_pairs(
    src: &EmbeddingStore,
    tgt: &EmbeddingStore,
    k: usize,
    gold: &[(String, String)],
) -> Result<MiningResult> {
    check_dims(src, tgt)?;
    check_k(k, src, tgt)?;
    let gold_set = gold
        .iter()
        .map(|(s, t)| Ok((src.position(s)?, tgt.position(t)?)))
        .collect::<Result<HashSet<_>>>()?;
    let denom = 2.0 * k as f64;
    let pool = worker_pool()?;
    let (src_nn, tgt_nn, best): (Vec<f64>, Vec<f64>, Vec<(usize, f64)>) = pool.install(|| {
        let src_nn: Vec<f64> = (0..src.len())
            .into_par_iter()
            .map(|i| top_k_sum(src.vector(i), tgt, k))
            .collect();
        let tgt_nn: Vec<f64> = (0..tgt.len())
            .into_par_iter()
            .map(|j| top_k_sum(tgt.vector(j), src, k))
            .collect();
        let best = (0..src.len())
            .into_par_iter()
            .map(|i| {
                let mut best = (0, f64::NEG_INFINITY);
                for j in 0..tgt.len() {
                    let s = cosine(src.vector(i), tgt.vector(j)) / (src_nn[i] / denom + tgt_nn[j] / denom);
                    if s > best.1 {
                        best = (j, s);
                    }
                }
                best
            })
            .collect();
        (src_nn, tgt_nn, best)
    });
    drop((src_nn, tgt_nn));

    let candidates: Vec<Candidate> = best
        .iter()
        .enumerate()
        .map(|(i, &(j, score))| Candidate {
            src: src.ids[i].clone(),
            tgt: tgt.ids[j].clone(),
            score,
        })
        .collect();

    let mut order: Vec<usize> = (0..best.len()).collect();
    order.sort_by(|&a, &b| best[b].1.total_cmp(&best[a].1).then(a.cmp(&b)));
    let mut sweep = Vec::new();
    let (mut selected, mut correct) = (0usize, 0usize);
    for (pos, &i) in order.iter().enumerate() {
        selected += 1;
        if gold_set.contains(&(i, best[i].0)) {
            correct += 1;
        }
        let last_of_score = order.get(pos + 1).is_none_or(|&n| best[n].1 != best[i].1);
        if last_of_score {
            let (precision, recall) = if gold_set.is_empty() {
                (0.0, 0.0)
            } else {
                (correct as f64 / selected as f64, correct as f64 / gold_set.len() as f64)
            };
            sweep.push(SweepPoint {
                threshold: best[i].1,
                precision,
                recall,
                f1: f1_score(precision, recall),
            });
        }
    }
    let top = sweep
        .iter()
        .copied()
        .reduce(|a, b| if b.f1 > a.f1 { b } else { a })
        .expect("nonempty source store");
    Ok(MiningResult {
        candidates,
        threshold: top.threshold,
        precision: top.precision,
        recall: top.recall,
        f1: top.f1,
        no_gold: gold_set.is_empty(),
        sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(rows: &[Vec<f64>]) -> EmbeddingStore {
        let dim = rows[0].len();
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        EmbeddingStore::new(dim, ids, rows.concat()).unwrap()
    }

    fn identity_gold(n: usize) -> Vec<(String, String)> {
        (0..n).map(|i| (i.to_string(), i.to_string())).collect()
    }

    fn basis(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
    }

    fn random_store(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingStore {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        store(&rows)
    }

    #[test]
    fn identical_stores_give_perfect_p_at_1() {
        let s = store(&basis(4));
        assert_eq!(p_at_1(&s, &s, &identity_gold(4), true).unwrap(), 1.0);
    }

    #[test]
    fn one_wrong_direction_gives_three_quarters() {
        // Target 1 sits closest to source 0, but source 1's nearest target is
        // still target 1.
        let src = store(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let tgt = store(&[vec![1.0, 0.0], vec![0.8, 0.6]]);
        let gold = identity_gold(2);
        assert_eq!(p_at_1(&src, &tgt, &gold, false).unwrap(), 1.0);
        assert_eq!(p_at_1(&src, &tgt, &gold, true).unwrap(), 0.75);
    }

    #[test]
    fn permuted_orthonormal_targets() {
        let src = store(&basis(5));
        let perm = [3, 0, 4, 1, 2];
        let rows: Vec<_> = perm.iter().map(|&p| basis(5)[p].clone()).collect();
        let tgt = store(&rows);
        let gold: Vec<_> = perm.iter().enumerate().map(|(j, &p)| (p.to_string(), j.to_string())).collect();
        assert_eq!(p_at_1(&src, &tgt, &gold, true).unwrap(), 1.0);
    }

    #[test]
    fn missing_gold_id_is_data_error() {
        let s = store(&basis(2));
        let gold = vec![("0".to_string(), "9".to_string())];
        assert!(matches!(p_at_1(&s, &s, &gold, false), Err(Error::Data(_))));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let tgt = store(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(nearest(&[2.0, 0.0], &tgt), 0);
    }

    #[test]
    fn margin_hand_cases() {
        let src = store(&[vec![1.0, 0.0]]);
        let tgt = store(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(margin_score("0", "0", &src, &tgt, 1).unwrap(), 1.0);
        let s = store(&basis(3));
        assert_eq!(margin_score("1", "1", &s, &s, 1).unwrap(), 1.0);
        assert!(matches!(margin_score("0", "0", &src, &tgt, 0), Err(Error::Config(_))));
        assert!(matches!(margin_score("0", "0", &src, &tgt, 2), Err(Error::Config(_))));
    }

    #[test]
    fn mining_orthonormal_identity() {
        let s = store(&basis(5));
        let r = mine_pairs(&s, &s, 1, &identity_gold(5)).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.threshold, 1.0);
        assert!(!r.no_gold);
    }

    #[test]
    fn mining_without_gold_is_flagged() {
        let s = store(&basis(3));
        let r = mine_pairs(&s, &s, 1, &[]).unwrap();
        assert!(r.no_gold);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn file_round_trip_and_format_errors() {
        let s = store(&[vec![0.6, 0.8], vec![1.0, 0.0]]);
        let back = EmbeddingStore::parse(&s.to_text()).unwrap();
        assert_eq!(back, s);
        assert!(back.is_normalized());
        assert!(matches!(EmbeddingStore::parse("dims 2\n"), Err(Error::Format(_))));
        assert!(matches!(EmbeddingStore::parse("dim 2 count 1\na\t1\n"), Err(Error::Format(_))));
        assert!(matches!(EmbeddingStore::parse("dim 2 count 2\na\t1 0\n"), Err(Error::Format(_))));
        assert!(matches!(
            EmbeddingStore::parse("dim 1 count 2\na\t1\na\t1\n"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn gold_parsing() {
        let g = parse_gold("a\tb\n\nc\td\n").unwrap();
        assert_eq!(g.len(), 2);
        assert!(parse_gold("nope\n").is_err());
    }

    proptest! {
        #[test]
        fn p_at_1_ignores_insertion_order(seed in any::<u64>(), n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = random_store(&mut rng, n, 3);
            let tgt = random_store(&mut rng, n, 3);
            let gold = identity_gold(n);
            let base = p_at_1(&src, &tgt, &gold, true).unwrap();
            let rev = |s: &EmbeddingStore| {
                let ids: Vec<String> = s.ids().iter().rev().cloned().collect();
                let v: Vec<f64> = (0..s.len()).rev().flat_map(|i| s.vector(i).to_vec()).collect();
                EmbeddingStore::new(s.dim(), ids, v).unwrap()
            };
            prop_assert_eq!(p_at_1(&rev(&src), &rev(&tgt), &gold, true).unwrap(), base);
        }

        #[test]
        fn sweep_is_exhaustive(seed in any::<u64>(), n in 3usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = random_store(&mut rng, n, 4);
            let tgt = random_store(&mut rng, n, 4);
            let r = mine_pairs(&src, &tgt, 2, &identity_gold(n)).unwrap();
            let mut scores: Vec<f64> = r.candidates.iter().map(|c| c.score).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            scores.dedup();
            prop_assert_eq!(scores.len(), r.sweep.len());
            for p in &r.sweep {
                prop_assert!(p.f1 <= r.f1);
                prop_assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
            }
        }
    }
}
