//! Sampled-negative ranking evaluation from both sides of every match.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_distinct_users, Interaction, SequenceStore, Side};
use crate::error::{Error, Result};
use crate::matching::macro_score;
use crate::model::ReSeq;
use crate::numerics::ParamStore;

/// `1 + #{negatives scoring at least as high}`: ties go against the positive.
pub fn rank_position(positive: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RankMetrics {
    pub hr: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

/// Hit ratio, reciprocal rank and NDCG for a single relevant item.
pub fn metrics_at_k(rank: usize, k: usize) -> RankMetrics {
    if rank == 0 || rank > k {
        return RankMetrics::default();
    }
    RankMetrics {
        hr: 1.0,
        mrr: 1.0 / rank as f64,
        ndcg: 1.0 / ((rank + 1) as f64).log2(),
    }
}

/// A user's history as seen at some cutoff: the user and how many of their
/// events precede it. Two cutoffs with the same count see the same history.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HistoryKey {
    pub side: Side,
    pub user: usize,
    pub events_before: usize,
}

/// Something that can score a `(u, v)` pair at time `t`.
pub trait MatchScorer {
    /// Receives every history that will be scored, with a cutoff that
    /// produces it, before any call to [`MatchScorer::score`].
    fn prepare(&mut self, _store: &SequenceStore, _keys: &[(HistoryKey, i64)]) -> Result<()> {
        Ok(())
    }

    fn score(&self, u: HistoryKey, v: HistoryKey, t: i64) -> Result<f64>;
}

/// Macro-level scoring with a trained model; each distinct history is
/// encoded once.
pub struct ModelScorer<'a> {
    model: &'a ReSeq,
    params: &'a ParamStore,
    chunk: usize,
    cache: HashMap<HistoryKey, (Vec<f64>, Vec<f64>)>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a ReSeq, params: &'a ParamStore) -> Self {
        ModelScorer {
            model,
            params,
            chunk: 64,
            cache: HashMap::new(),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    fn lookup(&self, key: &HistoryKey) -> Result<&(Vec<f64>, Vec<f64>)> {
        self.cache
            .get(key)
            .ok_or_else(|| Error::InvalidArgument(format!("history {key:?} was not prepared")))
    }
}

impl MatchScorer for ModelScorer<'_> {
    fn prepare(&mut self, store: &SequenceStore, keys: &[(HistoryKey, i64)]) -> Result<()> {
        let max_len = self.model.config().encoder.n;
        for side in [Side::U, Side::V] {
            let mut todo: Vec<HistoryKey> = Vec::new();
            let mut queued = HashSet::new();
            let mut seqs = Vec::new();
            for &(key, cutoff) in keys {
                if key.side != side || self.cache.contains_key(&key) || !queued.insert(key) {
                    continue;
                }
                seqs.push(store.build_truncated_sequence(side, key.user, cutoff, max_len)?);
                todo.push(key);
            }
            let refs: Vec<_> = seqs.iter().collect();
            let enc = self.model.encode_summaries(self.params, side, &refs, self.chunk)?;
            self.cache.extend(todo.into_iter().zip(enc));
        }
        Ok(())
    }

    fn score(&self, u: HistoryKey, v: HistoryKey, _t: i64) -> Result<f64> {
        let (pu, fu) = self.lookup(&u)?;
        let (pv, fv) = self.lookup(&v)?;
        Ok(macro_score(pu, fv, pv, fu)?.total)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub k: usize,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: 5,
            negatives: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub instances: usize,
    pub negatives_per_instance: usize,
    /// Ranking V candidates for each u.
    pub perspective_u: RankMetrics,
    /// Ranking U candidates for each v.
    pub perspective_v: RankMetrics,
    pub empty_history_negatives: usize,
    pub total_negatives: usize,
}

impl EvalReport {
    pub fn mean_ndcg(&self) -> f64 {
        0.5 * (self.perspective_u.ndcg + self.perspective_v.ndcg)
    }

    pub fn mean_hr(&self) -> f64 {
        0.5 * (self.perspective_u.hr + self.perspective_v.hr)
    }

    pub fn empty_history_rate(&self) -> f64 {
        if self.total_negatives == 0 {
            0.0
        } else {
            self.empty_history_negatives as f64 / self.total_negatives as f64
        }
    }

    /// Machine-readable `key = value` pairs.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let k = self.k;
        let mut out = Vec::new();
        for (name, m) in [
            ("perspective_u", &self.perspective_u),
            ("perspective_v", &self.perspective_v),
        ] {
            out.push((format!("{name}.hr@{k}"), m.hr.to_string()));
            out.push((format!("{name}.mrr@{k}"), m.mrr.to_string()));
            out.push((format!("{name}.ndcg@{k}"), m.ndcg.to_string()));
        }
        out.push(("instances".into(), self.instances.to_string()));
        out.push(("negatives_per_instance".into(), self.negatives_per_instance.to_string()));
        out.push((
            "empty_history_negative_rate".into(),
            self.empty_history_rate().to_string(),
        ));
        out
    }

    pub fn to_kv_string(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_table(&self) -> String {
        let k = self.k;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>8} {:>8} {:>8}",
            "perspective",
            format!("HR@{k}"),
            format!("MRR@{k}"),
            format!("NDCG@{k}")
        );
        for (name, m) in [("U ranks V", &self.perspective_u), ("V ranks U", &self.perspective_v)] {
            let _ = writeln!(s, "{:<14} {:>8.4} {:>8.4} {:>8.4}", name, m.hr, m.mrr, m.ndcg);
        }
        let _ = writeln!(
            s,
            "{} instances, {} negatives each, {:.2}% of negatives with empty history",
            self.instances,
            self.negatives_per_instance,
            100.0 * self.empty_history_rate()
        );
        s
    }
}

struct Candidates {
    t: i64,
    u: HistoryKey,
    v: HistoryKey,
    /// V candidates ranked for u.
    neg_v: Vec<HistoryKey>,
    /// U candidates ranked for v.
    neg_u: Vec<HistoryKey>,
}

fn key(store: &SequenceStore, side: Side, user: usize, t: i64) -> Result<HistoryKey> {
    Ok(HistoryKey {
        side,
        user,
        events_before: store.count_before(side, user, t)?,
    })
}

/// Ranks every interaction's true counterpart against sampled negatives from
/// both sides. Instance `i` draws its negatives from stream `i` of `seed`, so
/// results do not depend on evaluation order.
pub fn evaluate_split<S: MatchScorer + ?Sized>(
    scorer: &mut S,
    store: &SequenceStore,
    split: &[Interaction],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    if opts.k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let (nu, nv) = (store.num_users(Side::U), store.num_users(Side::V));
    let mut all = Vec::with_capacity(split.len());
    for (i, it) in split.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64);
        let t = it.timestamp;
        let neg_v = sample_distinct_users(&mut rng, nv, it.v, opts.negatives)?;
        let neg_u = sample_distinct_users(&mut rng, nu, it.u, opts.negatives)?;
        all.push(Candidates {
            t,
            u: key(store, Side::U, it.u, t)?,
            v: key(store, Side::V, it.v, t)?,
            neg_v: neg_v
                .into_iter()
                .map(|x| key(store, Side::V, x, t))
                .collect::<Result<_>>()?,
            neg_u: neg_u
                .into_iter()
                .map(|x| key(store, Side::U, x, t))
                .collect::<Result<_>>()?,
        });
    }

    // one entry per distinct history, each audited against its cutoff
    let mut seen = HashMap::new();
    let mut keys = Vec::new();
    for c in &all {
        for &k in [c.u, c.v].iter().chain(&c.neg_v).chain(&c.neg_u) {
            if seen.insert(k, c.t).is_none() {
                store.build_truncated_sequence(k.side, k.user, c.t, usize::MAX)?;
                keys.push((k, c.t));
            }
        }
    }
    scorer.prepare(store, &keys)?;

    let mut sum_u = RankMetrics::default();
    let mut sum_v = RankMetrics::default();
    let mut empty = 0;
    let add = |acc: &mut RankMetrics, m: RankMetrics| {
        acc.hr += m.hr;
        acc.mrr += m.mrr;
        acc.ndcg += m.ndcg;
    };
    for c in &all {
        let pos = scorer.score(c.u, c.v, c.t)?;
        let negs = c
            .neg_v
            .iter()
            .map(|&v| scorer.score(c.u, v, c.t))
            .collect::<Result<Vec<_>>>()?;
        add(&mut sum_u, metrics_at_k(rank_position(pos, &negs), opts.k));
        let negs = c
            .neg_u
            .iter()
            .map(|&u| scorer.score(u, c.v, c.t))
            .collect::<Result<Vec<_>>>()?;
        add(&mut sum_v, metrics_at_k(rank_position(pos, &negs), opts.k));
        empty += c.neg_v.iter().chain(&c.neg_u).filter(|k| k.events_before == 0).count();
    }
    let n = all.len() as f64;
    let mean = |s: RankMetrics| RankMetrics {
        hr: s.hr / n,
        mrr: s.mrr / n,
        ndcg: s.ndcg / n,
    };
    Ok(EvalReport {
        k: opts.k,
        instances: all.len(),
        negatives_per_instance: opts.negatives,
        perspective_u: mean(sum_u),
        perspective_v: mean(sum_v),
        empty_history_negatives: empty,
        total_negatives: 2 * opts.negatives * all.len(),
    })
}
