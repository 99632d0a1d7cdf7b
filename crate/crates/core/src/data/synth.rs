//! Seeded two-sided interaction generator.
//!
//! Every user belongs to one of `K` clusters and has a fixed angle inside its
//! cluster's arc of the circle. Its preference angle starts at its own angle
//! and drifts linearly over the horizon. A match is initiated by one user,
//! lands in the initiator's cluster with probability `p_in`, and within the
//! chosen cluster favors counterparts whose angle fits the initiator's
//! current preference and vice versa.

use std::collections::HashSet;
use std::f64::consts::TAU;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{InteractionRecord, Side};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_u: usize,
    pub num_v: usize,
    pub clusters: usize,
    /// Mean number of matches per user; each user initiates half of them.
    pub events_per_user: usize,
    /// Timestamps are drawn from `0..horizon`.
    pub horizon: i64,
    pub p_in: f64,
    /// Concentration of the angular affinity.
    pub kappa: f64,
    /// Total preference drift over the horizon, in cluster arcs.
    pub drift_arcs: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            num_u: 500,
            num_v: 500,
            clusters: 4,
            events_per_user: 20,
            horizon: 1_000_000,
            p_in: 0.8,
            kappa: 4.0,
            drift_arcs: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLog {
    /// Sorted by `(timestamp, u_id, v_id)`.
    pub records: Vec<InteractionRecord>,
    pub u_clusters: Vec<usize>,
    pub v_clusters: Vec<usize>,
}

impl SyntheticLog {
    /// Cluster of a generated id such as `u12` or `v3`.
    pub fn cluster_of(&self, side: Side, id: &str) -> Option<usize> {
        let (prefix, table) = match side {
            Side::U => ('u', &self.u_clusters),
            Side::V => ('v', &self.v_clusters),
        };
        let idx: usize = id.strip_prefix(prefix)?.parse().ok()?;
        table.get(idx).copied()
    }

    /// Fraction of records whose two users share a cluster.
    pub fn within_cluster_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let within = self
            .records
            .iter()
            .filter(|r| self.cluster_of(Side::U, &r.u_id) == self.cluster_of(Side::V, &r.v_id))
            .count();
        within as f64 / self.records.len() as f64
    }
}

struct Population {
    cluster: Vec<usize>,
    angle: Vec<f64>,
    /// Signed drift of the preference angle over the whole horizon.
    drift: Vec<f64>,
    members: Vec<Vec<usize>>,
}

impl Population {
    fn new(rng: &mut ChaCha8Rng, size: usize, k: usize, drift_arcs: f64) -> Self {
        let mut cluster: Vec<usize> = (0..size).map(|i| i % k).collect();
        cluster.shuffle(rng);
        let arc = TAU / k as f64;
        let angle = cluster.iter().map(|&c| (c as f64 + rng.gen::<f64>()) * arc).collect();
        let drift = (0..size)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 } * drift_arcs * arc)
            .collect();
        let mut members = vec![Vec::new(); k];
        for (i, &c) in cluster.iter().enumerate() {
            members[c].push(i);
        }
        Population {
            cluster,
            angle,
            drift,
            members,
        }
    }

    fn preference(&self, i: usize, frac: f64) -> f64 {
        self.angle[i] + self.drift[i] * frac
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidArgument(m));
    if cfg.num_u == 0 || cfg.num_v == 0 || cfg.clusters == 0 || cfg.events_per_user == 0 {
        return bad("user counts, clusters and events_per_user must be positive".into());
    }
    if cfg.clusters > cfg.num_u.min(cfg.num_v) {
        return bad(format!(
            "{} clusters exceed the smaller side ({})",
            cfg.clusters,
            cfg.num_u.min(cfg.num_v)
        ));
    }
    if cfg.horizon <= 0 {
        return bad(format!("horizon must be positive, got {}", cfg.horizon));
    }
    if !(0.0..=1.0).contains(&cfg.p_in) || !cfg.kappa.is_finite() || !cfg.drift_arcs.is_finite() {
        return bad("p_in must lie in [0, 1]; kappa and drift must be finite".into());
    }
    let per_user = cfg.events_per_user.div_ceil(2);
    if per_user * (cfg.num_u + cfg.num_v) > cfg.num_u * cfg.num_v || per_user > cfg.num_u.min(cfg.num_v) {
        return bad(format!(
            "{} initiated matches per user cannot be drawn without repeating a pair",
            per_user
        ));
    }
    Ok(())
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticLog> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.clusters;
    let us = Population::new(&mut rng, cfg.num_u, k, cfg.drift_arcs);
    let vs = Population::new(&mut rng, cfg.num_v, k, cfg.drift_arcs);
    let per_user = cfg.events_per_user.div_ceil(2);

    let mut pairs: HashSet<(usize, usize)> = HashSet::new();
    let mut out: Vec<(i64, usize, usize)> = Vec::new();
    for side in [Side::U, Side::V] {
        let (me, other) = match side {
            Side::U => (&us, &vs),
            Side::V => (&vs, &us),
        };
        for x in 0..me.cluster.len() {
            for _ in 0..per_user {
                let t = rng.gen_range(0..cfg.horizon);
                let frac = t as f64 / cfg.horizon as f64;
                let own = me.cluster[x];
                let target = if k == 1 || rng.gen::<f64>() < cfg.p_in {
                    own
                } else {
                    let c = rng.gen_range(0..k - 1);
                    if c >= own {
                        c + 1
                    } else {
                        c
                    }
                };
                let key = |y: usize| if side == Side::U { (x, y) } else { (y, x) };
                let pick = |cands: &[usize], rng: &mut ChaCha8Rng| -> Option<usize> {
                    let free: Vec<usize> = cands.iter().copied().filter(|&y| !pairs.contains(&key(y))).collect();
                    if free.is_empty() {
                        return None;
                    }
                    let px = me.preference(x, frac);
                    let w: Vec<f64> = free
                        .iter()
                        .map(|&y| {
                            let a = (px - other.angle[y]).cos() + (other.preference(y, frac) - me.angle[x]).cos();
                            (cfg.kappa * (a - 2.0)).exp()
                        })
                        .collect();
                    let dist = WeightedIndex::new(&w).ok()?;
                    Some(free[dist.sample(rng)])
                };
                let y = match pick(&other.members[target], &mut rng) {
                    Some(y) => y,
                    None => {
                        let all: Vec<usize> = (0..other.cluster.len()).collect();
                        pick(&all, &mut rng).ok_or_else(|| {
                            Error::InvalidArgument(format!("{side} user {x} has no unmatched counterpart left"))
                        })?
                    }
                };
                pairs.insert(key(y));
                let (u, v) = key(y);
                out.push((t, u, v));
            }
        }
    }
    out.sort_unstable();
    let records = out
        .into_iter()
        .map(|(t, u, v)| InteractionRecord {
            u_id: format!("u{u}"),
            v_id: format!("v{v}"),
            timestamp: t,
        })
        .collect();
    Ok(SyntheticLog {
        records,
        u_clusters: us.cluster,
        v_clusters: vs.cluster,
    })
}
