//! Latency of the matching step alone, on pre-computed random encodings.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::matching::{macro_score, micro_score, MicroAggregation, TimeWeights, UserEncoding};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScorerKind {
    Macro,
    Micro,
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScorerKind::Macro => "macro",
            ScorerKind::Micro => "micro",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub d: usize,
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ns: vec![8, 16, 32, 64, 128],
            d: 64,
            batch: 256,
            repetitions: 15,
            warmup: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub n: usize,
    pub scorer: ScorerKind,
    pub median_us: f64,
    pub p90_us: f64,
}

/// Median and 90th percentile (nearest rank) of a non-empty sample.
pub fn summarize(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no latency samples".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    let median = if m % 2 == 1 {
        s[m / 2]
    } else {
        0.5 * (s[m / 2 - 1] + s[m / 2])
    };
    let p90 = s[((0.9 * m as f64).ceil() as usize).clamp(1, m) - 1];
    Ok((median, p90))
}

/// Smallest observable step of the monotonic clock, in nanoseconds.
pub fn timer_resolution_ns() -> u64 {
    let mut best = u64::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_nanos() as u64);
    }
    best.max(1)
}

pub fn check_resolution(resolution_ns: u64, measured_ns: u64) -> Result<()> {
    if measured_ns <= resolution_ns {
        return Err(Error::TimerResolution {
            resolution_ns,
            measured_ns,
        });
    }
    Ok(())
}

fn random_encoding(rng: &mut ChaCha8Rng, n: usize, d: usize) -> UserEncoding {
    let mut vec = |len: usize| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let out = |macro_vec: Vec<f64>, micro: Vec<f64>| EncoderOutput {
        macro_vec,
        micro: Matrix::from_vec(n, d, micro).expect("n × d"),
        valid_len: n,
    };
    let active = out(vec(d), vec(n * d));
    let passive = out(vec(d), vec(n * d));
    UserEncoding {
        active,
        passive,
        e_p: vec(d),
        e_f: vec(d),
    }
}

fn run_batch(kind: ScorerKind, pairs: &[(UserEncoding, UserEncoding)], alpha: &TimeWeights) -> Result<f64> {
    let mut acc = 0.0;
    for (u, v) in pairs {
        acc += match kind {
            ScorerKind::Macro => {
                macro_score(
                    &u.active.macro_vec,
                    &v.passive.macro_vec,
                    &v.active.macro_vec,
                    &u.passive.macro_vec,
                )?
                .total
            }
            ScorerKind::Micro => micro_score(u, v, alpha, MicroAggregation::TimeSensitive)?.total,
        };
    }
    Ok(acc)
}

/// Times one batch of `cfg.batch` pair scores per repetition, for every `n`.
pub fn measure_latency(kind: ScorerKind, cfg: &BenchConfig) -> Result<Vec<LatencyRow>> {
    if cfg.repetitions == 0 || cfg.batch == 0 || cfg.d == 0 {
        return Err(Error::InvalidArgument(
            "repetitions, batch and d must be positive".into(),
        ));
    }
    let resolution = timer_resolution_ns();
    let mut rows = Vec::with_capacity(cfg.ns.len());
    for &n in &cfg.ns {
        if n == 0 {
            return Err(Error::InvalidArgument("sequence length must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ n as u64);
        let pairs: Vec<(UserEncoding, UserEncoding)> = (0..cfg.batch)
            .map(|_| (random_encoding(&mut rng, n, cfg.d), random_encoding(&mut rng, n, cfg.d)))
            .collect();
        let alpha = TimeWeights {
            u_to_v: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            v_to_u: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        for _ in 0..cfg.warmup {
            black_box(run_batch(kind, black_box(&pairs), &alpha)?);
        }
        let mut samples = Vec::with_capacity(cfg.repetitions);
        for _ in 0..cfg.repetitions {
            let start = Instant::now();
            black_box(run_batch(kind, black_box(&pairs), &alpha)?);
            let ns = start.elapsed().as_nanos() as u64;
            check_resolution(resolution, ns)?;
            samples.push(ns as f64 / 1000.0);
        }
        let (median_us, p90_us) = summarize(&samples)?;
        rows.push(LatencyRow {
            n,
            scorer: kind,
            median_us,
            p90_us,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthFit {
    pub exponent: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

/// Least-squares slope of `ln t` against `ln n`.
pub fn fit_growth_exponent(points: &[(f64, f64)]) -> Result<GrowthFit> {
    if let Some(&(n, t)) = points.iter().find(|(n, t)| !(*n > 0.0 && *t > 0.0)) {
        return Err(Error::InvalidArgument(format!("non-positive point (n={n}, t={t})")));
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InvalidArgument("need at least 3 distinct n values".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - exponent * x).powi(2))
        .sum();
    Ok(GrowthFit {
        exponent,
        intercept,
        residual: (sse / m).sqrt(),
    })
}

pub fn fit_rows(rows: &[LatencyRow]) -> Result<GrowthFit> {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.median_us)).collect();
    fit_growth_exponent(&pts)
}

pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut s = String::from("n,scorer,median_us,p90_us\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.3},{:.3}\n", r.n, r.scorer, r.median_us, r.p90_us));
    }
    s
}
