//! Scalar loss definitions, early stopping and the mini-batch training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainingConfig;
use crate::data::{sample_distinct_users, Interaction, SequenceStore, Side};
use crate::encoder::MaskMode;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, EvalOptions, EvalReport, ModelScorer};
use crate::matching::MicroAggregation;
use crate::model::{BatchSequences, LossWeights, ModelConfig, ReSeq, TrainInstance};
use crate::numerics::{adam_step, AdamConfig, Graph, ParamStore};

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `Σ_k −log σ(pos − neg_k)`, summed over the negatives of one instance.
pub fn bpr_loss(positive: f64, negatives: &[f64; 4]) -> f64 {
    negatives.iter().map(|&n| softplus(n - positive)).sum()
}

/// `Σ_k ((z_pos − z_k) − (y_pos − y_k))²` with index-aligned negatives.
pub fn margin_mse_loss(z_pos: f64, z_neg: &[f64], y_pos: f64, y_neg: &[f64]) -> Result<f64> {
    if z_neg.len() != y_neg.len() {
        return Err(Error::shape("margin negatives", z_neg.len(), y_neg.len()));
    }
    Ok(z_neg
        .iter()
        .zip(y_neg)
        .map(|(&z, &y)| {
            let d = (z_pos - z) - (y_pos - y);
            d * d
        })
        .sum())
}

/// `L_ma + λ L_mi + μ L_sd`; the last term is dropped without self-distillation.
pub fn total_loss(l_ma: f64, l_mi: f64, l_sd: f64, lambda: f64, mu: f64, self_distill: bool) -> f64 {
    let sd = if self_distill { mu * l_sd } else { 0.0 };
    l_ma + lambda * l_mi + sd
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience: patience.max(1),
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's metric; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Training and validation interactions over one sequence store.
pub struct TrainData<'a> {
    pub store: &'a SequenceStore,
    pub train: &'a [Interaction],
    pub valid: &'a [Interaction],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub macro_loss: f64,
    pub micro_loss: f64,
    pub distill_loss: f64,
    /// Fraction of training instances with a defined micro score.
    pub micro_defined: f64,
    pub valid: EvalReport,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: ReSeq,
    /// Parameters from the best validation epoch.
    pub params: ParamStore,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// The full model and the four single-component ablations.
pub fn ablation_variants(base: &TrainingConfig) -> Vec<(&'static str, TrainingConfig)> {
    vec![
        ("full", base.clone()),
        (
            "w/o DSE",
            TrainingConfig {
                share_embeddings: false,
                ..base.clone()
            },
        ),
        (
            "w/o MASK",
            TrainingConfig {
                mask_mode: MaskMode::BidirectionalAll,
                ..base.clone()
            },
        ),
        (
            "w/o TSA",
            TrainingConfig {
                micro_aggregation: MicroAggregation::Mean,
                ..base.clone()
            },
        ),
        (
            "w/o SD",
            TrainingConfig {
                self_distill: false,
                ..base.clone()
            },
        ),
    ]
}

pub fn adam_config(cfg: &TrainingConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    }
}

/// Samples one negative per side for every interaction in `batch`.
pub fn sample_instances(
    rng: &mut ChaCha8Rng,
    store: &SequenceStore,
    batch: &[Interaction],
) -> Result<Vec<TrainInstance>> {
    let (nu, nv) = (store.num_users(Side::U), store.num_users(Side::V));
    batch
        .iter()
        .map(|it| {
            Ok(TrainInstance {
                u: it.u,
                v: it.v,
                timestamp: it.timestamp,
                neg_u: sample_distinct_users(rng, nu, it.u, 1)?[0],
                neg_v: sample_distinct_users(rng, nv, it.v, 1)?[0],
            })
        })
        .collect()
}

pub fn validate(
    model: &ReSeq,
    params: &ParamStore,
    store: &SequenceStore,
    split: &[Interaction],
    cfg: &TrainingConfig,
) -> Result<EvalReport> {
    let mut scorer = ModelScorer::new(model, params);
    let opts = EvalOptions {
        k: cfg.eval_k,
        negatives: cfg.eval_negatives,
        seed: cfg.seed,
    };
    evaluate_split(&mut scorer, store, split, &opts)
}

/// Trains from a fresh initialization, selecting the epoch with the best
/// mean validation NDCG. `on_epoch` sees each epoch's log as it completes.
pub fn train(cfg: &TrainingConfig, data: &TrainData<'_>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    let mcfg = ModelConfig::from_training(cfg, data.store.num_users(Side::U), data.store.num_users(Side::V));
    let model = ReSeq::new(&mut params, &mut rng, mcfg)?;
    let weights = LossWeights::from_training(cfg);
    let adam = adam_config(cfg);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    let mut step = 0;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss, mut ma, mut mi, mut sd, mut defined) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<Interaction> = chunk.iter().map(|&i| data.train[i]).collect();
            let inst = sample_instances(&mut rng, data.store, &batch)?;
            let seqs = BatchSequences::build(data.store, &inst, cfg.max_len)?;
            let grads = {
                let mut g = Graph::new(&params);
                let out = model.batch_loss(&mut g, &seqs, &weights, None, Some(&mut rng))?;
                let total = g.scalar(out.total);
                if !total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: format!("loss {total}"),
                    });
                }
                let w = chunk.len() as f64;
                loss += total * w;
                ma += out.macro_loss * w;
                mi += out.micro_loss * w;
                sd += out.distill_loss * w;
                defined += out.micro_defined;
                step_losses.push(total);
                g.backward(out.total)?
            };
            params.zero_grad();
            grads.accumulate_into(&mut params);
            for p in params.iter_mut() {
                adam_step(p, &adam).map_err(|e| Error::Diverged {
                    epoch,
                    step,
                    detail: e.to_string(),
                })?;
            }
        }
        let n = data.train.len() as f64;
        let valid = validate(&model, &params, data.store, data.valid, cfg)?;
        let metric = valid.mean_ndcg();
        let log = EpochLog {
            epoch,
            loss: loss / n,
            macro_loss: ma / n,
            micro_loss: mi / n,
            distill_loss: sd / n,
            micro_defined: defined as f64 / n,
            valid,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} valid ndcg {:.4} ({:.1}s)",
            log.loss,
            metric,
            log.seconds
        );
        on_epoch(&log);
        epochs.push(log);
        if stopper.observe(epoch, metric) {
            best.copy_values_from(&params)?;
        }
        if stopper.should_stop() {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        params: best,
        epochs,
        best_epoch: stopper.best_epoch(),
        best_metric: stopper.best().unwrap_or(f64::NAN),
        step_losses,
    })
}
