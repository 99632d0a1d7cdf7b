//! The full two-sided matcher: embeddings, four encoder stacks, time
//! weights, the batched training objective and inference-time encoding.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainingConfig;
use crate::data::{BehaviorSequence, SequenceStore, Side};
use crate::embedding::{BilateralEmbeddingSet, Perspective};
use crate::encoder::{EncoderConfig, EncoderOutput, EncoderStack, MaskMode};
use crate::error::{Error, Result};
use crate::matching::{MicroAggregation, TimeWeights, UserEncoding};
use crate::numerics::{Graph, Matrix, MicroItem, ParamId, ParamStore, Var};

/// Architecture and objective switches for [`ReSeq`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_u: usize,
    pub num_v: usize,
    pub encoder: EncoderConfig,
    pub d_prime: usize,
    pub embed_dropout: bool,
    pub share_embeddings: bool,
    pub mask_mode: MaskMode,
    pub micro_aggregation: MicroAggregation,
    pub share_alpha: bool,
}

impl ModelConfig {
    pub fn from_training(cfg: &TrainingConfig, num_u: usize, num_v: usize) -> Self {
        ModelConfig {
            num_u,
            num_v,
            encoder: EncoderConfig {
                n: cfg.max_len,
                d: cfg.d,
                layers: cfg.layers,
                heads: cfg.heads,
                d_ff: cfg.d_ff,
                dropout: cfg.dropout,
            },
            d_prime: cfg.d_prime,
            embed_dropout: cfg.embed_dropout,
            share_embeddings: cfg.share_embeddings,
            mask_mode: cfg.mask_mode,
            micro_aggregation: cfg.micro_aggregation,
            share_alpha: cfg.share_alpha,
        }
    }
}

/// One positive match with its sampled negative users.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainInstance {
    pub u: usize,
    pub v: usize,
    pub timestamp: i64,
    pub neg_u: usize,
    pub neg_v: usize,
}

/// Truncated histories of every user involved in a batch.
#[derive(Clone, Debug)]
pub struct BatchSequences {
    pub u: Vec<BehaviorSequence>,
    pub neg_u: Vec<BehaviorSequence>,
    pub v: Vec<BehaviorSequence>,
    pub neg_v: Vec<BehaviorSequence>,
}

impl BatchSequences {
    /// Every history is cut at the instance's own timestamp.
    pub fn build(store: &SequenceStore, batch: &[TrainInstance], max_len: usize) -> Result<Self> {
        let mut out = BatchSequences {
            u: Vec::with_capacity(batch.len()),
            neg_u: Vec::with_capacity(batch.len()),
            v: Vec::with_capacity(batch.len()),
            neg_v: Vec::with_capacity(batch.len()),
        };
        for it in batch {
            let t = it.timestamp;
            out.u.push(store.build_truncated_sequence(Side::U, it.u, t, max_len)?);
            out.neg_u
                .push(store.build_truncated_sequence(Side::U, it.neg_u, t, max_len)?);
            out.v.push(store.build_truncated_sequence(Side::V, it.v, t, max_len)?);
            out.neg_v
                .push(store.build_truncated_sequence(Side::V, it.neg_v, t, max_len)?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Instances whose micro scores are all defined.
    pub fn micro_defined(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&b| {
                !(self.u[b].is_empty() || self.neg_u[b].is_empty() || self.v[b].is_empty() || self.neg_v[b].is_empty())
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub self_distill: bool,
    pub teacher_detach: bool,
}

impl LossWeights {
    pub fn from_training(cfg: &TrainingConfig) -> Self {
        LossWeights {
            lambda: cfg.lambda,
            mu: cfg.mu,
            self_distill: cfg.self_distill,
            teacher_detach: cfg.teacher_detach,
        }
    }
}

/// Recorded loss of one batch.
pub struct BatchLoss {
    pub total: Var,
    pub macro_loss: f64,
    pub micro_loss: f64,
    pub distill_loss: f64,
    /// The unweighted distillation term, when it was computed.
    pub distill_term: Option<Var>,
    /// Per micro-defined instance (in `micro_defined` order): the four
    /// teacher margins `z_pos − z_k`.
    pub teacher_margins: Vec<[f64; 4]>,
    pub micro_defined: usize,
}

/// Directional macro and micro scores of a batch, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchScores {
    /// `[pos, neg_0, .., neg_3]` per instance.
    pub macro_level: Vec<[f64; 5]>,
    /// Same layout; `None` where micro is undefined.
    pub micro_level: Vec<Option<[f64; 5]>>,
}

#[derive(Clone, Debug)]
pub struct ReSeq {
    cfg: ModelConfig,
    embeddings: BilateralEmbeddingSet,
    u_active: EncoderStack,
    u_passive: EncoderStack,
    v_active: EncoderStack,
    v_passive: EncoderStack,
    alpha_uv: ParamId,
    alpha_vu: ParamId,
}

struct Encoded {
    /// Hidden states of the four stacks over `[pos..., neg...]` blocks.
    ua: Var,
    up: Var,
    va: Var,
    vp: Var,
}

struct Forward {
    /// `B × 1` columns: positive and the four negatives.
    y: [Var; 5],
    /// `D × 1` columns over micro-defined instances, if computed.
    z: Option<[Var; 5]>,
    defined: Vec<usize>,
}

fn sum_softplus_margins(g: &mut Graph<'_>, pos: Var, negs: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &n in negs {
        let diff = g.sub(n, pos)?;
        let sp = g.softplus(diff);
        let s = g.sum(sp);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("no negatives".into()))
}

impl ReSeq {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: ModelConfig) -> Result<Self> {
        let e = cfg.encoder;
        let embeddings =
            BilateralEmbeddingSet::new(store, rng, cfg.num_u, cfg.num_v, e.d, cfg.d_prime, cfg.share_embeddings)?;
        let u_active = EncoderStack::new(store, rng, Side::U, Perspective::Active, e)?;
        let u_passive = EncoderStack::new(store, rng, Side::U, Perspective::Passive, e)?;
        let v_active = EncoderStack::new(store, rng, Side::V, Perspective::Active, e)?;
        let v_passive = EncoderStack::new(store, rng, Side::V, Perspective::Passive, e)?;
        let (alpha_uv, alpha_vu) = if cfg.share_alpha {
            let a = store.add_constant("matching.alpha", 1, e.n, 0.0)?;
            (a, a)
        } else {
            (
                store.add_constant("matching.alpha_uv", 1, e.n, 0.0)?,
                store.add_constant("matching.alpha_vu", 1, e.n, 0.0)?,
            )
        };
        Ok(ReSeq {
            cfg,
            embeddings,
            u_active,
            u_passive,
            v_active,
            v_passive,
            alpha_uv,
            alpha_vu,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embeddings(&self) -> &BilateralEmbeddingSet {
        &self.embeddings
    }

    pub fn encoder(&self, side: Side, perspective: Perspective) -> &EncoderStack {
        match (side, perspective) {
            (Side::U, Perspective::Active) => &self.u_active,
            (Side::U, Perspective::Passive) => &self.u_passive,
            (Side::V, Perspective::Active) => &self.v_active,
            (Side::V, Perspective::Passive) => &self.v_passive,
        }
    }

    /// `(u → v, v → u)` time-weight parameters; equal when shared.
    pub fn alpha_ids(&self) -> (ParamId, ParamId) {
        (self.alpha_uv, self.alpha_vu)
    }

    pub fn time_weights(&self, store: &ParamStore) -> TimeWeights {
        TimeWeights {
            u_to_v: store.value(self.alpha_uv).data().to_vec(),
            v_to_u: store.value(self.alpha_vu).data().to_vec(),
        }
    }

    fn n(&self) -> usize {
        self.cfg.encoder.n
    }

    fn encode_all(
        &self,
        g: &mut Graph<'_>,
        seqs: &BatchSequences,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded> {
        let us: Vec<&BehaviorSequence> = seqs.u.iter().chain(&seqs.neg_u).collect();
        let vs: Vec<&BehaviorSequence> = seqs.v.iter().chain(&seqs.neg_v).collect();
        let (mode, ed) = (self.cfg.mask_mode, self.cfg.embed_dropout);
        let set = &self.embeddings;
        Ok(Encoded {
            ua: self.u_active.encode_batch(g, set, &us, mode, ed, rng.as_deref_mut())?,
            up: self.u_passive.encode_batch(g, set, &us, mode, ed, rng.as_deref_mut())?,
            va: self.v_active.encode_batch(g, set, &vs, mode, ed, rng.as_deref_mut())?,
            vp: self.v_passive.encode_batch(g, set, &vs, mode, ed, rng)?,
        })
    }

    /// Summary rows of blocks `first..first + count`.
    fn summaries(&self, g: &mut Graph<'_>, h: Var, first: usize, count: usize) -> Result<Var> {
        let l = self.n() + 1;
        let idx: Vec<usize> = (first..first + count).map(|b| b * l).collect();
        g.gather_rows(h, &idx)
    }

    fn forward(
        &self,
        g: &mut Graph<'_>,
        seqs: &BatchSequences,
        with_micro: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let b = seqs.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let enc = self.encode_all(g, seqs, rng)?;
        let pu = self.summaries(g, enc.ua, 0, b)?;
        let pu_n = self.summaries(g, enc.ua, b, b)?;
        let fu = self.summaries(g, enc.up, 0, b)?;
        let fu_n = self.summaries(g, enc.up, b, b)?;
        let pv = self.summaries(g, enc.va, 0, b)?;
        let pv_n = self.summaries(g, enc.va, b, b)?;
        let fv = self.summaries(g, enc.vp, 0, b)?;
        let fv_n = self.summaries(g, enc.vp, b, b)?;

        let fwd = g.row_dot(pu, fv)?;
        let bwd = g.row_dot(pv, fu)?;
        let fwd_pu = g.row_dot(pu_n, fv)?;
        let fwd_fv = g.row_dot(pu, fv_n)?;
        let bwd_fu = g.row_dot(pv, fu_n)?;
        let bwd_pv = g.row_dot(pv_n, fu)?;
        let y = [
            g.add(fwd, bwd)?,
            g.add(fwd_pu, bwd)?,
            g.add(fwd, bwd_fu)?,
            g.add(fwd, bwd_pv)?,
            g.add(fwd_fv, bwd)?,
        ];

        let defined = seqs.micro_defined();
        let z = if with_micro && !defined.is_empty() {
            Some(self.micro_forward(g, &enc, seqs, &defined)?)
        } else {
            None
        };
        Ok(Forward { y, z, defined })
    }

    fn micro_forward(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        seqs: &BatchSequences,
        defined: &[usize],
    ) -> Result<[Var; 5]> {
        let b = seqs.len();
        let l = self.n() + 1;
        let mode = self.cfg.micro_aggregation;
        let set = &self.embeddings;
        let (mut fwd_items, mut bwd_items) = (Vec::new(), Vec::new());
        let (mut ep_u, mut ef_v, mut ep_v, mut ef_u) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &i in defined {
            let (u, un, v, vn) = (&seqs.u[i], &seqs.neg_u[i], &seqs.v[i], &seqs.neg_v[i]);
            let item = |ab: usize, a: &BehaviorSequence, pb: usize, p: &BehaviorSequence| MicroItem {
                active_block: ab,
                active_len: a.len(),
                passive_block: pb,
                passive_len: p.len(),
            };
            // u → v: positive, u replaced, v replaced
            fwd_items.extend([item(i, u, i, v), item(b + i, un, i, v), item(i, u, b + i, vn)]);
            ep_u.extend([Some(u.owner), Some(un.owner), Some(u.owner)]);
            ef_v.extend([Some(v.owner), Some(v.owner), Some(vn.owner)]);
            // v → u: positive, v replaced, u replaced
            bwd_items.extend([item(i, v, i, u), item(b + i, vn, i, u), item(i, v, b + i, un)]);
            ep_v.extend([Some(v.owner), Some(vn.owner), Some(v.owner)]);
            ef_u.extend([Some(u.owner), Some(u.owner), Some(un.owner)]);
        }
        let e_pu = set.rows(g, Side::U, Perspective::Active, ep_u)?;
        let e_fv = set.rows(g, Side::V, Perspective::Passive, ef_v)?;
        let e_pv = set.rows(g, Side::V, Perspective::Active, ep_v)?;
        let e_fu = set.rows(g, Side::U, Perspective::Passive, ef_u)?;
        let a_uv = g.param(self.alpha_uv);
        let a_vu = g.param(self.alpha_vu);
        let zf = g.micro_match(enc.ua, enc.vp, e_pu, e_fv, a_uv, l, Arc::new(fwd_items), mode)?;
        let zb = g.micro_match(enc.va, enc.up, e_pv, e_fu, a_vu, l, Arc::new(bwd_items), mode)?;
        let pick = |g: &mut Graph<'_>, col: Var, k: usize| {
            let idx: Vec<usize> = (0..defined.len()).map(|j| 3 * j + k).collect();
            g.gather_rows(col, &idx)
        };
        let (zf_pos, zf_un, zf_vn) = (pick(g, zf, 0)?, pick(g, zf, 1)?, pick(g, zf, 2)?);
        let (zb_pos, zb_vn, zb_un) = (pick(g, zb, 0)?, pick(g, zb, 1)?, pick(g, zb, 2)?);
        Ok([
            g.add(zf_pos, zb_pos)?,
            g.add(zf_un, zb_pos)?,
            g.add(zf_pos, zb_un)?,
            g.add(zf_pos, zb_vn)?,
            g.add(zf_vn, zb_pos)?,
        ])
    }

    /// Records the weighted training objective for one batch.
    ///
    /// `frozen_teacher`, when given, replaces the teacher margins with
    /// constants (one entry per micro-defined instance); this makes the
    /// detached objective an ordinary function of the parameters.
    pub fn batch_loss(
        &self,
        g: &mut Graph<'_>,
        seqs: &BatchSequences,
        w: &LossWeights,
        frozen_teacher: Option<&[[f64; 4]]>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchLoss> {
        let distill = w.self_distill && w.mu > 0.0;
        let need_micro = w.lambda > 0.0 || distill;
        let fw = self.forward(g, seqs, need_micro, rng)?;
        let inv_b = 1.0 / seqs.len() as f64;

        let ma = sum_softplus_margins(g, fw.y[0], &fw.y[1..])?;
        let ma = g.scale(ma, inv_b);
        let mut total = ma;
        let (mut micro_loss, mut distill_loss) = (0.0, 0.0);
        let mut teacher_margins = Vec::new();
        let mut distill_term = None;

        if let Some(z) = fw.z {
            let zv: Vec<Vec<f64>> = z.iter().map(|&c| g.value(c).data().to_vec()).collect();
            teacher_margins = (0..fw.defined.len())
                .map(|j| {
                    [
                        zv[0][j] - zv[1][j],
                        zv[0][j] - zv[2][j],
                        zv[0][j] - zv[3][j],
                        zv[0][j] - zv[4][j],
                    ]
                })
                .collect();
            if w.lambda > 0.0 {
                let mi = sum_softplus_margins(g, z[0], &z[1..])?;
                let mi = g.scale(mi, inv_b);
                micro_loss = g.scalar(mi);
                let weighted = g.scale(mi, w.lambda);
                total = g.add(total, weighted)?;
            }
            if distill {
                if let Some(t) = frozen_teacher {
                    if t.len() != fw.defined.len() {
                        return Err(Error::shape("frozen teacher margins", fw.defined.len(), t.len()));
                    }
                }
                let defined = &fw.defined;
                let y_def: Vec<Var> = fw.y.iter().map(|&c| g.gather_rows(c, defined)).collect::<Result<_>>()?;
                let mut sd: Option<Var> = None;
                for k in 0..4 {
                    let teacher = match frozen_teacher {
                        Some(t) => g.constant(Matrix::column_vector(t.iter().map(|m| m[k]).collect())),
                        None => {
                            let m = g.sub(z[0], z[k + 1])?;
                            if w.teacher_detach {
                                g.detach(m)
                            } else {
                                m
                            }
                        }
                    };
                    let student = g.sub(y_def[0], y_def[k + 1])?;
                    let diff = g.sub(teacher, student)?;
                    let sq = g.square(diff);
                    let s = g.sum(sq);
                    sd = Some(match sd {
                        Some(a) => g.add(a, s)?,
                        None => s,
                    });
                }
                let sd = g.scale(sd.expect("four terms"), inv_b);
                distill_loss = g.scalar(sd);
                distill_term = Some(sd);
                let weighted = g.scale(sd, w.mu);
                total = g.add(total, weighted)?;
            }
        }
        Ok(BatchLoss {
            total,
            macro_loss: g.scalar(ma),
            micro_loss,
            distill_loss,
            distill_term,
            teacher_margins,
            micro_defined: fw.defined.len(),
        })
    }

    /// Inference-mode positive and negative scores of a batch.
    pub fn batch_scores(&self, store: &ParamStore, seqs: &BatchSequences) -> Result<BatchScores> {
        let mut g = Graph::new(store);
        let fw = self.forward(&mut g, seqs, true, None)?;
        let col = |g: &Graph<'_>, v: Var| g.value(v).data().to_vec();
        let y: Vec<Vec<f64>> = fw.y.iter().map(|&v| col(&g, v)).collect();
        let macro_level = (0..seqs.len())
            .map(|i| [y[0][i], y[1][i], y[2][i], y[3][i], y[4][i]])
            .collect();
        let mut micro_level = vec![None; seqs.len()];
        if let Some(z) = fw.z {
            let z: Vec<Vec<f64>> = z.iter().map(|&v| col(&g, v)).collect();
            for (j, &i) in fw.defined.iter().enumerate() {
                micro_level[i] = Some([z[0][j], z[1][j], z[2][j], z[3][j], z[4][j]]);
            }
        }
        Ok(BatchScores {
            macro_level,
            micro_level,
        })
    }

    /// Inference-mode `(active summary, passive summary)` per sequence.
    pub fn encode_summaries(
        &self,
        store: &ParamStore,
        side: Side,
        seqs: &[&BehaviorSequence],
        chunk: usize,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mode = self.cfg.mask_mode;
        let act =
            self.encoder(side, Perspective::Active)
                .encode_sequences(store, &self.embeddings, seqs, mode, chunk)?;
        let pas =
            self.encoder(side, Perspective::Passive)
                .encode_sequences(store, &self.embeddings, seqs, mode, chunk)?;
        Ok(act
            .into_iter()
            .zip(pas)
            .map(|(a, p)| (a.macro_vec, p.macro_vec))
            .collect())
    }

    /// Everything the matching functions need about one user's history.
    pub fn encode_user(&self, store: &ParamStore, seq: &BehaviorSequence) -> Result<UserEncoding> {
        let mode = self.cfg.mask_mode;
        let enc = |p: Perspective| -> Result<EncoderOutput> {
            Ok(self
                .encoder(seq.side, p)
                .encode_sequences(store, &self.embeddings, &[seq], mode, 1)?
                .remove(0))
        };
        Ok(UserEncoding {
            active: enc(Perspective::Active)?,
            passive: enc(Perspective::Passive)?,
            e_p: self
                .embeddings
                .resolve_embedding(store, seq.side, Perspective::Active, seq.owner)?,
            e_f: self
                .embeddings
                .resolve_embedding(store, seq.side, Perspective::Passive, seq.owner)?,
        })
    }
}
