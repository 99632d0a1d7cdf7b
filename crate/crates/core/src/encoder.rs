//! Transformer stacks over behavior sequences.
//!
//! There are four independent stacks, one per (side, perspective). Each
//! input block is a summary slot followed by `n` event slots. Active stacks
//! use a causal mask in which the event rows never see the summary slot, so
//! event row `i` only depends on events `1..=i` while the summary row reads
//! everything. Passive stacks attend bidirectionally.
//!
//! Layers are post-norm: `LN(x + Dropout(Attn(x)))` then
//! `LN(h + Dropout(FFN(h)))`, with a tanh-approximated GELU in the FFN.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorSequence, Side};
use crate::embedding::{assemble_batch, BilateralEmbeddingSet, Perspective, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{AttentionLayout, AttentionMask, Graph, Matrix, ParamId, ParamStore, Var};

/// Which mask each stack uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Causal for active stacks, bidirectional for passive ones.
    PerPerspective,
    /// Bidirectional everywhere (ablation).
    BidirectionalAll,
}

pub fn build_unidirectional_mask(n: usize, valid_len: usize) -> Result<AttentionMask> {
    AttentionMask::from_fn(n, valid_len, |i, j| {
        if i == 0 {
            j <= valid_len
        } else if i <= valid_len {
            j >= 1 && j <= i
        } else {
            j == i
        }
    })
}

pub fn build_bidirectional_mask(n: usize, valid_len: usize) -> Result<AttentionMask> {
    AttentionMask::from_fn(
        n,
        valid_len,
        |i, j| if i <= valid_len { j <= valid_len } else { j == i },
    )
}

/// Summary vector plus per-position states of one encoded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub macro_vec: Vec<f64>,
    /// `n × d`; only the first `valid_len` rows are meaningful.
    pub micro: Matrix,
    pub valid_len: usize,
}

/// Splits a stacked `(blocks · (n + 1)) × d` hidden state into per-sequence outputs.
pub fn split_outputs(h: &Matrix, n: usize, valid_lens: &[usize]) -> Result<Vec<EncoderOutput>> {
    if h.rows() != valid_lens.len() * (n + 1) {
        return Err(Error::shape(
            "encoder output rows",
            valid_lens.len() * (n + 1),
            h.rows(),
        ));
    }
    Ok(valid_lens
        .iter()
        .enumerate()
        .map(|(b, &valid_len)| {
            let base = b * (n + 1);
            EncoderOutput {
                macro_vec: h.row(base).to_vec(),
                micro: h.slice_rows(base + 1, base + n + 1),
                valid_len,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Maximum sequence length.
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear {
            w: store.add_normal(format!("{name}.w"), fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng)?,
            b: store.add_constant(format!("{name}.b"), 1, fan_out, 0.0)?,
        })
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.add_constant(format!("{name}.gain"), 1, d, 1.0)?,
            bias: store.add_constant(format!("{name}.bias"), 1, d, 0.0)?,
        })
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

/// One transformer stack with its own summary vector and position table.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    name: String,
    side: Side,
    perspective: Perspective,
    cfg: EncoderConfig,
    cls: ParamId,
    pos: ParamId,
    layers: Vec<Layer>,
}

fn maybe_dropout(g: &mut Graph<'_>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, r),
        _ => Ok(x),
    }
}

impl EncoderStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        side: Side,
        perspective: Perspective,
        cfg: EncoderConfig,
    ) -> Result<Self> {
        if cfg.heads == 0 || !cfg.d.is_multiple_of(cfg.heads) {
            return Err(Error::InvalidArgument(format!(
                "width {} is not divisible by {} heads",
                cfg.d, cfg.heads
            )));
        }
        if cfg.n == 0 || cfg.layers == 0 || cfg.d_ff == 0 {
            return Err(Error::InvalidArgument("n, layers and d_ff must be positive".into()));
        }
        let name = format!(
            "encoder.{}_{}",
            side.to_string().to_lowercase(),
            match perspective {
                Perspective::Active => "active",
                Perspective::Passive => "passive",
            }
        );
        let cls = store.add_normal(format!("{name}.cls"), 1, cfg.d, INIT_STD, rng)?;
        let pos = store.add_normal(format!("{name}.pos"), cfg.n + 1, cfg.d, INIT_STD, rng)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{name}.layer{l}");
            layers.push(Layer {
                q: Linear::new(store, rng, &format!("{p}.q"), cfg.d, cfg.d)?,
                k: Linear::new(store, rng, &format!("{p}.k"), cfg.d, cfg.d)?,
                v: Linear::new(store, rng, &format!("{p}.v"), cfg.d, cfg.d)?,
                o: Linear::new(store, rng, &format!("{p}.o"), cfg.d, cfg.d)?,
                norm1: Norm::new(store, &format!("{p}.norm1"), cfg.d)?,
                ff1: Linear::new(store, rng, &format!("{p}.ff1"), cfg.d, cfg.d_ff)?,
                ff2: Linear::new(store, rng, &format!("{p}.ff2"), cfg.d_ff, cfg.d)?,
                norm2: Norm::new(store, &format!("{p}.norm2"), cfg.d)?,
            });
        }
        Ok(EncoderStack {
            name,
            side,
            perspective,
            cfg,
            cls,
            pos,
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn perspective(&self) -> Perspective {
        self.perspective
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn cls(&self) -> ParamId {
        self.cls
    }

    pub fn pos(&self) -> ParamId {
        self.pos
    }

    /// Every parameter this stack owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.cls, self.pos];
        for l in &self.layers {
            for lin in [&l.q, &l.k, &l.v, &l.o, &l.ff1, &l.ff2] {
                ids.extend([lin.w, lin.b]);
            }
            for nm in [&l.norm1, &l.norm2] {
                ids.extend([nm.gain, nm.bias]);
            }
        }
        ids
    }

    pub fn mask(&self, mode: MaskMode, valid_len: usize) -> Result<AttentionMask> {
        match (mode, self.perspective) {
            (MaskMode::PerPerspective, Perspective::Active) => build_unidirectional_mask(self.cfg.n, valid_len),
            _ => build_bidirectional_mask(self.cfg.n, valid_len),
        }
    }

    /// Runs every layer over a stacked input laid out by `layout`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        input: Var,
        layout: Arc<AttentionLayout>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let rate = self.cfg.dropout;
        let mut h = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let q = layer.q.apply(g, h)?;
            let k = layer.k.apply(g, h)?;
            let v = layer.v.apply(g, h)?;
            let drop = match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => Some((rate, r)),
                _ => None,
            };
            let a = g.attention(q, k, v, layout.clone(), drop)?;
            let a = layer.o.apply(g, a)?;
            let a = maybe_dropout(g, a, rate, rng.as_deref_mut())?;
            let r = g.add(h, a)?;
            let h1 = layer.norm1.apply(g, r)?;
            let f = layer.ff1.apply(g, h1)?;
            let f = g.gelu(f);
            let f = layer.ff2.apply(g, f)?;
            let f = maybe_dropout(g, f, rate, rng.as_deref_mut())?;
            let r = g.add(h1, f)?;
            h = layer.norm2.apply(g, r)?;
            if !g.value(h).is_finite() {
                return Err(Error::NonFinite(format!("{} layer {l} output", self.name)));
            }
        }
        Ok(h)
    }

    /// Assembles, masks and encodes a batch of this stack's sequences.
    /// With an RNG, dropout is applied to the input and inside every layer.
    pub fn encode_batch(
        &self,
        g: &mut Graph<'_>,
        set: &BilateralEmbeddingSet,
        seqs: &[&BehaviorSequence],
        mode: MaskMode,
        embed_dropout: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let input = assemble_batch(
            g,
            set,
            self.cls,
            self.pos,
            self.side,
            self.perspective,
            seqs,
            self.cfg.n,
        )?;
        let input = if embed_dropout {
            maybe_dropout(g, input, self.cfg.dropout, rng.as_deref_mut())?
        } else {
            input
        };
        let masks = seqs
            .iter()
            .map(|s| self.mask(mode, s.len()))
            .collect::<Result<Vec<_>>>()?;
        let layout = Arc::new(AttentionLayout::new(self.cfg.heads, masks)?);
        self.forward(g, input, layout, rng)
    }

    /// Inference-mode hidden states of one prepared input under an arbitrary mask.
    pub fn hidden_states(&self, store: &ParamStore, input: &Matrix, mask: &AttentionMask) -> Result<Matrix> {
        if input.shape() != (mask.size(), self.cfg.d) {
            return Err(Error::shape(
                "encoder input",
                format!("({}, {})", mask.size(), self.cfg.d),
                format!("{:?}", input.shape()),
            ));
        }
        let mut g = Graph::new(store);
        let x = g.constant(input.clone());
        let layout = Arc::new(AttentionLayout::new(self.cfg.heads, vec![mask.clone()])?);
        let h = self.forward(&mut g, x, layout, None)?;
        Ok(g.value(h).clone())
    }

    /// Encodes one assembled `(n + 1) × d` input.
    pub fn encode(&self, store: &ParamStore, input: &Matrix, mask: &AttentionMask) -> Result<EncoderOutput> {
        if mask.n() != self.cfg.n {
            return Err(Error::shape("mask length", self.cfg.n, mask.n()));
        }
        let h = self.hidden_states(store, input, mask)?;
        Ok(split_outputs(&h, self.cfg.n, &[mask.valid_len()])?.remove(0))
    }

    /// Inference-mode encoding of many sequences, in chunks of `chunk`.
    pub fn encode_sequences(
        &self,
        store: &ParamStore,
        set: &BilateralEmbeddingSet,
        seqs: &[&BehaviorSequence],
        mode: MaskMode,
        chunk: usize,
    ) -> Result<Vec<EncoderOutput>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let mut g = Graph::new(store);
            let h = self.encode_batch(&mut g, set, part, mode, false, None)?;
            let lens: Vec<usize> = part.iter().map(|s| s.len()).collect();
            out.extend(split_outputs(g.value(h), self.cfg.n, &lens)?);
        }
        Ok(out)
    }
}
