//! Training configuration and the flat `key = value` format it is stored in.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::MaskMode;
use crate::error::{Error, Result};
use crate::matching::MicroAggregation;

impl FromStr for MaskMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_perspective" => Ok(MaskMode::PerPerspective),
            "bidirectional_all" => Ok(MaskMode::BidirectionalAll),
            _ => Err(format!("expected per_perspective or bidirectional_all, got `{s}`")),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::PerPerspective => "per_perspective",
            MaskMode::BidirectionalAll => "bidirectional_all",
        })
    }
}

impl FromStr for MicroAggregation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "time_sensitive" => Ok(MicroAggregation::TimeSensitive),
            "mean" => Ok(MicroAggregation::Mean),
            _ => Err(format!("expected time_sensitive or mean, got `{s}`")),
        }
    }
}

impl fmt::Display for MicroAggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MicroAggregation::TimeSensitive => "time_sensitive",
            MicroAggregation::Mean => "mean",
        })
    }
}

macro_rules! kv_struct {
    ($(#[$meta:meta])* pub struct $name:ident { $($(#[$fmeta:meta])* $field:ident : $ty:ty = $default:expr,)* }) => {
        $(#[$meta])*
        pub struct $name {
            $($(#[$fmeta])* pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                $name { $($field: $default,)* }
            }
        }

        impl $name {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field),)*];

            /// Sets one field from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.trim().parse::<$ty>().map_err(|e| {
                            Error::InvalidArgument(format!("config key `{key}`: cannot parse `{value}`: {e}"))
                        })?;
                        Ok(())
                    })*
                    _ => Err(Error::UnknownConfigKey {
                        key: key.to_string(),
                        valid: Self::KEYS.join(", "),
                    }),
                }
            }

            /// Every `(key, value)` pair in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.to_string()),)*]
            }
        }
    };
}

kv_struct! {
    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct TrainingConfig {
        seed: u64 = 42,
        lr: f64 = 1e-3,
        batch_size: usize = 256,
        /// Maximum behavior sequence length.
        max_len: usize = 50,
        weight_decay: f64 = 1e-5,
        /// Weight of the micro ranking loss.
        lambda: f64 = 5.0,
        /// Weight of the distillation loss.
        mu: f64 = 0.005,
        patience: usize = 10,
        max_epochs: usize = 200,
        d: usize = 64,
        d_prime: usize = 64,
        layers: usize = 2,
        heads: usize = 2,
        d_ff: usize = 256,
        dropout: f64 = 0.5,
        embed_dropout: bool = true,
        share_embeddings: bool = true,
        mask_mode: MaskMode = MaskMode::PerPerspective,
        micro_aggregation: MicroAggregation = MicroAggregation::TimeSensitive,
        self_distill: bool = true,
        teacher_detach: bool = true,
        share_alpha: bool = false,
        eval_negatives: usize = 100,
        eval_k: usize = 5,
        adam_beta1: f64 = 0.9,
        adam_beta2: f64 = 0.999,
        adam_eps: f64 = 1e-8,
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return bad("lambda and mu must be non-negative");
        }
        if self.patience == 0 || self.max_len == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("patience, max_len, batch_size and max_epochs must be at least 1");
        }
        if self.d == 0 || self.d_prime == 0 || self.layers == 0 || self.d_ff == 0 {
            return bad("model widths and depth must be positive");
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("d must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if self.eval_negatives == 0 || self.eval_k == 0 {
            return bad("eval_negatives and eval_k must be positive");
        }
        Ok(())
    }

    /// Text form accepted by [`parse_kv`].
    pub fn to_kv_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
/// Later duplicates are kept in order, so the last one wins when applied.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
