//! Interaction logs, behavior sequences, temporal splits, negative sampling
//! and the synthetic two-sided generator.

mod filter;
mod records;
mod sampling;
mod sequence;
mod split;
mod synth;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use filter::{five_core_filter, FilterReport, MIN_INTERACTIONS};
pub use records::{parse_interactions, write_interactions, InteractionRecord, ParsedLog};
pub use sampling::{sample_distinct_users, sample_negative_user};
pub use sequence::{AuditStats, BehaviorSequence, SequenceStore};
pub use split::{temporal_split, DatasetSplit, SplitRatios, Timestamped};
pub use synth::{generate_synthetic, SynthConfig, SyntheticLog};

use crate::error::{Error, Result};

/// The two user populations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    U,
    V,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::U => Side::V,
            Side::V => Side::U,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::U => "U",
            Side::V => "V",
        })
    }
}

/// Dense index for one side's user identifiers.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct UserIndex {
    ids: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl UserIndex {
    pub fn from_ids(ids: Vec<String>) -> Self {
        let lookup = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        UserIndex { ids, lookup }
    }

    pub fn get_or_insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.lookup.get(id) {
            return i;
        }
        self.ids.push(id.to_string());
        self.lookup.insert(id.to_string(), self.ids.len() - 1);
        self.ids.len() - 1
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// An interaction with both users resolved to dense indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub u: usize,
    pub v: usize,
    pub timestamp: i64,
}

impl Timestamped for Interaction {
    fn timestamp(&self) -> i64 {
        self.timestamp
    }
}

/// A filtered log with user indices and its chronological sequence store.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub u_index: UserIndex,
    pub v_index: UserIndex,
    pub interactions: Vec<Interaction>,
    pub store: SequenceStore,
}

impl Dataset {
    pub fn from_records(records: &[InteractionRecord]) -> Self {
        let mut u_index = UserIndex::default();
        let mut v_index = UserIndex::default();
        let interactions: Vec<Interaction> = records
            .iter()
            .map(|r| Interaction {
                u: u_index.get_or_insert(&r.u_id),
                v: v_index.get_or_insert(&r.v_id),
                timestamp: r.timestamp,
            })
            .collect();
        Self::from_parts(u_index, v_index, interactions)
    }

    /// Uses existing vocabularies (e.g. from a checkpoint); unknown users are an error.
    pub fn with_index(records: &[InteractionRecord], u_index: UserIndex, v_index: UserIndex) -> Result<Self> {
        let interactions = records
            .iter()
            .map(|r| {
                let u = u_index.get(&r.u_id).ok_or_else(|| Error::UnknownUser {
                    side: "U".into(),
                    id: r.u_id.clone(),
                })?;
                let v = v_index.get(&r.v_id).ok_or_else(|| Error::UnknownUser {
                    side: "V".into(),
                    id: r.v_id.clone(),
                })?;
                Ok(Interaction {
                    u,
                    v,
                    timestamp: r.timestamp,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(u_index, v_index, interactions))
    }

    fn from_parts(u_index: UserIndex, v_index: UserIndex, interactions: Vec<Interaction>) -> Self {
        let store = SequenceStore::new(u_index.len(), v_index.len(), &interactions);
        Dataset {
            u_index,
            v_index,
            interactions,
            store,
        }
    }

    pub fn num_users(&self, side: Side) -> usize {
        match side {
            Side::U => self.u_index.len(),
            Side::V => self.v_index.len(),
        }
    }

    pub fn user_index(&self, side: Side) -> &UserIndex {
        match side {
            Side::U => &self.u_index,
            Side::V => &self.v_index,
        }
    }

    pub fn record(&self, i: &Interaction) -> InteractionRecord {
        InteractionRecord {
            u_id: self.u_index.id(i.u).to_string(),
            v_id: self.v_index.id(i.v).to_string(),
            timestamp: i.timestamp,
        }
    }
}
