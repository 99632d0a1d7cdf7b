use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::split::Timestamped;
use crate::error::{Error, Result};

/// One timestamped positive match between a U-side and a V-side user.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub u_id: String,
    pub v_id: String,
    pub timestamp: i64,
}

impl Timestamped for InteractionRecord {
    fn timestamp(&self) -> i64 {
        self.timestamp
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedLog {
    pub records: Vec<InteractionRecord>,
    pub duplicates_dropped: usize,
}

/// Parses `u_id \t v_id \t timestamp` lines. Blank lines and lines starting
/// with `#` are skipped; exact duplicate triples are dropped.
pub fn parse_interactions(source: &str) -> Result<ParsedLog> {
    let mut seen = HashSet::new();
    let mut out = ParsedLog::default();
    for (i, raw) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (u, v) = (fields[0].trim(), fields[1].trim());
        if u.is_empty() || v.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty user id".into(),
            });
        }
        let timestamp: i64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("timestamp `{}` is not an integer", fields[2].trim()),
        })?;
        if timestamp < 0 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("negative timestamp {timestamp}"),
            });
        }
        let rec = InteractionRecord {
            u_id: u.to_string(),
            v_id: v.to_string(),
            timestamp,
        };
        if seen.insert(rec.clone()) {
            out.records.push(rec);
        } else {
            out.duplicates_dropped += 1;
        }
    }
    Ok(out)
}

pub fn write_interactions(records: &[InteractionRecord]) -> String {
    let mut s = String::with_capacity(records.len() * 16);
    for r in records {
        s.push_str(&r.u_id);
        s.push('\t');
        s.push_str(&r.v_id);
        s.push('\t');
        s.push_str(&r.timestamp.to_string());
        s.push('\n');
    }
    s
}
