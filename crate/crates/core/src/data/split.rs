use crate::error::{Error, Result};

pub trait Timestamped {
    fn timestamp(&self) -> i64;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
    /// `(b1, b2)`: train is `t < b1`, validation `b1 <= t < b2`, test `t >= b2`.
    pub boundaries: (i64, i64),
    pub warnings: Vec<String>,
}

/// Chronological split at the timestamp quantiles given by `ratios`.
/// Records tied with a boundary go to the later split.
pub fn temporal_split<T: Timestamped + Clone>(records: &[T], ratios: SplitRatios) -> Result<DatasetSplit<T>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty log".into()));
    }
    let parts = [ratios.train, ratios.valid, ratios.test];
    if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got {parts:?}"
        )));
    }
    let mut ts: Vec<i64> = records.iter().map(Timestamped::timestamp).collect();
    ts.sort_unstable();
    let n = ts.len();
    let at = |r: f64| -> i64 {
        let i = (r * n as f64 + 1e-9).floor() as usize;
        if i >= n {
            i64::MAX
        } else {
            ts[i]
        }
    };
    let b1 = at(ratios.train);
    let b2 = at(ratios.train + ratios.valid).max(b1);

    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        boundaries: (b1, b2),
        warnings: Vec::new(),
    };
    for r in records {
        let t = r.timestamp();
        if t < b1 {
            split.train.push(r.clone());
        } else if t < b2 {
            split.valid.push(r.clone());
        } else {
            split.test.push(r.clone());
        }
    }
    for (name, len) in [
        ("train", split.train.len()),
        ("validation", split.valid.len()),
        ("test", split.test.len()),
    ] {
        if len == 0 {
            let msg = format!("{name} split is empty");
            log::warn!("{msg}");
            split.warnings.push(msg);
        }
    }
    Ok(split)
}
