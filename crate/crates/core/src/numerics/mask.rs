use crate::error::{Error, Result};

/// Square boolean attention grid over a CLS slot plus `n` sequence slots.
///
/// `allow(i, j)` says whether row `i` may attend to column `j`. Padding
/// columns (`j > valid_len`, `j >= 1`) are never attended and every row has
/// non-empty support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    valid_len: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    /// Builds a mask from a predicate, checking the padding and support invariants.
    pub fn from_fn(n: usize, valid_len: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        if valid_len > n {
            return Err(Error::InvalidArgument(format!("valid_len {valid_len} exceeds n {n}")));
        }
        let size = n + 1;
        let mut allow = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                allow[i * size + j] = f(i, j);
            }
        }
        let mask = AttentionMask { n, valid_len, allow };
        mask.validate()?;
        Ok(mask)
    }

    /// A mask whose rows are arbitrary; only non-empty support is enforced.
    /// Used for reference constructions that place the summary slot elsewhere.
    pub fn custom(size: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut allow = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                allow[i * size + j] = f(i, j);
            }
        }
        for i in 0..size {
            if !allow[i * size..(i + 1) * size].iter().any(|&a| a) {
                return Err(Error::EmptyAttentionSupport);
            }
        }
        Ok(AttentionMask {
            n: size.saturating_sub(1),
            valid_len: size.saturating_sub(1),
            allow,
        })
    }

    fn validate(&self) -> Result<()> {
        let size = self.size();
        for i in 0..size {
            let row = self.row(i);
            if !row.iter().any(|&a| a) {
                return Err(Error::EmptyAttentionSupport);
            }
            for (j, &a) in row.iter().enumerate() {
                // padding rows may attend themselves only
                if a && j >= 1 && j > self.valid_len && j != i {
                    return Err(Error::InvalidArgument(format!("row {i} attends padding column {j}")));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.n + 1
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.size() + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[bool] {
        let s = self.size();
        &self.allow[i * s..(i + 1) * s]
    }

    /// Allowed column indices for row `i`.
    pub fn support(&self, i: usize) -> Vec<usize> {
        (0..self.size()).filter(|&j| self.allows(i, j)).collect()
    }
}
