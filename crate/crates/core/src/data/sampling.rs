use rand::seq::index;
use rand::Rng;

use super::{BehaviorSequence, SequenceStore, Side};
use crate::error::{Error, Result};

fn skip(i: usize, exclude: usize) -> usize {
    if i >= exclude {
        i + 1
    } else {
        i
    }
}

/// Draws one user of `side` uniformly among all but `exclude` and returns it
/// with its history truncated to `cutoff` (at most `max_len` events). The
/// history may be empty.
pub fn sample_negative_user<R: Rng + ?Sized>(
    rng: &mut R,
    store: &SequenceStore,
    side: Side,
    exclude: usize,
    cutoff: i64,
    max_len: usize,
) -> Result<(usize, BehaviorSequence)> {
    let n = store.num_users(side);
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "side {side} has {n} user(s); negative sampling needs at least 2"
        )));
    }
    let user = skip(rng.gen_range(0..n - 1), exclude.min(n));
    let seq = store.build_truncated_sequence(side, user, cutoff, max_len)?;
    Ok((user, seq))
}

/// `count` distinct users out of `0..num_users`, never `exclude`, in draw order.
pub fn sample_distinct_users<R: Rng + ?Sized>(
    rng: &mut R,
    num_users: usize,
    exclude: usize,
    count: usize,
) -> Result<Vec<usize>> {
    let pool = num_users.saturating_sub(usize::from(exclude < num_users));
    if count > pool {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {count} distinct negatives from {pool} candidates"
        )));
    }
    Ok(index::sample(rng, pool, count)
        .into_iter()
        .map(|i| skip(i, exclude))
        .collect())
}
