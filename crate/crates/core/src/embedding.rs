//! Per-user active/passive embedding tables and sequence input assembly.
//!
//! With sharing on, each user's active embedding and the opposite side's
//! passive embeddings are products of per-user factor rows and a common
//! core matrix:
//!
//! | table        | realized as |
//! |--------------|-------------|
//! | U active     | `A_u · C1`  |
//! | V passive    | `B_v · C1`  |
//! | V active     | `A_v · C2`  |
//! | U passive    | `B_u · C2`  |
//!
//! With sharing off the four tables are free `|side| × d` parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorSequence, Side};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Matrix, ParamId, ParamStore, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perspective {
    /// The user as selector.
    Active,
    /// The user as candidate.
    Passive,
}

impl Perspective {
    pub fn flip(self) -> Perspective {
        match self {
            Perspective::Active => Perspective::Passive,
            Perspective::Passive => Perspective::Active,
        }
    }
}

#[derive(Clone, Debug)]
enum Tables {
    Shared {
        a_u: ParamId,
        b_v: ParamId,
        c1: ParamId,
        a_v: ParamId,
        b_u: ParamId,
        c2: ParamId,
    },
    Free {
        u_active: ParamId,
        u_passive: ParamId,
        v_active: ParamId,
        v_passive: ParamId,
    },
}

/// Handles to the embedding parameters of both sides.
#[derive(Clone, Debug)]
pub struct BilateralEmbeddingSet {
    tables: Tables,
    num_u: usize,
    num_v: usize,
    d: usize,
}

impl BilateralEmbeddingSet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        num_u: usize,
        num_v: usize,
        d: usize,
        d_prime: usize,
        shared: bool,
    ) -> Result<Self> {
        if num_u == 0 || num_v == 0 || d == 0 || (shared && d_prime == 0) {
            return Err(Error::InvalidArgument("embedding sizes must be positive".into()));
        }
        let tables = if shared {
            Tables::Shared {
                a_u: store.add_normal("embedding.a_u", num_u, d_prime, INIT_STD, rng)?,
                b_v: store.add_normal("embedding.b_v", num_v, d_prime, INIT_STD, rng)?,
                c1: store.add_normal("embedding.c1", d_prime, d, INIT_STD, rng)?,
                a_v: store.add_normal("embedding.a_v", num_v, d_prime, INIT_STD, rng)?,
                b_u: store.add_normal("embedding.b_u", num_u, d_prime, INIT_STD, rng)?,
                c2: store.add_normal("embedding.c2", d_prime, d, INIT_STD, rng)?,
            }
        } else {
            Tables::Free {
                u_active: store.add_normal("embedding.u_active", num_u, d, INIT_STD, rng)?,
                u_passive: store.add_normal("embedding.u_passive", num_u, d, INIT_STD, rng)?,
                v_active: store.add_normal("embedding.v_active", num_v, d, INIT_STD, rng)?,
                v_passive: store.add_normal("embedding.v_passive", num_v, d, INIT_STD, rng)?,
            }
        };
        Ok(BilateralEmbeddingSet {
            tables,
            num_u,
            num_v,
            d,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_users(&self, side: Side) -> usize {
        match side {
            Side::U => self.num_u,
            Side::V => self.num_v,
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self.tables, Tables::Shared { .. })
    }

    /// `(factor, core)`; the core is `None` for free tables.
    fn source(&self, side: Side, perspective: Perspective) -> (ParamId, Option<ParamId>) {
        use Perspective::*;
        match (&self.tables, side, perspective) {
            (Tables::Shared { a_u, c1, .. }, Side::U, Active) => (*a_u, Some(*c1)),
            (Tables::Shared { b_v, c1, .. }, Side::V, Passive) => (*b_v, Some(*c1)),
            (Tables::Shared { a_v, c2, .. }, Side::V, Active) => (*a_v, Some(*c2)),
            (Tables::Shared { b_u, c2, .. }, Side::U, Passive) => (*b_u, Some(*c2)),
            (Tables::Free { u_active, .. }, Side::U, Active) => (*u_active, None),
            (Tables::Free { u_passive, .. }, Side::U, Passive) => (*u_passive, None),
            (Tables::Free { v_active, .. }, Side::V, Active) => (*v_active, None),
            (Tables::Free { v_passive, .. }, Side::V, Passive) => (*v_passive, None),
        }
    }

    /// Every parameter this set owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.tables {
            Tables::Shared {
                a_u,
                b_v,
                c1,
                a_v,
                b_u,
                c2,
            } => vec![*a_u, *b_v, *c1, *a_v, *b_u, *c2],
            Tables::Free {
                u_active,
                u_passive,
                v_active,
                v_passive,
            } => vec![*u_active, *u_passive, *v_active, *v_passive],
        }
    }

    fn check_user(&self, side: Side, user: usize) -> Result<()> {
        if user >= self.num_users(side) {
            return Err(Error::UnknownUser {
                side: side.to_string(),
                id: format!("#{user}"),
            });
        }
        Ok(())
    }

    /// One user's embedding under the given perspective.
    pub fn resolve_embedding(
        &self,
        store: &ParamStore,
        side: Side,
        perspective: Perspective,
        user: usize,
    ) -> Result<Vec<f64>> {
        self.check_user(side, user)?;
        let (factor, core) = self.source(side, perspective);
        let row = store.value(factor).row(user);
        Ok(match core {
            None => row.to_vec(),
            Some(c) => Matrix::row_vector(row.to_vec()).matmul(store.value(c))?.into_vec(),
        })
    }

    /// The whole `|side| × d` table.
    pub fn table(&self, store: &ParamStore, side: Side, perspective: Perspective) -> Result<Matrix> {
        let (factor, core) = self.source(side, perspective);
        match core {
            None => Ok(store.value(factor).clone()),
            Some(c) => store.value(factor).matmul(store.value(c)),
        }
    }

    /// Recorded lookup of rows; `None` yields a zero row.
    pub fn rows(
        &self,
        g: &mut Graph<'_>,
        side: Side,
        perspective: Perspective,
        idx: Vec<Option<usize>>,
    ) -> Result<Var> {
        for &u in idx.iter().flatten() {
            self.check_user(side, u)?;
        }
        let (factor, core) = self.source(side, perspective);
        let f = g.param(factor);
        let picked = g.gather(f, idx)?;
        match core {
            None => Ok(picked),
            Some(c) => {
                let c = g.param(c);
                g.matmul(picked, c)
            }
        }
    }
}

/// Row layout of a stacked batch of sequence inputs: each sequence occupies
/// `n + 1` rows, the summary slot first.
pub fn input_row_indices(seqs: &[&BehaviorSequence], n: usize) -> Result<Vec<Option<usize>>> {
    let mut idx = Vec::with_capacity(seqs.len() * (n + 1));
    for s in seqs {
        if s.len() > n {
            return Err(Error::SequenceTooLong { len: s.len(), max: n });
        }
        idx.push(None);
        idx.extend(s.events.iter().map(|e| Some(e.0)));
        idx.extend(std::iter::repeat_n(None, n - s.len()));
    }
    Ok(idx)
}

/// Builds the stacked `(batch · (n + 1)) × d` input for one encoder: the
/// summary row holds `cls + P[0]`, row `i` holds the `i`-th counterpart's
/// embedding plus `P[i]`, and padding rows hold `P[i]` alone.
///
/// An encoder of `perspective` reads its counterparts under the flipped
/// perspective: an active sequence is a list of candidates the owner chose,
/// so it is made of their passive embeddings.
#[allow(clippy::too_many_arguments)]
pub fn assemble_batch(
    g: &mut Graph<'_>,
    set: &BilateralEmbeddingSet,
    cls: ParamId,
    pos: ParamId,
    owner_side: Side,
    perspective: Perspective,
    seqs: &[&BehaviorSequence],
    n: usize,
) -> Result<Var> {
    if let Some(s) = seqs.iter().find(|s| s.side != owner_side) {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} user #{} given to a {owner_side}-side encoder",
            s.side, s.owner
        )));
    }
    let (pr, _) = g.store().value(pos).shape();
    if pr != n + 1 {
        return Err(Error::shape("position table rows", n + 1, pr));
    }
    let idx = input_row_indices(seqs, n)?;
    let events = set.rows(g, owner_side.opposite(), perspective.flip(), idx)?;
    let pos_v = g.param(pos);
    let cls_v = g.param(cls);
    let pos_idx = (0..seqs.len()).flat_map(|_| 0..=n).collect::<Vec<_>>();
    let p = g.gather_rows(pos_v, &pos_idx)?;
    let cls_idx = (0..seqs.len())
        .flat_map(|_| std::iter::once(Some(0)).chain(std::iter::repeat_n(None, n)))
        .collect();
    let c = g.gather(cls_v, cls_idx)?;
    let ep = g.add(events, p)?;
    g.add(ep, c)
}

/// Single-sequence input `E` and its valid length.
pub fn assemble_input(
    store: &ParamStore,
    set: &BilateralEmbeddingSet,
    cls: ParamId,
    pos: ParamId,
    perspective: Perspective,
    seq: &BehaviorSequence,
    n: usize,
) -> Result<(Matrix, usize)> {
    let mut g = Graph::new(store);
    let e = assemble_batch(&mut g, set, cls, pos, seq.side, perspective, &[seq], n)?;
    Ok((g.value(e).clone(), seq.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(shared: bool, d: usize, dp: usize) -> (ParamStore, BilateralEmbeddingSet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = BilateralEmbeddingSet::new(&mut store, &mut rng, 3, 4, d, dp, shared).unwrap();
        (store, s)
    }

    fn set_value(store: &mut ParamStore, name: &str, m: Matrix) {
        let id = store.id(name).unwrap();
        store.get_mut(id).value = m;
    }

    #[test]
    fn identity_core_returns_factor_row() {
        let (mut store, s) = set(true, 3, 3);
        set_value(&mut store, "embedding.c1", Matrix::identity(3));
        let mut a = Matrix::zeros(3, 3);
        a.set(1, 0, 1.0);
        set_value(&mut store, "embedding.a_u", a);
        let e = s.resolve_embedding(&store, Side::U, Perspective::Active, 1).unwrap();
        assert_eq!(e, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_factor_row_gives_zero() {
        let (mut store, s) = set(true, 4, 2);
        set_value(&mut store, "embedding.b_u", Matrix::zeros(3, 2));
        let e = s.resolve_embedding(&store, Side::U, Perspective::Passive, 2).unwrap();
        assert_eq!(e, vec![0.0; 4]);
    }

    #[test]
    fn hand_matrix_product() {
        let (mut store, s) = set(true, 2, 2);
        set_value(
            &mut store,
            "embedding.c2",
            Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap(),
        );
        let mut a = Matrix::zeros(4, 2);
        a.row_mut(3).copy_from_slice(&[1.0, 2.0]);
        set_value(&mut store, "embedding.a_v", a);
        let e = s.resolve_embedding(&store, Side::V, Perspective::Active, 3).unwrap();
        assert_eq!(e, vec![3.0, 2.0]);
    }

    #[test]
    fn unknown_user() {
        let (store, s) = set(true, 2, 2);
        assert!(matches!(
            s.resolve_embedding(&store, Side::U, Perspective::Active, 3),
            Err(Error::UnknownUser { .. })
        ));
    }

    #[test]
    fn shared_tables_have_rank_at_most_factor_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = BilateralEmbeddingSet::new(&mut store, &mut rng, 5, 6, 6, 2, true).unwrap();
        let up = s.table(&store, Side::U, Perspective::Active).unwrap();
        let vf = s.table(&store, Side::V, Perspective::Passive).unwrap();
        let mut stacked: Vec<Vec<f64>> = (0..up.rows()).map(|i| up.row(i).to_vec()).collect();
        stacked.extend((0..vf.rows()).map(|i| vf.row(i).to_vec()));
        assert_eq!(numerical_rank(stacked, 1e-10), 2);
        // free tables are full rank almost surely
        let mut store = ParamStore::new();
        let s = BilateralEmbeddingSet::new(&mut store, &mut rng, 5, 6, 6, 2, false).unwrap();
        let up = s.table(&store, Side::U, Perspective::Active).unwrap();
        let vf = s.table(&store, Side::V, Perspective::Passive).unwrap();
        let mut stacked: Vec<Vec<f64>> = (0..up.rows()).map(|i| up.row(i).to_vec()).collect();
        stacked.extend((0..vf.rows()).map(|i| vf.row(i).to_vec()));
        assert_eq!(numerical_rank(stacked, 1e-10), 6);
    }

    /// Gaussian elimination with partial pivoting, relative threshold.
    fn numerical_rank(mut m: Vec<Vec<f64>>, tol: f64) -> usize {
        let cols = m[0].len();
        let scale = m.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
        let mut rank = 0;
        for c in 0..cols {
            let Some(p) = (rank..m.len()).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())) else {
                break;
            };
            if m[p][c].abs() <= tol * scale {
                continue;
            }
            m.swap(rank, p);
            for r in 0..m.len() {
                if r != rank {
                    let f = m[r][c] / m[rank][c];
                    let pivot = m[rank].clone();
                    for (x, y) in m[r].iter_mut().zip(&pivot) {
                        *x -= f * y;
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    fn enc_params(store: &mut ParamStore, d: usize, n: usize) -> (ParamId, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cls = store.add_normal("cls", 1, d, 1.0, &mut rng).unwrap();
        let pos = store.add_normal("pos", n + 1, d, 1.0, &mut rng).unwrap();
        (cls, pos)
    }

    fn seq(side: Side, events: &[usize]) -> BehaviorSequence {
        BehaviorSequence {
            owner: 0,
            side,
            events: events.iter().enumerate().map(|(i, &c)| (c, i as i64)).collect(),
        }
    }

    #[test]
    fn empty_sequence_is_cls_and_positions() {
        let (mut store, s) = set(true, 3, 2);
        let (cls, pos) = enc_params(&mut store, 3, 4);
        let (e, valid) = assemble_input(&store, &s, cls, pos, Perspective::Active, &seq(Side::U, &[]), 4).unwrap();
        assert_eq!(valid, 0);
        assert_eq!(e.shape(), (5, 3));
        for j in 0..3 {
            let want = store.value(cls).get(0, j) + store.value(pos).get(0, j);
            assert!((e.get(0, j) - want).abs() < 1e-15);
        }
        for i in 1..5 {
            assert_eq!(e.row(i), store.value(pos).row(i));
        }
    }

    #[test]
    fn one_event_row_uses_flipped_perspective() {
        let (mut store, s) = set(true, 3, 2);
        let (cls, pos) = enc_params(&mut store, 3, 4);
        let sq = seq(Side::U, &[2]);
        let (e, _) = assemble_input(&store, &s, cls, pos, Perspective::Active, &sq, 4).unwrap();
        let want = s.resolve_embedding(&store, Side::V, Perspective::Passive, 2).unwrap();
        for (j, w) in want.iter().enumerate() {
            assert!((e.get(1, j) - w - store.value(pos).get(1, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn perspective_flip_changes_event_rows() {
        let (mut store, s) = set(true, 3, 2);
        let (cls, pos) = enc_params(&mut store, 3, 4);
        let sq = seq(Side::V, &[0, 2, 1]);
        let (a, _) = assemble_input(&store, &s, cls, pos, Perspective::Active, &sq, 4).unwrap();
        let (p, _) = assemble_input(&store, &s, cls, pos, Perspective::Passive, &sq, 4).unwrap();
        assert_eq!(a.row(0), p.row(0));
        for i in 1..=3 {
            assert_ne!(a.row(i), p.row(i));
        }
        assert_eq!(a.row(4), p.row(4));
    }

    #[test]
    fn too_long_is_an_error() {
        let (mut store, s) = set(true, 3, 2);
        let (cls, pos) = enc_params(&mut store, 3, 2);
        let r = assemble_input(&store, &s, cls, pos, Perspective::Active, &seq(Side::U, &[0, 1, 2]), 2);
        assert!(matches!(r, Err(Error::SequenceTooLong { len: 3, max: 2 })));
    }

    /// Which tables receive gradient from an input assembly.
    fn touched(shared: bool, owner: Side, perspective: Perspective) -> Vec<String> {
        let (mut store, s) = set(shared, 3, 2);
        let (cls, pos) = enc_params(&mut store, 3, 4);
        let sq = seq(owner, &[0, 1]);
        let mut g = Graph::new(&store);
        let e = assemble_batch(&mut g, &s, cls, pos, owner, perspective, &[&sq], 4).unwrap();
        let sq2 = g.square(e);
        let l = g.sum(sq2);
        let grads = g.backward(l).unwrap();
        let mut out: Vec<String> = s
            .param_ids()
            .into_iter()
            .filter(|&id| grads.get(id).is_some_and(|m| m.data().iter().any(|&x| x != 0.0)))
            .map(|id| store.get(id).name().to_string())
            .collect();
        out.sort();
        out
    }

    #[test]
    fn active_reads_passive_table_and_vice_versa() {
        assert_eq!(
            touched(false, Side::U, Perspective::Active),
            vec!["embedding.v_passive"]
        );
        assert_eq!(
            touched(false, Side::U, Perspective::Passive),
            vec!["embedding.v_active"]
        );
        assert_eq!(
            touched(false, Side::V, Perspective::Active),
            vec!["embedding.u_passive"]
        );
        assert_eq!(
            touched(false, Side::V, Perspective::Passive),
            vec!["embedding.u_active"]
        );
        assert_eq!(
            touched(true, Side::U, Perspective::Active),
            vec!["embedding.b_v", "embedding.c1"]
        );
        assert_eq!(
            touched(true, Side::V, Perspective::Passive),
            vec!["embedding.a_u", "embedding.c1"]
        );
    }
}
