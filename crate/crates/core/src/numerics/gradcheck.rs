//! Central finite-difference verification of analytic gradients.

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor: when both the analytic and numeric values are
    /// below this magnitude the comparison is effectively absolute.
    pub abs_floor: f64,
    /// Check at most this many entries per tensor (evenly strided); `None` checks all.
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_entries_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub worst_entry: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn entries_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.entries_checked).sum()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Rounding error, in ulps of the loss, assumed for one loss evaluation.
const ROUNDOFF_ULPS: f64 = 16.0;

/// Magnitude below which a central difference cannot be told apart from zero.
pub fn difference_noise(plus: f64, minus: f64, h: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(abs_floor);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient against `(L(θ+h) − L(θ−h)) / 2h` entry by entry.
/// Entries where both values are within the difference's rounding noise are
/// zero gradients and are compared absolutely.
///
/// `loss_fn(store, with_grad)` must return the loss; when `with_grad` is true it
/// must also leave ∂L/∂θ in the store's gradient accumulators (which are zeroed
/// beforehand).
pub fn finite_diff_check<F>(store: &mut ParamStore, mut loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    store.zero_grad();
    let base = loss_fn(store, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at base point".into()));
    }
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();

    let mut tensors = Vec::with_capacity(ids.len());
    for (pi, id) in ids.into_iter().enumerate() {
        let len = store.get(id).value.len();
        let stride = match opts.max_entries_per_tensor {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        let mut check = TensorCheck {
            name: store.get(id).name().to_string(),
            entries_checked: 0,
            max_rel_err: 0.0,
            worst_entry: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            passed: true,
        };
        for e in (0..len).step_by(stride) {
            let orig = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + opts.h;
            let plus = loss_fn(store, false)?;
            store.get_mut(id).value.data_mut()[e] = orig - opts.h;
            let minus = loss_fn(store, false)?;
            store.get_mut(id).value.data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss while perturbing `{}`[{e}]", check.name)));
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[pi][e];
            let noise = difference_noise(plus, minus, opts.h);
            let err = if a.abs() <= noise && numeric.abs() <= noise {
                (a - numeric).abs()
            } else {
                relative_error(a, numeric, opts.abs_floor)
            };
            check.entries_checked += 1;
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_entry = e;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        check.passed = check.max_rel_err < opts.tol;
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Matrix};

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        store.add("theta", Matrix::row_vector(vec![3.0])).unwrap();
        let report = finite_diff_check(
            &mut store,
            |s, with_grad| {
                let mut g = Graph::new(s);
                let id = s.id("theta").unwrap();
                let t = g.param(id);
                let sq = g.square(t);
                let l = g.sum(sq);
                let loss = g.scalar(l);
                if with_grad {
                    let grads = g.backward(l)?;
                    let gv = grads.get(id).unwrap().get(0, 0);
                    s.get_mut(id).grad.set(0, 0, gv);
                }
                Ok(loss)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        let t = &report.tensors[0];
        assert!((t.worst_analytic - 6.0).abs() < 1e-12 || t.max_rel_err == 0.0);
        assert!(t.max_rel_err < 1e-8, "{}", t.max_rel_err);
        assert!(report.passed());
    }

    #[test]
    fn constant_loss_passes_absolutely() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::row_vector(vec![1.0, -2.0])).unwrap();
        let report = finite_diff_check(&mut store, |_, _| Ok(4.2), &GradCheckOptions::default()).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_err(), 0.0);
    }

    #[test]
    fn rounding_noise_on_a_zero_gradient_is_absolute() {
        // shift-invariant log-sum-exp: constant in exact arithmetic, a few
        // ulps of wobble in floating point, which the quotient divides by 2h
        let ws: Vec<f64> = (0..16)
            .map(|i| 0.1 + 0.2371 * i as f64 + 0.01337 * (i * i) as f64)
            .collect();
        let loss = |w: f64| 350.0 * ((w.exp() + (w + 1.0).exp()).ln() - w);
        let h = GradCheckOptions::default().h;
        let noisy = ws
            .iter()
            .any(|&w| relative_error(0.0, (loss(w + h) - loss(w - h)) / (2.0 * h), 1e-6) > 1e-4);
        assert!(noisy);
        let mut store = ParamStore::new();
        store.add("w", Matrix::row_vector(ws)).unwrap();
        let report = finite_diff_check(
            &mut store,
            |s, _| Ok(s.value(ParamId(0)).data().iter().map(|&w| loss(w)).sum::<f64>() / 16.0),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
        assert!(report.max_rel_err() < 1e-8);
    }

    #[test]
    fn small_real_gradients_stay_relative() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::row_vector(vec![0.5])).unwrap();
        // true gradient 2e-5 w, reported as 3e-5 w: far above the noise level
        let report = finite_diff_check(
            &mut store,
            |s, with_grad| {
                let w = s.value(ParamId(0)).get(0, 0);
                if with_grad {
                    s.get_mut(ParamId(0)).grad.set(0, 0, 3e-5 * w);
                }
                Ok(1e-5 * w * w)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::row_vector(vec![1.0])).unwrap();
        assert!(finite_diff_check(&mut store, |_, _| Ok(f64::NAN), &GradCheckOptions::default()).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::row_vector(vec![2.0])).unwrap();
        let report = finite_diff_check(
            &mut store,
            |s, with_grad| {
                let w = s.value(ParamId(0)).get(0, 0);
                if with_grad {
                    s.get_mut(ParamId(0)).grad.set(0, 0, 3.0 * w); // true value is 2w
                }
                Ok(w * w)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }
}
