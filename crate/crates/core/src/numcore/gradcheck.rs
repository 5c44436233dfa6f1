use serde::Serialize;

use super::{ParamStore, Tape, Var};

/// Finite-difference step, relative to the magnitude of the coordinate. The
/// five-point stencil has `O(h⁴)` truncation error, so a step this large keeps
/// both truncation and round-off near 1e-12.
pub const FD_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ArrayReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub rel_tol: f64,
    pub arrays: Vec<ArrayReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.arrays.iter().map(|a| a.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ArrayReport> {
        self.arrays.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares back-propagated gradients of `loss_fn` with five-point central
/// differences over every scalar in `store`. The store's parameter values are restored
/// exactly and its gradient accumulators are left zeroed.
pub fn grad_check<F>(store: &mut ParamStore, rel_tol: f64, loss_fn: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    assert!(rel_tol > 0.0);
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store);
    tape.backward(loss, store);
    let analytic: Vec<_> = store.ids().map(|id| store.grad(id).clone()).collect();
    store.zero_grad();

    let eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store);
        tape.scalar(loss)
    };

    let mut arrays = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let n = store.value(id).len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let original = store.value(id).data()[i];
            let h = FD_STEP * original.abs().max(1.0);
            let mut at = |offset: f64| {
                store.value_mut(id).data_mut()[i] = original + offset;
                eval(store)
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            store.value_mut(id).data_mut()[i] = original;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            let err = (a - numeric).abs() / denom;
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        arrays.push(ArrayReport { name: store.name(id).to_string(), coords: n, max_rel_error: worst });
    }
    let passed = arrays.iter().all(|a| a.max_rel_error <= rel_tol);
    GradCheckReport { rel_tol, arrays, passed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Matrix;

    #[test]
    fn quadratic_loss_matches_finite_differences() {
        let mut store = ParamStore::new();
        let id = store.add("p", Matrix::from_vec(2, 3, vec![0.3, -1.2, 2.5, 0.0, 4.0, -0.7]));
        let report = grad_check(&mut store, 1e-6, |tape, store| {
            let p = tape.param(store, id);
            let sq = tape.mul(p, p);
            tape.sum(sq)
        });
        assert!(report.passed, "{report:?}");
        assert_eq!(store.value(id).data(), &[0.3, -1.2, 2.5, 0.0, 4.0, -0.7]);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // backward of relu is zero below 0, but a deliberately mismatched
        // function (tanh forward evaluated via a constant) has no gradient at all
        let mut store = ParamStore::new();
        let id = store.add("p", Matrix::from_vec(1, 2, vec![0.5, -0.5]));
        let report = grad_check(&mut store, 1e-4, |tape, store| {
            let p = tape.param(store, id);
            let frozen = tape.constant(store.value(id).clone());
            let prod = tape.mul(p, frozen);
            let prod = tape.mul(prod, frozen);
            tape.sum(prod)
        });
        assert!(!report.passed);
    }

    #[test]
    fn composite_ops_pass() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::from_vec(3, 2, vec![0.1, -0.4, 0.9, 0.3, -0.2, 0.6]));
        let b = store.add("b", Matrix::from_vec(2, 4, vec![0.5, -0.3, 0.2, 0.8, -0.6, 0.1, 0.4, -0.9]));
        let report = grad_check(&mut store, 1e-6, |tape, store| {
            let pa = tape.param(store, a);
            let pb = tape.param(store, b);
            let m = tape.matmul(pa, pb);
            let t = tape.tanh(m);
            let ls = tape.log_softmax(t);
            let picked = tape.pick(ls, vec![0, 3, 1]);
            let soft = tape.softplus(picked);
            let g = tape.group_sum(soft, 3);
            let nt = tape.matmul_nt(pa, pa);
            let sm = tape.masked_softmax(nt, vec![true, true, false, false, true, true, true, false, true]);
            let e = tape.exp(sm);
            let s1 = tape.sum(e);
            let s0 = tape.sum(g);
            tape.add(s0, s1)
        });
        assert!(report.passed, "{report:?}");
    }
}
