//! Central finite-difference checks of the tape's analytic gradients.

use super::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::Result;

/// Worst-case disagreement between analytic and numeric gradients.
///
/// The relative error of entry `i` is `|a_i − n_i| / max(|a_i|, |n_i|, floor)`
/// with `floor = 1e-3 · max_j |a_j|`, so entries that are negligible next to
/// the gradient's overall scale are judged on that scale.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let floor = (1e-3 * scale).max(1e-300);
        let mut r = GradCheck { entries: analytic.len(), ..Default::default() };
        for (&a, &n) in analytic.iter().zip(numeric) {
            let abs = (a - n).abs();
            r.max_abs_err = r.max_abs_err.max(abs);
            r.max_rel_err = r.max_rel_err.max(abs / a.abs().max(n.abs()).max(floor));
        }
        r
    }
}

fn scalar_value<S: Scalar>(g: &Graph<S>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

/// Checks the gradient of a scalar-valued tensor function at `x` against
/// central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_diff_gradcheck<S, F>(f: F, x: &Tensor<S>, h: f64) -> Result<GradCheck>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = g.grad_or_zero(xv).data().iter().map(|v| v.as_f64()).collect();

    let eval = |t: Tensor<S>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t);
        let out = f(&mut g, v)?;
        Ok(scalar_value(&g, out))
    };
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += S::of(h);
        let mut minus = x.clone();
        minus.data_mut()[i] -= S::of(h);
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(GradCheck::compare(&analytic, &numeric))
}

/// Finite-difference check over the entries of a parameter store. `loss`
/// builds the scalar loss on a graph already bound to the (possibly
/// perturbed) parameters. At most `per_param` evenly spaced entries of each
/// parameter are probed; `None` probes all.
pub fn gradcheck_params<S, F>(store: &ParamStore<S>, loss: F, h: f64, per_param: Option<usize>) -> Result<GradCheck>
where
    S: Scalar,
    F: Fn(&mut Graph<S>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let l = loss(&mut g)?;
    g.backward(l)?;

    let mut work = store.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in store.ids() {
        if !store.get(id).trainable {
            continue;
        }
        let grad = g.grad_or_zero(g.param(id));
        let n = grad.len();
        let step = match per_param {
            Some(k) if k < n => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(step) {
            let orig = work.get(id).value.data()[i];
            let mut at = |delta: f64| -> Result<f64> {
                work.get_mut(id).value.data_mut()[i] = orig + S::of(delta);
                let mut g = Graph::with_params(&work);
                let out = loss(&mut g)?;
                Ok(scalar_value(&g, out))
            };
            let fd = (at(h)? - at(-h)?) / (2.0 * h);
            work.get_mut(id).value.data_mut()[i] = orig;
            analytic.push(grad.data()[i].as_f64());
            numeric.push(fd);
        }
    }
    Ok(GradCheck::compare(&analytic, &numeric))
}
