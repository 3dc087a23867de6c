//! Central finite-difference oracle for the hand-derived backward passes.
//!
//! Used by the unit tests and by the acceptance harness; it only ever
//! evaluates forward passes, so it is independent of `Graph::backward`.

use crate::autograd::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Matrix;

/// `|a - n| / max(|a| + |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_name: String,
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Compares analytic and central-difference gradients of a scalar loss with
/// respect to every parameter in `store` accepted by `filter`.
///
/// `loss` builds the forward pass from bound parameters. Relative errors are
/// measured with a floor `abs_floor` so entries whose true gradient is ~0 do
/// not produce spurious failures.
pub fn check_params<F>(
    store: &ParamStore,
    filter: impl Fn(&str) -> bool,
    h: f64,
    tol: f64,
    abs_floor: f64,
    loss: F,
) -> GradReport
where
    F: for<'a> Fn(&mut Graph<'a>, &Bound) -> Var,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g, &filter);
    let l = loss(&mut g, &bound);
    let mut grads = g.backward(l);
    let analytic = bound.gradients(store, &mut grads);

    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let b = s.bind(&mut g, |_| false);
        let l = loss(&mut g, &b);
        g.value(l).item()
    };

    let mut report = GradReport::default();
    let mut work = store.clone();
    for (name, m) in store.iter() {
        if !filter(name) {
            continue;
        }
        let an = analytic.get(name).expect("gradient for every bound name");
        for e in 0..m.len() {
            let orig = m.data()[e];
            work.get_mut(name).unwrap().data_mut()[e] = orig + h;
            let lp = eval(&work);
            work.get_mut(name).unwrap().data_mut()[e] = orig - h;
            let lm = eval(&work);
            work.get_mut(name).unwrap().data_mut()[e] = orig;
            let num = (lp - lm) / (2.0 * h);
            let err = rel_err(an.data()[e], num, abs_floor);
            report.checked += 1;
            if err > report.worst_rel {
                report.worst_rel = err;
                report.worst_name = format!("{name}[{e}]");
            }
            if err > tol {
                report.failures.push(format!(
                    "{name}[{e}]: analytic {:.6e} numeric {num:.6e} rel {err:.2e}",
                    an.data()[e]
                ));
            }
        }
    }
    report
}

/// Same check for free-standing inputs rather than a parameter store.
pub fn check_inputs<F>(inputs: &[Matrix], h: f64, tol: f64, abs_floor: f64, loss: F) -> GradReport
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Var,
{
    let mut store = ParamStore::new();
    for (i, m) in inputs.iter().enumerate() {
        // Bypass f32 rounding: inputs may be arbitrary f64 values.
        store.insert(format!("in{i}"), Matrix::zeros(m.rows(), m.cols()));
        *store.get_mut(&format!("in{i}")).unwrap() = m.clone();
    }
    let n = inputs.len();
    check_params(&store, |_| true, h, tol, abs_floor, move |g, b| {
        let vars: Vec<Var> = (0..n).map(|i| b.var(&format!("in{i}")).unwrap()).collect();
        loss(g, &vars)
    })
}
