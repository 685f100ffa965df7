//! Central finite-difference checks of analytic gradients.

use crate::{Graph, Matrix, ParamStore, Var};

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the gradient of `loss_fn` with central differences for every
/// scalar of every parameter in `store`.
///
/// Relative error is `|a − n| / max(|a|, |n|)`; entries where both
/// magnitudes are below `abs_floor` count as agreeing when their absolute
/// difference is also below `abs_floor`.
pub fn check_gradients<F>(store: &ParamStore, step: f64, abs_floor: f64, loss_fn: F) -> GradCheckReport
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Var,
{
    let analytic = analytic_grads(store, &loss_fn);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = store.clone();
    for (pid, grad) in store.ids().zip(&analytic) {
        for i in 0..store.get(pid).len() {
            let orig = store.get(pid).data()[i];
            probe.get_mut(pid).data_mut()[i] = orig + step;
            let up = eval(&probe, &loss_fn);
            probe.get_mut(pid).data_mut()[i] = orig - step;
            let down = eval(&probe, &loss_fn);
            probe.get_mut(pid).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < abs_floor {
                if diff < abs_floor {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                diff / scale
            };
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.name(pid).to_string();
                report.worst_index = i;
            }
        }
    }
    report
}

fn eval<F>(store: &ParamStore, loss_fn: &F) -> f64
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store);
    g.scalar(loss)
}

/// Analytic gradients of `loss_fn` for every parameter of `store`.
pub fn analytic_grads<F>(store: &ParamStore, loss_fn: &F) -> Vec<Matrix>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store);
    let grads = g.backward(loss);
    g.param_grads(&grads, store)
}
