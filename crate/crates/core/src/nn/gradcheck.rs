use super::params::ParamStore;
use super::tape::{Tape, Var};

/// Worst disagreement between analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error `|a - n| / max(|a| + |n|, floor)`.
    pub max_rel_err: f64,
    /// Largest absolute error.
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compares the tape gradients of `loss_fn` against central differences for
/// every trainable parameter entry of `store`.
///
/// `step` is the finite-difference step; `floor` keeps the relative error of
/// near-zero gradients from blowing up. `max_entries` limits the entries
/// checked per parameter matrix (evenly strided).
pub fn check_gradients<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    step: f64,
    floor: f64,
    max_entries: usize,
) -> GradCheck
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store);
    let grads = tape.backward(loss);
    drop(tape);
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let keys: Vec<_> = store.keys().filter(|k| store.is_trainable(*k)).collect();
    let mut eval = |store: &ParamStore| {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, store);
        t.scalar(l)
    };
    for key in keys {
        let (rows, cols) = store.value(key).dim();
        let n = rows * cols;
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for flat in (0..n).step_by(stride) {
            let ix = [flat / cols, flat % cols];
            let analytic = grads.get(key).map(|g| g[ix]).unwrap_or(0.0);
            let orig = store.value(key)[ix];
            store.value_mut(key)[ix] = orig + step;
            let up = eval(store);
            store.value_mut(key)[ix] = orig - step;
            let down = eval(store);
            store.value_mut(key)[ix] = orig;
            let numeric = (up - down) / (2.0 * step);
            let abs = (analytic - numeric).abs();
            let rel = abs / (analytic.abs() + numeric.abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}
