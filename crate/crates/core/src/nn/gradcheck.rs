//! Finite-difference gradient checking.

use super::params::ParamStore;
use super::tape::{Tape, Var};

pub const FD_STEP: f64 = 1e-4;

/// Max over all parameter entries of `|g_ad - g_fd| / max(1, |g_fd|)` with
/// central differences at `h = 1e-4`. `f` must build a scalar loss.
pub fn grad_check<F>(store: &mut ParamStore, f: F) -> f64
where
    F: Fn(&mut Tape) -> Var,
{
    let analytic = {
        let mut t = Tape::new(store);
        let loss = f(&mut t);
        let g = t.backward(loss);
        g.all_params(&t)
    };
    let eval = |s: &ParamStore| {
        let mut t = Tape::new(s);
        let l = f(&mut t);
        t.scalar(l)
    };
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for (n, id) in ids.into_iter().enumerate() {
        for i in 0..store.get(id).len() {
            let orig = store.get(id)[i];
            store.get_mut(id)[i] = orig + FD_STEP;
            let up = eval(store);
            store.get_mut(id)[i] = orig - FD_STEP;
            let down = eval(store);
            store.get_mut(id)[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let rel = (analytic[n][i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}
