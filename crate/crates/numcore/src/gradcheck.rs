//! Central finite-difference gradient checking.
//!
//! The numerical side only ever calls the forward builder, so it is
//! independent of every backward rule it checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParameterStore;

/// Relative error between an analytic and a numerical derivative.
///
/// The denominator is floored at `RELATIVE_FLOOR` so that entries whose true
/// derivative is (numerically) zero are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

/// Compares backward-pass gradients of every trainable parameter against
/// central differences with step `eps`.
///
/// `build` must construct the scalar loss from scratch using the values in
/// the store it is handed. At most `max_per_param` randomly chosen entries of
/// each parameter are perturbed.
pub fn check_params<F, R>(
    store: &mut ParameterStore,
    mut build: F,
    eps: f64,
    max_per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward_into(loss, store)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
    };
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get(id);
        if !p.trainable {
            continue;
        }
        let name = p.name.clone();
        let n = p.value.len();
        let analytic = p.grad.clone();
        let entries: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            sample(rng, n, max_per_param).into_vec()
        };
        for k in entries {
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[k]);
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval(&mut build, store)?;
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval(&mut build, store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst = Some((name.clone(), k, a, numeric));
                }
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

fn eval<F>(build: &mut F, store: &ParameterStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.value(loss).item()
}
