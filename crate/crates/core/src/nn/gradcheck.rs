//! Central finite-difference oracle for gradient checks.
//!
//! Only forward evaluations are used here, so the oracle shares no code with
//! the reverse pass it audits.

use rand::seq::index::sample;
use rand::Rng;

use super::params::{Grads, ParamStore};
use crate::error::Result;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-4)`.
///
/// The floor turns the ratio into an absolute error for gradients that vanish
/// analytically (attention key biases, for one), where the finite difference
/// is pure round-off.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(RELATIVE_FLOOR)
}

const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub tensors_checked: usize,
    pub entries_checked: usize,
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter tensor, probing at most `max_entries` random entries per tensor.
pub fn check_param_grads(
    store: &ParamStore<f64>,
    analytic: &Grads<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
    step: f64,
    max_entries: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        tensors_checked: 0,
        entries_checked: 0,
    };
    for id in store.ids() {
        let n = store.get(id).numel();
        let picks: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = loss(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = loss(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        let exact: Vec<f64> = match analytic.get(id) {
            Some(g) => picks.iter().map(|&i| g.data()[i]).collect(),
            None => vec![0.0; picks.len()],
        };
        let err = relative_error(&exact, &numeric);
        if err > report.max_rel_err || report.worst_tensor.is_empty() {
            report.max_rel_err = err;
            report.worst_tensor = store.name(id).to_string();
        }
        report.tensors_checked += 1;
        report.entries_checked += picks.len();
    }
    Ok(report)
}
