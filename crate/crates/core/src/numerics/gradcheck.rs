//! Central finite differences over a [`ParamStore`], used as the independent
//! oracle for every analytic gradient in the crate. Only forward evaluations
//! of the loss are used here.

use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every scalar parameter.
pub fn finite_difference<F>(params: &ParamStore, h: f64, mut loss: F) -> Result<BTreeMap<String, Vec<f64>>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            let orig = probe.get(&name).expect("cloned").data()[i];
            probe.get_mut(&name).expect("cloned").data_mut()[i] = orig + h;
            let plus = loss(&probe)?;
            probe.get_mut(&name).expect("cloned").data_mut()[i] = orig - h;
            let minus = loss(&probe)?;
            probe.get_mut(&name).expect("cloned").data_mut()[i] = orig;
            grad.push((plus - minus) / (2.0 * h));
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, floor)`; the floor keeps all-zero gradients
/// from producing 0/0.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-8)
}

/// Worst relative error over all parameters between the analytic gradients
/// stored in `params` and the finite-difference oracle.
pub fn max_relative_error<F>(params: &ParamStore, h: f64, loss: F) -> Result<(f64, String)>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let numeric = finite_difference(params, h, loss)?;
    let mut worst = (0.0, String::new());
    for (name, t) in params.iter() {
        let analytic = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        let err = relative_error(&analytic, &numeric[name]);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    Ok(worst)
}
