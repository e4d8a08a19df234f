//! Central finite-difference checks against the analytic backward pass.

use super::{Graph, GroupSet, ParamStore, Tensor, Var};
use crate::error::Result;

/// Step used by every gradient check in this crate.
pub const STEP: f64 = 1e-4;

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb == 0.0 {
        0.0
    } else {
        diff / (na + nb)
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_grads<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let plus = f(&work)?;
            work[i].data_mut()[k] = orig - h;
            let minus = f(&work)?;
            work[i].data_mut()[k] = orig;
            *gk = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Builds `build(graph, inputs)` once for analytic gradients and repeatedly for
/// numeric ones; returns the worst relative error over all inputs.
pub fn check<F>(build: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let mut store = ParamStore::new();
    g.backward(root, GroupSet::EMPTY, &mut store)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root).data()[0])
    };
    let numeric = numeric_grads(eval, inputs, STEP)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
