use super::graph::{Graph, Var};
use super::params::{Bound, Params};
use crate::{Error, Result};

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` records a scalar loss on a fresh graph with `params` bound.
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
/// over every parameter coordinate.
pub fn gradient_check<F>(params: &Params, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let eval = |p: &Params| -> Result<f64> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let loss = build(&mut g, &bound)?;
        let v = g.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = build(&mut g, &bound)?;
    if !g.value(loss).is_finite() {
        return Err(Error::NonFinite("loss at the check point".into()));
    }
    let grads = g.backward(loss)?;

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for (name, value) in params.iter() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for `{name}`")))?;
        for i in 0..value.len() {
            let orig = value.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
