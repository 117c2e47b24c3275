//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::NnError;

/// Worst element-wise disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `loss` against central differences
/// `(L(p + eps) - L(p - eps)) / 2 eps` for every element of every trainable
/// parameter. The relative error of one element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn check_gradients<F>(params: &ParamSet, eps: f64, floor: f64, loss: F) -> Result<GradCheck, NnError>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var, NnError>,
{
    let mut g = Graph::new();
    let root = loss(&mut g, params)?;
    let grads = g.backward(root)?;

    let eval = |ps: &ParamSet| -> Result<f64, NnError> {
        let mut g = Graph::new();
        let root = loss(&mut g, ps)?;
        Ok(g.scalar(root))
    };

    let mut work = params.clone();
    let mut report = GradCheck { max_rel_error: 0.0, worst_param: String::new(), checked: 0 };
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let analytic = grads.get(&name).cloned();
        let (rows, cols) = work.get(&name).unwrap().value.dim();
        for i in 0..rows * cols {
            let ix = [i / cols, i % cols];
            let orig = work.get(&name).unwrap().value[ix];
            work.get_mut(&name).unwrap().value[ix] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(&name).unwrap().value[ix] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(&name).unwrap().value[ix] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g[ix]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
