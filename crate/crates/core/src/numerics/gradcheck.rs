use std::collections::BTreeMap;
use std::fmt;

use super::graph::{Graph, NodeId};
use super::params::{Bindings, ParamStore};
use super::tensor::Tensor;
use super::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl fmt::Display for GradCheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
            self.param, self.index, self.analytic, self.numeric, self.rel_error
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub rel_tol: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub per_param_max: BTreeMap<String, f64>,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval_loss<F>(params: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g)?;
    let loss = f(&mut g, &b)?;
    Ok(g.value(loss).data()[0])
}

/// Gradients of the loss built by `f` with respect to every parameter, via the tape.
pub fn analytic_gradients<F>(params: &ParamStore<f64>, f: &F) -> Result<BTreeMap<String, Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g)?;
    let loss = f(&mut g, &b)?;
    let grads = g.backward(loss)?;
    Ok(params
        .iter()
        .map(|p| {
            let grad = grads
                .get(b.id(&p.id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            (p.id.clone(), grad)
        })
        .collect())
}

/// Central finite differences for every element of every parameter accepted by `filter`.
pub fn numeric_gradients<F>(
    params: &ParamStore<f64>,
    filter: impl Fn(&str) -> bool,
    f: &F,
) -> Result<BTreeMap<String, Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<NodeId>,
{
    let mut work = params.clone();
    let names: Vec<String> = params.names().filter(|n| filter(n)).map(str::to_owned).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let shape = work.value(&name)?.shape().to_vec();
        let mut fd = Tensor::zeros(&shape);
        for i in 0..fd.len() {
            let orig = work.value(&name)?.data()[i];
            work.value_mut(&name)?.data_mut()[i] = orig + FD_STEP;
            let plus = eval_loss(&work, f)?;
            work.value_mut(&name)?.data_mut()[i] = orig - FD_STEP;
            let minus = eval_loss(&work, f)?;
            work.value_mut(&name)?.data_mut()[i] = orig;
            fd.data_mut()[i] = (plus - minus) / (2.0 * FD_STEP);
        }
        out.insert(name, fd);
    }
    Ok(out)
}

/// Compares two gradient sets element-wise; only names present in `numeric` are checked.
pub fn compare_gradients(
    analytic: &BTreeMap<String, Tensor<f64>>,
    numeric: &BTreeMap<String, Tensor<f64>>,
    rel_tol: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        rel_tol,
        ..GradCheckReport::default()
    };
    for (name, fd) in numeric {
        let Some(an) = analytic.get(name) else {
            report.failures.push(GradCheckFailure {
                param: name.clone(),
                index: 0,
                analytic: f64::NAN,
                numeric: fd.data().first().copied().unwrap_or(0.0),
                rel_error: f64::INFINITY,
            });
            continue;
        };
        let mut worst = 0.0f64;
        for (i, (&a, &n)) in an.data().iter().zip(fd.data()).enumerate() {
            let rel = relative_error(a, n);
            worst = worst.max(rel);
            report.checked += 1;
            if rel > rel_tol || !rel.is_finite() {
                report.failures.push(GradCheckFailure {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric: n,
                    rel_error: rel,
                });
            }
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param_max.insert(name.clone(), worst);
    }
    report
}

/// Checks tape gradients of the loss built by `f` against central differences
/// for every parameter element.
pub fn grad_check<F>(params: &ParamStore<f64>, rel_tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<NodeId>,
{
    grad_check_filtered(params, rel_tol, |_| true, f)
}

/// Like [`grad_check`], restricted to the parameters accepted by `filter`.
pub fn grad_check_filtered<F>(
    params: &ParamStore<f64>,
    rel_tol: f64,
    filter: impl Fn(&str) -> bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<NodeId>,
{
    let analytic = analytic_gradients(params, &f)?;
    let numeric = numeric_gradients(params, filter, &f)?;
    Ok(compare_gradients(&analytic, &numeric, rel_tol))
}
