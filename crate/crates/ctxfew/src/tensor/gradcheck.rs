//! Central-difference gradient checking against the analytic backward pass.

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Worst per-element relative error between analytic and finite-difference
/// gradients, with `max(|analytic|, |fd|, 1e-6)` as the normalizer.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub elements_checked: usize,
    /// (input index, element index, analytic, finite difference) of the worst
    /// element, for diagnostics.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Checks the analytic gradient of a scalar-valued graph function by central
/// finite differences at every element of every input.
///
/// The function is evaluated twice at the unperturbed point first; if the two
/// values differ bitwise, the function is not deterministic and the check
/// errors out rather than reporting noise as gradient error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f32, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-4, 1e-2]")));
    }
    if tol <= 0.0 {
        return Err(Error::Config("grad_check tol must be positive".into()));
    }
    let mut work: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();

    let eval = |tensors: &[Tensor]| -> Result<f32> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        if g.data(out).len() != 1 {
            return Err(Error::shape(
                "grad_check",
                format!("function must be scalar-valued, got {:?}", g.shape(out)),
            ));
        }
        Ok(g.value(out))
    };

    let v1 = eval(&work)?;
    let v2 = eval(&work)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Numeric(format!(
            "grad_check: function is not deterministic ({v1} vs {v2} at the same point)"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = work.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&work)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(g);

    let mut report =
        GradCheckReport { max_rel_err: 0.0, elements_checked: 0, worst: None };
    for ti in 0..work.len() {
        for ei in 0..work[ti].numel() {
            let orig = work[ti].data[ei];
            work[ti].data[ei] = orig + eps;
            let plus = eval(&work)? as f64;
            work[ti].data[ei] = orig - eps;
            let minus = eval(&work)? as f64;
            work[ti].data[ei] = orig;
            let fd = (plus - minus) / (2.0 * eps as f64);
            let a = analytic[ti][ei];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, ei, a, fd));
            }
        }
    }
    let _ = tol;
    Ok(report)
}
