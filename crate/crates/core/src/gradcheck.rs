//! Gradient verification against central finite differences.
//!
//! The oracle side only ever evaluates the forward function on perturbed
//! constant tensors, so it is independent of the tape's backward rules.

use crate::error::{Error, Result};
use crate::tensor::{numel_of, Tape, Tensor};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one [`check_gradients`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error over its coordinates)`.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor that keeps finite-difference noise on
/// near-zero gradients from dominating.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Named initial parameter values for a gradcheck run.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamSpec {
    pub fn new(name: &str, shape: Vec<usize>, values: Vec<f64>) -> Self {
        ParamSpec {
            name: name.to_string(),
            shape,
            values,
        }
    }
}

/// Compare the tape gradient of a scalar-valued computation against central
/// finite differences, per parameter coordinate.
///
/// `f` must be deterministic given its inputs: it is evaluated once on tape
/// leaves (analytical pass) and `2 * n_coords` times on plain constants.
pub fn check_gradients<F>(f: F, params: &[ParamSpec], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    for p in params {
        if numel_of(&p.shape) != p.values.len() {
            return Err(Error::ShapeMismatch {
                op: "check_gradients",
                left: p.shape.clone(),
                right: vec![p.values.len()],
            });
        }
    }

    // Analytical pass on a fresh tape.
    let tape = Tape::new();
    let leaves: Vec<Tensor> = params
        .iter()
        .map(|p| tape.leaf(p.values.clone(), p.shape.clone(), true))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(Error::contract("check_gradients expects a scalar-valued f"));
    }
    if !loss.item().is_finite() {
        return Err(Error::NonFinite { op: "check_gradients" });
    }
    let grads = tape.backward(&loss)?;

    // Finite-difference pass on constants.
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let consts: Vec<Tensor> = values
            .iter()
            .zip(params)
            .map(|(v, p)| Tensor::new(v.clone(), p.shape.clone()))
            .collect::<Result<_>>()?;
        let out = f(&consts)?;
        if !out.item().is_finite() {
            return Err(Error::NonFinite { op: "check_gradients" });
        }
        Ok(out.item())
    };

    let mut values: Vec<Vec<f64>> = params.iter().map(|p| p.values.clone()).collect();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .wrt(&leaves[pi])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; p.values.len()]);
        let mut worst = 0.0f64;
        for ci in 0..p.values.len() {
            let orig = values[pi][ci];
            values[pi][ci] = orig + h;
            let up = eval(&values)?;
            values[pi][ci] = orig - h;
            let down = eval(&values)?;
            values[pi][ci] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[ci], fd));
        }
        max_rel = max_rel.max(worst);
        per_param.push((p.name.clone(), worst));
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_norm_gradient_is_exact() {
        let params = vec![ParamSpec::new("w", vec![2], vec![1.0, 2.0])];
        let report = check_gradients(
            |p| p[0].mul(&p[0])?.sum_all(),
            &params,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn sigmoid_gradient_matches_fd() {
        let params = vec![ParamSpec::new("x", vec![1], vec![1.5])];
        let report =
            check_gradients(|p| p[0].sigmoid()?.sum_all(), &params, DEFAULT_STEP).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let params = vec![ParamSpec::new("x", vec![1], vec![800.0])];
        // exp(800) overflows to +inf
        let err = check_gradients(|p| p[0].exp()?.sum_all(), &params, DEFAULT_STEP);
        assert!(err.is_err());
    }
}
