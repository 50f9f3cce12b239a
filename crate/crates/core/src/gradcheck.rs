//! Central finite differences, the independent oracle for every backward rule.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively; central differences cannot resolve them to 1e-4 relative.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / scale
}

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.dims().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, flat coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Compares [`Tape::backward`] against [`finite_diff_grad`] for every input
/// of the scalar function `f`.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    // surface errors once up front so the closure below can unwrap
    eval(inputs)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut xs = inputs.to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                xs[k] = probe.clone();
                eval(&xs).expect("evaluated successfully at the base point")
            },
            &inputs[k],
            eps,
        );
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let r = rel_err(a, n);
            if r > report.max_rel_err || !r.is_finite() {
                report.max_rel_err = r;
                report.worst = (k, i);
            }
            report.max_abs_err = report.max_abs_err.max((a - n).abs());
        }
        report.coords_checked += inputs[k].len();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(vec![3], vec![0.1, -4.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(rel_err(2.0, 1.0), 0.5);
        assert!(rel_err(1e-9, 2e-9) < 1e-2);
    }
}
