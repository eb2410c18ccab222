//! Central finite-difference gradient checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Entries whose analytic gradient is at most this large are skipped.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (parameter index, flat entry) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub analytic: Vec<Tensor<f64>>,
}

/// Loss value and backward-pass gradients of `f` at `params`.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>)
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars);
    let value = tape.value(loss).data()[0];
    let mut g = tape.backward(loss);
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    (value, grads)
}

fn loss_at<F>(f: &F, params: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars);
    tape.value(loss).data()[0]
}

/// Compares backward-pass gradients with `(f(θ+h) − f(θ−h)) / 2h` entry by
/// entry and returns the largest relative error among entries whose analytic
/// gradient exceeds [`GRAD_FLOOR`] in magnitude.
pub fn check_gradients<F>(f: F, params: &[Tensor<f64>], h: f64) -> GradCheck
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let (_, analytic) = analytic_gradients(&f, params);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let a = grad.data()[j];
            if a.abs() <= GRAD_FLOOR {
                continue;
            }
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = loss_at(&f, &work);
            work[pi].data_mut()[j] = orig - h;
            let down = loss_at(&f, &work);
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            checked += 1;
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((pi, j));
            }
        }
    }
    GradCheck {
        max_rel_error,
        worst,
        checked,
        analytic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let f = |t: &mut Tape<'_, f64>, v: &[Var]| t.mul(v[0], v[0]);
        let r = check_gradients(f, &[Tensor::scalar(3.0)], 1e-5);
        assert!((r.analytic[0].data()[0] - 6.0).abs() < 1e-12);
        assert!(r.max_rel_error < 1e-8);
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn dead_parameter_gets_exact_zero() {
        let f = |t: &mut Tape<'_, f64>, v: &[Var]| t.mul(v[0], v[0]);
        let r = check_gradients(f, &[Tensor::scalar(3.0), Tensor::scalar(1.0)], 1e-5);
        assert_eq!(r.analytic[1].data()[0], 0.0);
    }
}
