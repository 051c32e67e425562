use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Denominator floor of [`relative_error`]. Central differences carry a
/// roundoff of roughly `|f| * 1e-16 / eps` (about 1e-10 here), so gradient
/// entries much smaller than this floor are judged by absolute error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// Relative discrepancy used by every gradient comparison in the crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Analytic gradient of a scalar function `f` at `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let y = f(&tape, &xv)?;
    let grads = tape.backward(&y)?;
    Ok(grads.get_or_zeros(&xv))
}

/// Central-difference gradient of a scalar function `f` at `x`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::inference();
        let v = tape.constant(t);
        f(&tape, &v)?.value().item()
    };
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest relative error between the tape gradient of `f` and central
/// differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let err = grad_check(|t, x| t.sum(x), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[10], 1.0, &mut rng);
        let err = grad_check(|t, x| t.sum(&t.sigmoid(x)?), &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::new(&[4], vec![-1.3, 0.7, 2.1, -0.4]).unwrap();
        let err = grad_check(|t, x| t.sum(&t.relu(x)?), &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::zeros(&[1]);
        assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }
}
