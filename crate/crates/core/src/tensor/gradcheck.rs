use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Analytic and central-difference gradients of a scalar function.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_err: f64,
}

fn eval<F>(f: &F, point: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::NotScalar("grad_check", v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// Inputs sitting exactly on a kink (ReLU at 0, ties in min/max) are outside
/// the contract: the one-sided derivatives disagree there.
pub fn grad_check_with<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Param(format!("grad_check eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_err,
    })
}

/// Max relative error between analytic and numeric gradients.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_with(f, point, eps).map(|r| r.max_rel_err)
}
