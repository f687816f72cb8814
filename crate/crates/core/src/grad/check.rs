use crate::error::{Error, Result};
use crate::grad::params::ParamSet;
use crate::grad::tape::{Tape, Var};

/// Registers every parameter of `params` as a leaf on `tape`, in order.
pub fn bind_params(tape: &mut Tape, params: &ParamSet) -> Vec<Var> {
    params.iter().map(|p| tape.leaf(p.value.clone())).collect()
}

fn evaluate<F>(loss_fn: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params);
    let out = loss_fn(&mut tape, &vars)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("loss at grad_check probe".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients with central differences.
///
/// Returns the maximum over every parameter entry of
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<F>(loss_fn: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params);
    let out = loss_fn(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite("loss at grad_check base point".into()));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params.value(pi));
        for k in 0..params.value(pi).len() {
            let orig = params.value(pi).data()[k];
            probe.get_mut(pi).value.data_mut()[k] = orig + eps;
            let up = evaluate(&loss_fn, &probe)?;
            probe.get_mut(pi).value.data_mut()[k] = orig - eps;
            let down = evaluate(&loss_fn, &probe)?;
            probe.get_mut(pi).value.data_mut()[k] = orig;

            let fd = (up - down) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::params::ParamTag;
    use crate::matrix::Matrix;

    #[test]
    fn quadratic_is_exact() {
        let mut params = ParamSet::new();
        params.insert("theta", ParamTag::Head, Matrix::scalar(3.0)).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-8, "err = {err}");
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let mut params = ParamSet::new();
        params.insert("theta", ParamTag::Head, Matrix::scalar(0.0)).unwrap();
        let res = grad_check(
            |t, v| {
                let l = t.log(v[0]);
                Ok(t.sum(l))
            },
            &params,
            1e-4,
        );
        assert!(res.is_err());
    }
}
