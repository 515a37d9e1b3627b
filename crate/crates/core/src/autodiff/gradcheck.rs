//! Central-difference gradient verification.

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-4, 1e-2]")));
    }
    Ok(())
}

fn scalar_of<S: Scalar>(tape: &Tape<S>, v: Var) -> Result<f64> {
    match tape.value(v) {
        [x] => Ok(x.to_f64_lossy()),
        other => Err(Error::Contract(format!("loss must be scalar, got {} values", other.len()))),
    }
}

/// Largest relative error between the autodiff gradient of `f` at `x` and a
/// central-difference estimate with step `eps`.
pub fn grad_check<S, F>(x: &Tensor<S>, eps: f64, mut f: F) -> Result<f64>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let probe = x.clone().with_grad(true);
    let mut tape = Tape::new();
    let xv = tape.leaf(&probe);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); x.numel()]);

    let mut eval = |t: &Tensor<S>| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let v = tape.leaf(t);
        let l = f(&mut tape, v)?;
        scalar_of(&tape, l)
    };
    let mut worst = 0.0f64;
    let mut shifted = x.clone();
    for i in 0..x.numel() {
        let orig = x.data[i];
        shifted.data[i] = orig + S::from_f64_lossy(eps);
        let up = eval(&shifted)?;
        shifted.data[i] = orig - S::from_f64_lossy(eps);
        let down = eval(&shifted)?;
        shifted.data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i].to_f64_lossy(), numeric));
    }
    Ok(worst)
}

/// Where the worst disagreement of [`grad_check_params`] occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Checks every trainable tensor of `store` against central differences of
/// the loss built by `f`. `f` must be deterministic: anything random inside
/// it has to be replayed from a fixed state on every call.
pub fn grad_check_params<S, F>(store: &ParamStore<S>, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &ParamStore<S>) -> Result<Var>,
{
    check_eps(eps)?;
    let mut base = store.clone();
    base.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &base)?;
    tape.backward(loss)?;
    let mut with_grads = base.clone();
    tape.accumulate_grads(&mut with_grads);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<_> = base.ids().filter(|&id| base.get(id).requires_grad).collect();
    let mut probe = base.clone();
    for id in ids {
        let analytic = with_grads.get(id).grad_or_zeros();
        for i in 0..base.get(id).numel() {
            let orig = base.get(id).data[i];
            probe.get_mut(id).data[i] = orig + S::from_f64_lossy(eps);
            let up = {
                let mut t = Tape::no_grad();
                let l = f(&mut t, &probe)?;
                scalar_of(&t, l)?
            };
            probe.get_mut(id).data[i] = orig - S::from_f64_lossy(eps);
            let down = {
                let mut t = Tape::no_grad();
                let l = f(&mut t, &probe)?;
                scalar_of(&t, l)?
            };
            probe.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].to_f64_lossy();
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = base.name(id).to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
