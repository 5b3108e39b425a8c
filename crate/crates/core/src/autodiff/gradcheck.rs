use super::{ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: Real,
    pub numeric: Real,
    pub coordinates: usize,
    /// Closest any hardtanh input came to a kink on the unperturbed pass.
    pub hardtanh_margin: Real,
}

fn eval(store: &ParamStore, f: &impl Fn(&Tape, &ParamStore) -> Result<Var>) -> Result<Real> {
    let tape = Tape::new();
    let v = tape.item(f(&tape, store)?);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Checks every coordinate of every parameter in `store`.
pub fn gradient_check(
    store: &ParamStore,
    eps: Real,
    f: impl Fn(&Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    gradient_check_sampled(store, eps, usize::MAX, f)
}

/// Like [`gradient_check`], but visits at most `per_param` evenly spaced
/// coordinates of each parameter.
pub fn gradient_check_sampled(
    store: &ParamStore,
    eps: Real,
    per_param: usize,
    f: impl Fn(&Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    if std::mem::size_of::<Real>() != 8 {
        return Err(Error::invalid("gradient checks need 64-bit reals"));
    }
    let mut analytic = store.clone();
    analytic.zero_grad();
    let tape = Tape::new();
    let loss = f(&tape, &analytic)?;
    if !tape.item(loss).is_finite() {
        return Err(Error::NonFinite(format!(
            "objective evaluated to {}",
            tape.item(loss)
        )));
    }
    tape.backward(loss)?;
    tape.accumulate_param_grads(&mut analytic)?;

    let mut report = GradCheckReport {
        hardtanh_margin: tape.hardtanh_margin(),
        ..Default::default()
    };
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let n = store.get(&name).expect("listed").numel();
        let step = if per_param >= n {
            1
        } else {
            n.div_ceil(per_param)
        };
        for i in (0..n).step_by(step.max(1)) {
            let orig = work.get(&name).expect("listed").data()[i];
            work.get_mut(&name).expect("listed").data_mut()[i] = orig + eps;
            let plus = eval(&work, &f)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = orig - eps;
            let minus = eval(&work, &f)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.grad(&name).expect("listed")[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
