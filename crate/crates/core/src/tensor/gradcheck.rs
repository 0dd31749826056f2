use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Magnitudes below this are treated as this value in the relative-error
/// denominator. Gradients that are structurally zero are then compared
/// against the finite-difference roundoff level instead of being divided by
/// it.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of a scalar program against central differences,
/// element by element, in double precision.
///
/// The numeric derivative combines the central differences
/// `D(s) = (f(p + s) - f(p - s)) / 2s` at steps `h` and `h / 2` as
/// `(4 D(h/2) - D(h)) / 3`, which cancels the leading truncation term.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a scalar.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], requires_grad: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract("grad_check target must be scalar".into()));
        }
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(params, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    drop(tape);

    let mut shifted = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (pi, grads) in analytic.into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(grads.len());
        for ei in 0..grads.len() {
            let orig = params[pi].data()[ei];
            let mut at = |x: f64| -> Result<f64> {
                shifted[pi].data_mut()[ei] = x;
                let (t, _, o) = eval(&shifted, false)?;
                Ok(t.value(o).data()[0])
            };
            let wide = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
            let narrow = (at(orig + h / 2.0)? - at(orig - h / 2.0)?) / h;
            shifted[pi].data_mut()[ei] = orig;
            numeric.push((4.0 * narrow - wide) / 3.0);
        }
        let max_rel_err =
            grads.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max);
        tensors.push(TensorCheck { analytic: grads, numeric, max_rel_err });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { tensors, max_rel_err, tol, pass: max_rel_err <= tol })
}
