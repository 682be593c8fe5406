use crate::scalar::Scalar;

use super::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates per input, evenly spaced.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
        }
    }
}

/// Worst coordinate found by a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)` at the worst coordinate.
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Central-difference check of `f` (which must return a rank-0 loss) with
/// respect to a single input.
pub fn grad_check<S, E, F>(f: F, x: &Tensor<S>, step: f64) -> Result<f64, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<S>, Var<'t, S>) -> Result<Var<'t, S>, E>,
{
    let opts = GradCheckOptions { step, max_coords: None };
    let report = grad_check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), opts)?;
    Ok(report.max_rel_error)
}

/// Central-difference check of `f` with respect to every input tensor.
///
/// `f` is re-run on a fresh tape for each perturbation, so it must be a
/// deterministic function of its inputs.
pub fn grad_check_inputs<S, E, F>(f: F, inputs: &[Tensor<S>], opts: GradCheckOptions) -> Result<GradCheckReport, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>, E>,
{
    let analytic: Vec<Tensor<S>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_, S>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |perturbed: &[Tensor<S>]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, S>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let v = loss.value();
        Ok(v.item().map(Scalar::as_f64).unwrap_or(f64::NAN))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for (input, x) in inputs.iter().enumerate() {
        let n = x.len();
        let stride = match opts.max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for index in (0..n).step_by(stride) {
            let orig = x.data()[index];
            let h = S::lit(opts.step);
            work[input].data_mut()[index] = orig + h;
            let plus = eval(&work)?;
            work[input].data_mut()[index] = orig - h;
            let minus = eval(&work)?;
            work[input].data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[input].data()[index].as_f64();
            let denom = 1f64.max(a.abs()).max(numeric.abs());
            let err = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.input = input;
                report.index = index;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
