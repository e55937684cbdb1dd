//! Central finite-difference verification of tape gradients.

use super::{Matrix, ParamStore, Tape, Var};
use crate::error::Result;

/// Magnitudes below this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub input: usize,
    pub max_rel_error: f64,
    pub worst_entry: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (max rel error {:.2e}, tol {:.0e})",
            if self.passed() { "pass" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance
        )?;
        for c in self.inputs.iter().filter(|c| !c.passed) {
            write!(
                f,
                "; input {} entry {:?}: analytic {:.6e} numeric {:.6e}",
                c.input, c.worst_entry, c.analytic, c.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares the tape gradient of scalar `f` with respect to every entry of
/// every input against `(f(x + h) - f(x - h)) / 2h`.
///
/// `f` must be deterministic: Monte-Carlo terms need frozen noise.
pub fn gradient_check<'g, F>(f: F, inputs: &[Matrix], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'g>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|v| tape.variable(v.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|v| tape.variable(v.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut checks = Vec::with_capacity(inputs.len());
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(inputs[i].dim()));
        checks.push(compare_entries(
            i,
            &analytic,
            &inputs[i],
            tolerance,
            |r, c, x| {
                work[i][[r, c]] = x;
                let out = eval(&work);
                work[i][[r, c]] = inputs[i][[r, c]];
                out
            },
            step,
        )?);
    }
    Ok(GradCheckReport {
        tolerance,
        inputs: checks,
    })
}

/// Like [`gradient_check`], with the parameters of `store` as the inputs.
/// `f` must read parameters through [`Tape::param`].
pub fn param_gradient_check<'g, F>(f: F, store: &ParamStore, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'g>, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let analytic = tape.backward(out)?.param_grads(store);
    let mut work = store.clone();
    let mut checks = Vec::with_capacity(store.len());
    for (i, id) in store.ids().enumerate() {
        let orig = store.value(id);
        checks.push(compare_entries(
            i,
            &analytic[i],
            orig,
            tolerance,
            |r, c, x| {
                work.value_mut(id)[[r, c]] = x;
                let mut tape = Tape::new();
                let out = f(&mut tape, &work).map(|v| tape.scalar(v));
                work.value_mut(id)[[r, c]] = orig[[r, c]];
                out
            },
            step,
        )?);
    }
    Ok(GradCheckReport {
        tolerance,
        inputs: checks,
    })
}

/// Worst relative error between `analytic` and central differences of
/// `eval_at(row, col, value)` around `values`.
fn compare_entries(
    input: usize,
    analytic: &Matrix,
    values: &Matrix,
    tolerance: f64,
    mut eval_at: impl FnMut(usize, usize, f64) -> Result<f64>,
    step: f64,
) -> Result<InputCheck> {
    let mut worst = InputCheck {
        input,
        max_rel_error: 0.0,
        worst_entry: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    for ((r, c), &orig) in values.indexed_iter() {
        let plus = eval_at(r, c, orig + step)?;
        let minus = eval_at(r, c, orig - step)?;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[[r, c]];
        let err = relative_error(a, numeric);
        if err > worst.max_rel_error || !err.is_finite() {
            worst.max_rel_error = err;
            worst.worst_entry = (r, c);
            worst.analytic = a;
            worst.numeric = numeric;
        }
    }
    worst.passed = worst.max_rel_error < tolerance;
    Ok(worst)
}
