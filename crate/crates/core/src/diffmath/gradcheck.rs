use super::{MathError, Matrix, Tape, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per parameter, in input order.
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

// Entries whose analytic and numeric gradients are both below this are
// compared absolutely; relative error is meaningless near zero.
const ABS_FLOOR: f64 = 1e-7;

/// Central-difference gradient check.
///
/// `loss_fn` receives a fresh tape and the leaves registered for `params`
/// (in order) and must return a scalar node.
pub fn grad_check<F>(
    loss_fn: F,
    params: &[Matrix],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, MathError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, MathError>,
{
    let eval = |ps: &[Matrix]| -> Result<f64, MathError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = loss_fn(&mut tape, &vars)?;
        let v = tape.scalar(out)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(MathError::NonFiniteLoss)
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = loss_fn(&mut tape, &vars)?;
    if !tape.scalar(out)?.is_finite() {
        return Err(MathError::NonFiniteLoss);
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<Matrix> = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var)?;
        let mut worst: f64 = 0.0;
        let (rows, cols) = params[k].shape();
        for r in 0..rows {
            for c in 0..cols {
                let orig = params[k].get(r, c);
                work[k].set(r, c, orig + step)?;
                let plus = eval(&work)?;
                work[k].set(r, c, orig - step)?;
                let minus = eval(&work)?;
                work[k].set(r, c, orig)?;
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic.get(r, c);
                let denom = a.abs().max(numeric.abs());
                let err = if denom < ABS_FLOOR {
                    (a - numeric).abs()
                } else {
                    (a - numeric).abs() / denom
                };
                worst = worst.max(err);
            }
        }
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|&e| e < tol);
    Ok(GradCheckReport {
        max_rel_error,
        tol,
        passed,
    })
}
