//! Central-difference verification of tape gradients.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(1, |a|, |n|)` per input.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the function under test failed to evaluate.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Evaluates `f` on fresh leaves and returns the gradient of its scalar
/// output with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Central finite differences `(f(x + h) - f(x - h)) / 2h` per element.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tolerance: f64) -> GradCheckReport {
    let max_rel_error: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            a.iter()
                .zip(n)
                .map(|(&x, &y)| relative_error(x, y))
                .fold(0.0, f64::max)
        })
        .collect();
    let passed = max_rel_error.iter().all(|&e| e < tolerance);
    GradCheckReport {
        max_rel_error,
        tolerance,
        passed,
        error: None,
    }
}

/// Checks the analytic gradient of the scalar function `f` against central
/// differences. Never fails: evaluation errors come back as a failed report.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], config: GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let both = analytic_gradients(&f, inputs)
        .and_then(|a| numeric_gradients(&f, inputs, config.step).map(|n| (a, n)));
    match both {
        Ok((a, n)) => compare_gradients(&a, &n, config.tolerance),
        Err(e) => GradCheckReport {
            max_rel_error: vec![f64::INFINITY; inputs.len()],
            tolerance: config.tolerance,
            passed: false,
            error: Some(e.to_string()),
        },
    }
}
