//! Central finite-difference verification of analytic gradients.
//!
//! Runs in `f64` so truncation and rounding error stay far below the
//! tolerances the network's operators are held to.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Upper bound on perturbed entries per input; larger inputs are strided.
    pub max_entries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_entries: 256,
        }
    }
}

/// Agreement between analytic and numeric gradient for one input.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub input: usize,
    pub checked: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over checked entries.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub grad_norm: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol
    }
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Compares the gradient of the scalar `f(inputs)` against central differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, cfg: GradCheckConfig) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (idx, &v) in vars.iter().enumerate() {
        let numel = inputs[idx].numel();
        let analytic = tape
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        let stride = numel.div_ceil(cfg.max_entries.max(1)).max(1);
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut checked = 0;
        for e in (0..numel).step_by(stride) {
            let orig = work[idx].data()[e];
            work[idx].data_mut()[e] = orig + cfg.eps;
            let plus = eval(&work, &f)?;
            work[idx].data_mut()[e] = orig - cfg.eps;
            let minus = eval(&work, &f)?;
            work[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let d = analytic[e] - numeric;
            diff2 += d * d;
            a2 += analytic[e] * analytic[e];
            n2 += numeric * numeric;
            max_abs = max_abs.max(d.abs());
            checked += 1;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        reports.push(GradReport {
            input: idx,
            checked,
            rel_error: if scale > 0.0 { diff2.sqrt() / scale } else { 0.0 },
            max_abs_error: max_abs,
            grad_norm: a2.sqrt(),
        });
    }
    Ok(reports)
}
