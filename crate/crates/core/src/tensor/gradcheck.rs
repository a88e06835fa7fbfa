//! Central finite-difference check of tape gradients.

use super::{Graph, Tensor4, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f32,
    /// Denominator floor for the per-entry relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |a - n| / max(max |a|, max |n|)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest `|a - n| / max(|a|, |n|, floor)` over single entries. In f32
    /// this is dominated by forward-pass rounding on entries near zero.
    pub max_entry_rel_error: f64,
    /// Flat index of the entry with the largest per-entry relative error.
    pub worst_index: usize,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f32>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares the tape gradient of `f` at `input` against central differences.
///
/// `f` receives a fresh graph and the input leaf and must return a
/// single-element node.
pub fn grad_check<F>(f: F, input: &Tensor4, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |x: &Tensor4| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = f(&mut g, v)?;
        Ok(g.scalar(out).unwrap_or(g.value(out).data()[0] as f64))
    };

    let mut g = Graph::new();
    let v = g.param(input.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(v)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; input.len()]);
    drop(g);

    let mut probe = input.clone();
    let mut numeric = Vec::with_capacity(input.len());
    let h = cfg.step;
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // the actual perturbation after f32 rounding
        let span = ((orig + h) as f64) - ((orig - h) as f64);
        numeric.push(((plus - minus) / span) as f32);
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        max_entry_rel_error: 0.0,
        worst_index: 0,
        analytic,
        numeric,
    };
    for (i, (&a, &n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
        let (a, n) = (a as f64, n as f64);
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(cfg.floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_entry_rel_error {
            report.max_entry_rel_error = rel;
            report.worst_index = i;
        }
    }
    let scale = report
        .analytic
        .iter()
        .chain(&report.numeric)
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    report.max_rel_error = if scale > 0.0 { report.max_abs_error / scale } else { report.max_abs_error };
    Ok(report)
}
