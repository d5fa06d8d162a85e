//! Central finite-difference verification of analytic gradients.
//!
//! Always run in `f64`: the probe step is 1e-5, so single precision would
//! drown the comparison in rounding noise. The step is kept small because
//! the leaky activation is only piecewise smooth — a kink inside the probe
//! interval biases the central difference by an amount proportional to the
//! step.

use std::fmt;

use super::{backward, Result, Tensor};

const PROBE_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared with the absolute tolerance
/// `tolerance * MAG_FLOOR` instead of a relative one.
const MAG_FLOOR: f64 = 1e-4;

/// Worst observed disagreement for one parameter.
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.max_rel_err > self.tolerance)
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<28} checked {:>5}  max_rel {:.3e}  (analytic {:+.6e}, numeric {:+.6e} at [{}])",
                e.name, e.checked, e.max_rel_err, e.worst_analytic, e.worst_numeric, e.worst_index
            )?;
        }
        write!(
            f,
            "tolerance {:.1e}: {}",
            self.tolerance,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

/// Compare analytic gradients of `f` against central finite differences for
/// every listed parameter, probing every element.
///
/// `f` must be deterministic and rebuild its graph from the live parameter
/// tensors on each call.
pub fn grad_check<F>(
    params: &[(&str, &Tensor<f64>)],
    f: F,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor<f64>>,
{
    grad_check_sampled(params, f, tolerance, usize::MAX)
}

/// Like [`grad_check`] but probing at most `max_per_param` evenly spread
/// elements of each parameter. Used for whole-model checks where probing all
/// elements would be quadratic in model size.
pub fn grad_check_sampled<F>(
    params: &[(&str, &Tensor<f64>)],
    mut f: F,
    tolerance: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor<f64>>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = f()?;
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut entries = Vec::with_capacity(params.len());
    for ((name, p), grad) in params.iter().zip(&analytic) {
        let n = p.numel();
        let indices: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            let step = n as f64 / max_per_param as f64;
            (0..max_per_param)
                .map(|i| ((i as f64 + 0.5) * step) as usize)
                .collect()
        };
        let mut entry = GradCheckEntry {
            name: (*name).to_string(),
            checked: indices.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &i in &indices {
            let orig = p.data()[i];
            p.update_data(|d| d[i] = orig + PROBE_STEP);
            let up = f()?.value()?;
            p.update_data(|d| d[i] = orig - PROBE_STEP);
            let down = f()?.value()?;
            p.update_data(|d| d[i] = orig);
            let numeric = (up - down) / (2.0 * PROBE_STEP);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(MAG_FLOOR);
            if rel > entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.worst_analytic = a;
                entry.worst_numeric = numeric;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { tolerance, entries })
}
