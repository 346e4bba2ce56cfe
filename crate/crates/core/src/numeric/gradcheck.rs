//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over entries above the floor.
    pub worst_relative: f64,
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences, perturbing every entry of every parameter.
pub fn check_gradients<F>(params: &[Tensor], config: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = ps
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    check_analytic(params, &analytic, config, |ps| {
        let (t, _, o) = eval(ps)?;
        Ok(t.value(o).data()[0])
    })
}

/// Compares externally computed gradients of a scalar function `f` against
/// central differences.
pub fn check_analytic<F>(
    params: &[Tensor],
    analytic: &[Tensor],
    config: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut report = GradCheckReport {
        checked: 0,
        failures: Vec::new(),
        worst_relative: 0.0,
    };
    let mut work = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for idx in 0..param.len() {
            let original = param.data()[idx];
            work[pi].data_mut()[idx] = original + config.step;
            let plus = f(&work)?;
            work[pi].data_mut()[idx] = original - config.step;
            let minus = f(&work)?;
            work[pi].data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[pi].data()[idx];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            if diff > config.abs_floor {
                report.worst_relative = report.worst_relative.max(diff / scale);
            }
            if diff > config.abs_floor.max(config.rel_tol * scale) {
                report.failures.push(GradMismatch {
                    param: pi,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
