//! Central finite-difference verification of tape gradients.
//!
//! Central differences are meaningless across the non-differentiable set of
//! `abs`, `max`, `min` and mask switches. Each coordinate is therefore also
//! probed at half steps; when the three-point quadratic through
//! `f(x-h), f(x), f(x+h)` fails to predict `f(x±h/2)`, the interval contains
//! a kink or jump, and the coordinate is counted as excluded instead of
//! compared.

use serde::Serialize;

use crate::error::Result;
use crate::tensor::{Precision, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Precision of the tape whose gradient is checked. The finite-difference
    /// reference is always evaluated at 64 bits: 32-bit differences through
    /// the warp are dominated by coordinate rounding.
    pub precision: Precision,
    pub step: f64,
    /// Norm-wise relative error tolerance.
    pub tolerance: f64,
    /// Quadratic-fit residual (scaled by `1 + |f|`) above which a coordinate
    /// is treated as straddling a kink.
    pub kink_tolerance: f64,
}

impl GradCheckConfig {
    pub fn double() -> Self {
        GradCheckConfig { precision: Precision::Double, step: 1e-4, tolerance: 1e-5, kink_tolerance: 1e-10 }
    }

    pub fn single() -> Self {
        GradCheckConfig { precision: Precision::Single, step: 1e-4, tolerance: 1e-3, kink_tolerance: 1e-10 }
    }

    pub fn for_precision(p: Precision) -> Self {
        match p {
            Precision::Double => Self::double(),
            Precision::Single => Self::single(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) over compared coordinates.
    pub relative_error: f64,
    pub compared: usize,
    pub excluded: usize,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn excluded_fraction(&self) -> f64 {
        self.excluded as f64 / (self.compared + self.excluded).max(1) as f64
    }
}

/// Compares the tape gradient of `f` w.r.t. every entry of `inputs` against
/// central differences. All inputs are differentiable leaves.
pub fn check<F>(name: &str, inputs: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new(cfg.precision);
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &leaves)?;
        tape.backward(loss)?;
        leaves.iter().zip(inputs).map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect()
    };

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let tape = Tape::new(Precision::Double);
        let leaves: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[idx] += delta;
                }
                tape.constant(t)
            })
            .collect();
        Ok(f(&tape, &leaves)?.item())
    };

    let h = cfg.step;
    let f0 = eval(usize::MAX, 0, 0.0)?;
    let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
    let (mut compared, mut excluded) = (0, 0);
    for (which, t) in inputs.iter().enumerate() {
        for idx in 0..t.len() {
            let fp = eval(which, idx, h)?;
            let fm = eval(which, idx, -h)?;
            let fph = eval(which, idx, h / 2.0)?;
            let fmh = eval(which, idx, -h / 2.0)?;
            // quadratic through (-h, fm), (0, f0), (h, fp) evaluated at ±h/2
            let a = (fp + fm - 2.0 * f0) / (2.0 * h * h);
            let b = (fp - fm) / (2.0 * h);
            let q = |x: f64| f0 + b * x + a * x * x;
            let residual = (q(h / 2.0) - fph).abs().max((q(-h / 2.0) - fmh).abs());
            if residual > cfg.kink_tolerance * (1.0 + f0.abs()) {
                excluded += 1;
                continue;
            }
            let an = analytic[which].data()[idx];
            diff2 += (an - b) * (an - b);
            an2 += an * an;
            nu2 += b * b;
            compared += 1;
        }
    }
    let denom = an2.sqrt().max(nu2.sqrt());
    let relative_error = if denom == 0.0 { diff2.sqrt() } else { diff2.sqrt() / denom };
    Ok(GradCheckReport {
        name: name.to_string(),
        relative_error,
        compared,
        excluded,
        passed: relative_error <= cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function_passes() {
        let x = Tensor::new(&[4], vec![0.3, -0.7, 1.1, 0.05]).unwrap();
        let r = check("exp-sum", &[x], &GradCheckConfig::double(), |_, v| Ok(v[0].exp().square().sum())).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.excluded, 0);
    }

    #[test]
    fn wrong_gradient_fails() {
        // stop_gradient hides a real dependence from the tape
        let x = Tensor::new(&[2], vec![0.5, 0.8]).unwrap();
        let r = check("broken", &[x], &GradCheckConfig::double(), |_, v| {
            let frozen = v[0].stop_gradient();
            Ok(frozen.square().sum())
        })
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn kink_inside_step_is_excluded() {
        let x = Tensor::new(&[3], vec![0.2 + 1e-5, 0.9, -0.4]).unwrap();
        let r = check("kink", &[x], &GradCheckConfig::double(), |_, v| Ok(v[0].max_scalar(0.2).sum())).unwrap();
        assert_eq!(r.excluded, 1);
        assert!(r.passed);
    }
}
