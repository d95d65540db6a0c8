//! Central finite-difference checks of analytic gradients.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively;
/// central differences carry ~1e-11 absolute round-off on O(1) losses.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GroupCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub groups: Vec<GroupCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(GroupCheck::max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Names and worst errors of groups at or above `tolerance`.
    pub fn violations(&self, tolerance: f64) -> Vec<(String, f64)> {
        self.groups
            .iter()
            .map(|g| (g.name.clone(), g.max_rel_err()))
            .filter(|(_, e)| e.partial_cmp(&tolerance) != Some(std::cmp::Ordering::Less))
            .collect()
    }
}

/// Central-difference derivative of `loss` with respect to every entry of
/// `values`. Entries are restored after each probe.
pub fn numeric_gradient(
    values: &mut [f64],
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + FD_STEP;
        let plus = loss(values)?;
        values[i] = orig - FD_STEP;
        let minus = loss(values)?;
        values[i] = orig;
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences, one group per input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).into_data();
        let mut probe = inputs.to_vec();
        let mut values = input.data().to_vec();
        let numeric = numeric_gradient(&mut values, |vals| {
            probe[k] = Tensor::new(input.shape(), vals.to_vec())?;
            eval(&probe)
        })?;
        report.groups.push(GroupCheck {
            name: format!("input{k}"),
            analytic,
            numeric,
        });
    }
    Ok(report)
}

/// Uniform entries in [-1, 1).
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_cubic() {
        let mut v = vec![2.0];
        let g = numeric_gradient(&mut v, |x| Ok(x[0].powi(3))).unwrap();
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert_eq!(v, vec![2.0]);
    }

    #[test]
    fn rel_err_uses_floor_near_zero() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-12, 0.0) - 1e-6).abs() < 1e-18);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
