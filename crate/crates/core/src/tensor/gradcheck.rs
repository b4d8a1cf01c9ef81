use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffOp, Tensor};
use crate::error::Result;

/// Denominator floor of the relative error, so that near-zero gradients are
/// judged by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: &'static str,
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares `op.backward` against central differences of the scalar head
/// `sum(probe * op(inputs))`, where `probe` is a fixed pseudo-random tensor
/// (a plain sum is degenerate for ops such as batch normalisation).
pub fn grad_check(op: &dyn DiffOp<f64>, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport> {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out = op.forward(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ca11);
    let probe = Tensor::rand_uniform(out.shape(), 0.5, 1.5, &mut rng);
    grad_check_with_probe(op, inputs, &probe, eps)
}

pub fn grad_check_with_probe(
    op: &dyn DiffOp<f64>,
    inputs: &[Tensor<f64>],
    probe: &Tensor<f64>,
    eps: f64,
) -> Result<GradCheckReport> {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out = op.forward(&refs)?;
    let needs = vec![true; inputs.len()];
    let analytic = op.backward(&refs, &out, probe, &needs)?;

    let head = |ins: &[Tensor<f64>]| -> Result<f64> {
        let r: Vec<&Tensor<f64>> = ins.iter().collect();
        op.forward(&r)?.dot(probe)
    };

    let mut report = GradCheckReport {
        op: op.name(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + eps;
            let plus = head(&work)?;
            work[i].data_mut()[e] = orig - eps;
            let minus = head(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}
