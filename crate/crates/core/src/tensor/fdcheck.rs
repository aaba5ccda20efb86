//! Central finite-difference oracle for tape gradients.

use alloc::vec::Vec;

use super::{NodeId, Real, Tape, Tensor};
use crate::error::{Error, Result};

/// Compare analytic gradients against central finite differences.
///
/// `f` builds a scalar loss from the given parameter leaves on a fresh tape;
/// it must be deterministic. Returns the maximum over all parameter entries
/// of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_check<R, F>(f: F, params: &[Tensor<R>], eps: R) -> Result<R>
where
    R: Real,
    F: Fn(&mut Tape<R>, &[NodeId]) -> Result<NodeId>,
{
    if eps <= R::zero() {
        return Err(Error::Invalid("finite-difference eps must be positive".into()));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone().with_grad())).collect();
    let loss = f(&mut tape, &ids)?;
    let loss_value = tape.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite { context: "finite_diff_check loss".into(), step: None });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<R>> = ids.iter().map(|&id| grads.get(id)).collect();

    let eval = |perturbed: &[Tensor<R>]| -> Result<R> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        tape.value(loss).item()
    };

    let floor = R::from_f64_lossy(1e-12);
    let two = R::from_f64_lossy(2.0);
    let mut worst = R::zero();
    let mut work: Vec<Tensor<R>> = params.to_vec();

    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..grad.numel() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    context: "finite_diff_check perturbed loss".into(),
                    step: None,
                });
            }
            let numeric = (up - down) / (two * eps);
            let a = grad.data()[e];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn dot_product_gradient_is_exact() {
        // f(p) = pᵀp, gradient 2p
        let p = Tensor::matrix(1, 4, vec![0.3f64, -1.2, 2.0, 0.05]).unwrap();
        let err = finite_diff_check(
            |tape, ids| {
                let rt = tape.transpose(ids[0])?;
                let sq = tape.matmul(ids[0], rt)?;
                Ok(tape.sum_all(sq))
            },
            &[p],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn constant_function_reports_against_floor() {
        let p = Tensor::vector(vec![1.0f64, 2.0]);
        let err = finite_diff_check(
            |tape, ids| {
                let z = tape.scale(ids[0], 0.0);
                Ok(tape.sum_all(z))
            },
            &[p],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
