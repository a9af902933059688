use super::{Graph, KernelError, NodeId, Tensor};

/// Analytic vs. central-difference gradients for a set of parameters.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub max_rel_error: f64,
    /// `(parameter, entry)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the gradient of the scalar built by `build` against central
/// differences with step `eps`.
///
/// `build` receives a fresh graph and one trainable node per entry of
/// `params`, and returns the loss node. It is called once for the analytic
/// pass and twice per parameter entry for the numeric pass, so anything it
/// selects (mined indices, sampled pairs) must be fixed outside of it.
pub fn grad_check<F, E>(build: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradReport, E>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, E>,
    E: From<KernelError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(KernelError::Step(eps).into());
    }
    let eval = |ps: &[Tensor]| -> Result<f64, E> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.get_or_zeros(id, p))
        .collect();

    let mut work = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    for p in 0..params.len() {
        let mut num = vec![0.0; params[p].len()];
        for (k, slot) in num.iter_mut().enumerate() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[p].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[p].data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[p].data()[k], *slot);
            if err > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(err);
                worst = Some((p, k));
            }
        }
        numeric.push(Tensor::raw(params[p].rows(), params[p].cols(), num));
    }
    Ok(GradReport {
        analytic,
        numeric,
        max_rel_error,
        worst,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::OpKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_squared_loss_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 5, 3);
        let target = random(&mut rng, 5, 2);
        let params = vec![random(&mut rng, 3, 2), random(&mut rng, 1, 2)];
        let report: GradReport = grad_check(
            |g: &mut Graph, p: &[NodeId]| -> Result<NodeId, KernelError> {
                let xi = g.constant(x.clone());
                let t = g.constant(target.clone());
                let y = g.affine(xi, p[0], p[1])?;
                let neg = g.scale_shift(t, -1.0, 0.0)?;
                let r = g.add(y, neg)?;
                let sq = g.mul(r, r)?;
                g.mean(sq)
            },
            &params,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn step_outside_range_rejected() {
        let r: Result<_, KernelError> = grad_check(|g, p| g.sum(p[0]), &[Tensor::scalar(1.0)], 1e-2, 1e-4);
        assert!(matches!(r, Err(KernelError::Step(_))));
    }

    #[test]
    fn every_op_passes_in_isolation() {
        for kind in OpKind::DIFFERENTIABLE {
            let report = crate::gradcheck::check_op(kind, 7, None).unwrap();
            assert!(report.passed(), "{kind}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn injected_sign_fault_is_caught() {
        for kind in OpKind::DIFFERENTIABLE {
            let report = crate::gradcheck::check_op(kind, 7, Some(kind)).unwrap();
            assert!(!report.passed(), "fault in {kind} went unnoticed");
        }
    }
}
