use super::{Graph, NodeId, Precision, Result, Tensor, TensorError};

/// Compares tape gradients against central finite differences.
///
/// `build` records a scalar loss on a fresh 64-bit graph given the parameter
/// leaves. Returns the maximum over all entries of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let ids: Vec<NodeId> = ps.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new(Precision::F64);
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("leaf gradient").data().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = probe[pi].data()[k];
            probe[pi].data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite { param: pi, entry: k });
            }
            let numeric = (up - down) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::row(vec![0.3, -1.2, 2.0]);
        let err = grad_check(
            |g, ps| {
                let s = g.square(ps[0])?;
                let s = g.scale(s, 0.5)?;
                g.sum(s)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_loss_reports_parameter() {
        let p = Tensor::row(vec![1.0, 1e-6]);
        let err = grad_check(
            |g, ps| {
                let l = g.ln(ps[0])?;
                g.sum(l)
            },
            &[p],
            1e-5,
        )
        .unwrap_err();
        assert_eq!(err, TensorError::NonFinite { param: 0, entry: 1 });
    }

    #[test]
    fn rejects_non_positive_eps() {
        assert!(grad_check(|g, ps| g.sum(ps[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
