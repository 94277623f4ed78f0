use super::{ParamStore, Precision, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over a [`ParamStore`]. Adam keeps one pair of
/// moment tensors per parameter, shaped like the parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub learning_rate: f64,
    /// L2 penalty added to every gradient; zero disables it.
    pub weight_decay: f64,
    precision: Precision,
    step_count: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParamStore, precision: Precision) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => {
                let z: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
                (z.clone(), z)
            }
        };
        Self {
            kind,
            learning_rate,
            weight_decay: 0.0,
            precision,
            step_count: 0,
            first,
            second,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Restores moments and step count saved from an earlier run.
    pub fn restore(&mut self, step_count: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<()> {
        if matches!(self.kind, OptimizerKind::Adam { .. }) {
            let ok = first.len() == self.first.len()
                && second.len() == self.second.len()
                && first.iter().zip(&self.first).all(|(a, b)| a.shape() == b.shape())
                && second.iter().zip(&self.second).all(|(a, b)| a.shape() == b.shape());
            if !ok {
                return Err(TensorError::InvalidState("adam moments do not match parameters".into()));
            }
            self.first = first;
            self.second = second;
        }
        self.step_count = step_count;
        Ok(())
    }

    /// Applies one update. `grads` is indexed like the parameter store.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TensorError::InvalidState(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            let Some(g) = g else {
                return Err(TensorError::InvalidState(format!(
                    "missing gradient for {}",
                    params.name(id)
                )));
            };
            if g.shape() != params.get(id).shape() {
                return Err(TensorError::InvalidState(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    params.name(id),
                    g.shape(),
                    params.get(id).shape()
                )));
            }
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        let prec = self.precision;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in params.ids().zip(grads) {
                    let g = g.as_ref().expect("checked");
                    let p = params.get_mut(id);
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        let gv = gv + wd * *pv;
                        *pv = prec.round(*pv - lr * gv);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (id, g) in params.ids().zip(grads) {
                    let g = g.as_ref().expect("checked");
                    let k = id.index();
                    let p = params.get_mut(id);
                    let m = self.first[k].data_mut();
                    let v = self.second[k].data_mut();
                    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        let gv = gv + wd * *pv;
                        *mv = prec.round(beta1 * *mv + (1.0 - beta1) * gv);
                        *vv = prec.round(beta2 * *vv + (1.0 - beta2) * gv * gv);
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv = prec.round(*pv - lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("p", Tensor::scalar(value));
        ps
    }

    #[test]
    fn sgd_definition() {
        let mut ps = single(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &ps, Precision::F64);
        opt.step(&mut ps, &[Some(Tensor::scalar(1.0))]).unwrap();
        assert!((ps.tensors()[0].item() - 0.9).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = single(0.0);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3, &ps, Precision::F64);
        opt.step(&mut ps, &[Some(Tensor::scalar(1.0))]).unwrap();
        // mhat = 1, vhat = 1 on the first step
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((ps.tensors()[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut ps = single(0.25);
            let mut opt = Optimizer::new(kind, 0.1, &ps, Precision::F64);
            for _ in 0..3 {
                opt.step(&mut ps, &[Some(Tensor::scalar(0.0))]).unwrap();
            }
            assert_eq!(ps.tensors()[0].item(), 0.25);
        }
    }

    #[test]
    fn missing_gradient_is_invalid_state() {
        let mut ps = single(0.25);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1, &ps, Precision::F64);
        assert!(matches!(opt.step(&mut ps, &[None]), Err(TensorError::InvalidState(_))));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn moments_mirror_parameter_shapes() {
        let mut ps = ParamStore::new();
        ps.add("a", Tensor::zeros(&[3, 2]));
        ps.add("b", Tensor::zeros(&[1, 4]));
        let adam = Optimizer::new(OptimizerKind::adam(), 0.1, &ps, Precision::F64);
        let (m, v) = adam.moments();
        assert_eq!(m[0].shape(), &[3, 2]);
        assert_eq!(v[1].shape(), &[1, 4]);
        let sgd = Optimizer::new(OptimizerKind::Sgd, 0.1, &ps, Precision::F64);
        assert!(sgd.moments().0.is_empty());
    }
}
