use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// Adam moment buffers and hyperparameters for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter from its gradient buffer.
    /// Gradients are left as they are.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if store.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        if let Some((name, _)) = store.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((_, param), (m, v)) in store
            .iter_mut()
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let grad = param.grad().expect("checked above").to_vec();
            for (((p, g), mi), vi) in param.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Step decay: `base_lr · decay^floor(epoch / period)`.
pub fn lr_schedule(epoch: usize, base_lr: f64, decay: f64, period: usize) -> f64 {
    let drops = epoch / period.max(1);
    base_lr * decay.powi(drops as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store_with(values: &[f64], grad: &[f64]) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(values)).unwrap();
        store.get_mut(id).grad_mut().unwrap().copy_from_slice(grad);
        store
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = store_with(&[1.0, -2.0], &[0.0, 0.0]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.001).unwrap();
        assert_eq!(store.iter().next().unwrap().1.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = store_with(&[0.0], &[1.0]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.001).unwrap();
        let p = store.iter().next().unwrap().1.data()[0];
        assert!((p + 0.001).abs() < 1e-10, "{p}");
    }

    #[test]
    fn constant_gradient_converges_to_unit_step() {
        let mut store = store_with(&[0.0], &[0.37]);
        let mut adam = Adam::new(&store);
        let mut last = 0.0;
        for _ in 0..2000 {
            last = store.iter().next().unwrap().1.data()[0];
            adam.step(&mut store, 0.01).unwrap();
        }
        let now = store.iter().next().unwrap().1.data()[0];
        assert!(((last - now) - 0.01).abs() < 1e-8);
        assert_eq!(adam.steps(), 2000);
    }

    #[test]
    fn zero_lr_is_identity_and_gradients_untouched() {
        let mut store = store_with(&[3.0, 4.0], &[0.5, -0.5]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.0).unwrap();
        let (_, t) = store.iter().next().unwrap();
        assert_eq!(t.data(), &[3.0, 4.0]);
        assert_eq!(t.grad().unwrap(), &[0.5, -0.5]);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let store = store_with(&[1.0], &[1.0]);
        let mut adam = Adam::new(&store);
        let mut other = ParamStore::new();
        other.add("p", Tensor::vector(&[1.0])).unwrap();
        other.add("q", Tensor::vector(&[1.0])).unwrap();
        assert!(matches!(adam.step(&mut other, 0.1), Err(Error::Contract(_))));
        let mut s = store.clone();
        assert!(adam.step(&mut s, -1.0).is_err());
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, 0.001, 0.1, 25), 0.001);
        assert!((lr_schedule(24, 0.001, 0.1, 25) - 0.001).abs() < 1e-18);
        assert!((lr_schedule(25, 0.001, 0.1, 25) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(75, 0.001, 0.1, 25) - 1e-6).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for e in 0..200 {
            let lr = lr_schedule(e, 0.001, 0.1, 25);
            assert!(lr <= prev);
            assert_eq!(lr, lr_schedule(e - e % 25, 0.001, 0.1, 25));
            prev = lr;
        }
    }
}
