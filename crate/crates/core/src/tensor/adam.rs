use super::{Gradients, ParamStore, Scalar};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one = T::one();
        let corr1 = T::from_f64(1.0 - self.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (id, g) in grads.iter() {
            if !params.entry(id).trainable {
                continue;
            }
            let i = id.index();
            let p = &mut params.get_mut(id).data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.is_empty() {
                *m = vec![T::zero(); p.len()];
                *v = vec![T::zero(); p.len()];
            }
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = ParamStore::<f64>::new();
        let id = params.add("w", Tensor::scalar(0.0), true);
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &[1.0]);
        let mut adam = Adam::new(5e-4);
        adam.step(&mut params, &grads);
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + ε)
        let expected = -5e-4 / (1.0 + 1e-8);
        assert!((params.get(id).data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = ParamStore::<f64>::new();
        let id = params.add("w", Tensor::filled(vec![3], 0.7), true);
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &[0.0; 3]);
        Adam::new(1e-2).step(&mut params, &grads);
        assert_eq!(params.get(id).data, vec![0.7; 3]);
    }

    #[test]
    fn groups_update_independently() {
        let mut params = ParamStore::<f64>::new();
        let a = params.add("a", Tensor::scalar(1.0), true);
        let b = params.add("b", Tensor::scalar(1.0), true);
        let buffer = params.add("running", Tensor::scalar(1.0), false);
        let mut grads = Gradients::new(3);
        grads.accumulate(a, &[2.0]);
        grads.accumulate(buffer, &[2.0]);
        Adam::new(0.1).step(&mut params, &grads);
        assert!(params.get(a).data[0] < 1.0);
        assert_eq!(params.get(b).data[0], 1.0);
        assert_eq!(params.get(buffer).data[0], 1.0);
    }
}
