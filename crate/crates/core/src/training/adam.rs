use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Bias-corrected Adam with moments kept per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restore saved moments, checking that they line up with the store.
    pub fn restore(store: &ParamStore<T>, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        let mut adam = Adam::new(store);
        if m.len() != adam.m.len() || v.len() != adam.v.len() {
            return Err(Error::data(format!("optimizer state has {} moments for {} parameters", m.len(), adam.m.len())));
        }
        for ((a, b), z) in m.iter().zip(&v).zip(&adam.m) {
            if a.shape() != z.shape() || b.shape() != z.shape() {
                return Err(Error::ShapeMismatch { op: "adam moments", left: a.shape(), right: z.shape() });
            }
        }
        adam.step = step;
        adam.m = m;
        adam.v = v;
        Ok(adam)
    }

    /// Apply one update from the gradients accumulated in `store`.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (nb1, nb2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (value, grad) = store.value_and_grad(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *mi = b1 * *mi + nb1 * g;
                *vi = b2 * *vi + nb2 * g * g;
                *p = *p - step * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar_store(x: f64) -> (ParamStore<f64>, crate::autodiff::ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("x", Tensor::full(Shape::new(1, 1, 1, 1), x)).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        s.grad_mut(id).fill(3.0);
        let mut adam = Adam::new(&s);
        adam.update(&mut s, 0.01);
        assert!((s.value(id).data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut s, id) = scalar_store(0.7);
        let mut adam = Adam::new(&s);
        adam.update(&mut s, 0.1);
        assert_eq!(s.value(id).data()[0], 0.7);
    }

    #[test]
    fn minimizes_a_parabola() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(&s);
        for _ in 0..50 {
            let x = s.value(id).data()[0];
            s.grad_mut(id).fill(2.0 * x);
            adam.update(&mut s, 0.1);
        }
        assert!(s.value(id).data()[0].abs() < 0.2);
    }
}
