use super::params::{Grads, ParamStore};
use super::tensor::{Real, Tensor};

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.get(id).shape()))
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// and their moments do not decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        for (id, g) in grads.iter() {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.get_mut(id).data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn converges_on_quadratic_bowl() {
        let target = [0.7f64, -1.3, 2.1, 0.05];
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::zeros(&[4])).unwrap();
        let mut opt = Adam::new(&store, 0.05);
        let goal = Tensor::new(vec![4], target.to_vec()).unwrap();
        let mut steps = 0;
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let wv = g.param(w);
                // f(w) = ||w − w*||² = 4·mse
                let l = g.mse(wv, &goal).unwrap();
                g.backward(l).unwrap()
            };
            opt.step(&mut store, &grads);
            steps += 1;
            if store.get(w).max_abs_diff(&goal) < 1e-6 {
                break;
            }
        }
        assert!(store.get(w).max_abs_diff(&goal) < 1e-6, "not converged: {:?}", store.get(w));
        assert!(steps <= 2000);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[3])).unwrap();
        let mut grads = Grads::new(store.len());
        grads.accumulate(a, Tensor::new(vec![3], vec![3.0, 4.0, 12.0]).unwrap());
        let before = grads.clip_global_norm(1.0);
        assert!((before - 13.0).abs() < 1e-12);
        assert!(grads.global_norm() <= 1.0 + 1e-12);
    }
}
