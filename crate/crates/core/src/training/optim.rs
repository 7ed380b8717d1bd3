use crate::model::{Grads, ParamStore};
use crate::tensor::Elem;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<E> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<Option<(Vec<E>, Vec<E>)>>,
}

impl<E: Elem> Adam<E> {
    pub fn new(num_tensors: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            moments: (0..num_tensors).map(|_| None).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every tensor that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<E>, grads: &Grads<E>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (E::cst(self.beta1), E::cst(self.beta2));
        let (one_b1, one_b2) = (E::one() - b1, E::one() - b2);
        let step = E::cst(lr * bc2.sqrt() / bc1);
        let eps = E::cst(self.eps * bc2.sqrt());
        for (id, g) in grads.iter() {
            let n = g.numel();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![E::zero(); n], vec![E::zero(); n]));
            let p = params.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm<E: Elem>(grads: &mut Grads<E>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(E::cst(max_norm / norm));
    }
    norm
}
