//! Adam and gradient accumulation over a [`ParamStore`].

use crate::model::{Bound, ParamStore};
use crate::numerics::Tape;

/// Per-parameter gradients; `None` for parameters that received none.
pub type Grads = Vec<Option<Vec<f64>>>;

pub fn collect_grads(tape: &Tape, bound: &Bound) -> Grads {
    bound
        .vars()
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
        .collect()
}

/// Adds `scale * g` into `acc`, allocating slots on first use.
pub fn accumulate(acc: &mut Grads, g: &Grads, scale: f64) {
    if acc.len() < g.len() {
        acc.resize(g.len(), None);
    }
    for (a, g) in acc.iter_mut().zip(g) {
        if let Some(g) = g {
            let slot = a.get_or_insert_with(|| vec![0.0; g.len()]);
            for (s, x) in slot.iter_mut().zip(g) {
                *s += scale * x;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let n = store.len();
        if self.m.len() < n {
            let sizes: Vec<usize> = store.tensors().iter().map(|t| t.len()).collect();
            for &s in &sizes[self.m.len()..] {
                self.m.push(vec![0.0; s]);
                self.v.push(vec![0.0; s]);
            }
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::default();
        let id = s.add("w", Tensor::vector(&[1.0, -2.0, 0.5]));
        let mut opt = Adam::default();
        opt.step(&mut s, &vec![Some(vec![3.0, -0.5, 0.0])], 0.1);
        let p = s.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] + 1.9).abs() < 1e-8);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut s = ParamStore::default();
        s.add("w", Tensor::vector(&[1.0, -2.0]));
        let before = s.clone();
        Adam::default().step(&mut s, &vec![Some(vec![1.0, 1.0])], 0.0);
        assert_eq!(s, before);
    }

    #[test]
    fn accumulate_scales_and_sums() {
        let mut acc = Grads::new();
        accumulate(&mut acc, &vec![Some(vec![1.0, 2.0]), None], 0.5);
        accumulate(&mut acc, &vec![Some(vec![1.0, 0.0]), Some(vec![4.0])], 1.0);
        assert_eq!(acc, vec![Some(vec![1.5, 1.0]), Some(vec![4.0])]);
    }
}
