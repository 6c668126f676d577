//! Adaptive moment estimation, aligned with a [`ParamSet`]. Frozen
//! parameters are skipped entirely; their moment slots stay zero.

use crate::nn::{Bound, ParamSet};
use crate::autograd::Grads;
use crate::tensor::{Scalar, Tensor};

pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u32,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamSet<S>, lr: f64) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.get_by_index(i).shape()))
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(params.get_by_index(i).shape()))
            .collect();
        Adam {
            lr: S::from_f64(lr),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update from the grads of a bound forward pass.
    pub fn step(&mut self, params: &mut ParamSet<S>, bound: &Bound<S>, grads: &Grads<S>) {
        self.step += 1;
        let bc1 = S::one() - self.beta1.powi(self.step as i32);
        let bc2 = S::one() - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if !params.is_trainable(i) {
                continue;
            }
            let var = bound.var_by_index(i);
            if !grads.has(var) {
                continue;
            }
            let g = grads.wrt(var);
            let mut p = params.get_by_index(i).clone();
            let pm = self.m[i].data_mut();
            let pv = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                pm[j] = self.beta1 * pm[j] + (S::one() - self.beta1) * gj;
                pv[j] = self.beta2 * pv[j] + (S::one() - self.beta2) * gj * gj;
                let mhat = pm[j] / bc1;
                let vhat = pv[j] / bc2;
                pd[j] = pd[j] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            params.set_by_index(i, p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::rng::substream;
    use crate::nn::init_normal;

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut ps = ParamSet::<f32>::new();
        let w = ps.register("w", init_normal(&[4], 1.0, &mut substream(3, "w")));
        let mut opt = Adam::new(&ps, 0.1);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let tape = Tape::new();
            let bound = ps.bind(&tape);
            let loss = bound.var(w).mul(bound.var(w)).sum();
            last = loss.value().item();
            first.get_or_insert(last);
            let grads = loss.backward();
            opt.step(&mut ps, &bound, &grads);
        }
        assert!(last < first.unwrap() * 0.05, "{} -> {}", first.unwrap(), last);
    }

    #[test]
    fn frozen_params_never_move() {
        let mut ps = ParamSet::<f32>::new();
        let a = ps.register("frozen.w", init_normal(&[3], 1.0, &mut substream(4, "a")));
        let b = ps.register("free.w", init_normal(&[3], 1.0, &mut substream(5, "b")));
        ps.set_trainable_where(|n| n.starts_with("free"));
        let before = ps.get(a).clone();
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..5 {
            let tape = Tape::new();
            let bound = ps.bind(&tape);
            let loss = bound.var(a).mul(bound.var(b)).sum();
            let grads = loss.backward();
            opt.step(&mut ps, &bound, &grads);
        }
        assert_eq!(before.content_hash(), ps.get(a).content_hash());
        assert_ne!(before.content_hash(), ps.get(b).content_hash());
    }
}
