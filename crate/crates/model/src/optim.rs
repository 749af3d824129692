//! Adam with global-norm gradient clipping.

use crate::params::Params;
use ndarray::ArrayD;
use std::collections::BTreeMap;

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
    pub t: usize,
}

impl Adam {
    pub fn new() -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Scale gradients so their global L2 norm is at most `max_norm`;
    /// returns the pre-clip norm.
    pub fn clip_global_norm(grads: &mut BTreeMap<String, ArrayD<f64>>, max_norm: f64) -> f64 {
        let norm: f64 = grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x * s);
            }
        }
        norm
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, ArrayD<f64>>, lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let mut new = params.p(&name).to_array();
            ndarray::Zip::from(&mut new)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / b1t;
                    let vhat = vi / b2t;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                });
            params.set(&name, new);
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use niles_autodiff::DType;

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut params = Params::new(DType::F64);
        params.insert("x", ArrayD::from_elem(ndarray::IxDyn(&[3]), 2.0));
        let mut opt = Adam::new();
        let loss_of = |p: &Params| -> f64 { p.p("x").value().iter().map(|v| v * v).sum() };
        let start = loss_of(&params);
        for _ in 0..200 {
            let g: ArrayD<f64> = params.p("x").to_array().mapv(|v| 2.0 * v);
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), g);
            opt.step(&mut params, &grads, 0.05);
        }
        assert!(loss_of(&params) < 0.01 * start);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), ArrayD::from_elem(ndarray::IxDyn(&[4]), 3.0));
        grads.insert("b".to_string(), ArrayD::from_elem(ndarray::IxDyn(&[9]), -2.0));
        let pre = Adam::clip_global_norm(&mut grads, 1.0);
        assert!(pre > 1.0);
        let post: f64 = grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((post - 1.0).abs() < 1e-12);
    }
}
