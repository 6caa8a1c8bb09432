use std::collections::BTreeMap;

use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction; moment estimates keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, grads: &BTreeMap<String, Tensor>, visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor))) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let lr = self.lr;
        let (ms, vs) = (&mut self.m, &mut self.v);
        visit(&mut |name: &str, p: &mut Tensor| {
            let Some(g) = grads.get(name) else { return };
            let m = ms.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = vs.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        });
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let grads = BTreeMap::from([("p".to_string(), Tensor::new(&[2], vec![0.3, -7.0]).unwrap())]);
        let mut adam = Adam::new(0.01);
        adam.step(&grads, |f| f("p", &mut p));
        // With bias correction the first update is lr * sign(g).
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::new(&[1], vec![3.0]).unwrap();
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let grads = BTreeMap::from([("p".to_string(), p.map(|v| 2.0 * (v - 1.0)))]);
            adam.step(&grads, |f| f("p", &mut p));
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::new(&[1], vec![30.0]).unwrap()),
            ("b".to_string(), Tensor::new(&[1], vec![40.0]).unwrap()),
        ]);
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert!((g["a"].data()[0] - 6.0).abs() < 1e-12);
        assert!((g["b"].data()[0] - 8.0).abs() < 1e-12);
        let before = g.clone();
        clip_global_norm(&mut g, 10.0 + 1e-9);
        assert_eq!(g, before);
    }
}
