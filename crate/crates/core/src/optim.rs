//! Optimizers for dense weights. Masks use their own straight-through
//! update in [`crate::masking`].

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::Params;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent, `w <- w - lr * g`.
pub fn sgd_step(params: &mut Params, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        p.data_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(w, gi)| *w -= lr * gi);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Params::new();
        p.insert("w", Tensor::vector(vec![1.0, -1.0]).unwrap());
        let grads = BTreeMap::from([("w".to_string(), vec![0.5, -2.0])]);
        Adam::new(0.1).step(&mut p, &grads).unwrap();
        let w = p.get("w").unwrap().data();
        assert!(
            (w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6,
            "{w:?}"
        );
    }

    #[test]
    fn sgd_is_plain_descent() {
        let mut p = Params::new();
        p.insert("w", Tensor::vector(vec![1.0]).unwrap());
        let grads = BTreeMap::from([("w".to_string(), vec![2.0])]);
        sgd_step(&mut p, &grads, 0.25).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5]);
    }
}
