use std::f64::consts::PI;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Cosine annealing from `lr0` at step 0 to 0 at step `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Contract("cosine schedule needs at least one step".into()));
    }
    if step > total {
        return Err(Error::Contract(format!("step {step} beyond schedule length {total}")));
    }
    if step == total {
        return Ok(0.0);
    }
    Ok(0.5 * lr0 * (1.0 + (PI * step as f64 / total as f64).cos()))
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v <- m v + (g + wd p)`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Array2<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Array2<f64>>,
        grads: impl IntoIterator<Item = &'a Array2<f64>>,
        lr: f64,
    ) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        let grads: Vec<_> = grads.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.dim() != g.dim() {
                return Err(Error::Contract(format!(
                    "shape mismatch at parameter {i}: {:?} vs {:?}",
                    p.dim(),
                    g.dim()
                )));
            }
            if let Some(v) = self.velocity.get(i) {
                if v.dim() != p.dim() {
                    return Err(Error::Contract(format!("parameter {i} changed shape between steps")));
                }
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        } else if self.velocity.len() != params.len() {
            return Err(Error::Contract("parameter count changed between steps".into()));
        }
        let (m, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            v.mapv_inplace(|x| x * m);
            v.scaled_add(1.0, g);
            v.scaled_add(wd, p);
            p.scaled_add(-lr, v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1.6).unwrap(), 1.6);
        assert_eq!(cosine_lr(10, 10, 1.6).unwrap(), 0.0);
        assert!((cosine_lr(5, 10, 1.6).unwrap() - 0.8).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 1.0).is_err());
        assert!(cosine_lr(11, 10, 1.0).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let lrs: Vec<f64> = (0..=97).map(|t| cosine_lr(t, 97, 0.2).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = array![[1.0, -2.0]];
        let g = array![[0.0, 0.0]];
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step([&mut p], [&g], 0.5).unwrap();
        assert_eq!(p, array![[1.0, -2.0]]);
    }

    #[test]
    fn plain_step() {
        let mut p = array![[1.0, -2.0]];
        let g = array![[0.25, 0.5]];
        Sgd::new(0.0, 0.0).step([&mut p], [&g], 1.0).unwrap();
        assert_eq!(p, array![[0.75, -2.5]]);
    }

    #[test]
    fn momentum_unrolls() {
        let mut p = array![[0.0]];
        let g = array![[1.0]];
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step([&mut p], [&g], 1.0).unwrap();
        opt.step([&mut p], [&g], 1.0).unwrap();
        assert!((p[[0, 0]] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = array![[2.0]];
        let g = array![[0.0]];
        Sgd::new(0.0, 0.1).step([&mut p], [&g], 1.0).unwrap();
        assert!((p[[0, 0]] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = array![[0.0, 1.0]];
        let g = array![[1.0]];
        assert!(Sgd::new(0.9, 0.0).step([&mut p], [&g], 1.0).is_err());
    }
}
