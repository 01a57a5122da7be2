use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled-weight-decay Adam. Moment buffers are created on the first
/// step and must keep matching the parameter list afterwards.
#[derive(Clone, Debug)]
pub struct AdamW<S: Scalar = f32> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adamw", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::shape("adamw state", &[self.m.len()], &[params.len()]));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = S::lit(c.lr);
        let decay = S::lit(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = S::lit(1.0 - c.beta1.powi(t));
        let bc2 = S::lit(1.0 - c.beta2.powi(t));
        let eps = S::lit(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                pd[i] = pd[i] * decay;
                md[i] = b1 * md[i] + (S::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (S::one() - b2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] = pd[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let orig = p.clone();
        let g = Tensor::zeros(&[3]);
        let cfg = AdamWConfig::with_lr(0.1);
        let mut opt = AdamW::new(cfg);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        for (a, b) in p.data().iter().zip(orig.data()) {
            assert!((a - b * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Tensor::<f32>::new(&[2], vec![0.3, -0.7]).unwrap();
        let orig = p.clone();
        let g = Tensor::new(&[2], vec![5.0, -1.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.0));
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn one_step_matches_reference_formula() {
        // reference: p=1, g=1, lr=1e-3, wd=0.01, b1=0.9, b2=0.999, eps=1e-8
        let (lr, wd, b1, b2, eps) = (1e-3f64, 0.01, 0.9, 0.999, 1e-8);
        let mut want = 1.0f64;
        want *= 1.0 - lr * wd;
        let m = (1.0 - b1) * 1.0;
        let v = (1.0 - b2) * 1.0;
        let mh = m / (1.0 - b1);
        let vh: f64 = v / (1.0 - b2);
        want -= lr * mh / (vh.sqrt() + eps);

        let mut p = Tensor::<f64>::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::with_lr(lr));
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.item() - want).abs() < 1e-15, "{} vs {want}", p.item());
        // frozen: 1 - 1e-5 - 1e-3 * 1/(1+1e-8)
        assert!((p.item() - 0.998_990_000_01).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.step(&mut [&mut p], &[&g]).is_err());
    }
}
