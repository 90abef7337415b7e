use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction. Moment buffers are created on the first step.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam", format!("{} params, {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![S::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("adam", "parameter list changed between steps"));
        }
        self.t += 1;
        let f = S::from_f64_lossy;
        let (b1, b2) = (f(self.beta1), f(self.beta2));
        let (c1, c2) = (f(1.0 - self.beta1.powi(self.t)), f(1.0 - self.beta2.powi(self.t)));
        let (lr, eps, one) = (f(self.lr), f(self.eps), S::one());
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != g.len() {
                return Err(Error::shape("adam", format!("param {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + (one - b1) * gj;
                *vj = b2 * *vj + (one - b2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !p.is_finite() {
                return Err(Error::Diverged(format!("parameter {i} became non-finite after step {}", self.t)));
            }
        }
        Ok(())
    }
}
