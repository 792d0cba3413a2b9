use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::real::Real;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            step: 0,
            m: params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every tensor in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(shape_err("adam_step", "gradient count differs from parameter count"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if g.len() != p.len() {
                return Err(shape_err("adam_step", "gradient length differs from tensor"));
            }
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = gi.as_f64();
                let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
                *mi = T::of(mf);
                *vi = T::of(vf);
                let update = cfg.lr * (mf / c1) / ((vf / c2).sqrt() + cfg.eps);
                *x = T::of(x.as_f64() - update);
            }
        }
        Ok(())
    }
}
