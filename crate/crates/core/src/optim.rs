//! SGD with momentum, AdamW and the cosine schedule.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum (ignored by AdamW).
    #[serde(default)]
    pub momentum: f64,
    /// AdamW (β1, β2) (ignored by SGD).
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            betas: default_betas(),
            weight_decay,
        }
    }

    pub fn adamw(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            lr,
            momentum: 0.0,
            betas,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("weight decay must be ≥ 0 and momentum in [0, 1)"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Half-cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

struct Slot {
    var: Var,
    m: Option<Tensor>,
    v: Option<Tensor>,
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    slots: Vec<Slot>,
    t: usize,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            slots: vars.into_iter().map(|var| Slot { var, m: None, v: None }).collect(),
            t: 0,
        })
    }

    /// One update at learning rate `lr`. Variables without a gradient are
    /// left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        for s in &mut self.slots {
            // Gradients and parameters carry autograd history; buffers must not.
            let Some(g) = grads.get(s.var.as_tensor()).map(Tensor::detach) else { continue };
            let p = &s.var.as_tensor().detach();
            match c.kind {
                OptimizerKind::Sgd => {
                    let g = if c.weight_decay > 0.0 { (g + (p * c.weight_decay)?)? } else { g };
                    let d = if c.momentum > 0.0 {
                        let buf = match &s.m {
                            Some(b) => ((b * c.momentum)? + &g)?,
                            None => g,
                        };
                        s.m = Some(buf.clone());
                        buf
                    } else {
                        g
                    };
                    s.var.set(&(p - (d * lr)?)?)?;
                }
                OptimizerKind::Adamw => {
                    let (b1, b2) = c.betas;
                    let m = match &s.m {
                        Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                        None => (&g * (1.0 - b1))?,
                    };
                    let v = match &s.v {
                        Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                        None => (g.sqr()? * (1.0 - b2))?,
                    };
                    let mhat = (&m / (1.0 - b1.powi(self.t as i32)))?;
                    let vhat = (&v / (1.0 - b2.powi(self.t as i32)))?;
                    let upd = (mhat / (vhat.sqrt()? + 1e-8)?)?;
                    let decayed = (p * (1.0 - lr * c.weight_decay))?;
                    s.var.set(&(decayed - (upd * lr)?)?)?;
                    s.m = Some(m);
                    s.v = Some(v);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn run(cfg: OptimizerConfig, steps: usize) -> f64 {
        // minimise (x - 3)^2 from x = 0
        let x = Var::new(&[0f64], &Device::Cpu).unwrap();
        let mut opt = Optimizer::new(vec![x.clone()], cfg).unwrap();
        for _ in 0..steps {
            let loss = (x.as_tensor() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), cfg.lr).unwrap();
        }
        x.as_tensor().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn sgd_first_steps_match_hand_values() {
        // g0 = -6 → x1 = 0.6; g1 = -4.8, buf = 0.9·(-6) - 4.8 = -10.2 → x2 = 1.62
        assert!((run(OptimizerConfig::sgd(0.1, 0.9, 0.0), 1) - 0.6).abs() < 1e-12);
        assert!((run(OptimizerConfig::sgd(0.1, 0.9, 0.0), 2) - 1.62).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        // bias-corrected first step moves by lr·sign(−g)
        assert!((run(OptimizerConfig::adamw(0.01, (0.9, 0.999), 0.0), 1) - 0.01).abs() < 1e-6);
        assert!((run(OptimizerConfig::adamw(0.1, (0.9, 0.999), 0.0), 300) - 3.0).abs() < 0.05);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.2, 0, 10), 0.2);
        assert!((cosine_lr(0.2, 5, 10) - 0.1).abs() < 1e-12);
        assert!(cosine_lr(0.2, 10, 10).abs() < 1e-12);
    }
}
