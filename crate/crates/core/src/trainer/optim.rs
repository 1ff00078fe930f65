use serde::{Deserialize, Serialize};

use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear warm-up from 0 to `peak_lr` over the first `warmup_ratio` of the
/// run, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_ratio: f64, peak_lr: f64) -> f64 {
    let total = total_steps.max(1);
    if step >= total {
        return 0.0;
    }
    let warmup = (warmup_ratio * total as f64).round() as usize;
    if step < warmup {
        peak_lr * step as f64 / warmup as f64
    } else {
        peak_lr * (total - step) as f64 / (total - warmup) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + eps) + λ·θ)`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// State for parameter tensors of the given sizes.
    pub fn new(cfg: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { cfg, t: 0, m, v }
    }

    pub fn for_model(cfg: AdamWConfig, params: &ModelParams<Tensor>) -> Self {
        Self::new(cfg, params.named().iter().map(|(_, t)| t.len()))
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every slot. Nothing is modified when a gradient is not
    /// finite or a size disagrees with the optimizer state.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        self.check(grads.iter().copied().enumerate().map(|(i, g)| (i.to_string(), g)))?;
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: vec![self.m[i].len()],
                    rhs: vec![p.len()],
                });
            }
        }
        self.t += 1;
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, p, grads[i], lr);
        }
        Ok(())
    }

    /// [`AdamW::step`] over a model's parameters, with `grads` in
    /// [`ModelParams::named`] order.
    pub fn step_model(&mut self, params: &mut ModelParams<Tensor>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let named = params.named();
        if named.len() != grads.len() || named.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adamw",
                lhs: vec![self.m.len()],
                rhs: vec![grads.len()],
            });
        }
        for ((name, t), g) in named.iter().zip(grads) {
            if t.len() != g.len() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: vec![t.len()],
                    found: vec![g.len()],
                });
            }
        }
        self.check(named.into_iter().map(|(n, _)| n).zip(grads.iter().map(Vec::as_slice)))?;
        self.t += 1;
        let mut i = 0;
        params.for_each_mut(|_, t| {
            self.update(i, t.data_mut(), &grads[i], lr);
            i += 1;
        });
        Ok(())
    }

    fn check<'a>(&self, grads: impl Iterator<Item = (String, &'a [f64])>) -> Result<()> {
        for (name, g) in grads {
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    step: self.t as usize,
                    detail: format!("non-finite gradient {} for {name}[{k}]", g[k]),
                });
            }
        }
        Ok(())
    }

    fn update(&mut self, i: usize, p: &mut [f64], g: &[f64], lr: f64) {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.t as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p[k]);
        }
    }
}
