//! AdamW over the model's named-tensor registry.
//!
//! Moment buffers reuse the `ModelParams` container so every tensor is
//! visited in the same fixed order as checkpointing and gradient checks.
//! Weight decay is decoupled (applied directly to the parameter, not mixed
//! into the moments) and skipped for biases, learned start constants, rotary
//! frequencies, and mixing logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid_argument("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid_argument("betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid_argument("eps must be positive, weight decay ≥ 0"));
        }
        Ok(())
    }
}

/// Tensors that represent offsets or scalar knobs are excluded from decay;
/// pulling them toward zero has no regularizing interpretation here.
fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(leaf.starts_with("b_")
        || leaf.starts_with("unfold_b")
        || leaf == "final_ada_b"
        || leaf == "z0"
        || leaf == "pos0"
        || leaf == "rope_freqs"
        || leaf == "mix_logits")
}

/// AdamW state: step count plus first/second moment buffers.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: u64,
    m: ModelParams<F>,
    v: ModelParams<F>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(model: &ModelConfig, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW { config, step: 0, m: ModelParams::zeros(model)?, v: ModelParams::zeros(model)? })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update:
    /// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let b1 = F::from_f64(c.beta1);
        let b2 = F::from_f64(c.beta2);
        let one = F::one();
        let lr = F::from_f64(c.lr);
        let eps = F::from_f64(c.eps);
        let corr1 = F::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let corr2 = F::from_f64(1.0 - c.beta2.powi(self.step as i32));

        let mut p_t = params.tensors_mut();
        let g_t = grads.tensors();
        let mut m_t = self.m.tensors_mut();
        let mut v_t = self.v.tensors_mut();
        for i in 0..p_t.len() {
            debug_assert_eq!(p_t[i].0, g_t[i].0);
            let wd = if decays(&p_t[i].0) { F::from_f64(c.weight_decay) } else { F::zero() };
            let p = &mut p_t[i].1.data;
            let g = &g_t[i].1.data;
            if p.len() != g.len() {
                return Err(Error::invalid_state(format!(
                    "gradient shape mismatch on {}",
                    p_t[i].0
                )));
            }
            let m = &mut m_t[i].1.data;
            let v = &mut v_t[i].1.data;
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                let theta = p[j];
                p[j] = theta - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::RatioTag;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            vocab: 3,
            classes: 2,
            embed_dim: 4,
            mlp_factor: 2,
            mix_layers: 1,
            ratio: RatioTag::X2,
            side: 2,
        }
    }

    #[test]
    fn config_validation() {
        assert!(AdamWConfig::default().validate().is_ok());
        assert!(AdamWConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { weight_decay: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn single_step_matches_hand_formula() {
        let mc = tiny_config();
        let mut params: ModelParams<f64> = ModelParams::init(&mc, 3).unwrap();
        let theta = params.embed.get(0, 0);
        let mut grads: ModelParams<f64> = ModelParams::zeros(&mc).unwrap();
        let g = 0.25;
        grads.embed.set(0, 0, g);

        let cfg = AdamWConfig::default();
        let mut opt: AdamW<f64> = AdamW::new(&mc, cfg.clone()).unwrap();
        opt.step(&mut params, &grads).unwrap();

        // After one step the bias corrections cancel: m̂ = g, v̂ = g².
        let expected = theta - cfg.lr * (g / (g.abs() + cfg.eps) + cfg.weight_decay * theta);
        assert!((params.embed.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_applies_only_decay() {
        let mc = tiny_config();
        let mut params: ModelParams<f64> = ModelParams::init(&mc, 4).unwrap();
        let freqs_before = params.rope_freqs.clone();
        let z0_before = params.z0.clone();
        let embed_before = params.embed.clone();
        let grads: ModelParams<f64> = ModelParams::zeros(&mc).unwrap();
        let mut opt: AdamW<f64> = AdamW::new(&mc, AdamWConfig::default()).unwrap();
        opt.step(&mut params, &grads).unwrap();

        // Undecayed tensors are untouched by a zero gradient.
        assert_eq!(params.rope_freqs, freqs_before);
        assert_eq!(params.z0, z0_before);
        // Decayed matrices shrink by exactly lr·wd.
        for (a, b) in params.embed.data.iter().zip(&embed_before.data) {
            assert!((a - b * (1.0 - 1e-4 * 0.01)).abs() < 1e-15);
        }
    }

    #[test]
    fn descends_a_quadratic_proxy() {
        // Repeated steps against the gradient of ½‖θ‖² shrink the tensor.
        let mc = tiny_config();
        let mut params: ModelParams<f64> = ModelParams::init(&mc, 5).unwrap();
        let mut opt: AdamW<f64> =
            AdamW::new(&mc, AdamWConfig { lr: 0.05, ..Default::default() }).unwrap();
        for _ in 0..200 {
            let mut grads: ModelParams<f64> = ModelParams::zeros(&mc).unwrap();
            grads.unfold_w1 = params.unfold_w1.clone();
            opt.step(&mut params, &grads).unwrap();
        }
        let after: f64 = params.unfold_w1.data.iter().map(|v| v * v).sum();
        assert!(after < 1e-4, "quadratic proxy did not shrink: {after}");
    }
}
