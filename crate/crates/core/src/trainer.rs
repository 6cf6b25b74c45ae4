//! Joint optimization of the denoiser, style encoder, and prompt tokens
//! under `denoise_mse + lambda * KL`, with per-step loss records.

use std::path::Path;

use candle_core::Tensor;
use candle_nn::Optimizer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, RngState};
use crate::config::seed_rng;
use crate::error::{Error, Result};
use crate::model::StyleDiffusion;
use crate::nn::batch_to_tensor;
use crate::schedule::{q_sample, v_target, Image};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// KL regularization weight (lambda).
    pub lambda_kl: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub weight_decay: f64,
    /// Record a TrainRecord every `log_every` steps (1 = every step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_kl: 1e-3,
            batch_size: 16,
            lr: 1e-4,
            max_steps: 2000,
            weight_decay: 0.01,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_kl < 0.0 {
            return Err(Error::config("lambda_kl", "must be >= 0"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be >= 1"));
        }
        Ok(())
    }
}

/// One logged training step; `total = denoise + lambda * kl` by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub total: f64,
    pub denoise: f64,
    pub kl: f64,
}

/// A training example: standardized image plus its registered prompt id.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image: Image,
    pub prompt_id: String,
}

pub struct LossParts {
    /// Differentiable total loss (graph root).
    pub total_t: Tensor,
    pub total: f64,
    pub denoise: f64,
    pub kl: f64,
}

/// Reparameterized style sample on tensors: `s = mu + exp(log_sigma) * eps`.
pub fn reparam_sample(mu: &Tensor, log_sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok((mu + log_sigma.exp()?.mul(eps)?)?)
}

/// Per-batch mean KL to N(0, I) on tensors:
/// `mean_b sum_d 0.5 (mu^2 + sigma^2 - 1 - 2 log sigma)`.
pub fn kl_tensor(mu: &Tensor, log_sigma: &Tensor) -> Result<Tensor> {
    let sigma2 = (log_sigma * 2.0)?.exp()?;
    let per = ((mu.sqr()? + sigma2)? - 1.0)?.sub(&(log_sigma * 2.0)?)?;
    Ok((per.sum(1)? * 0.5)?.mean_all()?)
}

/// One loss evaluation over a batch. Draws per-sample `t`, image noise, and
/// style noise from `rng`; forms the noised input and the velocity target
/// with the closed-form schedule ops; runs the posterior + reparameterized
/// sample + denoiser; returns the combined objective.
pub fn compute_loss(
    model: &StyleDiffusion,
    batch: &[&TrainItem],
    lambda_kl: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::config("batch", "must be nonempty"));
    }
    let sched = model.schedule();
    let t_max = sched.len();
    let d_style = model.d_style();
    let dev = model.store().device().clone();

    let mut x0s = Vec::with_capacity(batch.len());
    let mut xts = Vec::with_capacity(batch.len());
    let mut vs = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    let mut ids = Vec::with_capacity(batch.len());
    let mut eps_s = Vec::with_capacity(batch.len() * d_style);
    for item in batch {
        let t = rng.gen_range(1..=t_max);
        let shape = item.image.dim();
        let eps = Image::from_shape_fn(shape, |_| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        });
        xts.push(q_sample(&item.image, t, &eps, sched)?);
        vs.push(v_target(&item.image, &eps, t, sched)?);
        x0s.push(item.image.clone());
        ts.push(t);
        ids.push(item.prompt_id.as_str());
        for _ in 0..d_style {
            let z: f32 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            eps_s.push(z);
        }
    }

    let x0_t = batch_to_tensor(&x0s, &dev)?;
    let xt_t = batch_to_tensor(&xts, &dev)?;
    let v_t = batch_to_tensor(&vs, &dev)?;
    let eps_s_t = Tensor::from_vec(eps_s, (batch.len(), d_style), &dev)?;

    let c = model.prompts().batch(&ids)?;
    let (mu, log_sigma) = model.style_encoder().forward(&x0_t, &c)?;
    let s = reparam_sample(&mu, &log_sigma, &eps_s_t)?;
    let v_hat = model.predict_v(&xt_t, &ts, &c, &s)?;

    let denoise_t = (v_hat - v_t)?.sqr()?.mean_all()?;
    let kl_t = kl_tensor(&mu, &log_sigma)?;
    let total_t = (&denoise_t + (&kl_t * lambda_kl)?)?;

    let denoise = denoise_t.to_scalar::<f32>()? as f64;
    let kl = kl_t.to_scalar::<f32>()? as f64;
    if !denoise.is_finite() {
        return Err(Error::numeric("denoise loss is not finite"));
    }
    if !kl.is_finite() {
        return Err(Error::numeric("kl loss is not finite"));
    }
    Ok(LossParts {
        total_t,
        total: denoise + lambda_kl * kl,
        denoise,
        kl,
    })
}

pub struct TrainOutput {
    pub records: Vec<TrainRecord>,
    pub final_step: usize,
}

/// Optimize in place for `cfg.max_steps` AdamW steps at constant learning
/// rate. Fully deterministic given `seed`. On a non-finite loss the current
/// (still finite) parameters are persisted to `abort_ckpt` when given, and
/// the error is surfaced.
pub fn train(
    model: &StyleDiffusion,
    dataset: &[TrainItem],
    cfg: &TrainConfig,
    seed: u64,
    abort_ckpt: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("dataset", "must be nonempty"));
    }
    for item in dataset {
        if !model.prompts().contains(&item.prompt_id) {
            return Err(Error::UnregisteredPrompt(item.prompt_id.clone()));
        }
    }
    for id in model.prompts().ids() {
        if !dataset.iter().any(|i| &i.prompt_id == id) {
            return Err(Error::config(
                "dataset",
                format!("no examples for registered prompt {id:?}"),
            ));
        }
    }

    let mut rng = seed_rng(seed, "trainer");
    let params = candle_nn::ParamsAdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt = candle_nn::AdamW::new(model.store().vars(), params)?;

    let mut records = Vec::new();
    for step in 1..=cfg.max_steps {
        let batch: Vec<&TrainItem> = (0..cfg.batch_size)
            .map(|_| &dataset[rng.gen_range(0..dataset.len())])
            .collect();
        let loss = match compute_loss(model, &batch, cfg.lambda_kl, &mut rng) {
            Ok(l) => l,
            Err(e) => {
                if let Some(path) = abort_ckpt {
                    checkpoint::save(path, model, step as u64 - 1, &RngState::capture(&rng))?;
                }
                return Err(e);
            }
        };
        let grads = loss.total_t.backward()?;
        opt.step(&grads)?;
        if step % cfg.log_every == 0 || step == cfg.max_steps {
            records.push(TrainRecord {
                step,
                total: loss.total,
                denoise: loss.denoise,
                kl: loss.kl,
            });
        }
    }
    Ok(TrainOutput {
        records,
        final_step: cfg.max_steps,
    })
}

/// Loss curve as CSV with columns `step,total,denoise,kl`.
pub fn write_curve(records: &[TrainRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "total", "denoise", "kl"])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            format!("{:.9e}", r.total),
            format!("{:.9e}", r.denoise),
            format!("{:.9e}", r.kl),
        ])?;
    }
    w.flush()?;
    Ok(())
}
