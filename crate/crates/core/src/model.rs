//! The full conditional generative model: schedule + prompt registry +
//! style encoder + denoiser, with one parameter store underneath.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::seed_rng;
use crate::denoiser::{Denoiser, DenoiserConfig, PromptRegistry};
use crate::error::{Error, Result};
use crate::nn::{batch_to_tensor, tensor_to_images, ParamStore};
use crate::schedule::{DiffusionSchedule, Image, ScheduleKind};
use crate::stylecodec::{StyleLatent, StylePosterior};
use crate::styleenc::StyleEncoder;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.timesteps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub prompt_ids: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            prompt_ids: vec![
                "class0".to_string(),
                "class1".to_string(),
                "class2".to_string(),
            ],
        }
    }
}

pub struct StyleDiffusion {
    cfg: ModelConfig,
    store: ParamStore,
    unet: Denoiser,
    style_encoder: StyleEncoder,
    prompts: PromptRegistry,
    schedule: DiffusionSchedule,
}

impl StyleDiffusion {
    /// Fresh model with parameters drawn from the `model-init` stream of
    /// `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = seed_rng(seed, "model-init");
        Self::init_with_rng(cfg, &mut rng)
    }

    pub fn init_with_rng(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.denoiser.validate()?;
        let schedule = cfg.schedule.build()?;
        let mut store = ParamStore::new();
        let unet = Denoiser::new(&mut store, &cfg.denoiser, rng)?;
        let style_encoder = StyleEncoder::new(&mut store, &cfg.denoiser, rng)?;
        let prompts = PromptRegistry::new(
            &mut store,
            &cfg.prompt_ids,
            cfg.denoiser.prompt_len,
            cfg.denoiser.d_cond,
            rng,
        )?;
        Ok(Self {
            cfg,
            store,
            unet,
            style_encoder,
            prompts,
            schedule,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn prompts(&self) -> &PromptRegistry {
        &self.prompts
    }

    pub fn unet(&self) -> &Denoiser {
        &self.unet
    }

    pub fn style_encoder(&self) -> &StyleEncoder {
        &self.style_encoder
    }

    pub fn d_style(&self) -> usize {
        self.cfg.denoiser.d_style
    }

    /// Style posterior for one clean image under a registered prompt.
    pub fn encode(&self, x0: &Image, prompt_id: &str) -> Result<StylePosterior> {
        let c = self.prompts.embedding(prompt_id)?;
        self.style_encoder.encode_one(x0, &c)
    }

    /// Batched posterior parameters `(mu, log_sigma)` as tensors (training path).
    pub fn encode_batch(&self, x0: &Tensor, prompt_ids: &[&str]) -> Result<(Tensor, Tensor)> {
        let c = self.prompts.batch(prompt_ids)?;
        self.style_encoder.forward(x0, &c)
    }

    /// Velocity prediction on tensors (training path).
    pub fn predict_v(&self, x_t: &Tensor, ts: &[usize], c: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.unet.predict_v(x_t, ts, c, s)
    }

    /// Velocity prediction on plain images (sampling path).
    pub fn predict_v_images(
        &self,
        x_t: &[Image],
        ts: &[usize],
        prompt_ids: &[&str],
        styles: &[StyleLatent],
    ) -> Result<Vec<Image>> {
        if x_t.len() != styles.len() || x_t.len() != prompt_ids.len() {
            return Err(Error::dimension(
                "images, prompts, and styles must align".to_string(),
            ));
        }
        let dev = self.store.device().clone();
        let x = batch_to_tensor(x_t, &dev)?;
        let c = self.prompts.batch(prompt_ids)?;
        let d = self.d_style();
        let mut sdata = Vec::with_capacity(styles.len() * d);
        for s in styles {
            if s.dim() != d {
                return Err(Error::dimension(format!(
                    "style latent dim {} vs configured {d}",
                    s.dim()
                )));
            }
            sdata.extend(s.0.iter().copied());
        }
        let s = Tensor::from_vec(sdata, (styles.len(), d), &dev)?;
        let v = self.unet.predict_v(&x, ts, &c, &s)?;
        tensor_to_images(&v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> StyleDiffusion {
        let cfg = ModelConfig {
            denoiser: DenoiserConfig {
                in_channels: 3,
                channels: vec![8, 12],
                d_cond: 6,
                d_style: 5,
                heads: 1,
                time_dim: 16,
                resolution: 16,
                prompt_len: 2,
            },
            schedule: ScheduleConfig {
                timesteps: 50,
                ..Default::default()
            },
            prompt_ids: vec!["class0".into(), "class1".into(), "class2".into()],
        };
        StyleDiffusion::init(cfg, 1234).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = tiny_model();
        let b = tiny_model();
        let sa = a.store.snapshot().unwrap();
        let sb = b.store.snapshot().unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn encode_rejects_unregistered_prompt() {
        let m = tiny_model();
        let img = Image::zeros((3, 16, 16));
        assert!(matches!(
            m.encode(&img, "nope"),
            Err(Error::UnregisteredPrompt(_))
        ));
    }

    #[test]
    fn predict_v_images_round_trip_shapes() {
        let m = tiny_model();
        let imgs = vec![Image::zeros((3, 16, 16)), Image::zeros((3, 16, 16))];
        let styles = vec![StyleLatent::zeros(5), StyleLatent::zeros(5)];
        let out = m
            .predict_v_images(&imgs, &[10, 20], &["class0", "class2"], &styles)
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].dim(), (3, 16, 16));
    }
}
