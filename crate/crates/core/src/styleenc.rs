//! Style encoder: a halved-width copy of the denoiser's downsampling half
//! with prompt cross-attention per level, followed by one fully connected
//! head emitting the posterior mean and log standard deviation.

use candle_core::Tensor;
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear, Module};
use ndarray::Array1;
use rand::Rng;

use crate::denoiser::{CrossAttention, DenoiserConfig};
use crate::error::{Error, Result};
use crate::nn::{batch_to_tensor, conv2d, group_norm, linear, ParamStore, ResBlock};
use crate::schedule::Image;
use crate::stylecodec::{StylePosterior, LOG_SIGMA_CLAMP};

struct EncLevel {
    res: ResBlock,
    attn: CrossAttention,
    down: Option<Conv2d>,
}

pub struct StyleEncoder {
    stem: Conv2d,
    levels: Vec<EncLevel>,
    final_norm: GroupNorm,
    head: Linear,
    d_style: usize,
    resolution: usize,
    in_channels: usize,
}

impl StyleEncoder {
    /// Trunk widths are `cfg.channels` halved (floor, minimum 4). The head is
    /// zero-initialized so a fresh encoder emits the standard posterior.
    pub fn new(store: &mut ParamStore, cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let widths: Vec<usize> = cfg.channels.iter().map(|&c| (c / 2).max(4)).collect();
        let pad1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let down_cfg = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let stem = conv2d(store, "styleenc.stem", cfg.in_channels, widths[0], 3, pad1, false, rng)?;
        let mut levels = Vec::with_capacity(widths.len());
        for i in 0..widths.len() {
            let in_ch = if i == 0 { widths[0] } else { widths[i - 1] };
            let name = format!("styleenc.l{i}");
            levels.push(EncLevel {
                res: ResBlock::new(store, &format!("{name}.res"), in_ch, widths[i], None, rng)?,
                attn: CrossAttention::new(
                    store,
                    &format!("{name}.attn"),
                    widths[i],
                    cfg.d_cond,
                    cfg.heads,
                    rng,
                )?,
                down: if i + 1 < widths.len() {
                    Some(conv2d(
                        store,
                        &format!("{name}.down"),
                        widths[i],
                        widths[i],
                        3,
                        down_cfg,
                        false,
                        rng,
                    )?)
                } else {
                    None
                },
            });
        }
        let last = *widths.last().expect("validated non-empty");
        let final_res = cfg.resolution >> (widths.len() - 1);
        let flat = last * final_res * final_res;
        let final_norm = group_norm(store, "styleenc.final_norm", last)?;
        let head = linear(store, "styleenc.head", flat, 2 * cfg.d_style, true, rng)?;
        Ok(Self {
            stem,
            levels,
            final_norm,
            head,
            d_style: cfg.d_style,
            resolution: cfg.resolution,
            in_channels: cfg.in_channels,
        })
    }

    /// Posterior parameters for a batch of clean images: `(mu, log_sigma)`,
    /// each (B, d_style), log-sigma clamped for stability.
    pub fn forward(&self, x0: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, ch, h, w) = x0.dims4()?;
        if ch != self.in_channels || h != self.resolution || w != self.resolution {
            return Err(Error::dimension(format!(
                "style encoder input {:?} does not match configured {}x{}x{}",
                x0.dims(),
                self.in_channels,
                self.resolution,
                self.resolution
            )));
        }
        let mut hmap = self.stem.forward(x0)?;
        for lvl in &self.levels {
            hmap = lvl.res.forward(&hmap, None)?;
            let (bb, cc, hh, ww) = hmap.dims4()?;
            let tokens = hmap.reshape((bb, cc, hh * ww))?.transpose(1, 2)?.contiguous()?;
            let tokens = lvl.attn.forward(&tokens, c)?;
            hmap = tokens.transpose(1, 2)?.reshape((bb, cc, hh, ww))?.contiguous()?;
            if let Some(dconv) = &lvl.down {
                hmap = dconv.forward(&hmap)?;
            }
        }
        let hmap = candle_nn::ops::silu(&self.final_norm.forward(&hmap)?)?;
        let flat = hmap.flatten_from(1)?;
        let out = self.head.forward(&flat)?;
        let mu = out.narrow(1, 0, self.d_style)?;
        let log_sigma = out
            .narrow(1, self.d_style, self.d_style)?
            .clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)?;
        let _ = b;
        Ok((mu, log_sigma))
    }

    /// Single-image convenience: returns the plain posterior type.
    pub fn encode_one(&self, x0: &Image, c: &Tensor) -> Result<StylePosterior> {
        let x = batch_to_tensor(std::slice::from_ref(x0), c.device())?;
        let c = if c.dims().len() == 2 {
            c.unsqueeze(0)?
        } else {
            c.clone()
        };
        let (mu, log_sigma) = self.forward(&x, &c)?;
        let mu = Array1::from_vec(mu.flatten_all()?.to_vec1::<f32>()?);
        let log_sigma = Array1::from_vec(log_sigma.flatten_all()?.to_vec1::<f32>()?);
        StylePosterior::new(mu, log_sigma)
    }

    pub fn d_style(&self) -> usize {
        self.d_style
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 3,
            channels: vec![8, 12],
            d_cond: 6,
            d_style: 5,
            heads: 1,
            time_dim: 16,
            resolution: 16,
            prompt_len: 2,
        }
    }

    #[test]
    fn fresh_encoder_emits_standard_posterior() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = StyleEncoder::new(&mut store, &tiny_cfg(), &mut rng).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let img = Image::from_shape_fn((3, 16, 16), |_| rng2.gen_range(-1.0..1.0));
        let c = Tensor::zeros((2, 6), candle_core::DType::F32, &Device::Cpu).unwrap();
        let post = enc.encode_one(&img, &c).unwrap();
        assert!(post.mu().iter().all(|&m| m == 0.0));
        assert!(post.sigma().iter().all(|&s| s == 1.0));
        assert_eq!(post.kl_to_standard_normal().unwrap(), 0.0);
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = StyleEncoder::new(&mut store, &tiny_cfg(), &mut rng).unwrap();
        // give the head nonzero weights so the posterior is nontrivial
        let head_len = store
            .get("styleenc.head.weight")
            .unwrap()
            .as_tensor()
            .elem_count();
        let w: Vec<f32> = (0..head_len).map(|i| ((i % 13) as f32 - 6.0) * 1e-3).collect();
        store.set("styleenc.head.weight", w).unwrap();

        let mut rng2 = ChaCha8Rng::seed_from_u64(10);
        let img = Image::from_shape_fn((3, 16, 16), |_| rng2.gen_range(-1.0..1.0));
        let c = Tensor::ones((2, 6), candle_core::DType::F32, &Device::Cpu).unwrap();
        let a = enc.encode_one(&img, &c).unwrap();
        let b = enc.encode_one(&img, &c).unwrap();
        assert_eq!(a, b, "identical inputs must produce bitwise-identical posteriors");
        assert!(a.mu().iter().any(|&m| m != 0.0));
    }
}
