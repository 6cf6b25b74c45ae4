//! Velocity-predicting U-Net conditioned on a prompt token sequence and a
//! single style token via per-block dual cross-attention.

pub mod attention;
pub mod prompts;

pub use attention::{attention, CrossAttention};
pub use prompts::PromptRegistry;

use candle_core::Tensor;
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Module};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d, group_norm, ParamStore, ResBlock, TimeEmbedding};

/// Architecture hyperparameters for the denoiser (and, scaled down, for the
/// style encoder trunk).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    /// Channel width per resolution level; downsampling by 2 between levels.
    pub channels: Vec<usize>,
    /// Prompt token width.
    pub d_cond: usize,
    /// Style latent width.
    pub d_style: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub resolution: usize,
    /// Learned tokens per registered prompt.
    pub prompt_len: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![32, 64],
            d_cond: 32,
            d_style: 64,
            heads: 1,
            time_dim: 128,
            resolution: 32,
            prompt_len: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("channels", "at least one level required"));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("d_cond", self.d_cond),
            ("d_style", self.d_style),
            ("heads", self.heads),
            ("time_dim", self.time_dim),
            ("resolution", self.resolution),
            ("prompt_len", self.prompt_len),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        let factor = 1usize << (self.channels.len() - 1);
        if self.resolution % factor != 0 {
            return Err(Error::config(
                "resolution",
                format!(
                    "{} not divisible by 2^(levels-1) = {factor}",
                    self.resolution
                ),
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }
}

/// Prompt attention followed by style attention on flattened feature maps,
/// each pre-normalized and residual.
pub struct DualCrossAttention {
    prompt_attn: CrossAttention,
    style_attn: CrossAttention,
}

impl DualCrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_cond: usize,
        d_style: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            prompt_attn: CrossAttention::new(
                store,
                &format!("{name}.prompt"),
                d_model,
                d_cond,
                heads,
                rng,
            )?,
            style_attn: CrossAttention::new(
                store,
                &format!("{name}.style"),
                d_model,
                d_style,
                heads,
                rng,
            )?,
        })
    }

    /// `z -> z''` on a (B, C, H, W) feature map; `c` is (B, L, d_cond) and
    /// `s_token` is (B, 1, d_style).
    pub fn forward(&self, z: &Tensor, c: &Tensor, s_token: &Tensor) -> Result<Tensor> {
        let (b, ch, h, w) = z.dims4()?;
        let tokens = z.reshape((b, ch, h * w))?.transpose(1, 2)?.contiguous()?;
        let tokens = self.prompt_attn.forward(&tokens, c)?;
        let tokens = self.style_attn.forward(&tokens, s_token)?;
        Ok(tokens.transpose(1, 2)?.reshape((b, ch, h, w))?.contiguous()?)
    }

    pub fn prompt_attn(&self) -> &CrossAttention {
        &self.prompt_attn
    }

    pub fn style_attn(&self) -> &CrossAttention {
        &self.style_attn
    }
}

struct DownLevel {
    res: ResBlock,
    attn: DualCrossAttention,
    down: Option<Conv2d>,
}

struct UpLevel {
    res: ResBlock,
    attn: DualCrossAttention,
    up: Option<Conv2d>,
}

/// The velocity predictor `v_hat = f(x_t, t, c, s)`.
pub struct Denoiser {
    cfg: DenoiserConfig,
    time: TimeEmbedding,
    stem: Conv2d,
    down: Vec<DownLevel>,
    mid_res1: ResBlock,
    mid_attn: DualCrossAttention,
    mid_res2: ResBlock,
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let pad1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let down_cfg = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let ch = &cfg.channels;
        let levels = ch.len();
        let td = cfg.time_dim;

        let time = TimeEmbedding::new(store, "unet.time", ch[0], td, rng)?;
        let stem = conv2d(store, "unet.stem", cfg.in_channels, ch[0], 3, pad1, false, rng)?;

        let mut down = Vec::with_capacity(levels);
        for i in 0..levels {
            let in_ch = if i == 0 { ch[0] } else { ch[i - 1] };
            let name = format!("unet.down{i}");
            down.push(DownLevel {
                res: ResBlock::new(store, &format!("{name}.res"), in_ch, ch[i], Some(td), rng)?,
                attn: DualCrossAttention::new(
                    store,
                    &format!("{name}.attn"),
                    ch[i],
                    cfg.d_cond,
                    cfg.d_style,
                    cfg.heads,
                    rng,
                )?,
                down: if i + 1 < levels {
                    Some(conv2d(
                        store,
                        &format!("{name}.down"),
                        ch[i],
                        ch[i],
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

        let last = ch[levels - 1];
        let mid_res1 = ResBlock::new(store, "unet.mid.res1", last, last, Some(td), rng)?;
        let mid_attn = DualCrossAttention::new(
            store,
            "unet.mid.attn",
            last,
            cfg.d_cond,
            cfg.d_style,
            cfg.heads,
            rng,
        )?;
        let mid_res2 = ResBlock::new(store, "unet.mid.res2", last, last, Some(td), rng)?;

        let mut up = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            // incoming width: current stream + skip from down level i
            let stream = if i + 1 == levels { last } else { ch[i + 1] };
            let name = format!("unet.up{i}");
            up.push(UpLevel {
                res: ResBlock::new(
                    store,
                    &format!("{name}.res"),
                    stream + ch[i],
                    ch[i],
                    Some(td),
                    rng,
                )?,
                attn: DualCrossAttention::new(
                    store,
                    &format!("{name}.attn"),
                    ch[i],
                    cfg.d_cond,
                    cfg.d_style,
                    cfg.heads,
                    rng,
                )?,
                up: if i > 0 {
                    Some(conv2d(
                        store,
                        &format!("{name}.up"),
                        ch[i],
                        ch[i],
                        3,
                        pad1,
                        false,
                        rng,
                    )?)
                } else {
                    None
                },
            });
        }

        // the final conv is small but not zero: gradient must reach every
        // upstream parameter from the very first optimizer step
        let out_norm = group_norm(store, "unet.out.norm", ch[0])?;
        let out_conv = conv2d(store, "unet.out.conv", ch[0], cfg.in_channels, 3, pad1, false, rng)?;

        Ok(Self {
            cfg: cfg.clone(),
            time,
            stem,
            down,
            mid_res1,
            mid_attn,
            mid_res2,
            up,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Predict the velocity for a batch. `x_t` is (B, C, H, W), `ts` holds a
    /// 1-based timestep per sample, `c` is (B, L, d_cond), `s` is (B, d_style).
    pub fn predict_v(&self, x_t: &Tensor, ts: &[usize], c: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (b, ch_in, h, w) = x_t.dims4()?;
        if ch_in != self.cfg.in_channels || h != self.cfg.resolution || w != self.cfg.resolution {
            return Err(Error::dimension(format!(
                "input {:?} does not match configured {}x{}x{}",
                x_t.dims(),
                self.cfg.in_channels,
                self.cfg.resolution,
                self.cfg.resolution
            )));
        }
        if ts.len() != b {
            return Err(Error::dimension(format!(
                "{} timesteps for batch of {b}",
                ts.len()
            )));
        }
        let (bs, _) = s.dims2()?;
        if bs != b {
            return Err(Error::dimension("style batch size mismatch".to_string()));
        }
        let s_token = s.unsqueeze(1)?; // single conditioning token

        let temb = self.time.forward(ts, x_t.device())?;
        let mut hmap = self.stem.forward(x_t)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for lvl in &self.down {
            hmap = lvl.res.forward(&hmap, Some(&temb))?;
            hmap = lvl.attn.forward(&hmap, c, &s_token)?;
            skips.push(hmap.clone());
            if let Some(dconv) = &lvl.down {
                hmap = dconv.forward(&hmap)?;
            }
        }

        hmap = self.mid_res1.forward(&hmap, Some(&temb))?;
        hmap = self.mid_attn.forward(&hmap, c, &s_token)?;
        hmap = self.mid_res2.forward(&hmap, Some(&temb))?;

        for (j, lvl) in self.up.iter().enumerate() {
            let skip = &skips[self.down.len() - 1 - j];
            hmap = Tensor::cat(&[&hmap, skip], 1)?;
            hmap = lvl.res.forward(&hmap, Some(&temb))?;
            hmap = lvl.attn.forward(&hmap, c, &s_token)?;
            if let Some(uconv) = &lvl.up {
                let (_, _, hh, ww) = hmap.dims4()?;
                hmap = uconv.forward(&hmap.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }

        let out = candle_nn::ops::silu(&self.out_norm.forward(&hmap)?)?;
        Ok(self.out_conv.forward(&out)?)
    }

    pub fn mid_attn(&self) -> &DualCrossAttention {
        &self.mid_attn
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
            d_style: 10,
            heads: 1,
            time_dim: 16,
            resolution: 16,
            prompt_len: 3,
        }
    }

    fn randn_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.resolution = 9; // not divisible by 2^(levels-1)
        assert!(cfg.validate().is_err());
        cfg.resolution = 16;
        cfg.heads = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_matches_input_shape() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Denoiser::new(&mut store, &cfg, &mut rng).unwrap();
        let x = randn_tensor(&[2, 3, 16, 16], 0);
        let c = randn_tensor(&[2, 3, 6], 1);
        let s = randn_tensor(&[2, 10], 2);
        let v = net.predict_v(&x, &[3, 900], &c, &s).unwrap();
        assert_eq!(v.dims(), x.dims());
    }

    #[test]
    fn wrong_resolution_is_dimension_error() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Denoiser::new(&mut store, &cfg, &mut rng).unwrap();
        let x = randn_tensor(&[1, 3, 8, 8], 0);
        let c = randn_tensor(&[1, 3, 6], 1);
        let s = randn_tensor(&[1, 10], 2);
        assert!(matches!(
            net.predict_v(&x, &[1], &c, &s),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn timestep_changes_output() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Denoiser::new(&mut store, &cfg, &mut rng).unwrap();
        assert!(
            store
                .get("unet.out.conv.weight")
                .unwrap()
                .as_tensor()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap()
                > 0.0,
            "output conv must be live at init so gradients flow from step one"
        );
        let x = randn_tensor(&[1, 3, 16, 16], 0);
        let c = randn_tensor(&[1, 3, 6], 1);
        let s = randn_tensor(&[1, 10], 2);
        let v1 = net.predict_v(&x, &[1], &c, &s).unwrap();
        let v2 = net.predict_v(&x, &[700], &c, &s).unwrap();
        let diff = (v1 - v2)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff > 1e-7, "timestep embedding must influence the output");
    }

    #[test]
    fn style_swap_changes_features_once_projections_are_nonzero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dual = DualCrossAttention::new(&mut store, "d", 8, 6, 10, 1, &mut rng).unwrap();
        // make the style path live: random output projection
        let n = 8 * 8;
        let wdata: Vec<f32> = (0..n).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.05).collect();
        store.set("d.style.to_out.weight", wdata).unwrap();

        let z = randn_tensor(&[1, 8, 4, 4], 7);
        let c = randn_tensor(&[1, 2, 6], 8);
        let sa = randn_tensor(&[1, 1, 10], 9);
        let sb = randn_tensor(&[1, 1, 10], 10);
        let za = dual.forward(&z, &c, &sa).unwrap();
        let zb = dual.forward(&z, &c, &sb).unwrap();
        let diff = (za - zb)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff > 1e-7, "distinct style latents must change the output");
    }

    #[test]
    fn prompt_tokens_carry_positional_identity() {
        // Attention alone is invariant under a joint permutation of K/V rows.
        // Positional identity comes from the registry's additive position
        // embedding: reordering the stored tokens while positions stay put
        // must change the conditioning and hence the output.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dual = DualCrossAttention::new(&mut store, "d", 8, 6, 10, 1, &mut rng).unwrap();
        let n = 8 * 8;
        let wdata: Vec<f32> = (0..n).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.04).collect();
        store.set("d.prompt.to_out.weight", wdata).unwrap();

        let z = randn_tensor(&[1, 8, 4, 4], 7);
        let s = randn_tensor(&[1, 1, 10], 9);
        let tok = randn_tensor(&[2, 6], 8).to_vec2::<f32>().unwrap();
        let pos = randn_tensor(&[2, 6], 12).to_vec2::<f32>().unwrap();
        let compose = |order: [usize; 2]| {
            let mut flat = Vec::new();
            for (slot, &src) in order.iter().enumerate() {
                for d in 0..6 {
                    flat.push(tok[src][d] + pos[slot][d]);
                }
            }
            Tensor::from_vec(flat, (1, 2, 6), &Device::Cpu).unwrap()
        };
        let z1 = dual.forward(&z, &compose([0, 1]), &s).unwrap();
        let z2 = dual.forward(&z, &compose([1, 0]), &s).unwrap();
        let diff = (z1 - z2)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff > 1e-7, "token order must matter once positions are added");
    }
}
