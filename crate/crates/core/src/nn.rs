//! Shared neural-network plumbing on the candle CPU backend.
//!
//! Parameters are created through [`ParamStore`] so that every weight is
//! initialized from a caller-supplied RNG stream (bit-reproducible runs),
//! registered under a stable name (flat checkpoint archive), and exposed as
//! a `Var` for the optimizer.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, LayerNorm, Linear, Module};
use rand::Rng;

use crate::error::{Error, Result};
use crate::schedule::Image;

/// Named parameter registry with deterministic initialization.
pub struct ParamStore {
    device: Device,
    entries: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            device: Device::Cpu,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&t)?;
        let shared = var.as_tensor().clone();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), var));
        Ok(shared)
    }

    /// Uniform init on [-bound, bound], drawn from `rng`.
    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f32,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.register(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, DType::F32, &self.device)?;
        self.register(name, t)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::ones(shape, DType::F32, &self.device)?;
        self.register(name, t)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// (name, var) pairs sorted by name — the canonical checkpoint order.
    pub fn sorted_entries(&self) -> Vec<(&str, &Var)> {
        let mut v: Vec<(&str, &Var)> = self
            .entries
            .iter()
            .map(|(n, var)| (n.as_str(), var))
            .collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// Overwrite a named parameter with raw values (checkpoint load).
    pub fn set(&self, name: &str, data: Vec<f32>) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let shape = var.as_tensor().dims().to_vec();
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected {expected} values, got {}",
                data.len()
            )));
        }
        let t = Tensor::from_vec(data, shape.as_slice(), &self.device)?;
        var.set(&t)?;
        Ok(())
    }

    /// Snapshot all parameter values (used to restore best-validation weights).
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<f32>)>> {
        self.entries
            .iter()
            .map(|(n, v)| {
                let flat = v.as_tensor().flatten_all()?.to_vec1::<f32>()?;
                Ok((n.clone(), flat))
            })
            .collect()
    }

    pub fn restore(&self, snap: &[(String, Vec<f32>)]) -> Result<()> {
        for (name, data) in snap {
            self.set(name, data.clone())?;
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

fn uniform_bound(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

/// Linear layer with fan-in uniform init; `zero_init` forces weight and bias
/// to zero (residual output projections, posterior heads).
pub fn linear(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    zero_init: bool,
    rng: &mut impl Rng,
) -> Result<Linear> {
    let wname = format!("{name}.weight");
    let bname = format!("{name}.bias");
    let (w, b) = if zero_init {
        (
            store.zeros(&wname, &[out_dim, in_dim])?,
            store.zeros(&bname, &[out_dim])?,
        )
    } else {
        let bound = uniform_bound(in_dim);
        (
            store.uniform(&wname, &[out_dim, in_dim], bound, rng)?,
            store.uniform(&bname, &[out_dim], bound, rng)?,
        )
    };
    Ok(Linear::new(w, Some(b)))
}

/// 3x3 (or kxk) conv with fan-in uniform init.
pub fn conv2d(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    cfg: Conv2dConfig,
    zero_init: bool,
    rng: &mut impl Rng,
) -> Result<Conv2d> {
    let wname = format!("{name}.weight");
    let bname = format!("{name}.bias");
    let shape = [out_ch, in_ch, kernel, kernel];
    let (w, b) = if zero_init {
        (
            store.zeros(&wname, &shape)?,
            store.zeros(&bname, &[out_ch])?,
        )
    } else {
        let bound = uniform_bound(in_ch * kernel * kernel);
        (
            store.uniform(&wname, &shape, bound, rng)?,
            store.uniform(&bname, &[out_ch], bound, rng)?,
        )
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

/// Group count: 8 when it divides the channel count, else the largest of
/// {4, 2, 1} that does.
pub fn norm_groups(channels: usize) -> usize {
    for g in [8usize, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

pub fn group_norm(store: &mut ParamStore, name: &str, channels: usize) -> Result<GroupNorm> {
    let w = store.ones(&format!("{name}.weight"), &[channels])?;
    let b = store.zeros(&format!("{name}.bias"), &[channels])?;
    Ok(GroupNorm::new(w, b, channels, norm_groups(channels), 1e-5)?)
}

pub fn layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<LayerNorm> {
    let w = store.ones(&format!("{name}.weight"), &[dim])?;
    let b = store.zeros(&format!("{name}.bias"), &[dim])?;
    Ok(LayerNorm::new(w, b, 1e-5))
}

/// Residual conv block: GN -> SiLU -> conv3x3, optional timestep injection,
/// GN -> SiLU -> conv3x3, plus a 1x1 skip when channel counts change.
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Linear>,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        time_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let pad1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let gn1 = group_norm(store, &format!("{name}.gn1"), in_ch)?;
        let conv1 = conv2d(store, &format!("{name}.conv1"), in_ch, out_ch, 3, pad1, false, rng)?;
        let time_proj = match time_dim {
            Some(td) => Some(linear(store, &format!("{name}.time"), td, out_ch, false, rng)?),
            None => None,
        };
        let gn2 = group_norm(store, &format!("{name}.gn2"), out_ch)?;
        let conv2 = conv2d(store, &format!("{name}.conv2"), out_ch, out_ch, 3, pad1, false, rng)?;
        let skip = if in_ch != out_ch {
            Some(conv2d(
                store,
                &format!("{name}.skip"),
                in_ch,
                out_ch,
                1,
                Conv2dConfig::default(),
                false,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            gn1,
            conv1,
            time_proj,
            gn2,
            conv2,
            skip,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&candle_nn::ops::silu(&self.gn1.forward(x)?)?)?;
        if let (Some(proj), Some(temb)) = (&self.time_proj, temb) {
            // (B, out_ch) -> (B, out_ch, 1, 1), broadcast over space
            let bias = proj
                .forward(&candle_nn::ops::silu(temb)?)?
                .unsqueeze(2)?
                .unsqueeze(3)?;
            h = h.broadcast_add(&bias)?;
        }
        let h = self.conv2.forward(&candle_nn::ops::silu(&self.gn2.forward(&h)?)?)?;
        let residual = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + residual)?)
    }
}

/// Sinusoidal embedding of integer timesteps: `dim/2` sin terms then `dim/2`
/// cos terms with log-spaced frequencies.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10_000.0f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
            data.push((t * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000.0f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
            data.push((t * freq).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?)
}

/// Two-layer MLP lifting the sinusoidal embedding to the conditioning width.
pub struct TimeEmbedding {
    base_dim: usize,
    lin1: Linear,
    lin2: Linear,
}

impl TimeEmbedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        base_dim: usize,
        time_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            base_dim,
            lin1: linear(store, &format!("{name}.lin1"), base_dim, time_dim, false, rng)?,
            lin2: linear(store, &format!("{name}.lin2"), time_dim, time_dim, false, rng)?,
        })
    }

    pub fn forward(&self, ts: &[usize], device: &Device) -> Result<Tensor> {
        let emb = sinusoidal_embedding(ts, self.base_dim, device)?;
        let h = candle_nn::ops::silu(&self.lin1.forward(&emb)?)?;
        Ok(self.lin2.forward(&h)?)
    }
}

/// Stack (C,H,W) images into a (B,C,H,W) tensor.
pub fn batch_to_tensor(images: &[Image], device: &Device) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::dimension("empty image batch"));
    }
    let (c, h, w) = images[0].dim();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(Error::dimension("ragged image batch"));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?)
}

/// Split a (B,C,H,W) tensor back into (C,H,W) images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    let per = c * h * w;
    Ok((0..b)
        .map(|i| {
            Image::from_shape_vec((c, h, w), flat[i * per..(i + 1) * per].to_vec())
                .expect("shape checked")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_rejects_duplicate_names() {
        let mut store = ParamStore::new();
        store.zeros("a", &[2]).unwrap();
        assert!(store.zeros("a", &[2]).is_err());
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let make = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            store.uniform("w", &[4, 4], 0.5, &mut rng).unwrap();
            store
                .get("w")
                .unwrap()
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn set_round_trips_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.uniform("w", &[3], 1.0, &mut rng).unwrap();
        store.set("w", vec![1.0, 2.0, 3.0]).unwrap();
        let got = store
            .get("w")
            .unwrap()
            .as_tensor()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(got, vec![1.0, 2.0, 3.0]);
        assert!(store.set("w", vec![0.0]).is_err());
    }

    #[test]
    fn resblock_preserves_shape_and_time_sensitivity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blk = ResBlock::new(&mut store, "rb", 4, 8, Some(16), &mut rng).unwrap();
        let x = Tensor::ones((2, 4, 8, 8), DType::F32, store.device()).unwrap();
        let t1 = Tensor::ones((2, 16), DType::F32, store.device()).unwrap();
        let t2 = (Tensor::ones((2, 16), DType::F32, store.device()).unwrap() * 3.0).unwrap();
        let y1 = blk.forward(&x, Some(&t1)).unwrap();
        let y2 = blk.forward(&x, Some(&t2)).unwrap();
        assert_eq!(y1.dims(), &[2, 8, 8, 8]);
        let diff = (y1 - y2)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff > 0.0, "timestep embedding must be live");
    }

    #[test]
    fn sinusoidal_embedding_distinguishes_timesteps() {
        let dev = Device::Cpu;
        let e = sinusoidal_embedding(&[1, 500], 32, &dev).unwrap();
        let rows = e.to_vec2::<f32>().unwrap();
        assert_ne!(rows[0], rows[1]);
        // range stays in [-1, 1]
        assert!(rows.iter().flatten().all(|v| v.abs() <= 1.0 + 1e-6));
    }

    #[test]
    fn image_batch_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<Image> = (0..3)
            .map(|_| Image::from_shape_fn((3, 4, 5), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let t = batch_to_tensor(&imgs, &Device::Cpu).unwrap();
        let back = tensor_to_images(&t).unwrap();
        assert_eq!(imgs, back);
    }
}
