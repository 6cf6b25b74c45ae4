//! Scaled dot-product attention: a plain reference implementation used by
//! tests and oracles, and the batched candle layer used inside the networks.

use candle_core::Tensor;
use candle_nn::{LayerNorm, Linear, Module};
use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{layer_norm, linear, ParamStore};

/// Reference `softmax(Q K^T / sqrt(d_k)) V` on plain matrices.
/// Q: n x d_k, K: m x d_k, V: m x d_v.
pub fn attention(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Result<Array2<f32>> {
    let (n, dk) = q.dim();
    let (m, dk2) = k.dim();
    let (mv, dv) = v.dim();
    if dk != dk2 {
        return Err(Error::dimension(format!(
            "query dim {dk} vs key dim {dk2}"
        )));
    }
    if m != mv {
        return Err(Error::dimension(format!(
            "key rows {m} vs value rows {mv}"
        )));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Array2::zeros((n, dv));
    let mut weights = vec![0.0f64; m];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            let mut dot = 0.0f64;
            for d in 0..dk {
                dot += q[[i, d]] as f64 * k[[j, d]] as f64;
            }
            weights[j] = dot * scale;
            max = max.max(weights[j]);
        }
        let mut z = 0.0f64;
        for w in weights.iter_mut() {
            *w = (*w - max).exp();
            z += *w;
        }
        for j in 0..m {
            let w = (weights[j] / z) as f32;
            for d in 0..dv {
                out[[i, d]] += w * v[[j, d]];
            }
        }
    }
    Ok(out)
}

/// Pre-normalized residual cross-attention block. The output projection is
/// zero-initialized so a fresh block is the identity map.
pub struct CrossAttention {
    norm: LayerNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
    d_model: usize,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ctx: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{heads} must divide the model width {d_model}"),
            ));
        }
        Ok(Self {
            norm: layer_norm(store, &format!("{name}.norm"), d_model)?,
            to_q: linear(store, &format!("{name}.to_q"), d_model, d_model, false, rng)?,
            to_k: linear(store, &format!("{name}.to_k"), d_ctx, d_model, false, rng)?,
            to_v: linear(store, &format!("{name}.to_v"), d_ctx, d_model, false, rng)?,
            to_out: linear(store, &format!("{name}.to_out"), d_model, d_model, true, rng)?,
            heads,
            d_model,
        })
    }

    fn split_heads(&self, t: &Tensor) -> Result<Tensor> {
        // (B, N, D) -> (B, h, N, D/h)
        let (b, n, _) = t.dims3()?;
        Ok(t
            .reshape((b, n, self.heads, self.d_model / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Softmax attention probabilities, shape (B, heads, N, M).
    pub fn attention_probs(&self, z: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(z)?;
        let q = self.split_heads(&self.to_q.forward(&h)?)?;
        let k = self.split_heads(&self.to_k.forward(ctx)?)?;
        let scale = 1.0 / ((self.d_model / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        Ok(candle_nn::ops::softmax(&scores, 3)?)
    }

    /// `z + W_out(softmax(Q K^T / sqrt(d_k)) V)` with Q from normalized z and
    /// K, V from the conditioning sequence.
    pub fn forward(&self, z: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, n, _) = z.dims3()?;
        let probs = self.attention_probs(z, ctx)?;
        let v = self.split_heads(&self.to_v.forward(ctx)?)?;
        let attended = probs.matmul(&v)?; // (B, h, N, D/h)
        let merged = attended
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, self.d_model))?;
        let out = self.to_out.forward(&merged)?;
        Ok((z + out)?)
    }
}
