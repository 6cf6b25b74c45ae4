//! Fixed-prompt registry: each registered prompt id owns a learned token
//! sequence that plays the role of a text-encoder output.

use std::collections::HashMap;

use candle_core::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub struct PromptRegistry {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    /// (P, L, d_cond) — all prompt token sequences as one parameter.
    tokens: Tensor,
    /// (L, d_cond) — additive position embedding shared across prompts, so
    /// a token sequence is not invariant under reordering.
    pos: Tensor,
    prompt_len: usize,
    d_cond: usize,
}

impl PromptRegistry {
    pub fn new(
        store: &mut ParamStore,
        ids: &[String],
        prompt_len: usize,
        d_cond: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::config("prompts", "at least one prompt id required"));
        }
        if prompt_len == 0 {
            return Err(Error::config("prompt_len", "must be >= 1"));
        }
        let mut index = HashMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::config("prompts", format!("duplicate prompt id {id:?}")));
            }
        }
        let bound = 1.0 / (d_cond as f32).sqrt();
        let tokens = store.uniform(
            "prompts.tokens",
            &[ids.len(), prompt_len, d_cond],
            bound,
            rng,
        )?;
        let pos = store.uniform("prompts.pos", &[prompt_len, d_cond], bound, rng)?;
        Ok(Self {
            ids: ids.to_vec(),
            index,
            tokens,
            pos,
            prompt_len,
            d_cond,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn d_cond(&self) -> usize {
        self.d_cond
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Token sequence for one prompt with positions added, shape (L, d_cond).
    pub fn embedding(&self, id: &str) -> Result<Tensor> {
        let &i = self
            .index
            .get(id)
            .ok_or_else(|| Error::UnregisteredPrompt(id.to_string()))?;
        Ok((self.tokens.get(i)? + &self.pos)?)
    }

    /// Batched lookup, shape (B, L, d_cond). Differentiable w.r.t. the table.
    pub fn batch(&self, ids: &[&str]) -> Result<Tensor> {
        let mut idx = Vec::with_capacity(ids.len());
        for id in ids {
            let &i = self
                .index
                .get(*id)
                .ok_or_else(|| Error::UnregisteredPrompt(id.to_string()))?;
            idx.push(i as u32);
        }
        let idx = Tensor::from_vec(idx, ids.len(), self.tokens.device())?;
        let picked = self.tokens.index_select(&idx, 0)?;
        Ok(picked.broadcast_add(&self.pos.unsqueeze(0)?)?)
    }
}
