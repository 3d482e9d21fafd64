//! Parameterised building blocks. Each layer holds `ParamId`s into a
//! [`ParamStore`] and records its forward pass on a [`Graph`].

use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        Self {
            weight,
            bias: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).value.data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).value.data_mut().fill(0.0);
        }
    }

    /// Identity weight (square layers only), zero bias.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        if self.fan_in != self.fan_out {
            return Err(invalid("Linear::set_identity", format!("{}x{}", self.fan_in, self.fan_out)));
        }
        self.zero(store);
        let n = self.fan_in;
        let w = store.get_mut(self.weight).value.data_mut();
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.fan_in * self.fan_out + if self.bias.is_some() { self.fan_out } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[width])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layernorm(x, gamma, beta)
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = g.gelu(x)?;
            }
        }
        Ok(x)
    }

    pub fn output(&self) -> &Linear {
        self.layers.last().expect("non-empty")
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Linear::parameter_count).sum()
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_kv_width(store, name, width, width, heads, rng)
    }

    pub fn with_kv_width(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(invalid("MultiHeadAttention", format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, rng),
            key: Linear::new(store, &format!("{name}.k"), kv_width, width, rng),
            value: Linear::new(store, &format!("{name}.v"), kv_width, width, rng),
            output: Linear::new(store, &format!("{name}.o"), width, width, rng),
            heads,
        })
    }

    /// `xq: [B, Lq, C]`, `xkv: [B, Lk, Ckv]`. Returns the projected output
    /// and the `[B, heads, Lq, Lk]` attention weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xq: Var,
        xkv: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Tensor)> {
        let q = self.query.forward(g, store, xq)?;
        let k = self.key.forward(g, store, xkv)?;
        let v = self.value.forward(g, store, xkv)?;
        let (a, w) = g.attention_core(q, k, v, self.heads, key_mask)?;
        Ok((self.output.forward(g, store, a)?, w))
    }

    pub fn parameter_count(&self) -> usize {
        self.query.parameter_count()
            + self.key.parameter_count()
            + self.value.parameter_count()
            + self.output.parameter_count()
    }
}
