//! Fourier-mixing encoder / attention decoder autoencoder.
//!
//! Layout (one block each side):
//!
//! ```text
//! enc ids -> tok+pos embed -> norm1(x + mix(x)) -> norm2(h + ffn(h)) ----------------+
//! dec ids -> tok+pos embed -> norm1(x + self_attn_causal(x))                         |
//!                          -> norm2(a + cross_attn(a, enc_out)) <---------------------+
//!                          -> norm3(b + ffn(b)) -> dropout (train only) -> vocab projection
//! ```
//!
//! The feed-forward blocks project `E -> D -> E` with a ReLU in between.

use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::fourier::MixingPlan;
use crate::numerics::{init_params, Graph, Init, ParamSpec, ParamStore, Real, Rng, Tensor, Var};
use crate::{Error, Result};

fn default_norm_eps() -> f64 {
    1e-3
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    /// Width of the feed-forward bottleneck.
    pub latent_dim: usize,
    pub num_heads: usize,
    /// Per-head query/key/value width.
    pub key_dim: usize,
    pub dropout: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 10_000,
            max_len: 150,
            embed_dim: 128,
            latent_dim: 64,
            num_heads: 8,
            key_dim: 128,
            dropout: 0.5,
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_owned()));
        if self.vocab_size < 5 {
            return bad("vocab_size must be at least 5");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if self.embed_dim == 0 || self.latent_dim == 0 || self.num_heads == 0 || self.key_dim == 0 {
            return bad("embed_dim, latent_dim, num_heads and key_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.norm_eps <= 0.0 {
            return bad("norm_eps must be positive");
        }
        Ok(())
    }

    fn attn_width(&self) -> usize {
        self.num_heads * self.key_dim
    }
}

/// Closed-form trainable scalar count.
pub fn count_params(c: &ModelConfig) -> usize {
    let (v, l, e, d, hk) = (c.vocab_size, c.max_len, c.embed_dim, c.latent_dim, c.attn_width());
    let embeddings = 2 * (v * e + l * e);
    let ffn = e * d + d + d * e + e;
    let encoder = ffn + 2 * 2 * e;
    let attention = 3 * (e * hk + hk) + hk * e + e;
    let decoder = 2 * attention + ffn + 3 * 2 * e;
    let output = e * v + v;
    embeddings + encoder + decoder + output
}

/// Every named tensor the model allocates, in allocation order.
pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let (v, l, e, d, hk) = (c.vocab_size, c.max_len, c.embed_dim, c.latent_dim, c.attn_width());
    let mut s = Vec::new();
    let dense = |s: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize| {
        s.push(ParamSpec::new(format!("{name}.w"), vec![fan_in, fan_out], Init::GlorotUniform));
        s.push(ParamSpec::new(format!("{name}.b"), vec![fan_out], Init::Zeros));
    };
    let norm = |s: &mut Vec<ParamSpec>, name: &str| {
        s.push(ParamSpec::new(format!("{name}.gamma"), vec![e], Init::Ones));
        s.push(ParamSpec::new(format!("{name}.beta"), vec![e], Init::Zeros));
    };
    for side in ["enc", "dec"] {
        s.push(ParamSpec::new(format!("{side}.tok_embed"), vec![v, e], Init::EmbeddingUniform));
        s.push(ParamSpec::new(format!("{side}.pos_embed"), vec![l, e], Init::EmbeddingUniform));
    }
    dense(&mut s, "enc.ffn1", e, d);
    dense(&mut s, "enc.ffn2", d, e);
    norm(&mut s, "enc.norm1");
    norm(&mut s, "enc.norm2");
    for attn in ["dec.self_attn", "dec.cross_attn"] {
        for proj in ["q", "k", "v"] {
            dense(&mut s, &format!("{attn}.{proj}"), e, hk);
        }
        dense(&mut s, &format!("{attn}.o"), hk, e);
    }
    dense(&mut s, "dec.ffn1", e, d);
    dense(&mut s, "dec.ffn2", d, e);
    norm(&mut s, "dec.norm1");
    norm(&mut s, "dec.norm2");
    norm(&mut s, "dec.norm3");
    dense(&mut s, "out", e, v);
    s
}

/// Parameters registered as trainable leaves on one [`Graph`].
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

/// The autoencoder for one configuration and precision.
#[derive(Clone, Debug)]
pub struct FNetAutoencoder<T> {
    config: ModelConfig,
    plan: Arc<MixingPlan<T>>,
}

impl<T: Real> FNetAutoencoder<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let plan = Arc::new(MixingPlan::new(config.max_len));
        Ok(Self { config, plan })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mixing_plan(&self) -> &Arc<MixingPlan<T>> {
        &self.plan
    }

    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamStore<T>> {
        init_params(&param_specs(&self.config), rng)
    }

    /// Checks that `store` holds exactly this model's tensors.
    pub fn check_params(&self, store: &ParamStore<T>) -> Result<()> {
        let specs = param_specs(&self.config);
        if specs.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                store.len()
            )));
        }
        for spec in &specs {
            let t = store
                .get(&spec.name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {:?}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape("parameter", &spec.shape, t.shape()));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> BoundParams {
        BoundParams {
            vars: store
                .iter()
                .map(|(name, t)| (name.to_owned(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Token rows plus learned position rows; `ids` is `(batch, max_len)`.
    pub fn positional_embed(&self, g: &mut Graph<T>, tok: Var, pos: Var, ids: &[TokenId], batch: usize) -> Result<Var> {
        let l = self.config.max_len;
        if ids.len() != batch * l {
            return Err(Error::InvalidArgument(format!(
                "expected {batch} x {l} ids, got {}",
                ids.len()
            )));
        }
        let t = g.embedding(tok, ids, &[batch, l])?;
        g.add(t, pos)
    }

    fn linear(&self, g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(&format!("{name}.w")))?;
        g.add(y, p.var(&format!("{name}.b")))
    }

    fn norm(&self, g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
        let eps = T::from_f64_lossy(self.config.norm_eps);
        g.layer_norm(x, p.var(&format!("{name}.gamma")), p.var(&format!("{name}.beta")), eps)
    }

    fn ffn(&self, g: &mut Graph<T>, p: &BoundParams, side: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, p, &format!("{side}.ffn1"), x)?;
        let h = g.relu(h);
        self.linear(g, p, &format!("{side}.ffn2"), h)
    }

    /// `h = norm1(x + mix(x)); out = norm2(h + ffn(h))`.
    pub fn encoder_block(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let mixed = g.fourier_mix(x, &self.plan)?;
        let h = g.add(x, mixed)?;
        let h = self.norm(g, p, "enc.norm1", h)?;
        let f = self.ffn(g, p, "enc", h)?;
        let out = g.add(h, f)?;
        self.norm(g, p, "enc.norm2", out)
    }

    /// Multi-head attention with parameters under `prefix` (`{prefix}.q.w`, ...).
    pub fn multi_head_attention(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        prefix: &str,
        query: Var,
        kv: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(g, p, &format!("{prefix}.q"), query)?;
        let k = self.linear(g, p, &format!("{prefix}.k"), kv)?;
        let v = self.linear(g, p, &format!("{prefix}.v"), kv)?;
        let heads = g.attention(q, k, v, self.config.num_heads, causal)?;
        self.linear(g, p, &format!("{prefix}.o"), heads)
    }

    pub fn decoder_block(&self, g: &mut Graph<T>, p: &BoundParams, dec_x: Var, enc_out: Var) -> Result<Var> {
        let s = self.multi_head_attention(g, p, "dec.self_attn", dec_x, dec_x, true)?;
        let a = g.add(dec_x, s)?;
        let a = self.norm(g, p, "dec.norm1", a)?;
        let c = self.multi_head_attention(g, p, "dec.cross_attn", a, enc_out, false)?;
        let b = g.add(a, c)?;
        let b = self.norm(g, p, "dec.norm2", b)?;
        let f = self.ffn(g, p, "dec", b)?;
        let out = g.add(b, f)?;
        self.norm(g, p, "dec.norm3", out)
    }

    /// Encoder output for `(batch, max_len)` ids.
    pub fn encode(&self, g: &mut Graph<T>, p: &BoundParams, enc_ids: &[TokenId], batch: usize) -> Result<Var> {
        let x = self.positional_embed(g, p.var("enc.tok_embed"), p.var("enc.pos_embed"), enc_ids, batch)?;
        self.encoder_block(g, p, x)
    }

    /// Decoder hidden states before dropout and the vocabulary projection.
    pub fn decode(&self, g: &mut Graph<T>, p: &BoundParams, dec_ids: &[TokenId], enc_out: Var, batch: usize) -> Result<Var> {
        let y = self.positional_embed(g, p.var("dec.tok_embed"), p.var("dec.pos_embed"), dec_ids, batch)?;
        self.decoder_block(g, p, y, enc_out)
    }

    /// Logits `(batch, max_len, vocab)`. Passing `dropout_rng` selects train
    /// mode; `None` is deterministic eval mode.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        enc_ids: &[TokenId],
        dec_ids: &[TokenId],
        batch: usize,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let enc_out = self.encode(g, p, enc_ids, batch)?;
        let mut h = self.decode(g, p, dec_ids, enc_out, batch)?;
        if let Some(rng) = dropout_rng {
            if self.config.dropout > 0.0 {
                h = g.dropout(h, self.config.dropout, rng)?;
            }
        }
        self.linear(g, p, "out", h)
    }

    /// Eval-mode logits without keeping the graph around.
    pub fn logits(&self, store: &ParamStore<T>, enc_ids: &[TokenId], dec_ids: &[TokenId], batch: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, store);
        let out = self.forward(&mut g, &p, enc_ids, dec_ids, batch, None)?;
        Ok(g.value(out).clone())
    }
}
