//! Seed-text generation, results export and the mixing-vs-attention benchmark.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{decode_ids, encode_story, StoryRecord, TokenId, Vocabulary, END_ID, PAD_ID, START_ID};
use crate::fourier::MixingPlan;
use crate::model::FNetAutoencoder;
use crate::numerics::{Graph, ParamStore, Real, Rng, Tensor, Var};
use crate::{Error, Result};

/// How the next token is chosen at each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    /// Sample from the `k` most probable tokens, renormalized.
    TopK { k: usize, seed: u64 },
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Greedy => f.write_str("greedy"),
            Strategy::TopK { k, seed } => write!(f, "topk(k={k},seed={seed})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub seed_text: String,
    pub max_steps: usize,
    pub strategy: Strategy,
}

impl GenerationRequest {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.max_steps == 0 || self.max_steps > max_len {
            return Err(Error::InvalidArgument(format!(
                "max steps must lie in 1..={max_len}, got {}",
                self.max_steps
            )));
        }
        if let Strategy::TopK { k: 0, .. } = self.strategy {
            return Err(Error::InvalidArgument("top-k needs k >= 1".into()));
        }
        Ok(())
    }
}

/// Emitted ids (without the terminating `[END]`) and their decoded text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub ids: Vec<TokenId>,
    pub text: String,
    /// True when decoding stopped at `[END]` rather than at the step limit.
    pub ended: bool,
}

/// Autoregressive decoding from `[START]` conditioned on the encoded seed.
///
/// The encoder runs once. Each step reruns the causal decoder over the prefix
/// and projects only the newest position; causality makes this equal to the
/// full forward pass at that position.
pub fn generate<T: Real>(
    model: &FNetAutoencoder<T>,
    store: &ParamStore<T>,
    vocab: &Vocabulary,
    request: &GenerationRequest,
) -> Result<Generation> {
    let cfg = model.config();
    let l = cfg.max_len;
    request.validate(l)?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    model.check_params(store)?;
    let encoded = encode_story(vocab, &StoryRecord::new(request.seed_text.clone()), l)?;
    let enc_out = {
        let mut g = Graph::new();
        let p = model.bind(&mut g, store);
        let out = model.encode(&mut g, &p, &encoded.enc_ids, 1)?;
        g.value(out).clone()
    };
    let out_w = store.get("out.w").expect("checked");
    let out_b = store.get("out.b").expect("checked");
    let mut sampler = match request.strategy {
        Strategy::Greedy => None,
        Strategy::TopK { k, seed } => Some((k, Rng::new(seed))),
    };

    let mut dec_ids = vec![PAD_ID; l];
    dec_ids[0] = START_ID;
    let mut emitted = Vec::new();
    let mut ended = false;
    for t in 0..request.max_steps {
        let mut g = Graph::new();
        let p = model.bind(&mut g, store);
        let enc = g.constant(enc_out.clone());
        let h = model.decode(&mut g, &p, &dec_ids, enc, 1)?;
        let logits = project_row(&g, h, t, out_w, out_b);
        let next = match &mut sampler {
            None => argmax_lowest(&logits),
            Some((k, rng)) => sample_top_k(&logits, *k, rng),
        } as TokenId;
        if next == END_ID {
            ended = true;
            break;
        }
        emitted.push(next);
        if t + 1 < l {
            dec_ids[t + 1] = next;
        }
    }
    let text = decode_ids(vocab, &emitted)?;
    Ok(Generation {
        ids: emitted,
        text,
        ended,
    })
}

fn project_row<T: Real>(g: &Graph<T>, h: Var, t: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    let e = w.shape()[0];
    let v = w.shape()[1];
    let row = &g.value(h).data()[t * e..(t + 1) * e];
    let mut out: Vec<T> = b.data().to_vec();
    for (i, &x) in row.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w.data()[i * v..(i + 1) * v]) {
            *o += x * wij;
        }
    }
    out.into_iter().map(|x| x.as_f64()).collect()
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws from the `k` largest logits (ties ordered by index) after softmax
/// renormalization. With `k = 1` this is the greedy choice.
fn sample_top_k(logits: &[f64], k: usize, rng: &mut Rng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k.min(logits.len()));
    let top = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    order[order.len() - 1]
}

/// One exported generation. Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub seed: String,
    pub generated: String,
    pub strategy: String,
    #[serde(rename = "checkpoint-id")]
    pub checkpoint_id: String,
}

/// Writes `records` as a pretty-printed UTF-8 JSON array.
pub fn export_results(records: &[GenerationRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(records).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Shapes for [`bench_mixing`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub key_dim: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            embed_dim: 128,
            num_heads: 8,
            key_dim: 128,
            warmup: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    FourierMix,
    SelfAttention,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::FourierMix => "fourier_mix",
            LayerKind::SelfAttention => "self_attention",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub layer: LayerKind,
    pub seq_len: usize,
    pub mean_secs: f64,
    pub min_secs: f64,
    pub params: usize,
    /// Mean attention time over mean time of this row's layer.
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub repetitions: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, layer: LayerKind, seq_len: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.layer == layer && r.seq_len == seq_len)
    }

    /// Attention mean time over mixing mean time at `seq_len`.
    pub fn ratio(&self, seq_len: usize) -> Option<f64> {
        let a = self.row(LayerKind::SelfAttention, seq_len)?;
        let m = self.row(LayerKind::FourierMix, seq_len)?;
        Some(a.mean_secs / m.mean_secs)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<15} {:>7} {:>12} {:>12} {:>9} {:>8}",
            "layer", "seq_len", "mean_ms", "min_ms", "params", "speedup"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<15} {:>7} {:>12.3} {:>12.3} {:>9} {:>8.2}",
                r.layer.to_string(),
                r.seq_len,
                r.mean_secs * 1e3,
                r.min_secs * 1e3,
                r.params,
                r.speedup
            )?;
        }
        Ok(())
    }
}

/// Parameter count of one self-attention layer with q/k/v/o projections.
pub fn attention_params(embed_dim: usize, num_heads: usize, key_dim: usize) -> usize {
    let inner = num_heads * key_dim;
    3 * (embed_dim * inner + inner) + inner * embed_dim + embed_dim
}

fn time_runs(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut total = 0.0;
    let mut min = f64::INFINITY;
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        let s = start.elapsed().as_secs_f64();
        total += s;
        min = min.min(s);
    }
    Ok((total / reps as f64, min))
}

/// Forward-only wall time of Fourier mixing vs multi-head self-attention on
/// identical `(batch, seq_len, embed_dim)` inputs, in 32-bit floats.
pub fn bench_mixing(config: &BenchConfig, seq_lens: &[usize], repetitions: usize) -> Result<BenchReport> {
    if repetitions < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 repetitions, got {repetitions}")));
    }
    if config.warmup < 3 {
        return Err(Error::InvalidArgument("need at least 3 warmup runs".into()));
    }
    if let Some(&n) = seq_lens.iter().find(|&&n| n < 2) {
        return Err(Error::InvalidArgument(format!("sequence length {n} < 2")));
    }
    if seq_lens.is_empty() {
        return Err(Error::InvalidArgument("no sequence lengths".into()));
    }
    let (b, e, h, k) = (config.batch, config.embed_dim, config.num_heads, config.key_dim);
    let inner = h * k;
    let mut rng = Rng::new(config.seed);
    let mut uniform = |shape: Vec<usize>, bound: f64| {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-bound, bound) as f32).collect();
        Tensor::new(shape, data).expect("length matches shape")
    };
    let bound_in = (6.0 / (e + inner) as f64).sqrt();
    let weights: Vec<Tensor<f32>> = vec![
        uniform(vec![e, inner], bound_in),
        uniform(vec![e, inner], bound_in),
        uniform(vec![e, inner], bound_in),
        uniform(vec![inner, e], bound_in),
    ];
    let biases: Vec<Tensor<f32>> = vec![
        Tensor::zeros(vec![inner]),
        Tensor::zeros(vec![inner]),
        Tensor::zeros(vec![inner]),
        Tensor::zeros(vec![e]),
    ];

    let mut rows = Vec::new();
    for &n in seq_lens {
        let x = uniform(vec![b, n, e], 1.0);
        let plan = Arc::new(MixingPlan::<f32>::new(n));
        let (mix_mean, mix_min) = time_runs(config.warmup, repetitions, || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            g.fourier_mix(xv, &plan)?;
            Ok(())
        })?;
        let (att_mean, att_min) = time_runs(config.warmup, repetitions, || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let mut proj = Vec::with_capacity(3);
            for i in 0..3 {
                let w = g.constant(weights[i].clone());
                let bias = g.constant(biases[i].clone());
                let y = g.matmul(xv, w)?;
                proj.push(g.add(y, bias)?);
            }
            let heads = g.attention(proj[0], proj[1], proj[2], h, false)?;
            let w = g.constant(weights[3].clone());
            let bias = g.constant(biases[3].clone());
            let y = g.matmul(heads, w)?;
            g.add(y, bias)?;
            Ok(())
        })?;
        rows.push(BenchRow {
            layer: LayerKind::FourierMix,
            seq_len: n,
            mean_secs: mix_mean,
            min_secs: mix_min,
            params: 0,
            speedup: att_mean / mix_mean,
        });
        rows.push(BenchRow {
            layer: LayerKind::SelfAttention,
            seq_len: n,
            mean_secs: att_mean,
            min_secs: att_min,
            params: attention_params(e, h, k),
            speedup: 1.0,
        });
    }
    Ok(BenchReport {
        config: config.clone(),
        repetitions,
        rows,
    })
}
