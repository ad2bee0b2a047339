//! Teacher-forced reconstruction training, metrics and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, EncodedBatch, EncodedStory, TokenId, PAD_ID};
use crate::model::{FNetAutoencoder, ModelConfig};
use crate::numerics::{
    adam_step, rows_cols, softmax_and_nll, AdamConfig, GradStore, Graph, ParamStore, Real, Rng, RngState, Tensor,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub max_stories: usize,
    pub val_fraction: f64,
    pub checkpoint: Option<PathBuf>,
    /// Save every this many epochs (the final epoch is always saved).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 50,
            adam: AdamConfig::default(),
            seed: 0,
            max_stories: usize::MAX,
            val_fraction: 0.1,
            checkpoint: None,
            checkpoint_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Aggregate metrics over a set of positions.
///
/// `acc_all` counts every position including `[PAD]` targets; `acc_masked`
/// excludes them. When every target is `[PAD]`, `acc_masked` is 0 and
/// `masked_defined` is false.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epoch: usize,
    pub loss: f64,
    pub acc_all: f64,
    pub acc_masked: f64,
    pub masked_defined: bool,
    pub positions: usize,
    pub tokens_per_sec: f64,
}

impl Metrics {
    /// Equality on everything except the wall-clock throughput.
    pub fn same_values(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.loss.to_bits() == other.loss.to_bits()
            && self.acc_all.to_bits() == other.acc_all.to_bits()
            && self.acc_masked.to_bits() == other.acc_masked.to_bits()
            && self.masked_defined == other.masked_defined
            && self.positions == other.positions
    }
}

#[derive(Default)]
struct Tally {
    loss_sum: f64,
    positions: usize,
    correct: usize,
    correct_non_pad: usize,
    non_pad: usize,
}

impl Tally {
    fn add_accuracy<T: Real>(&mut self, logits: &[T], targets: &[TokenId], vocab: usize, pad_id: TokenId) {
        for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
            let hit = argmax(row) == t as usize;
            self.correct += hit as usize;
            if t != pad_id {
                self.non_pad += 1;
                self.correct_non_pad += hit as usize;
            }
        }
        self.positions += targets.len();
    }

    fn finish(&self, epoch: usize, seconds: f64) -> Metrics {
        let n = self.positions.max(1) as f64;
        Metrics {
            epoch,
            loss: self.loss_sum / n,
            acc_all: self.correct as f64 / n,
            acc_masked: if self.non_pad > 0 {
                self.correct_non_pad as f64 / self.non_pad as f64
            } else {
                0.0
            },
            masked_defined: self.non_pad > 0,
            positions: self.positions,
            tokens_per_sec: if seconds > 0.0 { self.positions as f64 / seconds } else { 0.0 },
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy and both accuracies for `(B, L, V)` logits against `(B, L)` targets.
pub fn loss_and_metrics<T: Real>(logits: &Tensor<T>, targets: &[TokenId], pad_id: TokenId) -> Result<Metrics> {
    let (rows, vocab) = rows_cols(logits.shape());
    if logits.rank() < 2 || rows != targets.len() {
        return Err(Error::shape("loss_and_metrics", logits.shape(), &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::IdOutOfRange {
            what: "target",
            id: bad as usize,
            limit: vocab,
        });
    }
    let mut tally = Tally::default();
    let (_, losses) = softmax_and_nll(logits.data(), targets, vocab);
    tally.loss_sum = losses.iter().map(|l| l.as_f64()).sum();
    tally.add_accuracy(logits.data(), targets, vocab, pad_id);
    Ok(tally.finish(0, 0.0))
}

/// One pass over `batches`: forward in train mode, loss, backward, Adam.
///
/// Returned metrics are position-weighted means of the train-mode batches.
pub fn train_epoch<T: Real>(
    model: &FNetAutoencoder<T>,
    store: &mut ParamStore<T>,
    batches: &[EncodedBatch],
    adam: &AdamConfig,
    rng: &mut Rng,
) -> Result<Metrics> {
    if batches.is_empty() {
        return Err(Error::NoData);
    }
    let started = Instant::now();
    let vocab = model.config().vocab_size;
    let mut tally = Tally::default();
    for (i, batch) in batches.iter().enumerate() {
        let mut g = Graph::new();
        let p = model.bind(&mut g, store);
        let logits = model.forward(&mut g, &p, &batch.enc_ids, &batch.dec_input, batch.batch, Some(rng))?;
        let loss = g.cross_entropy(logits, &batch.dec_target)?;
        let loss_value = g.value(loss).item().expect("scalar loss").as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { batch: i });
        }
        tally.loss_sum += loss_value * batch.positions() as f64;
        tally.add_accuracy(g.value(logits).data(), &batch.dec_target, vocab, PAD_ID);
        let mut grads = g.backward(loss)?;
        let named: GradStore<T> = p
            .iter()
            .map(|(name, v)| (name.to_owned(), grads.take(v).expect("leaf gradient")))
            .collect();
        drop(g);
        adam_step(store, &named, adam)?;
    }
    Ok(tally.finish(0, started.elapsed().as_secs_f64()))
}

/// Eval-mode metrics; parameters are not touched.
pub fn evaluate<T: Real>(model: &FNetAutoencoder<T>, store: &ParamStore<T>, batches: &[EncodedBatch]) -> Result<Metrics> {
    if batches.is_empty() {
        return Err(Error::NoData);
    }
    let started = Instant::now();
    let vocab = model.config().vocab_size;
    let mut tally = Tally::default();
    for batch in batches {
        let logits = model.logits(store, &batch.enc_ids, &batch.dec_input, batch.batch)?;
        let (_, losses) = softmax_and_nll(logits.data(), &batch.dec_target, vocab);
        tally.loss_sum += losses.iter().map(|l| l.as_f64()).sum::<f64>();
        tally.add_accuracy(logits.data(), &batch.dec_target, vocab, PAD_ID);
    }
    Ok(tally.finish(0, started.elapsed().as_secs_f64()))
}

/// Holds everything needed to continue a run: model, parameters with Adam
/// state, the random stream and the number of completed epochs.
pub struct Trainer<T: Real> {
    model: FNetAutoencoder<T>,
    store: ParamStore<T>,
    rng: Rng,
    epoch: usize,
    config: TrainConfig,
}

/// Metrics for one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub train: Metrics,
    pub val: Option<Metrics>,
}

impl<T: Real> Trainer<T> {
    /// Fresh run: parameters are drawn from `Rng::new(config.seed)`, which
    /// then keeps driving shuffling and dropout.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = FNetAutoencoder::new(model_config)?;
        let mut rng = Rng::new(config.seed);
        let store = model.init_params(&mut rng)?;
        Ok(Self {
            model,
            store,
            rng,
            epoch: 0,
            config,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = FNetAutoencoder::new(ckpt.config.clone())?;
        let store = ckpt.to_store::<T>();
        model.check_params(&store)?;
        let rng = Rng::from_state(&ckpt.rng).ok_or_else(|| Error::Checkpoint("invalid rng state".into()))?;
        Ok(Self {
            model,
            store,
            rng,
            epoch: ckpt.epoch,
            config,
        })
    }

    pub fn model(&self) -> &FNetAutoencoder<T> {
        &self.model
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Trains one epoch over `train` in a freshly shuffled order, then
    /// evaluates on `val` when it is non-empty.
    pub fn run_epoch(&mut self, train: &[EncodedStory], val: &[EncodedStory]) -> Result<EpochReport> {
        let shuffle = self.rng.next_u64();
        let batches = make_batches(train, self.config.batch_size, Some(shuffle))?;
        self.epoch += 1;
        let mut train_metrics = train_epoch(&self.model, &mut self.store, &batches, &self.config.adam, &mut self.rng)?;
        train_metrics.epoch = self.epoch;
        let val = if val.is_empty() {
            None
        } else {
            let mut m = self.evaluate(val)?;
            m.epoch = self.epoch;
            Some(m)
        };
        Ok(EpochReport {
            train: train_metrics,
            val,
        })
    }

    pub fn evaluate(&self, stories: &[EncodedStory]) -> Result<Metrics> {
        let batches = make_batches(stories, self.config.batch_size, None)?;
        let mut m = evaluate(&self.model, &self.store, &batches)?;
        m.epoch = self.epoch;
        Ok(m)
    }

    /// Runs epochs until `config.epochs` have completed, saving checkpoints
    /// when a path is configured.
    pub fn fit(
        &mut self,
        train: &[EncodedStory],
        val: &[EncodedStory],
        mut on_epoch: impl FnMut(&EpochReport),
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while self.epoch < self.config.epochs {
            let report = self.run_epoch(train, val)?;
            on_epoch(&report);
            reports.push(report);
            if let Some(path) = &self.config.checkpoint {
                let interval = self.config.checkpoint_interval.max(1);
                if self.epoch.is_multiple_of(interval) || self.epoch == self.config.epochs {
                    self.checkpoint().save(path)?;
                }
            }
        }
        Ok(reports)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.model.config().clone(), &self.store, self.epoch, self.rng.state())
    }
}

/// Splits off the last `fraction` of `items` (rounded up when non-zero) for validation.
pub fn split_validation<T: Clone>(items: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let n_val = if fraction <= 0.0 {
        0
    } else {
        ((items.len() as f64 * fraction).ceil() as usize).min(items.len())
    };
    let cut = items.len() - n_val;
    (items[..cut].to_vec(), items[cut..].to_vec())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FNAE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    epoch: usize,
    step: u64,
    rng: RngState,
}

/// Serialized training state. Values are stored as 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub epoch: usize,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_store<T: Real>(config: ModelConfig, store: &ParamStore<T>, epoch: usize, rng: RngState) -> Self {
        let mut params = ParamStore::new();
        for (name, p) in store.entries() {
            params.insert(name, p.value.cast()).expect("unique names");
            let slot = params.param_mut(name).expect("just inserted");
            slot.m = p.m.cast();
            slot.v = p.v.cast();
        }
        params.set_step(store.step());
        Self {
            config,
            params,
            epoch,
            rng,
        }
    }

    pub fn to_store<T: Real>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, p) in self.params.entries() {
            out.insert(name, p.value.cast()).expect("unique names");
            let slot = out.param_mut(name).expect("just inserted");
            slot.m = p.m.cast();
            slot.v = p.v.cast();
        }
        out.set_step(self.params.step());
        out
    }

    /// Binary encoding:
    ///
    /// ```text
    /// "FNAE" | version u32 | meta_len u32 | meta JSON
    /// | n u32 | n x tensor            (parameters)
    /// | 2n u32 | 2n x tensor          (Adam moments, "m/<name>" then "v/<name>")
    /// | crc32 u32 of everything before it
    /// tensor = name_len u16 | name | rank u8 | dims u32 x rank | values f32 x prod(dims)
    /// ```
    ///
    /// All integers and floats are little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            model: self.config.clone(),
            epoch: self.epoch,
            step: self.params.step(),
            rng: self.rng.clone(),
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            write_tensor(&mut out, name, t)?;
        }
        out.extend_from_slice(&(2 * self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.entries() {
            write_tensor(&mut out, &format!("m/{name}"), &p.m)?;
        }
        for (name, p) in self.params.entries() {
            write_tensor(&mut out, &format!("v/{name}"), &p.v)?;
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected \"FNAE\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("config JSON: {e}")))?;
        let mut params = ParamStore::new();
        let count = r.u32()? as usize;
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            params
                .insert(name, t)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let moments = r.u32()? as usize;
        if moments != 2 * count {
            return Err(Error::Checkpoint(format!(
                "expected {} optimizer tensors, found {moments}",
                2 * count
            )));
        }
        for _ in 0..moments {
            let (name, t) = r.tensor()?;
            let (kind, base) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad optimizer tensor name {name:?}")))?;
            let slot = params
                .param_mut(base)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {base:?}")))?;
            if t.shape() != slot.value.shape() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {base:?}")));
            }
            match kind {
                "m" => slot.m = t,
                "v" => slot.v = t,
                _ => return Err(Error::Checkpoint(format!("bad optimizer tensor name {name:?}"))),
            }
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after CRC", bytes.len() - r.pos)));
        }
        params.set_step(meta.step);
        Ok(Self {
            config: meta.model,
            params,
            epoch: meta.epoch,
            rng: meta.rng,
        })
    }

    /// Writes the checkpoint and returns its identifier (the CRC32 as hex).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(id_of(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::load_with_id(path)?.0)
    }

    pub fn load_with_id(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, id_of(&bytes)))
    }
}

fn id_of(bytes: &[u8]) -> String {
    let n = bytes.len();
    format!("{:08x}", u32::from_le_bytes(bytes[n - 4..].try_into().expect("4 bytes")))
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large for {name}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name_len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Checkpoint(format!("tensor name at offset {at} is not UTF-8")))?
            .to_owned();
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}
