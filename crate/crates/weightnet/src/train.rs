//! Desk-scale supervised training: SGD with momentum and weight decay, a
//! linearly decaying learning rate, cross-entropy loss, JSONL metrics and a
//! binary checkpoint format.
//!
//! Runs are deterministic given (config, seed): data order, initialization
//! and arithmetic are all seeded, and the metrics `seconds` field stays 0
//! unless `timing` is switched on, so reruns produce byte-identical logs.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{NDTensor, Scalar, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Start value of the linearly decaying learning rate.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    /// Record wall-clock seconds in the metrics log. Off by default: the log
    /// is then byte-reproducible. Timing always goes to stderr.
    #[serde(default)]
    pub timing: bool,
}

fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.momentum.is_finite() && self.weight_decay.is_finite()) {
            return Err(Error::Config("hyperparameters must be finite".into()));
        }
        Ok(())
    }
}

/// One metrics-log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_top1: f64,
    pub seconds: f64,
}

/// SGD with momentum, weight decay and per-step linear LR decay.
struct Sgd<T: Scalar> {
    velocities: Vec<Vec<T>>,
    momentum: T,
    weight_decay: T,
}

impl<T: Scalar> Sgd<T> {
    fn new(params: &[(String, &NDTensor<T>)], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocities: params.iter().map(|(_, p)| vec![T::ZERO; p.numel()]).collect(),
            momentum: T::from_f64(momentum),
            weight_decay: T::from_f64(weight_decay),
        }
    }

    fn step(&mut self, params: &[(String, &NDTensor<T>)], grads: &[Vec<T>], lr: T) {
        for (((_, p), v), g) in params.iter().zip(&mut self.velocities).zip(grads) {
            let (m, wd) = (self.momentum, self.weight_decay);
            p.update_data(|data| {
                for ((w, vel), &gi) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                    let grad = gi + *w * wd;
                    *vel = *vel * m + grad;
                    *w -= lr * *vel;
                }
            });
        }
    }
}

/// Linear decay from `lr0` to zero over `total` steps.
fn lr_at(lr0: f64, step: usize, total: usize) -> f64 {
    lr0 * (total - step) as f64 / total as f64
}

fn check_finite<T: Scalar>(name: &str, t: &NDTensor<T>, step: usize) -> Result<()> {
    if !t.is_all_finite() {
        return Err(Error::NonFinite {
            tensor: name.to_string(),
            step,
        });
    }
    Ok(())
}

/// Run the training loop; returns one metrics record per epoch.
///
/// `on_epoch` fires after each epoch with the fresh record (the runner uses
/// it to stream the JSONL file).
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_data: &Dataset,
    eval_data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_data.is_empty() || eval_data.is_empty() {
        return Err(Error::Usage("training and eval datasets must be nonempty".into()));
    }
    let params = model.named_parameters();
    let mut opt = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
    let batches_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_data.batch::<T>(chunk)?;
            let tape = Tape::new();
            let logits = model.forward(&tape, &x, true)?;
            let loss = logits.cross_entropy_logits(&labels)?;
            check_finite("loss", &loss, step)?;
            let grad_map = loss.backward()?;
            let grads: Vec<Vec<T>> = params
                .iter()
                .map(|(_, p)| grad_map.grad_or_zeros(p).to_vec())
                .collect();
            for ((name, _), g) in params.iter().zip(&grads) {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite {
                        tensor: format!("{name}.grad"),
                        step,
                    });
                }
            }
            let lr = T::from_f64(lr_at(cfg.lr, step, total_steps));
            opt.step(&params, &grads, lr);
            for (name, p) in &params {
                check_finite(name, p, step)?;
            }
            loss_sum += loss.item()?.to_f64() * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let eval_top1 = evaluate(model, eval_data, cfg.batch_size)?;
        let seconds = t0.elapsed().as_secs_f64();
        let record = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            eval_top1,
            seconds: if cfg.timing { seconds } else { 0.0 },
        };
        eprintln!(
            "epoch {epoch}: train_loss {:.4}, eval_top1 {:.4} ({seconds:.1}s)",
            record.train_loss, record.eval_top1
        );
        on_epoch(&record);
        metrics.push(record);
    }
    Ok(metrics)
}

/// Top-1 accuracy in [0, 1].
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation dataset must be nonempty".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch::<T>(chunk)?;
        let tape = Tape::new();
        let logits = model.forward(&tape, &x, false)?;
        let preds = logits.argmax_rows()?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

// ── checkpoint format ───────────────────────────────────────────────
//
// magic "WNCK", version u32 LE, record count u32 LE, then per record:
// name length u32 LE + UTF-8 name, rank u32 LE + extents u32 LE each,
// f32 LE payload (row-major).

const CHECKPOINT_MAGIC: &[u8; 4] = b"WNCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Write parameters and persistent state (BN running stats) of a model.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut entries = model.named_parameters();
    entries.extend(model.named_state());
    let p = path.display().to_string();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data().iter() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&p, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&p, e))
}

/// Load a checkpoint into an already-built model; every stored record must
/// match a tensor of the same name and shape.
pub fn load_checkpoint<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&p, e))?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(&p, "missing WNCK magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(&p, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12usize;
    let read_u32 = |off: &mut usize| -> Result<u32> {
        let v = bytes
            .get(*off..*off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(&p, "truncated record"))?;
        *off += 4;
        Ok(v)
    };
    let mut records: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut off)? as usize;
        let name = String::from_utf8(
            bytes
                .get(off..off + name_len)
                .ok_or_else(|| Error::format(&p, "truncated name"))?
                .to_vec(),
        )
        .map_err(|_| Error::format(&p, "record name is not UTF-8"))?;
        off += name_len;
        let rank = read_u32(&mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut off)? as usize);
        }
        let n: usize = shape.iter().product();
        let end = off + 4 * n;
        let data: Vec<f32> = bytes
            .get(off..end)
            .ok_or_else(|| Error::format(&p, "truncated payload"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off = end;
        records.push((name, shape, data));
    }
    if off != bytes.len() {
        return Err(Error::format(&p, "trailing bytes after last record"));
    }
    let mut entries = model.named_parameters();
    entries.extend(model.named_state());
    for (name, shape, data) in records {
        let target = entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::format(&p, format!("no tensor named '{name}' in this model")))?;
        if target.1.shape() != shape.as_slice() {
            return Err(Error::format(
                &p,
                format!(
                    "shape of '{name}' is {:?} in the checkpoint but {:?} in the model",
                    shape,
                    target.1.shape()
                ),
            ));
        }
        target
            .1
            .update_data(|d| d.iter_mut().zip(&data).for_each(|(w, &v)| *w = T::from_f64(v as f64)));
    }
    Ok(())
}
