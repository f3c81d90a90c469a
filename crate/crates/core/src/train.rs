//! Optimization loop, schedules, history and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::capsule::{RoutingConfig, RoutingState};
use crate::checkpoint::Checkpoint;
use crate::data::{self, DatasetSplit, NoiseSpec};
use crate::error::{Error, Result};
use crate::network::{self, Model};
use crate::tensor::{Element, Tensor};

// ---------------------------------------------------------------- config

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

/// Spread-loss margin, raised linearly from `start` to `end` over the first
/// `warm_epochs` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginSchedule {
    pub start: f64,
    pub end: f64,
    pub warm_epochs: usize,
}

impl Default for MarginSchedule {
    fn default() -> Self {
        MarginSchedule {
            start: 0.2,
            end: 0.9,
            warm_epochs: 10,
        }
    }
}

impl MarginSchedule {
    /// Margin for 0-based `epoch`.
    pub fn at(&self, epoch: usize) -> f64 {
        if self.warm_epochs == 0 {
            return self.end;
        }
        let t = epoch.min(self.warm_epochs) as f64 / self.warm_epochs as f64;
        self.start + (self.end - self.start) * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub optimizer: OptimizerConfig,
    pub margin: MarginSchedule,
    pub recon_weight: f64,
    pub routing: RoutingConfig,
    pub seed: u64,
    /// Where checkpoints and history go; nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Keep `epoch-NNN.ckpt` for every epoch besides `last.ckpt`/`best.ckpt`.
    pub keep_epoch_checkpoints: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 3e-3,
            lr_decay: 0.96,
            grad_clip: 5.0,
            optimizer: OptimizerConfig::default(),
            margin: MarginSchedule::default(),
            recon_weight: 0.0005 * 1024.0,
            routing: RoutingConfig::default(),
            seed: 0,
            checkpoint_dir: None,
            keep_epoch_checkpoints: false,
            eval_batch_size: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.epochs == 0 {
            return fail("train.epochs must be >= 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("train.learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("train.lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if !(self.grad_clip >= 0.0) {
            return fail(format!("train.grad_clip {} must be >= 0", self.grad_clip));
        }
        if !(self.recon_weight >= 0.0) {
            return fail(format!("train.recon_weight {} must be >= 0", self.recon_weight));
        }
        for m in [self.margin.start, self.margin.end] {
            if !(m > 0.0 && m <= 1.0) {
                return fail(format!("margin {m} outside (0, 1]"));
            }
        }
        match self.optimizer {
            OptimizerConfig::Adam { beta1, beta2, epsilon } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
                    return fail("adam needs 0 <= beta < 1 and epsilon > 0".into());
                }
            }
            OptimizerConfig::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return fail(format!("sgd momentum {momentum} outside [0, 1)"));
                }
            }
        }
        self.routing.validate()
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }

    /// Shuffle seed for 0-based `epoch`.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64 + 1)
    }
}

// ---------------------------------------------------------------- optimizer

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub slot_names: Vec<String>,
    /// `slots[s][p]` is slot `s` for parameter `p`.
    pub slots: Vec<Vec<Tensor<T>>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(cfg: &OptimizerConfig, model: &Model<T>) -> Self {
        let names: Vec<String> = match cfg {
            OptimizerConfig::Adam { .. } => vec!["adam.m".into(), "adam.v".into()],
            OptimizerConfig::Sgd { .. } => vec!["sgd.velocity".into()],
        };
        let zeros = || model.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        OptimizerState {
            step: 0,
            slots: names.iter().map(|_| zeros()).collect(),
            slot_names: names,
        }
    }

    /// One update of every parameter in place.
    pub fn apply(&mut self, cfg: &OptimizerConfig, model: &mut Model<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        self.step += 1;
        let new_values = match *cfg {
            OptimizerConfig::Adam { beta1, beta2, epsilon } => {
                let t = self.step as i32;
                let step = T::from_f64(lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t)));
                let (b1, b2, eps) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(epsilon));
                let one = T::one();
                let mut out = Vec::with_capacity(grads.len());
                for (k, (p, g)) in model.params().iter().zip(grads).enumerate() {
                    let m = self.slots[0][k].zip_map(g, |m, g| b1 * m + (one - b1) * g)?;
                    let v = self.slots[1][k].zip_map(g, |v, g| b2 * v + (one - b2) * g * g)?;
                    let delta = m.zip_map(&v, |m, v| step * m / (v.sqrt() + eps))?;
                    out.push(p.value.zip_map(&delta, |w, d| w - d)?);
                    self.slots[0][k] = m;
                    self.slots[1][k] = v;
                }
                out
            }
            OptimizerConfig::Sgd { momentum } => {
                let (mu, lr) = (T::from_f64(momentum), T::from_f64(lr));
                let mut out = Vec::with_capacity(grads.len());
                for (k, (p, g)) in model.params().iter().zip(grads).enumerate() {
                    let vel = self.slots[0][k].zip_map(g, |v, g| mu * v + g)?;
                    out.push(p.value.zip_map(&vel, |w, v| w - lr * v)?);
                    self.slots[0][k] = vel;
                }
                out
            }
        };
        model.set_values(new_values)
    }
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

// ---------------------------------------------------------------- history

/// One line of the training history. Wall-clock time is deliberately kept
/// out of these records (see [`write_history`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
    pub learning_rate: f64,
    pub margin: f64,
    /// [`weights_checksum`] after the epoch.
    pub weights_crc32: String,
}

/// CRC-32 (hex) over every parameter's little-endian bytes in order.
pub fn weights_checksum<T: Element>(model: &Model<T>) -> String {
    let mut h = crc32fast::Hasher::new();
    for p in model.params() {
        h.update(&T::to_le_bytes_vec(p.value.data()));
    }
    format!("{:08x}", h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistoryMeta {
    format: String,
    /// Wall seconds per epoch; `None` for epochs timed by an earlier process.
    epoch_seconds: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistoryHeader {
    meta: HistoryMeta,
}

/// Write `history.jsonl`: a metadata line holding timings, then one record
/// per epoch. Everything after the first line depends only on the inputs.
pub fn write_history(path: &Path, records: &[EpochRecord], epoch_seconds: &[Option<f64>]) -> Result<()> {
    let header = HistoryHeader {
        meta: HistoryMeta {
            format: "capsnet-history/1".into(),
            epoch_seconds: epoch_seconds.to_vec(),
        },
    };
    let mut text = serde_json::to_string(&header)?;
    text.push('\n');
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read `history.jsonl` back as `(records, epoch_seconds)`.
pub fn read_history(path: &Path) -> Result<(Vec<EpochRecord>, Vec<Option<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: HistoryHeader = serde_json::from_str(lines.next().unwrap_or("{}"))?;
    let records = lines.map(serde_json::from_str).collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
    Ok((records, header.meta.epoch_seconds))
}

// ---------------------------------------------------------------- training

fn routing_summary<T: Element>(states: &[RoutingState<T>]) -> String {
    let mut s = String::new();
    for (name, st) in ["conv_caps", "class_caps"].iter().zip(states) {
        let (lo, hi) = st.sigma_sq.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
        let acts = st.a_out.data();
        let mean_a = acts.iter().map(|v| v.as_f64()).sum::<f64>() / acts.len().max(1) as f64;
        let _ = write!(s, "; {name}: lambda {} sigma^2 [{lo:e}, {hi:e}] mean a {mean_a:.4}", st.lambda);
    }
    s
}

/// Resumable training run over fixed train/validation splits.
pub struct Trainer<'a, T: Element> {
    state: Checkpoint<T>,
    train: &'a DatasetSplit,
    val: &'a DatasetSplit,
    epoch_seconds: Vec<Option<f64>>,
}

impl<'a, T: Element> Trainer<'a, T> {
    pub fn new(model: Model<T>, cfg: TrainConfig, train: &'a DatasetSplit, val: &'a DatasetSplit) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::contract("training split is empty"));
        }
        let optimizer = OptimizerState::new(&cfg.optimizer, &model);
        Ok(Trainer {
            state: Checkpoint {
                model,
                optimizer,
                seed: cfg.seed,
                config: cfg,
                epoch: 0,
                best_val_accuracy: None,
                history: Vec::new(),
            },
            train,
            val,
            epoch_seconds: Vec::new(),
        })
    }

    /// Continue from a checkpoint. `epochs` may extend the stored target.
    pub fn resume(ckpt: Checkpoint<T>, epochs: Option<usize>, train: &'a DatasetSplit, val: &'a DatasetSplit) -> Result<Self> {
        let mut state = ckpt;
        if let Some(e) = epochs {
            state.config.epochs = e;
        }
        state.config.validate()?;
        let mut epoch_seconds = vec![None; state.epoch];
        if let Some(dir) = &state.config.checkpoint_dir {
            if let Ok((_, secs)) = read_history(&dir.join("history.jsonl")) {
                for (slot, s) in epoch_seconds.iter_mut().zip(secs) {
                    *slot = s;
                }
            }
        }
        Ok(Trainer {
            state,
            train,
            val,
            epoch_seconds,
        })
    }

    pub fn state(&self) -> &Checkpoint<T> {
        &self.state
    }

    pub fn into_state(self) -> Checkpoint<T> {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.state.config.epochs
    }

    /// Train until the configured number of epochs is complete.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// One optimization step; returns the batch loss.
    fn step(&mut self, epoch: usize, batch: &data::Batch, margin: f64, lr: f64) -> Result<f64> {
        let cfg = &self.state.config;
        let model = &self.state.model;
        let tape = Tape::<T>::new();
        let bound = model.bind(&tape);
        let x = tape.constant(batch.images.cast::<T>());
        let out = model.forward(&bound, x, &cfg.routing, Some(&batch.labels))?;
        let l = network::loss(out.class_activations, out.reconstructions, x, &batch.labels, margin, cfg.recon_weight)?;
        let value = l.value().item().as_f64();
        let diagnose = |what: &str| {
            Error::NonFinite(format!(
                "{what} at epoch {} batch {} (loss {value}){}",
                epoch + 1,
                batch.index,
                routing_summary(&out.routing)
            ))
        };
        if !value.is_finite() {
            return Err(diagnose("loss"));
        }
        let grads = tape.backward(l)?;
        let mut g: Vec<Tensor<T>> = bound.vars().iter().map(|v| grads.wrt(*v)).collect::<Result<_>>()?;
        let norm = clip_global_norm(&mut g, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(diagnose("gradient"));
        }
        let opt_cfg = cfg.optimizer.clone();
        self.state.optimizer.apply(&opt_cfg, &mut self.state.model, &g, lr)?;
        Ok(value)
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.state.epoch;
        let cfg = self.state.config.clone();
        let (margin, lr) = (cfg.margin.at(epoch), cfg.lr_at(epoch));
        let batches = data::batches(self.train, cfg.batch_size, true, cfg.epoch_seed(epoch))?;
        let mut total = 0.0;
        for batch in &batches {
            let l = self.step(epoch, batch, margin, lr)?;
            log::debug!("epoch {} batch {}/{}: loss {l:.5}", epoch + 1, batch.index + 1, batches.len());
            total += l * batch.labels.len() as f64;
        }
        if let Some(p) = self.state.model.params().iter().find(|p| !p.value.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {} after epoch {}", p.name, epoch + 1)));
        }
        let val_accuracy = if self.val.is_empty() {
            None
        } else {
            Some(evaluate(&self.state.model, self.val, cfg.eval_batch_size, &cfg.routing)?.accuracy)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: total / self.train.len() as f64,
            val_accuracy,
            learning_rate: lr,
            margin,
            weights_crc32: weights_checksum(&self.state.model),
        };
        let improved = match (val_accuracy, self.state.best_val_accuracy) {
            (Some(v), Some(best)) => v > best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            self.state.best_val_accuracy = val_accuracy;
        }
        self.state.epoch += 1;
        self.state.history.push(record.clone());
        self.epoch_seconds.resize(epoch, None);
        self.epoch_seconds.push(Some(started.elapsed().as_secs_f64()));
        if let Some(dir) = &cfg.checkpoint_dir {
            self.persist(dir, improved)?;
        }
        log::info!(
            "epoch {}/{}: loss {:.5}, val accuracy {}, lr {:.3e}, margin {:.3}, {:.1}s",
            record.epoch,
            cfg.epochs,
            record.loss,
            val_accuracy.map_or("n/a".to_string(), |a| format!("{:.2}%", a * 100.0)),
            lr,
            margin,
            started.elapsed().as_secs_f64()
        );
        Ok(record)
    }

    fn persist(&self, dir: &Path, improved: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.state.save(dir.join("last.ckpt"))?;
        if self.state.config.keep_epoch_checkpoints {
            self.state.save(dir.join(format!("epoch-{:03}.ckpt", self.state.epoch)))?;
        }
        if improved {
            self.state.save(dir.join("best.ckpt"))?;
        }
        write_history(&dir.join("history.jsonl"), &self.state.history, &self.epoch_seconds)
    }
}

/// Build a model from `cfg.seed` and train it to completion.
pub fn train<T: Element>(
    spec: network::ArchitectureSpec,
    cfg: TrainConfig,
    train: &DatasetSplit,
    val: &DatasetSplit,
) -> Result<Checkpoint<T>> {
    let model = Model::build(spec, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg, train, val)?;
    trainer.run()?;
    Ok(trainer.into_state())
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// Per predicted class; 0 when the class is never predicted.
    pub precision: Vec<f64>,
    /// Per true class; 0 when the class never occurs.
    pub recall: Vec<f64>,
    /// Positions (within the evaluated split) of wrong predictions.
    pub misclassified: Vec<usize>,
}

impl EvalReport {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::contract("cannot evaluate an empty split"));
        }
        if labels.len() != predictions.len() {
            return Err(Error::Consistency(format!("{} labels vs {} predictions", labels.len(), predictions.len())));
        }
        if let Some(&c) = labels.iter().chain(predictions).find(|&&c| c >= classes) {
            return Err(Error::contract(format!("class {c} outside 0..{classes}")));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        let mut misclassified = Vec::new();
        for (i, (&t, &p)) in labels.iter().zip(predictions).enumerate() {
            confusion[t][p] += 1;
            if t != p {
                misclassified.push(i);
            }
        }
        let n_total = labels.len();
        let n_correct = n_total - misclassified.len();
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = (0..classes)
            .map(|c| ratio(confusion[c][c], (0..classes).map(|t| confusion[t][c]).sum()))
            .collect();
        let recall = (0..classes).map(|c| ratio(confusion[c][c], confusion[c].iter().sum())).collect();
        Ok(EvalReport {
            accuracy: n_correct as f64 / n_total as f64,
            n_correct,
            n_total,
            confusion,
            precision,
            recall,
            misclassified,
        })
    }

    /// Rows divided by their totals; rows of absent classes stay zero.
    pub fn normalized_confusion(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
            })
            .collect()
    }

    /// Accuracy as a percentage with two decimals, e.g. `99.87%`.
    pub fn accuracy_percent(&self) -> String {
        format!("{:.2}%", self.accuracy * 100.0)
    }

    /// Human-readable summary with the confusion matrix.
    pub fn table(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::new();
        let _ = writeln!(s, "accuracy {} ({}/{})", self.accuracy_percent(), self.n_correct, self.n_total);
        let _ = write!(s, "true\\pred");
        for p in 0..k {
            let _ = write!(s, "{p:>6}");
        }
        let _ = writeln!(s, "  recall");
        for (t, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{t:>9}");
            for c in row {
                let _ = write!(s, "{c:>6}");
            }
            let _ = writeln!(s, "  {:.4}", self.recall[t]);
        }
        let _ = write!(s, "precision");
        for p in &self.precision {
            let _ = write!(s, "{p:>6.3}");
        }
        s.push('\n');
        s
    }
}

/// Predicted classes for every sample, batched in split order.
pub fn predict_split<T: Element>(
    model: &Model<T>,
    split: &DatasetSplit,
    batch_size: usize,
    routing: &RoutingConfig,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(split.len());
    for batch in data::batches(split, batch_size, false, 0)? {
        let (act, _) = model.predict(&batch.images.cast::<T>(), routing)?;
        preds.extend(act.argmax_rows());
    }
    Ok(preds)
}

pub fn evaluate<T: Element>(
    model: &Model<T>,
    split: &DatasetSplit,
    batch_size: usize,
    routing: &RoutingConfig,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let preds = predict_split(model, split, batch_size, routing)?;
    EvalReport::from_predictions(&split.labels, &preds, model.spec().n_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseResult {
    pub label: String,
    pub spec: Option<NoiseSpec>,
    pub report: EvalReport,
}

/// Clean baseline followed by one report per corruption.
pub fn noise_eval<T: Element>(
    model: &Model<T>,
    split: &DatasetSplit,
    specs: &[NoiseSpec],
    batch_size: usize,
    routing: &RoutingConfig,
) -> Result<Vec<NoiseResult>> {
    for s in specs {
        s.validate()?;
    }
    let mut out = vec![NoiseResult {
        label: "clean".into(),
        spec: None,
        report: evaluate(model, split, batch_size, routing)?,
    }];
    for spec in specs {
        let mut noisy = split.clone();
        noisy.images = data::apply_noise(&split.images, spec)?;
        out.push(NoiseResult {
            label: spec.label(),
            spec: Some(spec.clone()),
            report: evaluate(model, &noisy, batch_size, routing)?,
        });
    }
    Ok(out)
}

/// Side-by-side comparison of [`noise_eval`] results.
pub fn noise_table(results: &[NoiseResult]) -> String {
    let clean = results.first().map(|r| r.report.accuracy).unwrap_or(0.0);
    let mut s = format!("{:<20}{:>10}{:>10}{:>10}\n", "input", "accuracy", "errors", "delta");
    for r in results {
        let _ = writeln!(
            s,
            "{:<20}{:>10}{:>10}{:>+10.2}",
            r.label,
            r.report.accuracy_percent(),
            r.report.n_total - r.report.n_correct,
            (r.report.accuracy - clean) * 100.0
        );
    }
    s
}
