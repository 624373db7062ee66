//! SGD with momentum, a step learning-rate schedule, the epoch loop and
//! classification metrics.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::TroiNet;
use crate::error::{Error, Result};
use crate::params::{sum_grads, ParamStore};
use crate::roi::RoiBox;
use crate::synth::{corrupt_rois, Corruption, SynthVideo};
use crate::tensor::{Precision, Real, Tensor};

pub const THREADS_ENV: &str = "TROIKIT_THREADS";

/// Piecewise-constant rate: `base · factor^k` where `k` counts the
/// boundaries at or below the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub boundaries: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    /// 0.01 for 20 epochs, 0.001 for 20, then 1e-4.
    pub fn standard() -> Self {
        Self {
            base: 0.01,
            boundaries: vec![20, 40],
            factor: 0.1,
        }
    }

    /// Drops by 10x after each third of `epochs`.
    pub fn thirds(base: f64, epochs: usize) -> Self {
        let mut boundaries = vec![epochs.div_ceil(3), (2 * epochs).div_ceil(3)];
        boundaries.dedup();
        Self {
            base,
            boundaries,
            factor: 0.1,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.boundaries.iter().filter(|&&b| epoch >= b).count();
        self.base * self.factor.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.factor > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "schedule boundaries must increase: {:?}",
                self.boundaries
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub precision: Precision,
    pub topk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::thirds(0.01, 12),
            seed: 0,
            precision: Precision::F32,
            topk: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.topk == 0 {
            return Err(Error::Config(
                "epochs, batch size and k must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum must be in [0, 1) and weight decay non-negative".into(),
            ));
        }
        self.schedule.validate()
    }
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.schedule.lr_at(epoch)
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            velocity: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect(),
        }
    }
}

/// `v ← μv + g + λθ`, then `θ ← θ − lr·v`. Consumes the stored gradients.
pub fn sgd_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::Contract(
            "optimizer state does not match parameters".into(),
        ));
    }
    if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
        return Err(Error::Contract(format!("no gradient for `{}`", p.name)));
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for (p, v) in store.iter_mut().zip(&mut state.velocity) {
        let grad = p.grad.take().expect("checked above");
        for ((theta, vel), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(grad.data())
        {
            *vel = mu * *vel + g + wd * *theta;
            *theta = *theta - lr * *vel;
        }
    }
    Ok(())
}

/// Anything that scores a video against every class.
pub trait Classifier: Sync {
    fn scores(&self, video: &SynthVideo, rois: &[RoiBox]) -> Result<Vec<f64>>;
}

impl<T: Real> Classifier for TroiNet<T> {
    fn scores(&self, video: &SynthVideo, rois: &[RoiBox]) -> Result<Vec<f64>> {
        self.logits(&video.frames.cast(), rois)
    }
}

/// Rank of `label` when ties go to the lower index; 0 is the prediction.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < label))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassTally {
    pub correct: usize,
    pub total: usize,
}

impl ClassTally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub per_class: Vec<ClassTally>,
}

impl Metrics {
    pub fn report(&self, names: &[&str]) -> String {
        let mut out = format!("top1 {:.4}\ntop{} {:.4}\n", self.top1, self.k, self.topk);
        for (c, tally) in self.per_class.iter().enumerate() {
            let name = names.get(c).copied().unwrap_or("?");
            out += &format!(
                "class {c} {name} {}/{} {:.4}\n",
                tally.correct,
                tally.total,
                tally.accuracy()
            );
        }
        out
    }
}

pub fn evaluate<C: Classifier>(model: &C, data: &[SynthVideo], k: usize) -> Result<Metrics> {
    evaluate_with(model, data, k, None)
}

/// As [`evaluate`], with every video's boxes corrupted first.
pub fn evaluate_with<C: Classifier>(
    model: &C,
    data: &[SynthVideo],
    k: usize,
    corruption: Option<Corruption>,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let ranks: Vec<(usize, usize, usize)> = data
        .par_iter()
        .map(|v| {
            let rois = match corruption {
                Some(mode) => corrupt_rois(&v.rois, mode),
                None => v.rois.clone(),
            };
            let scores = model.scores(v, &rois)?;
            if v.label >= scores.len() {
                return Err(Error::Contract(format!(
                    "label {} out of range for {} classes",
                    v.label,
                    scores.len()
                )));
            }
            Ok((v.label, rank_of(&scores, v.label), scores.len()))
        })
        .collect::<Result<_>>()?;
    let classes = ranks.iter().map(|r| r.2).max().unwrap_or(0);
    let mut per_class = vec![ClassTally::default(); classes];
    let (mut top1, mut topk) = (0usize, 0usize);
    for &(label, rank, _) in &ranks {
        per_class[label].total += 1;
        if rank == 0 {
            top1 += 1;
            per_class[label].correct += 1;
        }
        if rank < k {
            topk += 1;
        }
    }
    let n = data.len() as f64;
    Ok(Metrics {
        top1: top1 as f64 / n,
        topk: topk as f64 / n,
        k,
        per_class,
    })
}

/// Builds the worker pool, capped by `TROIKIT_THREADS` when set.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{raw}`"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_topk: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} lr={} train_loss={} val_top1={} val_topk={}",
            self.epoch, self.lr, self.train_loss, self.val_top1, self.val_topk
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metrics field `{part}`")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Format(format!("metrics line lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad number for `{k}`")))
        };
        Ok(Self {
            epoch: get("epoch")?
                .parse()
                .map_err(|_| Error::Format("bad epoch".into()))?,
            lr: num("lr")?,
            train_loss: num("train_loss")?,
            val_top1: num("val_top1")?,
            val_topk: num("val_topk")?,
        })
    }
}

/// Mutable training progress, kept across resumes.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub epoch: usize,
    pub sgd: SgdState<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            epoch: 0,
            sgd: SgdState::new(store),
        }
    }
}

/// Sample order of one epoch; depends only on the seed and epoch index.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    order.shuffle(&mut rng);
    order
}

/// One pass over `data` in shuffled mini-batches; returns the mean loss.
/// Per-sample gradients may be computed in parallel but are always summed
/// in batch order.
pub fn train_epoch<T: Real>(
    model: &mut TroiNet<T>,
    state: &mut TrainState<T>,
    data: &[SynthVideo],
    cfg: &TrainConfig,
) -> Result<f64> {
    let lr = cfg.schedule.lr_at(state.epoch);
    let order = epoch_order(cfg.seed, state.epoch, data.len());
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let results: Vec<(f64, Vec<Tensor<T>>)> = batch
            .par_iter()
            .map(|&i| {
                let v = &data[i];
                model.loss_and_grads(&v.frames.cast(), &v.rois, v.label)
            })
            .collect::<Result<_>>()?;
        let mut losses = Vec::with_capacity(results.len());
        let mut grads = Vec::with_capacity(results.len());
        for (l, g) in results {
            losses.push(l);
            grads.push(g);
        }
        total += losses.iter().sum::<f64>();
        let mut grad = sum_grads(grads).expect("batch is non-empty");
        let scale = T::of(1.0 / batch.len() as f64);
        for g in &mut grad {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
        model.store.set_grads(grad)?;
        sgd_step(
            &mut model.store,
            &mut state.sgd,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
    }
    state.epoch += 1;
    Ok(total / data.len() as f64)
}

/// Runs epochs `state.epoch..cfg.epochs`, writing one metrics line per epoch
/// to `log`. `after_epoch` sees the model and state once each epoch is done.
pub fn train<T: Real>(
    model: &mut TroiNet<T>,
    state: &mut TrainState<T>,
    train_set: &[SynthVideo],
    val_set: &[SynthVideo],
    cfg: &TrainConfig,
    log: &mut dyn Write,
    mut after_epoch: impl FnMut(&TroiNet<T>, &TrainState<T>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut records = Vec::new();
    while state.epoch < cfg.epochs {
        let lr = cfg.schedule.lr_at(state.epoch);
        let train_loss = train_epoch(model, state, train_set, cfg)?;
        if !train_loss.is_finite() {
            return Err(Error::Contract(format!(
                "training diverged at epoch {}",
                state.epoch
            )));
        }
        let (val_top1, val_topk) = if val_set.is_empty() {
            (0.0, 0.0)
        } else {
            let m = evaluate(&*model, val_set, cfg.topk)?;
            (m.top1, m.topk)
        };
        let record = EpochRecord {
            epoch: state.epoch,
            lr,
            train_loss,
            val_top1,
            val_topk,
        };
        writeln!(log, "{}", record.to_line())?;
        log.flush()?;
        after_epoch(model, state)?;
        records.push(record);
    }
    Ok(records)
}
