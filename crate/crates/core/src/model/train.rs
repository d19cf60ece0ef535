use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RmglConfig;
use super::network::{build_model, Model, ParamGroup};
use super::objective::total_loss;
use super::sampler::sample_pk_batch;
use crate::augment::{augment, AugmentConfig, Image};
use crate::data::{Dataset, Split};
use crate::eval::{evaluate_dataset, Protocol};
use crate::rng::{purpose, stream};
use crate::tensor::{Mode, Tensor};
use crate::{exec, Error, Result};

/// Optimiser settings and the per-epoch learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for reduction and classifier layers.
    pub head_lr_mult: f64,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    /// Defaults to the training-set size divided by the batch size.
    pub batches_per_epoch: Option<usize>,
    /// Retrieval check every this many epochs (0: after the last epoch only).
    pub eval_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 60,
            base_lr: 0.01,
            warmup_epochs: 3,
            warmup_start: 1e-5,
            decay_epochs: vec![30, 50],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
            head_lr_mult: 10.0,
            p: 12,
            k: 4,
            batches_per_epoch: None,
            eval_every: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            problems.push(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.warmup_epochs > 0 && !(self.warmup_start > 0.0 && self.warmup_start < self.base_lr) {
            problems.push(format!(
                "warmup_start {} must lie in (0, base_lr) for an increasing warmup",
                self.warmup_start
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            problems.push(format!("decay_factor {} must lie in (0, 1)", self.decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.head_lr_mult > 0.0) {
            problems.push(format!("head_lr_mult {} must be positive", self.head_lr_mult));
        }
        if self.p == 0 || self.k == 0 {
            problems.push(format!("p = {} and k = {} must be >= 1", self.p, self.k));
        }
        if self.batches_per_epoch == Some(0) {
            problems.push("batches_per_epoch must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Exponential warmup from `warmup_start` to `base_lr`, then a step decay
    /// at every listed epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let t = epoch as f64 / self.warmup_epochs as f64;
            return self.warmup_start * (self.base_lr / self.warmup_start).powf(t);
        }
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_lr * self.decay_factor.powi(decays as i32)
    }
}

/// Momentum SGD with weight decay folded into the gradient.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// `v = momentum * v + (g + weight_decay * w)`, `w -= lr * mult * v`.
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Tensor],
        groups: &[ParamGroup],
        lr: f64,
        schedule: &TrainSchedule,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != groups.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                dim: "params",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for (((w, g), v), group) in params.into_iter().zip(grads).zip(&mut self.velocity).zip(groups) {
            if w.shape() != g.shape() {
                return Err(Error::InvalidShape {
                    op: "sgd_step",
                    reason: format!("gradient {} vs parameter {}", g.shape(), w.shape()),
                });
            }
            let rate = lr
                * match group {
                    ParamGroup::Backbone => 1.0,
                    ParamGroup::Head => schedule.head_lr_mult,
                };
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = schedule.momentum * *vi + (gi + schedule.weight_decay * *wi);
                *wi -= rate * *vi;
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub total_loss: f64,
    pub terms: Vec<f64>,
    pub rank1: Option<f64>,
    pub map: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub term_names: Vec<String>,
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,total_loss");
        for n in &self.term_names {
            let _ = write!(s, ",{n}");
        }
        s.push_str(",toy_rank1,toy_map\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.epoch, r.lr, r.total_loss);
            for t in &r.terms {
                let _ = write!(s, ",{t}");
            }
            let _ = writeln!(s, ",{},{}", opt(r.rank1), opt(r.map));
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total_loss).collect()
    }
}

/// Contiguous class labels for the training identities, in ascending id order.
pub fn class_labels(ids: &[usize]) -> (Vec<usize>, usize) {
    let mut uniq: Vec<usize> = ids.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let labels = ids.iter().map(|id| uniq.binary_search(id).expect("present")).collect();
    (labels, uniq.len())
}

/// Augmented training batch as a tensor. Every image uses its own stream
/// keyed by `(seed, first_index + position)`.
pub fn augment_batch(images: &[&Image], cfg: &AugmentConfig, seed: u64, first_index: u64) -> Result<Tensor> {
    let out: Vec<Result<Image>> = exec::map_indexed(images.len(), |i| {
        let mut rng = stream(seed, purpose::AUGMENT_BASE + first_index + i as u64);
        augment(images[i], cfg, &mut rng)
    });
    let out = out.into_iter().collect::<Result<Vec<_>>>()?;
    Image::batch_tensor(&out)
}

/// Trains a fresh model on the `Train` split; `on_epoch` sees each log row
/// as it is produced.
pub fn train(
    config: &RmglConfig,
    schedule: &TrainSchedule,
    augmentation: &AugmentConfig,
    data: &Dataset,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<(Model, TrainLog)> {
    schedule.validate()?;
    augmentation.rsa_params.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Config("dataset has no training images".into()));
    }
    let ids: Vec<usize> = train_idx.iter().map(|&i| data.records[i].id).collect();
    let cams: Vec<usize> = train_idx.iter().map(|&i| data.records[i].camera).collect();
    let (labels, classes) = class_labels(&ids);
    if classes > config.classes {
        return Err(Error::Config(format!(
            "{classes} training identities exceed the {} classifier outputs",
            config.classes
        )));
    }
    if schedule.p > classes {
        return Err(Error::Config(format!("p = {} exceeds {classes} training identities", schedule.p)));
    }
    let mut model = build_model(config, &mut stream(seed, purpose::INIT))?;
    let groups = model.param_groups();
    let mut sgd = Sgd::new();
    let mut sampler = stream(seed, purpose::SAMPLER);
    let batch = schedule.p * schedule.k;
    let steps = schedule
        .batches_per_epoch
        .unwrap_or_else(|| (train_idx.len() / batch).max(1));
    let mut log = TrainLog::default();
    let mut seen: u64 = 0;
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let mut total = Vec::with_capacity(steps);
        let mut terms: Vec<Vec<f64>> = Vec::new();
        for step in 0..steps {
            let tb = sample_pk_batch(&labels, &cams, schedule.p, schedule.k, &mut sampler)?;
            let images: Vec<&Image> = tb.indices.iter().map(|&i| &data.images[train_idx[i]]).collect();
            let x = augment_batch(&images, augmentation, seed, seen)?;
            seen += images.len() as u64;
            let (bundle, cache) = model.forward(&x, Mode::Train)?;
            let (loss, grad) = total_loss(&bundle, &tb.labels, config).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch} step {step}: {msg}")),
                e => e,
            })?;
            let grads = model.backward(&cache, &grad)?;
            if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} step {step}: gradient of {} is not finite",
                    model.param_names()[i]
                )));
            }
            model.update_running(&cache);
            sgd.step(model.params_mut(), &grads, &groups, lr, schedule)?;
            if log.term_names.is_empty() {
                log.term_names = summary_names(&model);
            }
            total.push(loss.total);
            terms.push(summarise(&model, &loss));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let term_means = (0..log.term_names.len())
            .map(|t| mean(&terms.iter().map(|r| r[t]).collect::<Vec<_>>()))
            .collect();
        let last = epoch + 1 == schedule.epochs;
        let check = last || (schedule.eval_every > 0 && (epoch + 1) % schedule.eval_every == 0);
        let (rank1, map) = if check && !data.indices(Split::Query).is_empty() {
            let r = evaluate_dataset(&model, data, true, Protocol::CrossCamera)?;
            (Some(r.cmc_at(1)), Some(r.map))
        } else {
            (None, None)
        };
        let row = EpochRow {
            epoch,
            lr,
            total_loss: mean(&total),
            terms: term_means,
            rank1,
            map,
        };
        on_epoch(&row);
        log.rows.push(row);
    }
    Ok((model, log))
}

fn summary_names(model: &Model) -> Vec<String> {
    (0..model.branches.len())
        .flat_map(|b| [format!("cls_b{b}"), format!("tri_b{b}")])
        .collect()
}

fn summarise(model: &Model, loss: &super::objective::LossBreakdown) -> Vec<f64> {
    (0..model.branches.len())
        .flat_map(|b| [loss.sum_prefix(&format!("cls/b{b}/")), loss.sum_prefix(&format!("tri/b{b}"))])
        .collect()
}
