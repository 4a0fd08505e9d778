//! AdaDelta, length-bucketed mini-batches and dev-set model selection.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, AbsentClasses, MetricReport};
use crate::model::Model;
use crate::tensor::{ParamId, ParamStore};
use crate::text::Story;

/// One AdaDelta update of `x` in place.
///
/// `Eg2 ← ρEg2 + (1−ρ)g²`, `Δx = −√(Edx2+ε)/√(Eg2+ε)·g`,
/// `Edx2 ← ρEdx2 + (1−ρ)Δx²`, `x ← x + Δx`.
pub fn adadelta_update(x: &mut [f64], g: &[f64], eg2: &mut [f64], edx2: &mut [f64], rho: f64, eps: f64) {
    for i in 0..x.len() {
        eg2[i] = rho * eg2[i] + (1.0 - rho) * g[i] * g[i];
        let dx = -((edx2[i] + eps).sqrt() / (eg2[i] + eps).sqrt()) * g[i];
        edx2[i] = rho * edx2[i] + (1.0 - rho) * dx * dx;
        x[i] += dx;
    }
}

/// Per-parameter AdaDelta accumulators.
#[derive(Clone, Debug)]
pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
    eg2: Vec<Vec<f64>>,
    edx2: Vec<Vec<f64>>,
}

impl AdaDelta {
    pub const RHO: f64 = 0.95;
    pub const EPS: f64 = 1e-6;

    pub fn new(params: &ParamStore, rho: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdaDelta {
            rho,
            eps,
            eg2: zeros(),
            edx2: zeros(),
        }
    }

    pub fn accumulators(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.eg2[id.0], &self.edx2[id.0])
    }

    /// Updates the parameters in `ids` with `grads[id]`. Nothing changes if
    /// any gradient is non-finite. Frozen rows keep their value and state.
    pub fn step(&mut self, params: &mut ParamStore, ids: &[ParamId], grads: &[Vec<f64>]) -> Result<()> {
        for &id in ids {
            let g = &grads[id.0];
            if g.len() != params.get(id).len() {
                return Err(Error::shape(format!(
                    "gradient of {} has {} entries, parameter has {}",
                    params.name(id),
                    g.len(),
                    params.get(id).len()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} at {}[{i}]",
                    g[i],
                    params.name(id)
                )));
            }
        }
        for &id in ids {
            let frozen: Vec<usize> = params.frozen_rows(id).collect();
            let t = params.get_mut(id);
            let width = if t.rank() == 2 { t.cols() } else { t.len() };
            let (g, eg2, edx2) = (&grads[id.0], &mut self.eg2[id.0], &mut self.edx2[id.0]);
            let x = t.data_mut();
            let mut start = 0;
            // Update the stretches between frozen rows.
            for r in frozen.iter().map(|r| r * width).chain([x.len()]) {
                let end = r.min(x.len());
                if start < end {
                    adadelta_update(
                        &mut x[start..end],
                        &g[start..end],
                        &mut eg2[start..end],
                        &mut edx2[start..end],
                        self.rho,
                        self.eps,
                    );
                }
                start = end + width;
            }
        }
        Ok(())
    }
}

/// Dev metric used to pick the returned model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    MacroF1,
    Accuracy,
}

impl Selection {
    fn score(self, report: &MetricReport) -> f64 {
        match self {
            Selection::MacroF1 => report.mean_macro_f1(),
            Selection::Accuracy => report.mean_accuracy(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub selection: Selection,
    pub shuffle: bool,
    pub rho: f64,
    pub eps: f64,
    pub absent_classes: AbsentClasses,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            batch_size: 50,
            epochs: 30,
            seed: 0,
            selection: Selection::MacroF1,
            shuffle: true,
            rho: AdaDelta::RHO,
            eps: AdaDelta::EPS,
            absent_classes: AbsentClasses::Exclude,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::config("rho", format!("{} outside [0, 1)", self.rho)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }
}

/// Dev-set summary of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevSummary {
    pub score: f64,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_macro_f1: Option<f64>,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: Option<DevSummary>,
    /// This epoch became the selected model.
    pub selected: bool,
}

/// Groups story indices into batches of equal token length, then shuffles
/// the batch order.
pub fn make_batches(lengths: &[usize], batch_size: usize, shuffle: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order.sort_by_key(|i| lengths[*i]);
    let mut batches = Vec::new();
    for run in order.chunk_by(|a, b| lengths[*a] == lengths[*b]) {
        batches.extend(run.chunks(batch_size).map(<[usize]>::to_vec));
    }
    if shuffle {
        batches.shuffle(rng);
    }
    batches
}

/// Epoch-by-epoch training state.
pub struct Trainer {
    pub model: Model,
    plan: TrainPlan,
    opt: AdaDelta,
    rng: ChaCha8Rng,
    trainable: Vec<ParamId>,
    grads: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(model: Model, plan: TrainPlan) -> Result<Self> {
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(1);
        let opt = AdaDelta::new(model.params(), plan.rho, plan.eps);
        let trainable = model.trainable();
        let grads = model.params().iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Ok(Trainer {
            model,
            plan,
            opt,
            rng,
            trainable,
            grads,
        })
    }

    /// One pass over `stories`; returns the mean training loss.
    pub fn run_epoch(&mut self, stories: &[Story]) -> Result<f64> {
        if stories.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        let max_len = self.model.config().max_len;
        let lengths: Vec<usize> = stories.iter().map(|s| s.len().min(max_len)).collect();
        let batches = make_batches(&lengths, self.plan.batch_size, self.plan.shuffle, &mut self.rng);
        let mut total = 0.0;
        for batch in batches {
            for g in &mut self.grads {
                g.fill(0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            for i in batch {
                let (loss, grads) = self.model.loss_and_gradients(&stories[i], Some(&mut self.rng))?;
                total += loss;
                for (id, g) in grads.params() {
                    g.add_to(&mut self.grads[id.0], scale);
                }
            }
            self.opt.step(self.model.params_mut(), &self.trainable, &self.grads)?;
        }
        Ok(total / stories.len() as f64)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    /// The selected model, or the last good one if training aborted.
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Set when a numeric failure stopped training early.
    pub aborted: Option<String>,
}

/// Trains for `plan.epochs` epochs, evaluating on `dev` after each one and
/// keeping the best model by `plan.selection`. With an empty dev split the
/// last epoch is kept. `on_epoch` sees every log record as it is made.
pub fn train(
    model: Model,
    train_set: &[Story],
    dev: &[Story],
    plan: &TrainPlan,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut best = model.clone();
    let mut trainer = Trainer::new(model, plan.clone())?;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut log = Vec::with_capacity(plan.epochs);
    for epoch in 1..=plan.epochs {
        let train_loss = match trainer.run_epoch(train_set) {
            Ok(l) => l,
            Err(Error::Numeric(msg)) => {
                warn!("epoch {epoch}: {msg}; keeping the last good model");
                return Ok(TrainOutcome {
                    model: best,
                    log,
                    best_epoch,
                    aborted: Some(msg),
                });
            }
            Err(e) => return Err(e),
        };
        let dev_summary = if dev.is_empty() {
            None
        } else {
            let report = evaluate(&trainer.model, dev, plan.absent_classes)?;
            Some(DevSummary {
                score: plan.selection.score(&report),
                mean_accuracy: report.mean_accuracy(),
                mean_macro_f1: report.mean_macro_f1(),
                token_accuracy: report.get("tokens").map(|t| t.accuracy),
                token_macro_f1: report.get("tokens").map(|t| t.macro_f1),
            })
        };
        let score = dev_summary.as_ref().map_or(epoch as f64, |d| d.score);
        let selected = score > best_score;
        if selected {
            best_score = score;
            best_epoch = Some(epoch);
            best = trainer.model.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            dev: dev_summary,
            selected,
        };
        info!(
            "epoch {epoch}: train loss {train_loss:.6}{}",
            record.dev.as_ref().map(|d| format!(", dev score {:.4}", d.score)).unwrap_or_default()
        );
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        model: best,
        log,
        best_epoch,
        aborted: None,
    })
}

/// Writes the log as one JSON object per line.
pub fn write_metric_log(log: &[EpochRecord], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in log {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
