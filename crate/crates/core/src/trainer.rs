//! Alternating optimization: r inner updates of the autoencoder per batch with α held
//! fixed, then (after burn-in) one end-to-end update on the whole batch that also
//! trains the relevance encoder and refreshes α.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, ParamId, Tape, Tensor};
use crate::config::{TrainConfig, Variant};
use crate::elbo::{elbo_plain, elbo_ren, ElboBreakdown, ElboGraph};
use crate::error::{Error, Result};
use crate::networks::checkpoint::OptimizerState;
use crate::networks::RenModel;
use crate::rng::{RenRng, SeedTree};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub neg_entropy_q_z: f64,
    pub neg_entropy_q_alpha: f64,
    pub prior_z: f64,
    pub prior_alpha: f64,
    pub log_sigma_dec: f64,
    pub alpha: Vec<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    /// The record without its wall-clock field, for reproducibility comparisons.
    pub fn without_timing(&self) -> EpochRecord {
        EpochRecord {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// Which update of the alternation a gradient belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Autoencoder (and flow) update on a sub-batch with α fixed.
    Inner,
    /// End-to-end update on the full batch with α inferred.
    Relevance,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Inner => "inner update",
            Phase::Relevance => "relevance update",
        }
    }
}

/// Result of one forward/backward pass.
pub struct StepOutcome {
    pub breakdown: ElboBreakdown,
    /// Gradients of the negative bound, for every parameter trainable in the phase.
    pub grads: Vec<(ParamId, Tensor)>,
    /// Posterior mean a/b of the relevance vector (relevance phase only).
    pub alpha_mean: Option<Vec<f64>>,
}

fn check_terms(b: &ElboBreakdown, phase: Phase) -> Result<()> {
    let terms = [
        ("recon", b.recon),
        ("neg_entropy_q_z", b.neg_entropy_q_z),
        ("neg_entropy_q_alpha", b.neg_entropy_q_alpha),
        ("prior_z", b.prior_z),
        ("prior_alpha", b.prior_alpha),
        ("total", b.total),
    ];
    if let Some((name, v)) = terms.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("{} term {name} = {v}", phase.name()),
        });
    }
    Ok(())
}

/// Evaluates the phase's bound on `batch` and returns gradients of its negation.
///
/// The inner phase binds only the `Model` group as differentiable, so the relevance
/// encoder never receives gradient there.
pub fn compute_step(
    model: &RenModel,
    batch: &Tensor,
    rng: &mut RenRng,
    phase: Phase,
) -> Result<StepOutcome> {
    let tape = Tape::new();
    let bind = match phase {
        Phase::Inner => model.params().bind(&tape, |g| g == ParamGroup::Model),
        Phase::Relevance => model.params().bind_all(&tape),
    };
    let graph: ElboGraph<'_> = match phase {
        Phase::Inner => {
            let variant = if model.flow().is_some() {
                Variant::Dpvae
            } else {
                Variant::Vae
            };
            elbo_plain(model, &bind, batch, rng, variant)?
        }
        Phase::Relevance => elbo_ren(model, &bind, batch, rng)?,
    };
    let breakdown = graph.breakdown();
    check_terms(&breakdown, phase)?;
    let alpha_mean = graph.relevance.as_ref().map(|g| g.mean().into_data());
    let loss = graph.total.neg();
    let grads = tape.backward(loss)?;
    Ok(StepOutcome {
        breakdown,
        grads: bind.collect(&grads),
        alpha_mean,
    })
}

fn clip(grads: &mut [(ParamId, Tensor)], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[derive(Default)]
struct Averager {
    sum: ElboBreakdown,
    count: usize,
}

impl Averager {
    fn add(&mut self, b: &ElboBreakdown) {
        self.sum.recon += b.recon;
        self.sum.neg_entropy_q_z += b.neg_entropy_q_z;
        self.sum.neg_entropy_q_alpha += b.neg_entropy_q_alpha;
        self.sum.prior_z += b.prior_z;
        self.sum.prior_alpha += b.prior_alpha;
        self.sum.total += b.total;
        self.count += 1;
    }

    fn mean(&self) -> ElboBreakdown {
        let k = self.count.max(1) as f64;
        ElboBreakdown {
            recon: self.sum.recon / k,
            neg_entropy_q_z: self.sum.neg_entropy_q_z / k,
            neg_entropy_q_alpha: self.sum.neg_entropy_q_alpha / k,
            prior_z: self.sum.prior_z / k,
            prior_alpha: self.sum.prior_alpha / k,
            total: self.sum.total / k,
        }
    }
}

/// Training state that outlives a single call: configuration, optimizer moments, progress.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub optimizer: OptimizerState,
    pub epochs_completed: usize,
    seeds: SeedTree,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let mut errors = Vec::new();
        cfg.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let seeds = SeedTree::new(cfg.seed).child("train");
        Ok(Trainer {
            cfg,
            optimizer: OptimizerState::default(),
            epochs_completed: 0,
            seeds,
        })
    }

    /// Continues from saved optimizer moments and epoch count.
    pub fn resume(
        cfg: TrainConfig,
        optimizer: OptimizerState,
        epochs_completed: usize,
    ) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        t.optimizer = optimizer;
        t.epochs_completed = epochs_completed;
        Ok(t)
    }

    fn apply(
        &mut self,
        model: &mut RenModel,
        mut outcome: StepOutcome,
        phase: Phase,
    ) -> Result<()> {
        if let Some(c) = self.cfg.clip_norm {
            clip(&mut outcome.grads, c);
        }
        let (adam, lr) = match phase {
            Phase::Inner => (&mut self.optimizer.vae, self.cfg.lr_vae),
            Phase::Relevance => (&mut self.optimizer.ren, self.cfg.lr_ren),
        };
        adam.step(model.params_mut(), outcome.grads, lr)?;
        if let Some(alpha) = outcome.alpha_mean {
            model.current_alpha = alpha;
        }
        Ok(())
    }

    /// One inner update on a sub-batch.
    pub fn inner_step(
        &mut self,
        model: &mut RenModel,
        batch: &Tensor,
        rng: &mut RenRng,
    ) -> Result<ElboBreakdown> {
        let outcome = compute_step(model, batch, rng, Phase::Inner)?;
        let b = outcome.breakdown;
        self.apply(model, outcome, Phase::Inner)?;
        Ok(b)
    }

    /// One end-to-end update on a full batch, refreshing α to the posterior mean.
    pub fn relevance_step(
        &mut self,
        model: &mut RenModel,
        batch: &Tensor,
        rng: &mut RenRng,
    ) -> Result<ElboBreakdown> {
        let outcome = compute_step(model, batch, rng, Phase::Relevance)?;
        let b = outcome.breakdown;
        self.apply(model, outcome, Phase::Relevance)?;
        Ok(b)
    }

    /// Runs epoch `epoch` (1-based); relevance updates happen when `epoch > burnin`.
    pub fn run_epoch(
        &mut self,
        model: &mut RenModel,
        data: &Tensor,
        epoch: usize,
    ) -> Result<EpochRecord> {
        let start = Instant::now();
        let n = data.rows();
        let bs = self.cfg.batch_size;
        if n < bs {
            return Err(Error::InvalidArgument(format!(
                "dataset has {n} rows, fewer than the batch size {bs}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.seeds.child_indexed("shuffle", epoch as u64).rng());
        let mut rng = self.seeds.child_indexed("draws", epoch as u64).rng();
        let relevance = epoch > self.cfg.burnin;
        let sub = bs / self.cfg.r;
        let mut inner_avg = Averager::default();
        let mut ren_avg = Averager::default();
        let fail = |e: Error| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("epoch {epoch}: {context}"),
            },
            other => other,
        };
        // the trailing partial batch is dropped
        for chunk in order.chunks_exact(bs) {
            let batch = data.select_rows(chunk);
            for part in chunk.chunks_exact(sub) {
                let small = data.select_rows(part);
                let b = self.inner_step(model, &small, &mut rng).map_err(fail)?;
                inner_avg.add(&b);
            }
            if relevance {
                let b = self.relevance_step(model, &batch, &mut rng).map_err(fail)?;
                ren_avg.add(&b);
            }
        }
        let b = if relevance {
            ren_avg.mean()
        } else {
            inner_avg.mean()
        };
        Ok(EpochRecord {
            epoch,
            total: b.total,
            recon: b.recon,
            neg_entropy_q_z: b.neg_entropy_q_z,
            neg_entropy_q_alpha: b.neg_entropy_q_alpha,
            prior_z: b.prior_z,
            prior_alpha: b.prior_alpha,
            log_sigma_dec: model.log_sigma_dec(),
            alpha: model.current_alpha.clone(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains the remaining epochs, passing each record to `on_epoch` as it completes.
    pub fn train_with(
        &mut self,
        model: &mut RenModel,
        data: &Tensor,
        on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        for epoch in self.epochs_completed + 1..=self.cfg.epochs {
            let record = self.run_epoch(model, data, epoch)?;
            self.epochs_completed = epoch;
            on_epoch(&record)?;
            log.records.push(record);
        }
        Ok(log)
    }
}

/// Trains `model` on the rows of `data` from scratch.
pub fn train(model: &mut RenModel, data: &Tensor, cfg: &TrainConfig) -> Result<TrainLog> {
    Trainer::new(cfg.clone())?.train_with(model, data, &mut |_| Ok(()))
}

/// Writes one JSON record per line.
pub fn write_record(out: &mut dyn Write, record: &EpochRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    out.flush()
}
