//! The training loop.
//!
//! Each iteration samples `B` scenarios, runs the closed-loop imitation,
//! open-loop imitation and RL rollouts on each (in that order), averages the
//! three loss gradients over the batch and hands them to the multiplier
//! update of every parameter group. Validation runs periodically and keeps
//! the checkpoint with the lowest minSADE.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::multipliers::{multiplier_step, GroupStep, Optimizer, UpdateOutcome};
use crate::objectives::{evaluate_objectives, ObjectiveSample};
use crate::policy::{ParamGroup, Policy};
use crate::world::{sample_initial, Dataset};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::eval::evaluate;

/// Names of the three objective columns, in update order.
pub const OBJECTIVES: [&str; 3] = ["elbo_cl", "elbo_ol", "rl_return"];

/// Per-group record of one update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLog {
    pub group: ParamGroup,
    pub lambda: [f64; 3],
    pub sigma: f64,
    pub residual: f64,
    /// Clipped gradient norms of the three objectives in this group.
    pub grad_norms: [f64; 3],
    pub applied: bool,
}

impl From<&GroupStep> for GroupLog {
    fn from(s: &GroupStep) -> Self {
        Self {
            group: s.group,
            lambda: s.solution.lambda,
            sigma: s.solution.sigma,
            residual: s.solution.residual,
            grad_norms: s.column_norms,
            applied: s.outcome == UpdateOutcome::Applied,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    /// 1-based update step.
    pub iteration: usize,
    /// Batch means of ELBO-CL, ELBO-OL and the RL return.
    pub values: [f64; 3],
    /// Batch mean of the closed-loop reconstruction loss.
    pub recon_loss: f64,
    pub groups: Vec<GroupLog>,
    /// Reason the update was skipped, if it was.
    pub skipped: Option<String>,
}

impl IterationLog {
    pub const CSV_HEADER_PREFIX: &'static str = "iteration,elbo_cl,elbo_ol,rl_return,recon_loss,status";

    pub fn csv_header() -> String {
        let mut h = Self::CSV_HEADER_PREFIX.to_string();
        for g in ParamGroup::ALL {
            let n = g.name();
            for o in OBJECTIVES {
                write!(h, ",{n}_lambda_{o}").expect("string write");
            }
            write!(h, ",{n}_sigma,{n}_residual").expect("string write");
            for o in OBJECTIVES {
                write!(h, ",{n}_norm_{o}").expect("string write");
            }
        }
        h
    }

    /// One CSV row; group columns are empty for skipped iterations.
    pub fn csv_row(&self) -> String {
        let status = match &self.skipped {
            None => "ok",
            Some(_) => "skipped",
        };
        let mut r = format!(
            "{},{},{},{},{},{status}",
            self.iteration, self.values[0], self.values[1], self.values[2], self.recon_loss
        );
        for g in ParamGroup::ALL {
            match self.groups.iter().find(|l| l.group == g) {
                Some(l) => {
                    for x in l.lambda {
                        write!(r, ",{x}").expect("string write");
                    }
                    write!(r, ",{},{}", l.sigma, l.residual).expect("string write");
                    for x in l.grad_norms {
                        write!(r, ",{x}").expect("string write");
                    }
                }
                None => r.push_str(&",".repeat(8)),
            }
        }
        r
    }
}

#[derive(Clone, Debug)]
pub struct Validation {
    pub iteration: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest validation minSADE; the last checkpoint without validation data.
    pub best: Checkpoint,
    pub log: Vec<IterationLog>,
    pub validations: Vec<Validation>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = IterationLog::csv_header();
        s.push('\n');
        for l in &self.log {
            s.push_str(&l.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Random stream of batch sample `b` at iteration `it`.
fn sample_rng(seed: u64, it: usize, b: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + (it * batch + b) as u64);
    rng
}

/// Stateful trainer; [`train`] drives it to completion.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub policy: Policy,
    pub optimizer: Optimizer,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let policy = Policy::new(cfg.net, &mut init);
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer),
            cfg,
            policy,
            iteration: 0,
        })
    }

    /// Resumes from a checkpoint's parameters with fresh optimizer moments.
    pub fn from_checkpoint(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.manifest.net != cfg.net {
            return Err(Error::Config(
                "checkpoint network widths differ from the config".into(),
            ));
        }
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer),
            policy: ckpt.to_policy()?,
            iteration: ckpt.manifest.iteration,
            cfg,
        })
    }

    fn samples(&self, dataset: &Dataset) -> Vec<Result<ObjectiveSample>> {
        let opts = self.cfg.rollout_options();
        let (seed, it, b) = (self.cfg.seed, self.iteration, self.cfg.batch_size);
        let policy = &self.policy;
        let run = |k: usize| -> Result<ObjectiveSample> {
            let mut rng = sample_rng(seed, it, k, b);
            let (scene, env) = sample_initial(dataset, &mut rng)?;
            evaluate_objectives(policy, &scene, &env, &opts, &mut rng)
        };
        (0..b).into_par_iter().map(run).collect()
    }

    /// One update step.
    pub fn step(&mut self, dataset: &Dataset) -> Result<IterationLog> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let results = self.samples(dataset);
        self.iteration += 1;
        let it = self.iteration;
        let mut samples = Vec::with_capacity(results.len());
        let mut skip = None;
        for r in results {
            match r {
                Ok(s) if s.values.iter().all(|v| v.is_finite()) => samples.push(s),
                Ok(_) => skip = Some("non-finite objective value".to_string()),
                Err(Error::NonFinite(what)) => skip = Some(format!("non-finite {what}")),
                Err(e) => return Err(e),
            }
        }
        let n = samples.len().max(1) as f64;
        let mut values = [0.0; 3];
        let mut recon = 0.0;
        for s in &samples {
            for (v, x) in values.iter_mut().zip(s.values) {
                *v += x / n;
            }
            recon += s.recon_loss / n;
        }
        for (name, v) in OBJECTIVES.iter().zip(values) {
            log::info!("iteration {it} {name} {v}");
        }
        if let Some(reason) = skip {
            log::warn!("iteration {it} skipped: {reason}");
            return Ok(IterationLog {
                iteration: it,
                values,
                recon_loss: recon,
                groups: Vec::new(),
                skipped: Some(reason),
            });
        }
        // ordered reduction keeps the mean independent of the worker count
        let mut grads: [Vec<Vec<f64>>; 3] = samples[0].grads.clone();
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        for s in &samples {
            for (acc, src) in grads.iter_mut().zip(&s.grads) {
                for (a, b) in acc.iter_mut().zip(src) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y / n;
                    }
                }
            }
        }
        let steps = multiplier_step(&mut self.policy.store, grads, self.cfg.omega, &mut self.optimizer)?;
        let groups: Vec<GroupLog> = steps.iter().map(GroupLog::from).collect();
        for g in &groups {
            log::debug!(
                "iteration {it} {} lambda {:?} sigma {} residual {}",
                g.group.name(),
                g.lambda,
                g.sigma,
                g.residual
            );
        }
        Ok(IterationLog {
            iteration: it,
            values,
            recon_loss: recon,
            groups,
            skipped: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_policy(&self.policy, self.iteration)
    }

    pub fn validate(&self, data: &Dataset) -> Result<MetricsReport> {
        evaluate(
            &self.policy,
            data,
            &self.cfg.rollout_options(),
            self.cfg.eval_rollouts,
            self.cfg.seed ^ 0x005e_ed0f_7a11,
        )
    }
}

/// Runs `cfg.iterations` updates on `dataset`, validating on `validation`
/// every `cfg.validation_interval` iterations and at the end.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, validation: Option<&Dataset>) -> Result<TrainOutcome> {
    train_with(cfg, dataset, validation, |_| {})
}

/// [`train`] with a callback after every iteration.
pub fn train_with(
    cfg: &TrainConfig,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    mut on_iteration: impl FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.log_deviations();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut validations = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    for _ in 0..cfg.iterations {
        let entry = pool.install(|| trainer.step(dataset))?;
        on_iteration(&entry);
        log.push(entry);
        let it = trainer.iteration;
        if let Some(val) = validation {
            if it % cfg.validation_interval == 0 || it == cfg.iterations {
                let report = pool.install(|| trainer.validate(val))?;
                let score = report.reconstruction.min_sade;
                log::info!("validation at iteration {it}: minSADE {score}");
                if best.as_ref().is_none_or(|(b, _)| score < *b) {
                    let mut ckpt = trainer.checkpoint();
                    ckpt.manifest
                        .notes
                        .insert("validation_min_sade".into(), score.to_string());
                    best = Some((score, ckpt));
                }
                validations.push(Validation {
                    iteration: it,
                    report,
                });
            }
        }
    }
    let last = trainer.checkpoint();
    Ok(TrainOutcome {
        best: best.map_or_else(|| last.clone(), |(_, c)| c),
        last,
        log,
        validations,
    })
}
