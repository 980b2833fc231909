//! Cross-step gradient reports over sampled closed-loop rollouts.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::objectives::diagnostics::{gradient_diagnostics, tape_cross_step, CrossStepReport, Mat};
use crate::objectives::{posterior_logits, rollout_closed_loop, LoggedEpisode, RolloutOptions, TapeRollout};
use crate::policy::Policy;
use crate::world::{Dataset, Scene};

#[derive(Clone, Debug, Serialize)]
pub struct Diagnosis {
    pub rollouts: usize,
    pub horizon: usize,
    /// Largest `‖∂s_t/∂s_j‖ / (σˢ + σᵃ)^{t−j}` over all rollouts and pairs.
    pub worst_bound_ratio: f64,
    /// Mean cross-step norm per interval `t − j`, averaged over rollouts.
    pub growth: Vec<f64>,
}

impl Diagnosis {
    pub fn bound_holds(&self) -> bool {
        self.worst_bound_ratio <= 1.0 + 1e-9
    }

    /// Whether the mean norm never decreases with the interval.
    pub fn monotone(&self) -> bool {
        self.growth.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("interval,mean_norm\n");
        for (d, g) in self.growth.iter().enumerate() {
            let _ = writeln!(s, "{d},{g:.12e}");
        }
        s
    }
}

fn closed_loop(
    tape: &mut Tape,
    policy: &Policy,
    dataset: &Dataset,
    r: usize,
    opts: &RolloutOptions,
    seed: u64,
) -> Result<TapeRollout> {
    let sc = &dataset.scenarios[r % dataset.len()];
    let horizon = opts.horizon.unwrap_or(sc.horizon).min(sc.horizon);
    let opts = RolloutOptions {
        horizon: Some(horizon),
        ..*opts
    };
    let scene0 = Scene::initial(sc.clone())?;
    let env = sc.env_latent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    let b = policy.store.bind(tape);
    let ep = LoggedEpisode::new(&scene0, &env, horizon, &opts.obs)?;
    let post = posterior_logits(tape, policy, &b, &ep, opts.latent_period)?;
    rollout_closed_loop(tape, policy, &b, &scene0, &env, &ep, &post, &opts, &mut rng)
}

fn bound_ratio(report: &CrossStepReport) -> f64 {
    let mut worst: f64 = 0.0;
    for (t, row) in report.norms.iter().enumerate() {
        for (j, n) in row.iter().enumerate() {
            worst = worst.max(n / report.bound(t, j));
        }
    }
    worst
}

/// Cross-step reports of `rollouts` closed-loop rollouts, cycling through
/// the dataset.
pub fn diagnose(
    policy: &Policy,
    dataset: &Dataset,
    opts: &RolloutOptions,
    rollouts: usize,
    seed: u64,
) -> Result<Diagnosis> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut worst: f64 = 0.0;
    let mut growth: Vec<f64> = Vec::new();
    let mut horizon = 0;
    for r in 0..rollouts {
        let mut tape = Tape::new();
        let tr = closed_loop(&mut tape, policy, dataset, r, opts, seed)?;
        let report = gradient_diagnostics(&tape, &tr)?;
        worst = worst.max(bound_ratio(&report));
        let curve = report.growth_curve();
        horizon = horizon.max(report.horizon());
        if growth.len() < curve.len() {
            growth.resize(curve.len(), 0.0);
        }
        for (g, c) in growth.iter_mut().zip(curve) {
            *g += c / rollouts as f64;
        }
    }
    Ok(Diagnosis {
        rollouts,
        horizon,
        worst_bound_ratio: worst,
        growth,
    })
}

/// Largest entrywise gap between the tape's `∂s_t/∂s_j` and the product of
/// motion-model Jacobians when every policy parameter is zero.
pub fn zero_policy_gap(policy: &Policy, dataset: &Dataset, opts: &RolloutOptions, rollouts: usize, seed: u64) -> Result<f64> {
    let mut zero = policy.clone();
    zero.store.zero();
    let mut worst: f64 = 0.0;
    for r in 0..rollouts {
        let mut tape = Tape::new();
        let tr = closed_loop(&mut tape, &zero, dataset, r, opts, seed)?;
        let report = gradient_diagnostics(&tape, &tr)?;
        let dim = 4 * report.agents.len();
        for t in 0..=report.horizon() {
            for j in 0..=t {
                let mut prod = Mat::identity(dim);
                for k in j..t {
                    prod = report.factors[k].state.mul(&prod);
                }
                let measured = tape_cross_step(&tape, &tr, &report.agents, t, j)?;
                worst = worst.max(measured.max_abs_diff(&prod));
            }
        }
    }
    Ok(worst)
}
