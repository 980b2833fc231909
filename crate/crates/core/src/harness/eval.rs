//! Policy evaluation and rollout dumps.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{EvalBatch, MetricsAccumulator, MetricsReport};
use crate::objectives::{rollout_rl, LoggedEpisode, RolloutOptions};
use crate::policy::Policy;
use crate::world::{AgentType, Dataset, Scenario, Scene};

pub const DUMP_FORMAT: &str = "drivesim-rollouts";
pub const DUMP_VERSION: u32 = 1;

/// Random stream of rollout `r` on scene `k`.
fn rollout_rng(seed: u64, k: usize, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 32) | r as u64);
    rng
}

fn horizon_of(sc: &Scenario, opts: &RolloutOptions) -> usize {
    opts.horizon.unwrap_or(sc.horizon).min(sc.horizon)
}

/// Logged scenes and `rollouts` policy rollouts with prior latents for one
/// scenario. Rollout `r` uses its own stream, so results do not depend on
/// the worker count.
pub fn sample_batch(
    policy: &Policy,
    scenario: &Arc<Scenario>,
    k: usize,
    opts: &RolloutOptions,
    rollouts: usize,
    seed: u64,
) -> Result<EvalBatch> {
    let env = scenario.env_latent();
    let scene0 = Scene::initial(Arc::clone(scenario))?;
    let horizon = horizon_of(scenario, opts);
    let opts = RolloutOptions {
        horizon: Some(horizon),
        ..*opts
    };
    let logged = LoggedEpisode::new(&scene0, &env, horizon, &opts.obs)?.scenes;
    let sims = (0..rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rollout_rng(seed, k, r);
            let mut tape = Tape::new();
            let p = policy.store.bind(&mut tape);
            let out = rollout_rl(&mut tape, policy, &p, &scene0, &env, &opts, &mut rng)?;
            Ok(out.rollout.scenes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalBatch {
        logged,
        rollouts: sims,
        evaluated: scenario.controlled_agents().collect(),
    })
}

/// Metrics of the policy over every scenario of `dataset`.
pub fn evaluate(
    policy: &Policy,
    dataset: &Dataset,
    opts: &RolloutOptions,
    rollouts: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = MetricsAccumulator::default();
    for (k, sc) in dataset.scenarios.iter().enumerate() {
        let batch = sample_batch(policy, sc, k, opts, rollouts, seed)?;
        if batch.evaluated.is_empty() {
            continue;
        }
        acc.add(&batch)?;
    }
    acc.report()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_type: AgentType,
    pub controlled: bool,
    pub length: f64,
    pub width: f64,
    /// `[x, y, ψ, v]` per step `0..=T`.
    pub poses: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDump {
    pub scenario: String,
    pub dt: f64,
    pub logged: Vec<AgentTrack>,
    pub rollouts: Vec<Vec<AgentTrack>>,
}

/// Rollouts for plotting, JSON-serializable with a format header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationDump {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub scenarios: Vec<ScenarioDump>,
}

fn tracks(sc: &Scenario, scenes: &[Scene]) -> Vec<AgentTrack> {
    sc.agents
        .iter()
        .enumerate()
        .map(|(i, a)| AgentTrack {
            agent_type: a.agent_type,
            controlled: a.controlled,
            length: a.length,
            width: a.width,
            poses: scenes.iter().map(|s| s.agents[i].pose()).collect(),
        })
        .collect()
}

pub fn simulate(
    policy: &Policy,
    dataset: &Dataset,
    opts: &RolloutOptions,
    rollouts: usize,
    seed: u64,
) -> Result<SimulationDump> {
    let scenarios = dataset
        .scenarios
        .iter()
        .enumerate()
        .map(|(k, sc)| {
            let batch = sample_batch(policy, sc, k, opts, rollouts, seed)?;
            Ok(ScenarioDump {
                scenario: sc.name.clone(),
                dt: sc.dt,
                logged: tracks(sc, &batch.logged),
                rollouts: batch.rollouts.iter().map(|r| tracks(sc, r)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationDump {
        format: DUMP_FORMAT.to_string(),
        version: DUMP_VERSION,
        seed,
        scenarios,
    })
}

impl SimulationDump {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
