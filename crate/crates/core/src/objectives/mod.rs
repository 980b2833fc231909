//! Rollout engines and the three training objectives.
//!
//! All rollouts advance states with the policy's actions through the
//! differentiable transition. They differ in what the policy sees and where
//! latents come from:
//!
//! | provenance              | observations   | latents   | objective |
//! |-------------------------|----------------|-----------|-----------|
//! | `ClosedLoopPosterior`   | self-induced   | posterior | ELBO-CL   |
//! | `OpenLoopPosterior`     | logged         | posterior | ELBO-OL   |
//! | `ClosedLoopPrior`       | self-induced   | prior     | RL return |
//!
//! The ELBOs sum a reconstruction log-likelihood per step (Huber on position,
//! squared wrapped error on heading) minus a closed-form categorical KL at
//! each gate step.

pub mod diagnostics;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::policy::{
    action_to_world, draw_latent, gumbel_noise, normalized_state, temporal_gate, Bound,
    LatentAssignment, ObsInput, ParamGroup, Policy,
};
use crate::rewards::{total_reward_var, RewardThresholds, RuleTracker};
use crate::tensor::Tensor;
use crate::world::{
    inverse_step, observe, observe_vars, step_var, EnvLatent, KinematicParams, Observation,
    ObservationConfig, Scene, StepLinearization, TRAIL_LEN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ClosedLoopPosterior,
    OpenLoopPosterior,
    ClosedLoopPrior,
}

impl Provenance {
    pub const ALL: [Provenance; 3] = [
        Provenance::ClosedLoopPosterior,
        Provenance::OpenLoopPosterior,
        Provenance::ClosedLoopPrior,
    ];

    fn imitation(self) -> bool {
        self != Provenance::ClosedLoopPrior
    }
}

/// Reconstruction loss constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconWeights {
    /// Huber transition point for position errors, metres.
    pub huber_delta: f64,
    pub heading_weight: f64,
}

impl Default for ReconWeights {
    fn default() -> Self {
        Self {
            huber_delta: 1.0,
            heading_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    /// Latent duration `H`.
    pub latent_period: usize,
    pub obs: ObservationConfig,
    pub kin: KinematicParams,
    pub thresholds: RewardThresholds,
    pub recon: ReconWeights,
    pub gamma: f64,
    /// Gumbel-perturbed latent draws; otherwise the argmax index.
    pub sample_latents: bool,
    /// Feed the recurrent state, the ego trail and held latents as constants,
    /// so each action depends only on the current joint state.
    pub detach_history: bool,
    /// Simulated steps; the scenario horizon when `None`.
    pub horizon: Option<usize>,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            latent_period: 5,
            obs: ObservationConfig::default(),
            kin: KinematicParams::default(),
            thresholds: RewardThresholds::default(),
            recon: ReconWeights::default(),
            gamma: 1.0,
            sample_latents: true,
            detach_history: false,
            horizon: None,
        }
    }
}

/// Where actions come from.
#[derive(Clone, Copy, Debug)]
pub enum Controller<'a> {
    Policy,
    /// Fixed actions, indexed `[step][agent]`, recorded as constants.
    Replay(&'a [Vec<Option<Vec<f64>>>]),
}

/// The logged scenes of an episode and the controlled agents' observations of them.
#[derive(Clone, Debug)]
pub struct LoggedEpisode {
    /// Steps `0..=T`.
    pub scenes: Vec<Scene>,
    /// `[step][agent]`, `None` for replayed agents.
    pub obs: Vec<Vec<Option<Observation>>>,
}

impl LoggedEpisode {
    pub fn new(scene0: &Scene, env: &EnvLatent, horizon: usize, cfg: &ObservationConfig) -> Result<Self> {
        check_horizon(scene0, env, horizon)?;
        let mut scenes = vec![scene0.clone()];
        for _ in 0..horizon {
            let cur = scenes.last().expect("non-empty");
            let next = (0..cur.agents.len())
                .map(|i| cur.scenario.logged_state(i, cur.time_step + 1))
                .collect();
            scenes.push(cur.advanced(next, env));
        }
        let obs = scenes
            .iter()
            .map(|s| {
                (0..s.agents.len())
                    .map(|i| s.controlled(i).then(|| observe(s, i, cfg)))
                    .collect()
            })
            .collect();
        Ok(Self { scenes, obs })
    }

    pub fn horizon(&self) -> usize {
        self.scenes.len() - 1
    }

    /// The actions that reproduce the log, by inverting the motion models.
    pub fn actions(&self, kin: &KinematicParams) -> Vec<Vec<Option<Vec<f64>>>> {
        self.scenes
            .windows(2)
            .map(|w| {
                (0..w[0].agents.len())
                    .map(|i| {
                        w[0].controlled(i)
                            .then(|| inverse_step(&w[0].agents[i], &w[1].agents[i], kin))
                    })
                    .collect()
            })
            .collect()
    }
}

fn check_horizon(scene0: &Scene, env: &EnvLatent, horizon: usize) -> Result<()> {
    let sc = &scene0.scenario;
    let needed = scene0.time_step + 1 + horizon;
    let have = (sc.init_steps + sc.horizon).min(env.len());
    if needed > have {
        return Err(Error::Horizon { needed, have });
    }
    Ok(())
}

/// Posterior index logits `[intervals, K]` for every controlled agent.
pub fn posterior_logits(
    tape: &mut Tape,
    policy: &Policy,
    p: &Bound,
    ep: &LoggedEpisode,
    latent_period: usize,
) -> Result<Vec<Option<Var>>> {
    let scene0 = &ep.scenes[0];
    (0..scene0.agents.len())
        .map(|i| {
            if !scene0.controlled(i) {
                return Ok(None);
            }
            let origin = scene0.agents[i].pose();
            let obs: Vec<ObsInput> = ep
                .obs
                .iter()
                .map(|o| ObsInput::constant(tape, o[i].as_ref().expect("controlled agent observed")))
                .collect();
            let states: Vec<_> = ep
                .scenes
                .iter()
                .map(|s| normalized_state(origin, s.agents[i].pose()))
                .collect();
            policy
                .posterior
                .logits(tape, p, &obs, &states, latent_period)
                .map(Some)
        })
        .collect()
}

/// Plain values of a rollout.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub provenance: Provenance,
    /// Steps `0..=T`.
    pub scenes: Vec<Scene>,
    /// World-frame actions per `[step][agent]` before clamping; `None` for replayed agents.
    pub actions: Vec<Vec<Option<Vec<f64>>>>,
    pub latents: Vec<Vec<Option<LatentAssignment>>>,
    /// Reconstruction log-likelihood of step `t`'s successor state, summed over agents.
    pub recon: Vec<f64>,
    /// KL terms, nonzero only at gate steps.
    pub kl: Vec<f64>,
    /// Discounted reward of step `t`'s successor state, summed over agents.
    pub rewards: Vec<f64>,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.scenes.len() - 1
    }

    pub fn elbo(&self) -> f64 {
        self.recon.iter().sum::<f64>() - self.kl.iter().sum::<f64>()
    }

    pub fn rl_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// The objective this provenance optimises.
    pub fn objective(&self) -> f64 {
        if self.provenance.imitation() {
            self.elbo()
        } else {
            self.rl_return()
        }
    }

    /// Mean negative reconstruction term per step and controlled agent.
    pub fn recon_loss(&self) -> f64 {
        let n = self.scenes[0]
            .scenario
            .agents
            .iter()
            .filter(|a| a.controlled)
            .count()
            .max(1);
        -self.recon.iter().sum::<f64>() / (self.recon.len().max(1) * n) as f64
    }
}

/// A rollout together with its tape handles.
#[derive(Clone, Debug)]
pub struct TapeRollout {
    pub rollout: Rollout,
    /// ELBO for the imitation provenances, the return otherwise.
    pub objective: Var,
    /// `[step][agent]` `[4]` state variables for steps `0..=T`.
    pub states: Vec<Vec<Var>>,
    /// `[step][agent]` world-frame action variables.
    pub actions: Vec<Vec<Option<Var>>>,
    /// `[step][agent]` linearized transitions of controlled agents.
    pub steps: Vec<Vec<Option<StepLinearization>>>,
    /// `[step][agent]` recurrent state fed to the low-level policy.
    pub hidden: Vec<Vec<Option<Var>>>,
}

/// `Σ softmax(q) (log_softmax(q) − log_softmax(p))`.
pub fn categorical_kl(tape: &mut Tape, q_logits: Var, p_logits: Var) -> Result<Var> {
    let lq = tape.log_softmax(q_logits);
    let lp = tape.log_softmax(p_logits);
    let q = tape.softmax(q_logits);
    let d = tape.sub(lq, lp)?;
    let w = tape.mul(q, d)?;
    Ok(tape.sum(w))
}

/// `−(huber(Δx) + huber(Δy) + w·wrap(Δψ)²)` between a state variable and a logged pose.
pub fn recon_term(tape: &mut Tape, state: Var, logged: [f64; 4], w: &ReconWeights) -> Result<Var> {
    let target = tape.constant(Tensor::vector(logged.to_vec()));
    let d = tape.sub(state, target)?;
    let pos = tape.slice_cols(d, 0, 2)?;
    let pos = tape.huber(pos, w.huber_delta);
    let pos = tape.sum(pos);
    let head = tape.slice_cols(d, 2, 1)?;
    let head = tape.wrap_angle(head);
    let head = tape.square(head);
    let head = tape.sum(head);
    let head = tape.scale(head, w.heading_weight);
    let total = tape.add(pos, head)?;
    Ok(tape.neg(total))
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let all = tape.concat(terms)?;
    Ok(tape.sum(all))
}

struct AgentRun {
    h: Var,
    z: Option<Var>,
    latent: Option<LatentAssignment>,
    trail: Vec<Var>,
}

/// Runs one rollout on `tape`.
///
/// `episode` and `posterior` are required for the imitation provenances.
/// Gumbel noise is drawn from `rng` at each gate step for each controlled
/// agent in index order.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    tape: &mut Tape,
    policy: &Policy,
    p: &Bound,
    scene0: &Scene,
    env: &EnvLatent,
    provenance: Provenance,
    episode: Option<&LoggedEpisode>,
    posterior: &[Option<Var>],
    controller: Controller<'_>,
    opts: &RolloutOptions,
    rng: &mut R,
) -> Result<TapeRollout> {
    let horizon = opts.horizon.unwrap_or(scene0.scenario.horizon);
    check_horizon(scene0, env, horizon)?;
    let ep = if provenance.imitation() {
        let ep = episode.ok_or_else(|| Error::Config("imitation rollout needs the logged episode".into()))?;
        if ep.horizon() < horizon {
            return Err(Error::Horizon {
                needed: horizon,
                have: ep.horizon(),
            });
        }
        Some(ep)
    } else {
        None
    };
    let n = scene0.agents.len();
    let hperiod = opts.latent_period;
    let k = policy.cfg.codebook_size;

    let mut scene = scene0.clone();
    let mut rules = (!provenance.imitation()).then(|| RuleTracker::new(&scene));
    let mut cur: Vec<Var> = scene
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let t = Tensor::vector(a.pose().to_vec());
            if scene.controlled(i) {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        })
        .collect();
    let mut runs: Vec<AgentRun> = (0..n)
        .map(|i| AgentRun {
            h: policy.low.gru.initial_state(tape),
            z: None,
            latent: None,
            trail: scene.trails[i]
                .iter()
                .map(|s| tape.constant(Tensor::vector(s.pose().to_vec())))
                .collect(),
        })
        .collect();

    let mut out = Rollout {
        provenance,
        scenes: vec![scene.clone()],
        actions: Vec::with_capacity(horizon),
        latents: Vec::with_capacity(horizon),
        recon: Vec::with_capacity(horizon),
        kl: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
    };
    let mut state_vars = vec![cur.clone()];
    let mut action_vars = Vec::with_capacity(horizon);
    let mut lin_steps = Vec::with_capacity(horizon);
    let mut hidden_vars = Vec::with_capacity(horizon);
    let mut terms: Vec<Var> = Vec::new();

    for t in 0..horizon {
        let gate = temporal_gate(t, hperiod);
        let mut next_vars = cur.clone();
        let mut next_agents = Vec::with_capacity(n);
        let mut acts = vec![None; n];
        let mut act_vars = vec![None; n];
        let mut lins = vec![None; n];
        let mut hid = vec![None; n];
        let mut step_kl = 0.0;
        for i in 0..n {
            let agent = scene.agents[i];
            if !scene.controlled(i) {
                let next = scene.scenario.logged_state(i, scene.time_step + 1);
                next_vars[i] = tape.constant(Tensor::vector(next.pose().to_vec()));
                next_agents.push(next);
                continue;
            }
            let obs = match provenance {
                Provenance::OpenLoopPosterior => {
                    let o = ep.expect("episode")
                        .obs[t][i]
                        .as_ref()
                        .expect("controlled agent observed");
                    ObsInput::constant(tape, o)
                }
                _ => {
                    let ov = observe_vars(tape, &scene, i, &opts.obs, &cur, &runs[i].trail)?;
                    ObsInput::from_vars(&ov)
                }
            };

            if gate {
                let prior = policy.high.logits(tape, p, &obs)?;
                let noise = opts.sample_latents.then(|| gumbel_noise(rng, k));
                let logits = if provenance.imitation() {
                    let post = posterior
                        .get(i)
                        .copied()
                        .flatten()
                        .ok_or_else(|| Error::Config(format!("no posterior for agent {i}")))?;
                    let row = tape.gather(post, &[t / hperiod])?;
                    let row = tape.reshape(row, vec![k])?;
                    let kl = categorical_kl(tape, row, prior)?;
                    step_kl += tape.item(kl);
                    terms.push(tape.neg(kl));
                    row
                } else {
                    prior
                };
                let s = draw_latent(tape, p, &policy.codebooks, agent.agent_type, logits, noise.as_deref())?;
                runs[i].z = Some(s.z);
                runs[i].latent = Some(LatentAssignment {
                    index: s.index,
                    z: tape.value(s.z).data().to_vec(),
                    age: 0,
                });
            } else {
                let lat = runs[i].latent.as_mut().expect("latent drawn at step 0");
                lat.age += 1;
                if opts.detach_history {
                    let z = runs[i].z.expect("latent drawn at step 0");
                    let zc = tape.value(z).clone();
                    runs[i].z = Some(tape.constant(zc));
                }
            }

            let action = match controller {
                Controller::Policy => {
                    let bounds = agent.agent_type.action_bounds(&opts.kin);
                    let z = runs[i].z.expect("latent drawn at step 0");
                    hid[i] = Some(runs[i].h);
                    let (a, h) = policy.low.step(tape, p, &obs, z, runs[i].h, agent.agent_type, &bounds)?;
                    runs[i].h = if opts.detach_history {
                        let hv = tape.value(h).clone();
                        tape.constant(hv)
                    } else {
                        h
                    };
                    action_to_world(tape, a, cur[i], agent.agent_type)?
                }
                Controller::Replay(actions) => {
                    let a = actions
                        .get(t)
                        .and_then(|row| row.get(i))
                        .and_then(|a| a.clone())
                        .ok_or(Error::MissingAction(i))?;
                    tape.constant(Tensor::vector(a))
                }
            };
            let (next, lin) = step_var(tape, &agent, cur[i], action, &opts.kin)?;
            acts[i] = Some(tape.value(action).data().to_vec());
            act_vars[i] = Some(action);
            next_agents.push(lin.next);
            lins[i] = Some(lin);
            next_vars[i] = next;
        }

        let next_scene = scene.advanced(next_agents, env);
        let mut step_recon = 0.0;
        let mut step_reward = 0.0;
        if let Some(ep) = ep {
            for i in (0..n).filter(|&i| scene.controlled(i)) {
                let logged = ep.scenes[t + 1].agents[i].pose();
                let r = recon_term(tape, next_vars[i], logged, &opts.recon)?;
                step_recon += tape.item(r);
                terms.push(r);
            }
        }
        if let Some(rules) = rules.as_mut() {
            rules.update(&next_scene);
            let discount = opts.gamma.powi(t as i32);
            for i in (0..n).filter(|&i| scene.controlled(i)) {
                let r = total_reward_var(tape, &next_scene, i, &next_vars, &opts.thresholds, rules)?;
                let r = tape.scale(r, discount);
                step_reward += tape.item(r);
                terms.push(r);
            }
        }

        for i in 0..n {
            let prev = if opts.detach_history {
                let v = tape.value(cur[i]).clone();
                tape.constant(v)
            } else {
                cur[i]
            };
            runs[i].trail.push(prev);
            if runs[i].trail.len() > TRAIL_LEN {
                runs[i].trail.remove(0);
            }
        }
        out.recon.push(step_recon);
        out.kl.push(step_kl);
        out.rewards.push(step_reward);
        out.actions.push(acts);
        out.latents.push(runs.iter().map(|r| r.latent.clone()).collect());
        out.scenes.push(next_scene.clone());
        action_vars.push(act_vars);
        lin_steps.push(lins);
        hidden_vars.push(hid);
        state_vars.push(next_vars.clone());
        cur = next_vars;
        scene = next_scene;
    }

    let objective = sum_terms(tape, &terms)?;
    if !tape.item(objective).is_finite() {
        return Err(Error::NonFinite("rollout objective"));
    }
    Ok(TapeRollout {
        rollout: out,
        objective,
        states: state_vars,
        actions: action_vars,
        steps: lin_steps,
        hidden: hidden_vars,
    })
}

/// Closed-loop rollout with posterior latents; returns ELBO-CL.
#[allow(clippy::too_many_arguments)]
pub fn rollout_closed_loop<R: Rng + ?Sized>(
    tape: &mut Tape,
    policy: &Policy,
    p: &Bound,
    scene0: &Scene,
    env: &EnvLatent,
    episode: &LoggedEpisode,
    posterior: &[Option<Var>],
    opts: &RolloutOptions,
    rng: &mut R,
) -> Result<TapeRollout> {
    rollout(
        tape,
        policy,
        p,
        scene0,
        env,
        Provenance::ClosedLoopPosterior,
        Some(episode),
        posterior,
        Controller::Policy,
        opts,
        rng,
    )
}

/// Open-loop rollout on logged observations with posterior latents; returns ELBO-OL.
#[allow(clippy::too_many_arguments)]
pub fn rollout_open_loop<R: Rng + ?Sized>(
    tape: &mut Tape,
    policy: &Policy,
    p: &Bound,
    scene0: &Scene,
    env: &EnvLatent,
    episode: &LoggedEpisode,
    posterior: &[Option<Var>],
    opts: &RolloutOptions,
    rng: &mut R,
) -> Result<TapeRollout> {
    rollout(
        tape,
        policy,
        p,
        scene0,
        env,
        Provenance::OpenLoopPosterior,
        Some(episode),
        posterior,
        Controller::Policy,
        opts,
        rng,
    )
}

/// Closed-loop rollout with prior latents; returns the RL return.
pub fn rollout_rl<R: Rng + ?Sized>(
    tape: &mut Tape,
    policy: &Policy,
    p: &Bound,
    scene0: &Scene,
    env: &EnvLatent,
    opts: &RolloutOptions,
    rng: &mut R,
) -> Result<TapeRollout> {
    rollout(
        tape,
        policy,
        p,
        scene0,
        env,
        Provenance::ClosedLoopPrior,
        None,
        &[],
        Controller::Policy,
        opts,
        rng,
    )
}

/// Objective values and loss gradients for one scenario.
#[derive(Clone, Debug)]
pub struct ObjectiveSample {
    /// ELBO-CL, ELBO-OL, RL return.
    pub values: [f64; 3],
    /// `grads[objective][group]`: gradient of the loss `−objective`,
    /// flattened per parameter group in [`ParamGroup::ALL`] order.
    pub grads: [Vec<Vec<f64>>; 3],
    /// Closed-loop reconstruction loss per step and agent.
    pub recon_loss: f64,
    pub rollouts: Vec<Rollout>,
}

/// Runs the three rollouts of one training iteration on a shared tape, in
/// the order closed-loop IL, open-loop IL, RL, and backpropagates each.
pub fn evaluate_objectives<R: Rng + ?Sized>(
    policy: &Policy,
    scene0: &Scene,
    env: &EnvLatent,
    opts: &RolloutOptions,
    rng: &mut R,
) -> Result<ObjectiveSample> {
    let horizon = opts.horizon.unwrap_or(scene0.scenario.horizon);
    let mut tape = Tape::new();
    let p = policy.store.bind(&mut tape);
    let ep = LoggedEpisode::new(scene0, env, horizon, &opts.obs)?;
    let post = posterior_logits(&mut tape, policy, &p, &ep, opts.latent_period)?;
    let cl = rollout_closed_loop(&mut tape, policy, &p, scene0, env, &ep, &post, opts, rng)?;
    let ol = rollout_open_loop(&mut tape, policy, &p, scene0, env, &ep, &post, opts, rng)?;
    let rl = rollout_rl(&mut tape, policy, &p, scene0, env, opts, rng)?;
    let mut grads: [Vec<Vec<f64>>; 3] = Default::default();
    for (slot, r) in grads.iter_mut().zip([&cl, &ol, &rl]) {
        let g = tape.backward(r.objective)?;
        *slot = ParamGroup::ALL
            .iter()
            .map(|&grp| {
                let mut v = policy.store.flat_grad(&g, &p, grp);
                v.iter_mut().for_each(|x| *x = -*x);
                v
            })
            .collect();
        if slot.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("objective gradient"));
        }
    }
    Ok(ObjectiveSample {
        values: [cl.rollout.elbo(), ol.rollout.elbo(), rl.rollout.rl_return()],
        grads,
        recon_loss: cl.rollout.recon_loss(),
        rollouts: vec![cl.rollout, ol.rollout, rl.rollout],
    })
}
