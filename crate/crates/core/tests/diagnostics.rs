mod common;

use std::sync::Arc;

use drivesim::autodiff::Tape;
use drivesim::objectives::diagnostics::{
    analytic_cross_step, gradient_diagnostics, tape_cross_step, Mat,
};
use drivesim::objectives::{
    posterior_logits, rollout_closed_loop, LoggedEpisode, Rollout, RolloutOptions, TapeRollout,
};
use drivesim::policy::{action_to_world, NetConfig, ObsInput, Policy};
use drivesim::tensor::Tensor;
use drivesim::world::{
    observe, step_linearized, AgentState, AgentType, EnvLatent, ObservationConfig, Scene,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{car, scripted_scenario, straight_road};

fn opts(detach: bool) -> RolloutOptions {
    RolloutOptions {
        obs: ObservationConfig::desk(),
        detach_history: detach,
        ..RolloutOptions::default()
    }
}

fn scene(starts: &[AgentState], horizon: usize) -> (Scene, EnvLatent) {
    let sc = scripted_scenario(starts, straight_road(6.0, None), vec![], horizon, |i, t| {
        match starts[i].agent_type {
            AgentType::Pedestrian => vec![0.3, 0.05, 0.02],
            _ => vec![0.5 * ((t + 2 * i) as f64 * 0.5).sin(), 0.04],
        }
    });
    let env = sc.env_latent();
    (Scene::initial(Arc::new(sc)).unwrap(), env)
}

fn closed_loop(
    tape: &mut Tape,
    p: &Policy,
    scene0: &Scene,
    env: &EnvLatent,
    o: &RolloutOptions,
    seed: u64,
) -> TapeRollout {
    let b = p.store.bind(tape);
    let ep = LoggedEpisode::new(scene0, env, scene0.scenario.horizon, &o.obs).unwrap();
    let post = posterior_logits(tape, p, &b, &ep, o.latent_period).unwrap();
    rollout_closed_loop(tape, p, &b, scene0, env, &ep, &post, o, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Re-simulates steps `j..t` from a perturbed joint state, holding the
/// recurrent state, latents and trails at their nominal values.
fn resimulate(
    p: &Policy,
    r: &Rollout,
    hidden: &[Vec<Option<Vec<f64>>>],
    o: &RolloutOptions,
    j: usize,
    t: usize,
    start: &[f64],
) -> Vec<f64> {
    let n = r.scenes[0].agents.len();
    let mut poses: Vec<[f64; 4]> = (0..n).map(|i| start[4 * i..4 * i + 4].try_into().unwrap()).collect();
    for k in j..t {
        let mut sc = r.scenes[k].clone();
        for (a, pose) in sc.agents.iter_mut().zip(&poses) {
            *a = a.with_pose(*pose);
        }
        poses = (0..n)
            .map(|i| {
                let agent = sc.agents[i];
                let ob = observe(&sc, i, &o.obs);
                let mut tape = Tape::new();
                let b = p.store.bind(&mut tape);
                let oi = ObsInput::constant(&mut tape, &ob);
                let z = tape.constant(Tensor::vector(r.latents[k][i].as_ref().unwrap().z.clone()));
                let h = tape.constant(Tensor::vector(hidden[k][i].clone().unwrap()));
                let bounds = agent.agent_type.action_bounds(&o.kin);
                let (a, _) = p.low.step(&mut tape, &b, &oi, z, h, agent.agent_type, &bounds).unwrap();
                let s = tape.constant(Tensor::vector(agent.pose().to_vec()));
                let a = action_to_world(&mut tape, a, s, agent.agent_type).unwrap();
                step_linearized(&agent, tape.value(a).data(), &o.kin).unwrap().next.pose()
            })
            .collect();
    }
    poses.concat()
}

fn fd_cross_step(
    p: &Policy,
    tape: &Tape,
    tr: &TapeRollout,
    o: &RolloutOptions,
    j: usize,
    t: usize,
) -> Mat {
    let r = &tr.rollout;
    let hidden: Vec<Vec<Option<Vec<f64>>>> = tr
        .hidden
        .iter()
        .map(|row| row.iter().map(|h| h.map(|v| tape.value(v).data().to_vec())).collect())
        .collect();
    let base: Vec<f64> = r.scenes[j].agents.iter().flat_map(|a| a.pose()).collect();
    let dim = base.len();
    let mut data = vec![0.0; dim * dim];
    let eps = 1e-6;
    for c in 0..dim {
        let mut up = base.clone();
        up[c] += eps;
        let mut dn = base.clone();
        dn[c] -= eps;
        let fu = resimulate(p, r, &hidden, o, j, t, &up);
        let fdn = resimulate(p, r, &hidden, o, j, t, &dn);
        for row in 0..dim {
            let mut d = fu[row] - fdn[row];
            if row % 4 == 2 {
                d = d.sin().atan2(d.cos());
            }
            data[row * dim + c] = d / (2.0 * eps);
        }
    }
    Mat { n: dim, data }
}

#[test]
fn zero_policy_cross_step_equals_state_jacobian_product() {
    let (scene0, env) = scene(&[car(0.0, 0.5, 0.02, 6.0), car(-12.0, -2.0, 0.0, 4.0)], 8);
    let mut p = Policy::new(NetConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0));
    p.store.zero();
    let o = opts(false);
    let mut tape = Tape::new();
    let tr = closed_loop(&mut tape, &p, &scene0, &env, &o, 0);
    let report = gradient_diagnostics(&tape, &tr).unwrap();
    assert!(report.factors.iter().all(|f| f.action.data.iter().all(|&x| x == 0.0)));
    for t in 0..=8 {
        for j in 0..=t {
            let mut prod = Mat::identity(8);
            for k in j..t {
                prod = report.factors[k].state.mul(&prod);
            }
            let measured = tape_cross_step(&tape, &tr, &report.agents, t, j).unwrap();
            assert!(measured.max_abs_diff(&prod) <= 1e-8, "({t},{j})");
            assert!((report.norms[t][j] - prod.norm2()).abs() <= 1e-8);
        }
    }
}

#[test]
fn pedestrian_state_jacobian_drops_speed() {
    let ped = AgentState::new(0.0, 0.0, 0.4, 1.0, 0.5, 0.5, AgentType::Pedestrian);
    let (scene0, env) = scene(&[ped], 6);
    let mut p = Policy::new(NetConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0));
    p.store.zero();
    let mut tape = Tape::new();
    let tr = closed_loop(&mut tape, &p, &scene0, &env, &opts(false), 0);
    let report = gradient_diagnostics(&tape, &tr).unwrap();
    let expect = Mat {
        n: 4,
        data: vec![1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0.],
    };
    for f in &report.factors {
        assert_eq!(f.state, expect);
        assert!(f.action.data.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn detached_cross_step_matches_resimulation() {
    let (scene0, env) = scene(&[car(0.0, 0.5, 0.02, 6.0), car(-8.0, -1.5, 0.05, 5.0)], 8);
    let o = opts(true);
    for seed in 0..2 {
        let p = Policy::new(NetConfig::desk(), &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::new();
        let tr = closed_loop(&mut tape, &p, &scene0, &env, &o, seed);
        let report = gradient_diagnostics(&tape, &tr).unwrap();
        assert!(report.sigma_a > 0.0);
        for (t, j) in [(1, 0), (4, 1), (8, 0), (8, 5)] {
            let analytic = analytic_cross_step(&report, t, j);
            let taped = tape_cross_step(&tape, &tr, &report.agents, t, j).unwrap();
            assert!(analytic.max_abs_diff(&taped) <= 1e-9 * analytic.norm2().max(1.0), "tape ({t},{j})");
            let fd = fd_cross_step(&p, &tape, &tr, &o, j, t);
            let tol = 1e-6 * analytic.norm2().max(1.0);
            assert!(analytic.max_abs_diff(&fd) <= tol, "fd ({t},{j}): {}", analytic.max_abs_diff(&fd));
        }
    }
}

#[test]
fn cross_step_norms_respect_the_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..10 {
        let starts = [
            car(0.0, rng.gen_range(-2.0..2.0), rng.gen_range(-0.1..0.1), rng.gen_range(2.0..8.0)),
            car(rng.gen_range(-20.0..-6.0), rng.gen_range(-2.0..2.0), 0.0, rng.gen_range(2.0..8.0)),
        ];
        let (scene0, env) = scene(&starts, 8);
        let p = Policy::new(NetConfig::desk(), &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::new();
        let tr = closed_loop(&mut tape, &p, &scene0, &env, &opts(true), seed);
        let report = gradient_diagnostics(&tape, &tr).unwrap();
        assert!(report.worst_bound_gap() <= 1e-9, "gap {}", report.worst_bound_gap());
        let curve = report.growth_curve();
        assert_eq!(curve.len(), 9);
        assert!((curve[0] - 1.0).abs() < 1e-12);
        assert!(curve.windows(2).all(|w| w[1] >= w[0]), "{curve:?}");
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 10);
    }
}
