//! Finite-difference checks of every analytic derivative in the crate.
//!
//! The relative error of a derivative is `|fd − analytic| / max(|fd|,
//! |analytic|, 1e-3)`; the floor keeps round-off in near-zero entries from
//! dominating. Central differences use `h = 1e-6`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::objectives::{evaluate_objectives, RolloutOptions};
use crate::policy::{NetConfig, ParamGroup, Policy};
use crate::rewards::{minkowski_signed_distance, OrientedBox};
use crate::tensor::Tensor;
use crate::world::{
    jacobian_bicycle, jacobian_bicycle_action, jacobian_delta, jacobian_delta_action, step_bicycle,
    step_delta, AgentSpec, AgentState, AgentType, KinematicParams, Lane, Map, ObservationConfig,
    Polyline, PolylineKind, Scenario, Scene,
};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Geometry tolerance; evaluations next to a support switch are excluded.
pub const GEOMETRY_TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} checked {:>5}  max rel err {:.3e}  (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_error,
            self.tolerance
        )
    }
}

pub fn rel_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(FLOOR)
}

struct Acc {
    name: String,
    checked: usize,
    worst: f64,
    tol: f64,
}

impl Acc {
    fn new(name: &str, tol: f64) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            worst: 0.0,
            tol,
        }
    }

    fn push(&mut self, fd: f64, analytic: f64) {
        self.checked += 1;
        let e = rel_error(fd, analytic);
        // NaN counts as a failure
        self.worst = if e.is_nan() { f64::INFINITY } else { self.worst.max(e) };
    }

    fn done(self) -> CheckResult {
        CheckResult {
            name: self.name,
            checked: self.checked,
            max_rel_error: self.worst,
            tolerance: self.tol,
        }
    }
}

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + STEP) - f(x - STEP)) / (2.0 * STEP)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Scalarizes `op` with fixed random weights and compares the tape gradient
/// of every input entry with central differences.
fn check_op(name: &str, inputs: Vec<Tensor>, op: OpFn, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let forward = |xs: &[Tensor], weights: Option<&Tensor>| -> Result<(Tape, Vec<Var>, Var, Tensor)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = op(&mut tape, &vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => tape.value(out).map(|_| 0.0),
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod);
        Ok((tape, vars, loss, w))
    };
    let (_, _, _, shape_w) = forward(&inputs, None)?;
    let w: Vec<f64> = (0..shape_w.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weights = Tensor::new(shape_w.shape().to_vec(), w)?;
    let (tape, vars, loss, _) = forward(&inputs, Some(&weights))?;
    let grads = tape.backward(loss)?;
    let mut acc = Acc::new(&format!("op/{name}"), TOLERANCE);
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for e in 0..inputs[k].len() {
            let mut eval = |x: f64| {
                let mut xs = inputs.clone();
                xs[k].data_mut()[e] = x;
                let (tape, _, loss, _) = forward(&xs, Some(&weights)).expect("forward");
                tape.item(loss)
            };
            let fd = central(&mut eval, inputs[k].data()[e]);
            acc.push(fd, analytic.data()[e]);
        }
    }
    Ok(acc.done())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values spaced at least 0.1 apart, shuffled, so max/min have no ties.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.05 * n as f64).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    for x in &mut v {
        *x += rng.gen_range(-0.01..0.01);
    }
    Tensor::new(shape.to_vec(), v).expect("shape")
}

/// Entries bounded away from `kinks` by at least `gap`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (x - k).abs() > gap) {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Every differentiable tape operation.
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let m34 = |r: &mut ChaCha8Rng| rand_tensor(r, &[3, 4], -1.5, 1.5);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, op: OpFn, r: &mut ChaCha8Rng| -> Result<()> {
        out.push(check_op(name, inputs, op, r)?);
        Ok(())
    };
    run("add", vec![m34(r), m34(r)], Box::new(|t, v| t.add(v[0], v[1])), r)?;
    let row = rand_tensor(r, &[4], -1.0, 1.0);
    run("add_row_broadcast", vec![m34(r), row], Box::new(|t, v| t.add(v[0], v[1])), r)?;
    let s = rand_tensor(r, &[1], -1.0, 1.0);
    run("mul_scalar_broadcast", vec![m34(r), s], Box::new(|t, v| t.mul(v[0], v[1])), r)?;
    run("sub", vec![m34(r), m34(r)], Box::new(|t, v| t.sub(v[0], v[1])), r)?;
    run("mul", vec![m34(r), m34(r)], Box::new(|t, v| t.mul(v[0], v[1])), r)?;
    let den = rand_tensor(r, &[3, 4], 0.5, 2.0);
    run("div", vec![m34(r), den], Box::new(|t, v| t.div(v[0], v[1])), r)?;
    run("neg", vec![m34(r)], Box::new(|t, v| Ok(t.neg(v[0]))), r)?;
    run("scale", vec![m34(r)], Box::new(|t, v| Ok(t.scale(v[0], -1.7))), r)?;
    run("add_scalar", vec![m34(r)], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3))), r)?;
    run("tanh", vec![m34(r)], Box::new(|t, v| Ok(t.tanh(v[0]))), r)?;
    let x = away_from(r, &[3, 4], -1.5, 1.5, &[0.0], 0.01);
    run("relu", vec![x], Box::new(|t, v| Ok(t.relu(v[0]))), r)?;
    run("sigmoid", vec![m34(r)], Box::new(|t, v| Ok(t.sigmoid(v[0]))), r)?;
    run("exp", vec![m34(r)], Box::new(|t, v| Ok(t.exp(v[0]))), r)?;
    let pos = rand_tensor(r, &[3, 4], 0.2, 3.0);
    run("log", vec![pos.clone()], Box::new(|t, v| Ok(t.log(v[0]))), r)?;
    run("sqrt", vec![pos], Box::new(|t, v| Ok(t.sqrt(v[0]))), r)?;
    run("sin", vec![m34(r)], Box::new(|t, v| Ok(t.sin(v[0]))), r)?;
    run("cos", vec![m34(r)], Box::new(|t, v| Ok(t.cos(v[0]))), r)?;
    run("square", vec![m34(r)], Box::new(|t, v| Ok(t.square(v[0]))), r)?;
    let x = away_from(r, &[3, 4], -1.5, 1.5, &[-0.5, 0.7], 0.01);
    run("clamp", vec![x], Box::new(|t, v| Ok(t.clamp(v[0], -0.5, 0.7))), r)?;
    let x = away_from(r, &[3, 4], -2.0, 2.0, &[-0.8, 0.8], 0.01);
    run("huber", vec![x], Box::new(|t, v| Ok(t.huber(v[0], 0.8))), r)?;
    let x = away_from(r, &[3, 4], -6.0, 6.0, &[-PI, PI], 0.01);
    run("wrap_angle", vec![x], Box::new(|t, v| Ok(t.wrap_angle(v[0]))), r)?;
    let b = rand_tensor(r, &[4, 2], -1.0, 1.0);
    run("matmul", vec![m34(r), b], Box::new(|t, v| t.matmul(v[0], v[1])), r)?;
    run("transpose", vec![m34(r)], Box::new(|t, v| t.transpose(v[0])), r)?;
    let c = rand_tensor(r, &[3, 2], -1.0, 1.0);
    run("concat", vec![m34(r), c], Box::new(|t, v| t.concat(&[v[0], v[1]])), r)?;
    let d = rand_tensor(r, &[2, 4], -1.0, 1.0);
    run("concat_rows", vec![m34(r), d], Box::new(|t, v| t.concat_rows(&[v[0], v[1]])), r)?;
    run("gather", vec![m34(r)], Box::new(|t, v| t.gather(v[0], &[2, 0, 2])), r)?;
    run("slice_cols", vec![m34(r)], Box::new(|t, v| t.slice_cols(v[0], 1, 2)), r)?;
    run("reshape", vec![m34(r)], Box::new(|t, v| t.reshape(v[0], vec![2, 6])), r)?;
    run("softmax", vec![m34(r)], Box::new(|t, v| Ok(t.softmax(v[0]))), r)?;
    run("log_softmax", vec![m34(r)], Box::new(|t, v| Ok(t.log_softmax(v[0]))), r)?;
    run("sum", vec![m34(r)], Box::new(|t, v| Ok(t.sum(v[0]))), r)?;
    run("mean", vec![m34(r)], Box::new(|t, v| Ok(t.mean(v[0]))), r)?;
    run("sum_rows", vec![m34(r)], Box::new(|t, v| Ok(t.sum_rows(v[0]))), r)?;
    run("max_rows", vec![spaced(r, &[3, 4])], Box::new(|t, v| Ok(t.max_rows(v[0]))), r)?;
    run("min", vec![spaced(r, &[3, 4])], Box::new(|t, v| Ok(t.min(v[0]))), r)?;
    run("max", vec![spaced(r, &[3, 4])], Box::new(|t, v| Ok(t.max(v[0]))), r)?;
    run("norm2", vec![m34(r)], Box::new(|t, v| Ok(t.norm2(v[0]))), r)?;
    // a linear map recorded through the custom-Jacobian op
    let jac: Vec<f64> = (0..3 * 6).map(|_| r.gen_range(-1.0..1.0)).collect();
    let jac2 = jac.clone();
    run(
        "jacobian",
        vec![rand_tensor(r, &[4], -1.0, 1.0), rand_tensor(r, &[2], -1.0, 1.0)],
        Box::new(move |t, v| {
            let x: Vec<f64> = [v[0], v[1]]
                .iter()
                .flat_map(|u| t.value(*u).data().to_vec())
                .collect();
            let y = (0..3)
                .map(|i| (0..6).map(|j| jac2[i * 6 + j] * x[j]).sum())
                .collect();
            t.jacobian_op(&[v[0], v[1]], Tensor::vector(y), jac.clone())
        }),
        r,
    )?;
    out.push(check_straight_through(r)?);
    Ok(out)
}

/// The straight-through one-hot passes the gradient of the perturbed
/// softmax; compare it with differences of that softmax.
fn check_straight_through(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let logits = rand_tensor(rng, &[6], -1.0, 1.0);
    let noise: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let y = tape.straight_through_onehot(l, Some(&noise))?;
    let wv = tape.constant(Tensor::vector(w.clone()));
    let p = tape.mul(y, wv)?;
    let loss = tape.sum(p);
    let g = tape.backward(loss)?.wrt(l);
    let surrogate = |x: &[f64]| {
        let z: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().zip(&w).map(|(a, b)| a / s * b).sum::<f64>()
    };
    let mut acc = Acc::new("op/straight_through_onehot", TOLERANCE);
    for k in 0..6 {
        let mut eval = |x: f64| {
            let mut v = logits.data().to_vec();
            v[k] = x;
            surrogate(&v)
        };
        acc.push(central(&mut eval, logits.data()[k]), g.data()[k]);
    }
    Ok(acc.done())
}

/// State and action Jacobians of both motion models.
pub fn check_kinematics(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = KinematicParams::default();
    let mut js = Acc::new("kinematics/bicycle_state", TOLERANCE);
    let mut ja = Acc::new("kinematics/bicycle_action", TOLERANCE);
    let mut ds = Acc::new("kinematics/delta_state", TOLERANCE);
    let mut da = Acc::new("kinematics/delta_action", TOLERANCE);
    let pose = |s: &AgentState| [s.x, s.y, s.psi, s.v];
    for _ in 0..200 {
        let s = AgentState::new(
            rng.gen_range(-50.0..50.0),
            rng.gen_range(-50.0..50.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(2.0..20.0),
            rng.gen_range(3.5..6.0),
            rng.gen_range(1.6..2.2),
            AgentType::Vehicle,
        );
        // speed stays clear of the clamp at zero
        let accel = rng.gen_range(-5.0..5.0);
        let steer = rng.gen_range(-0.7..0.7);
        let jac = jacobian_bicycle(&s, steer, &p)?;
        let jact = jacobian_bicycle_action(&s, steer, &p)?;
        for c in 0..4 {
            for r in 0..4 {
                let mut eval = |x: f64| {
                    let mut q = pose(&s);
                    q[c] = x;
                    // the heading output is unwrapped for differencing
                    let n = step_bicycle(&s.with_pose(q), accel, steer, &p).expect("step");
                    let out = [n.x, n.y, q[2] + (n.psi - q[2]).sin().asin(), n.v];
                    out[r]
                };
                js.push(central(&mut eval, pose(&s)[c]), jac[r][c]);
            }
        }
        for c in 0..2 {
            for r in 0..4 {
                let mut eval = |x: f64| {
                    let (a, b) = if c == 0 { (x, steer) } else { (accel, x) };
                    let n = step_bicycle(&s, a, b, &p).expect("step");
                    [n.x, n.y, s.psi + (n.psi - s.psi).sin().asin(), n.v][r]
                };
                ja.push(central(&mut eval, [accel, steer][c]), jact[r][c]);
            }
        }
        let ped = AgentState::new(s.x, s.y, s.psi, 1.0, 0.6, 0.6, AgentType::Pedestrian);
        let act = [
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.7..0.7),
        ];
        let jd = jacobian_delta();
        let jda = jacobian_delta_action(act[0], act[1], p.dt);
        let delta_out = |n: &AgentState, base: f64| [n.x, n.y, base + (n.psi - base).sin().asin(), n.v];
        for c in 0..4 {
            for r in 0..4 {
                let mut eval = |x: f64| {
                    let mut q = pose(&ped);
                    q[c] = x;
                    let n = step_delta(&ped.with_pose(q), act[0], act[1], act[2], p.dt).expect("step");
                    delta_out(&n, q[2])[r]
                };
                ds.push(central(&mut eval, pose(&ped)[c]), jd[r][c]);
            }
        }
        for c in 0..3 {
            for r in 0..4 {
                let mut eval = |x: f64| {
                    let mut a = act;
                    a[c] = x;
                    let n = step_delta(&ped, a[0], a[1], a[2], p.dt).expect("step");
                    delta_out(&n, ped.psi)[r]
                };
                da.push(central(&mut eval, act[c]), jda[r][c]);
            }
        }
    }
    Ok(vec![js.done(), ja.done(), ds.done(), da.done()])
}

/// Gradient of the signed Minkowski distance with respect to the first
/// box's centre and heading, away from support switches.
pub fn check_geometry(seed: u64, pairs: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("geometry/minkowski_distance", GEOMETRY_TOLERANCE);
    let random_box = |rng: &mut ChaCha8Rng| {
        OrientedBox::new(
            [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)],
            rng.gen_range(-PI..PI),
            rng.gen_range(0.3..3.0),
            rng.gen_range(0.3..1.5),
        )
    };
    for _ in 0..pairs {
        let (a, b) = (random_box(&mut rng)?, random_box(&mut rng)?);
        let g = minkowski_signed_distance(&a, &b)?;
        for k in 0..3 {
            let f = |t: f64| {
                let mut a2 = a;
                match k {
                    0 => a2.center[0] = t,
                    1 => a2.center[1] = t,
                    _ => a2.heading = t,
                }
                minkowski_signed_distance(&a2, &b).map(|d| d.distance).unwrap_or(f64::NAN)
            };
            let x = [a.center[0], a.center[1], a.heading][k];
            let h = 1e-5;
            let (fm, f0, fp) = (f(x - h), f(x), f(x + h));
            // one-sided slopes disagree next to a support switch
            let (left, right) = ((f0 - fm) / h, (fp - f0) / h);
            if (left - right).abs() > 1e-4 * left.abs().max(1.0) {
                continue;
            }
            let mut eval = f;
            acc.push(central(&mut eval, x), g.grad_a[k]);
        }
    }
    Ok(acc.done())
}

/// Single car near a road edge on a straight road, with constant logs.
pub fn rollout_fixture(horizon: usize) -> Result<Scenario> {
    let half = 4.0;
    let map = Map::new(
        vec![
            Polyline {
                kind: PolylineKind::RoadEdge,
                points: vec![[-200.0, -half], [200.0, -half]],
            },
            Polyline {
                kind: PolylineKind::RoadEdge,
                points: vec![[200.0, half], [-200.0, half]],
            },
        ],
        vec![Lane {
            centerline: vec![[-200.0, 0.0], [200.0, 0.0]],
            successors: vec![],
        }],
        vec![],
    )?;
    let init = 6;
    let mut log = Vec::new();
    let p = KinematicParams::default();
    let mut s = AgentState::new(-10.0, 2.4, 0.05, 5.0, 4.0, 2.0, AgentType::Vehicle);
    for _ in 0..init + horizon {
        log.push(s.pose());
        s = step_bicycle(&s, 0.3, -0.02, &p)?;
    }
    Ok(Scenario {
        name: "gradcheck".into(),
        kind: "straight".into(),
        dt: p.dt,
        init_steps: init,
        horizon,
        map,
        light_schedule: vec![Vec::new(); init + horizon],
        agents: vec![AgentSpec {
            agent_type: AgentType::Vehicle,
            length: 4.0,
            width: 2.0,
            controlled: true,
            on_road_masked: false,
            start_lane: Some(0),
            log,
        }],
    })
}

/// Gradients of all three objectives of a `T = 3` single-agent episode with
/// respect to low-level parameters. Latent draws depend only on the other
/// groups, so differences see the same discrete choices.
pub fn check_rollout(seed: u64, coords: usize) -> Result<Vec<CheckResult>> {
    let sc = Arc::new(rollout_fixture(3)?);
    let env = sc.env_latent();
    let scene0 = Scene::initial(sc)?;
    let policy = Policy::new(NetConfig::desk(), &mut ChaCha8Rng::seed_from_u64(seed));
    let opts = RolloutOptions {
        obs: ObservationConfig::desk(),
        horizon: Some(3),
        ..RolloutOptions::default()
    };
    let values = |pol: &Policy| -> Result<[f64; 3]> {
        let s = evaluate_objectives(pol, &scene0, &env, &opts, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(s.values)
    };
    let sample = evaluate_objectives(&policy, &scene0, &env, &opts, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let gi = ParamGroup::LowLevel.index();
    let base = policy.store.flat_values(ParamGroup::LowLevel);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut idx: Vec<usize> = (0..coords).map(|_| rng.gen_range(0..base.len())).collect();
    for j in 0..3 {
        let g = &sample.grads[j][gi];
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        idx.extend(&order[..coords.min(order.len()) / 4]);
    }
    let names = ["rollout/elbo_cl", "rollout/elbo_ol", "rollout/rl_return"];
    let mut accs: Vec<Acc> = names.iter().map(|n| Acc::new(n, TOLERANCE)).collect();
    let mut q = policy.clone();
    for k in idx {
        let mut v = base.clone();
        v[k] = base[k] + STEP;
        q.store.set_flat(ParamGroup::LowLevel, &v)?;
        let up = values(&q)?;
        v[k] = base[k] - STEP;
        q.store.set_flat(ParamGroup::LowLevel, &v)?;
        let dn = values(&q)?;
        for j in 0..3 {
            let fd = (up[j] - dn[j]) / (2.0 * STEP);
            // stored gradients are of the loss, the negated objective
            accs[j].push(fd, -sample.grads[j][gi][k]);
        }
    }
    Ok(accs.into_iter().map(Acc::done).collect())
}

/// The full suite.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = check_ops(seed)?;
    out.extend(check_kinematics(seed)?);
    out.push(check_geometry(seed, 2000)?);
    out.extend(check_rollout(seed, 40)?);
    Ok(out)
}
