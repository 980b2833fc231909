//! Differentiable safety rewards.
//!
//! Per agent and step the reward is
//! `min(d_object, ε₁) − max(d_edge, ε₂) − max(min(d_light, ε₃), ε₄)`, where the
//! last two terms apply to vehicles only. Each distance comes with an analytic
//! gradient with respect to the agent poses, so the `*_var` variants record
//! the reward on a tape as a handful of Jacobian nodes.

pub mod geometry;
pub mod route;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::world::{AgentType, LightState, Map, Scene};

pub use geometry::{minkowski_signed_distance, BoxDistance, OrientedBox};
pub use route::{assign_route, route_search, Route, RouteProjection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardThresholds {
    /// Collision reward upper bound, metres.
    pub eps1: f64,
    /// On-road distance lower bound.
    pub eps2: f64,
    /// Traffic-rule distance upper bound.
    pub eps3: f64,
    /// Traffic-rule distance lower bound.
    pub eps4: f64,
}

impl Default for RewardThresholds {
    fn default() -> Self {
        Self {
            eps1: 1.0,
            eps2: -1.0,
            eps3: 2.0,
            eps4: 0.0,
        }
    }
}

/// A scalar with its gradient against the `(x, y, ψ, v)` states of some agents.
#[derive(Clone, Debug, PartialEq)]
pub struct Sensitive {
    pub value: f64,
    /// `(agent, d value / d state)`.
    pub grads: Vec<(usize, [f64; 4])>,
}

impl Sensitive {
    fn record(&self, tape: &mut Tape, states: &[Var]) -> Result<Var> {
        let inputs: Vec<Var> = self.grads.iter().map(|(i, _)| states[*i]).collect();
        let jac = self.grads.iter().flat_map(|(_, g)| *g).collect();
        tape.jacobian_op(&inputs, Tensor::scalar(self.value), jac)
    }
}

/// Signed distance from agent `i` to every other agent whose box may lie
/// within `horizon` metres. Farther agents are skipped.
pub fn neighbor_distances(scene: &Scene, i: usize, horizon: f64) -> Result<Vec<Sensitive>> {
    let me = OrientedBox::of_agent(&scene.agents[i])?;
    let mut out = Vec::new();
    for (j, other) in scene.agents.iter().enumerate() {
        if j == i {
            continue;
        }
        let ob = OrientedBox::of_agent(other)?;
        let gap = (me.center[0] - ob.center[0]).hypot(me.center[1] - ob.center[1]);
        if gap - me.radius() - ob.radius() > horizon {
            continue;
        }
        let d = minkowski_signed_distance(&me, &ob)?;
        let ga = d.grad_a;
        let gb = d.grad_b;
        out.push(Sensitive {
            value: d.distance,
            grads: vec![(i, [ga[0], ga[1], ga[2], 0.0]), (j, [gb[0], gb[1], gb[2], 0.0])],
        });
    }
    Ok(out)
}

/// `d_object`: signed distance to the nearest neighbour, if any lies within `horizon`.
pub fn object_distance(scene: &Scene, i: usize, horizon: f64) -> Result<Option<Sensitive>> {
    let all = neighbor_distances(scene, i, horizon)?;
    let mut best: Option<Sensitive> = None;
    for d in all {
        if best.as_ref().is_none_or(|b| d.value < b.value) {
            best = Some(d);
        }
    }
    Ok(best)
}

/// `min(d_object, ε₁)`; `ε₁` when there are no neighbours.
pub fn collision_reward(scene: &Scene, i: usize, th: &RewardThresholds) -> Result<f64> {
    Ok(object_distance(scene, i, th.eps1)?
        .map_or(th.eps1, |d| d.value.min(th.eps1)))
}

/// `d_edge` of a box: the largest signed vertex distance to the nearest road
/// edge (positive off road). `None` when the map has no road edges.
pub fn on_road_distance(bx: &OrientedBox, map: &Map) -> Option<(f64, [f64; 3])> {
    let mut worst: Option<(f64, usize, [f64; 2])> = None;
    for (k, v) in bx.vertices().iter().enumerate() {
        let mut nearest: Option<(f64, [f64; 2])> = None;
        for edge in map.road_edges() {
            if let Some((d, g)) = geometry::signed_distance_to_polyline(*v, &edge.points) {
                if nearest.is_none_or(|(b, _)| d.abs() < b.abs()) {
                    nearest = Some((d, g));
                }
            }
        }
        let (d, g) = nearest?;
        if worst.is_none_or(|(b, _, _)| d > b) {
            worst = Some((d, k, g));
        }
    }
    let (d, k, g) = worst?;
    Some((d, bx.vertex_pullback(k, g)))
}

/// `d_edge` of agent `i`, or `None` if masked (non-vehicle, flagged, or no edges).
pub fn agent_edge_distance(scene: &Scene, i: usize) -> Result<Option<Sensitive>> {
    let a = &scene.agents[i];
    if a.agent_type != AgentType::Vehicle || scene.scenario.agents[i].on_road_masked {
        return Ok(None);
    }
    let bx = OrientedBox::of_agent(a)?;
    Ok(on_road_distance(&bx, scene.map()).map(|(d, g)| Sensitive {
        value: d,
        grads: vec![(i, [g[0], g[1], g[2], 0.0])],
    }))
}

/// `−max(d_edge, ε₂)`.
pub fn on_road_reward(d_edge: f64, th: &RewardThresholds) -> f64 {
    -d_edge.max(th.eps2)
}

/// `−max(min(d_light, ε₃), ε₄)`.
pub fn traffic_rule_reward(d_light: f64, th: &RewardThresholds) -> f64 {
    -d_light.min(th.eps3).max(th.eps4)
}

/// Tracks which red lights bind which vehicles.
///
/// A red light binds a vehicle whose route passes its lane only if the
/// vehicle had not yet crossed the stop point when that red phase began, so
/// a vehicle that entered on green is never penalised for clearing the
/// junction.
#[derive(Clone, Debug)]
pub struct RuleTracker {
    routes: Vec<Option<Route>>,
    /// Per agent: `(light, stop arclength)` for lights on its route.
    stops: Vec<Vec<(usize, f64)>>,
    bound: Vec<Vec<bool>>,
    was_red: Vec<bool>,
    active: Vec<Vec<f64>>,
}

impl RuleTracker {
    pub fn new(scene: &Scene) -> Self {
        let sc = &scene.scenario;
        let routes: Vec<Option<Route>> = (0..sc.agents.len())
            .map(|i| {
                if sc.agents[i].agent_type == AgentType::Vehicle {
                    assign_route(sc, i)
                } else {
                    None
                }
            })
            .collect();
        let stops: Vec<Vec<(usize, f64)>> = routes
            .iter()
            .map(|r| match r {
                Some(r) => sc
                    .map
                    .lights
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| r.lanes.contains(&l.lane))
                    .map(|(k, l)| (k, r.project(l.stop_point).s))
                    .collect(),
                None => Vec::new(),
            })
            .collect();
        let mut t = Self {
            bound: stops.iter().map(|s| vec![false; s.len()]).collect(),
            active: vec![Vec::new(); routes.len()],
            was_red: vec![false; sc.map.lights.len()],
            routes,
            stops,
        };
        t.update(scene);
        t
    }

    /// Refreshes the binding red lights for the scene's current step.
    pub fn update(&mut self, scene: &Scene) {
        let red: Vec<bool> = (0..self.was_red.len())
            .map(|l| scene.light_states.get(l) == Some(&LightState::Red))
            .collect();
        for (i, stops) in self.stops.iter().enumerate() {
            self.active[i].clear();
            let Some(route) = &self.routes[i] else { continue };
            let a = &scene.agents[i];
            let s = route.project([a.x, a.y]).s;
            for (k, &(light, stop_s)) in stops.iter().enumerate() {
                if red[light] && !self.was_red[light] {
                    self.bound[i][k] = s <= stop_s;
                }
                if red[light] && self.bound[i][k] {
                    self.active[i].push(stop_s);
                }
            }
        }
        self.was_red = red;
    }

    pub fn route(&self, i: usize) -> Option<&Route> {
        self.routes[i].as_ref()
    }

    /// Stop-point arclengths of the red lights currently binding agent `i`.
    pub fn active(&self, i: usize) -> &[f64] {
        &self.active[i]
    }
}

/// `d_light` of agent `i`: arclength past the nearest binding stop point.
pub fn light_distance(scene: &Scene, i: usize, rules: &RuleTracker) -> Option<Sensitive> {
    let route = rules.route(i)?;
    let a = &scene.agents[i];
    let proj = route.project([a.x, a.y]);
    let stop = rules
        .active(i)
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.min(s))))?;
    Some(Sensitive {
        value: proj.s - stop,
        grads: vec![(i, [proj.grad[0], proj.grad[1], 0.0, 0.0])],
    })
}

/// The three reward terms of one agent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardTerms {
    pub collision: f64,
    pub on_road: f64,
    pub traffic_rule: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.collision + self.on_road + self.traffic_rule
    }
}

pub fn total_reward(
    scene: &Scene,
    i: usize,
    th: &RewardThresholds,
    rules: &RuleTracker,
) -> Result<RewardTerms> {
    let collision = collision_reward(scene, i, th)?;
    let on_road = agent_edge_distance(scene, i)?.map_or(0.0, |d| on_road_reward(d.value, th));
    let traffic_rule = light_distance(scene, i, rules).map_or(0.0, |d| traffic_rule_reward(d.value, th));
    Ok(RewardTerms {
        collision,
        on_road,
        traffic_rule,
    })
}

/// [`total_reward`] recorded on the tape against the agent state variables.
pub fn total_reward_var(
    tape: &mut Tape,
    scene: &Scene,
    i: usize,
    states: &[Var],
    th: &RewardThresholds,
    rules: &RuleTracker,
) -> Result<Var> {
    let neighbors = neighbor_distances(scene, i, th.eps1)?;
    let collision = if neighbors.is_empty() {
        tape.scalar(th.eps1)
    } else {
        let ds = neighbors
            .iter()
            .map(|n| n.record(tape, states))
            .collect::<Result<Vec<_>>>()?;
        let all = tape.concat(&ds)?;
        let nearest = tape.min(all);
        tape.clamp(nearest, f64::NEG_INFINITY, th.eps1)
    };
    let mut total = collision;
    if let Some(d) = agent_edge_distance(scene, i)? {
        let v = d.record(tape, states)?;
        let c = tape.clamp(v, th.eps2, f64::INFINITY);
        total = tape.sub(total, c)?;
    }
    if let Some(d) = light_distance(scene, i, rules) {
        let v = d.record(tape, states)?;
        let c = tape.clamp(v, th.eps4, th.eps3);
        total = tape.sub(total, c)?;
    }
    Ok(total)
}
