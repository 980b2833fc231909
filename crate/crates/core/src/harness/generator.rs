//! Seeded synthetic scenarios with scripted expert trajectories.
//!
//! Each map is a small road network (straight road, T-junction, signalized
//! four-way crossing, two-lane merge). Vehicles follow lane paths with pure
//! pursuit steering and IDM speed control, stop for red and yellow lights,
//! yield at merges and unsignalized junctions and brake for pedestrians in
//! their corridor. Pedestrians walk across crosswalks with the delta model.
//! Every log is produced by stepping the motion models, so replaying the
//! recovered actions reproduces it.

use std::f64::consts::{FRAC_PI_2, PI};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::wrap_angle;
use crate::error::{Error, Result};
use crate::rewards::{minkowski_signed_distance, OrientedBox, Route};
use crate::world::{
    inverse_step, step_linearized, AgentSpec, AgentState, AgentType, Dataset, KinematicParams,
    Lane, LightState, Map, Polyline, PolylineKind, Scenario, Scene, TrafficLight,
};

type V2 = [f64; 2];

/// Half width of every road; lanes are centred 2 m either side of the axis.
const ROAD_HALF: f64 = 4.0;
const LANE_OFFSET: f64 = 2.0;
/// Length of each road arm from the map centre.
const ARM: f64 = 250.0;
/// Curb fillet radius at junction corners.
const FILLET: f64 = 4.0;
/// Distance from the centre where junction connector lanes begin.
const JUNCTION: f64 = ROAD_HALF + FILLET;
/// Crosswalk centre distance from the junction centre and its half depth.
const CROSSWALK: f64 = 10.5;
const CROSSWALK_HALF: f64 = 1.5;
/// Stop point (vehicle centre) distance from the junction centre.
const STOP: f64 = 14.0;

/// Maximum replay error of a generated log, metres.
pub const IK_TOLERANCE: f64 = 1e-6;

/// Supported map families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    TJunction,
    Crossing,
    Merge,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Straight,
        ScenarioKind::TJunction,
        ScenarioKind::Crossing,
        ScenarioKind::Merge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::TJunction => "t_junction",
            ScenarioKind::Crossing => "crossing",
            ScenarioKind::Merge => "merge",
        }
    }

    fn default_vehicles(self) -> usize {
        match self {
            ScenarioKind::Crossing => 1,
            _ => 2,
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "t-junction" && *k == ScenarioKind::TJunction))
            .ok_or_else(|| Error::UnsupportedKind(s.to_string()))
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scenario size. `None` counts use the per-kind defaults: two vehicles
/// (one at the crossing) and, at the crossing only, one pedestrian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorOptions {
    pub vehicles: Option<usize>,
    pub pedestrians: Option<usize>,
    pub init_steps: usize,
    pub horizon: usize,
    pub dt: f64,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            vehicles: None,
            pedestrians: None,
            init_steps: 6,
            horizon: 40,
            dt: 0.2,
        }
    }
}

/// `count` scenarios of `kind` with default options.
pub fn generate_scenarios(kind: &str, count: usize, seed: u64) -> Result<Dataset> {
    generate_with(kind.parse()?, count, seed, &GeneratorOptions::default())
}

/// `count` scenarios of `kind`. Scenario `k` depends only on `(seed, k)` and
/// the options, so prefixes of larger datasets agree.
pub fn generate_with(
    kind: ScenarioKind,
    count: usize,
    seed: u64,
    opts: &GeneratorOptions,
) -> Result<Dataset> {
    if opts.init_steps == 0 || opts.horizon == 0 || !(opts.dt > 0.0) {
        return Err(Error::Config(
            "init_steps, horizon and dt must be positive".into(),
        ));
    }
    let scenarios = (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let sc = generate_one(kind, &format!("{kind}-{seed}-{k}"), opts, &mut rng)?;
            check_scenario(&sc)?;
            Ok(sc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(scenarios))
}

/// Largest position error when the logs are replayed with the actions
/// recovered by inverse kinematics.
pub fn ik_residual(sc: &Scenario) -> f64 {
    let kin = KinematicParams {
        dt: sc.dt,
        ..KinematicParams::default()
    };
    let mut worst: f64 = 0.0;
    for i in 0..sc.agents.len() {
        for t in 0..sc.len() - 1 {
            let s = sc.logged_state(i, t);
            let next = sc.logged_state(i, t + 1);
            let a = inverse_step(&s, &next, &kin);
            let err = match step_linearized(&s, &a, &kin) {
                Ok(lin) => (lin.next.x - next.x)
                    .abs()
                    .max((lin.next.y - next.y).abs())
                    .max(wrap_angle(lin.next.psi - next.psi).abs())
                    .max((lin.next.v - next.v).abs()),
                Err(_) => f64::INFINITY,
            };
            worst = worst.max(err);
        }
    }
    worst
}

fn check_scenario(sc: &Scenario) -> Result<()> {
    sc.validate()?;
    let env = sc.env_latent();
    Scene::initial(Arc::new(sc.clone()))?.validate(&env)?;
    let r = ik_residual(sc);
    if !(r <= IK_TOLERANCE) {
        return Err(Error::InvalidScenario(format!(
            "{}: expert replay error {r:e} exceeds {IK_TOLERANCE:e}",
            sc.name
        )));
    }
    Ok(())
}

fn rot(theta: f64, p: V2) -> V2 {
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

fn arc(center: V2, radius: f64, from: f64, to: f64, n: usize) -> Vec<V2> {
    (0..=n)
        .map(|k| {
            let a = from + (to - from) * k as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

fn dist(a: V2, b: V2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Road network under construction.
#[derive(Default)]
struct Network {
    edges: Vec<Polyline>,
    lanes: Vec<Lane>,
    extra: Vec<Polyline>,
    lights: Vec<TrafficLight>,
}

impl Network {
    fn lane(&mut self, centerline: Vec<V2>) -> usize {
        self.lanes.push(Lane {
            centerline,
            successors: Vec::new(),
        });
        self.lanes.len() - 1
    }

    fn link(&mut self, from: usize, to: usize) {
        self.lanes[from].successors.push(to);
    }

    fn edge(&mut self, points: Vec<V2>) {
        self.edges.push(Polyline {
            kind: PolylineKind::RoadEdge,
            points,
        });
    }

    /// Curb around the corner between arm directions `theta` and
    /// `theta + π/2`, drivable side on the left.
    fn corner(&mut self, theta: f64) {
        let c = [JUNCTION, JUNCTION];
        let mut pts = vec![rot(theta, [ARM, ROAD_HALF])];
        pts.extend(arc(c, FILLET, 1.5 * PI, PI, 8).into_iter().map(|p| rot(theta, p)));
        pts.push(rot(theta, [ROAD_HALF, ARM]));
        self.edge(pts);
    }

    fn map(self) -> Result<Map> {
        let mut polylines = self.edges;
        polylines.extend(self.extra);
        for l in &self.lanes {
            polylines.push(Polyline {
                kind: PolylineKind::LaneCenter,
                points: l.centerline.clone(),
            });
        }
        Map::new(polylines, self.lanes, self.lights)
    }
}

/// Lanes of a junction arm pointing in direction `theta` from the centre.
#[derive(Clone, Copy)]
struct Arm {
    theta: f64,
    /// Inbound lane ending at the junction.
    approach: usize,
    /// Outbound lane starting at the junction.
    exit: usize,
}

fn junction_arm(net: &mut Network, theta: f64) -> Arm {
    // inbound traffic travels towards the centre, i.e. along theta + π,
    // keeping right of the axis
    let approach = net.lane(vec![
        rot(theta, [ARM, LANE_OFFSET]),
        rot(theta, [JUNCTION, LANE_OFFSET]),
    ]);
    let exit = net.lane(vec![
        rot(theta, [JUNCTION, -LANE_OFFSET]),
        rot(theta, [ARM, -LANE_OFFSET]),
    ]);
    Arm {
        theta,
        approach,
        exit,
    }
}

/// Connector from `from.approach` to `to.exit`, linked into the graph.
fn connect(net: &mut Network, from: Arm, to: Arm) -> usize {
    let start = *net.lanes[from.approach].centerline.last().expect("lane");
    let end = net.lanes[to.exit].centerline[0];
    let turn = wrap_angle(to.theta - (from.theta + PI));
    let pts = if turn.abs() < 1e-9 {
        vec![start, end]
    } else {
        // quarter circle tangent to both lanes
        let h_in = from.theta + PI;
        let left = turn > 0.0;
        let normal = if left { h_in + FRAC_PI_2 } else { h_in - FRAC_PI_2 };
        let radius = if left {
            JUNCTION + LANE_OFFSET
        } else {
            JUNCTION - LANE_OFFSET
        };
        let c = [start[0] + radius * normal.cos(), start[1] + radius * normal.sin()];
        let a0 = normal + PI;
        let mut pts = arc(c, radius, a0, a0 + turn, 12);
        pts[0] = start;
        *pts.last_mut().expect("arc") = end;
        pts
    };
    let id = net.lane(pts);
    net.link(from.approach, id);
    net.link(id, to.exit);
    id
}

/// Point at distance `d` from the centre on the approach lane of `arm`.
fn approach_point(arm: Arm, d: f64) -> V2 {
    rot(arm.theta, [d, LANE_OFFSET])
}

/// Crosswalk markings across `arm`.
fn crosswalk(net: &mut Network, arm: Arm) {
    for off in [-CROSSWALK_HALF, CROSSWALK_HALF] {
        net.extra.push(Polyline {
            kind: PolylineKind::Crosswalk,
            points: vec![
                rot(arm.theta, [CROSSWALK + off, -ROAD_HALF]),
                rot(arm.theta, [CROSSWALK + off, ROAD_HALF]),
            ],
        });
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Yield {
    None,
    /// Wait at the stop point while any priority vehicle approaches.
    Junction,
}

struct VehiclePlan {
    route: Route,
    /// Arclength at the start of each lane of the route.
    lane_starts: Vec<f64>,
    v_des: f64,
    /// `(step, new v_des)`: a speed-profile change.
    profile: Option<(usize, f64)>,
    /// Light index and stop arclength.
    light: Option<(usize, f64)>,
    yield_rule: Yield,
    /// Arclength of the yield point and of the junction centre.
    yield_at: f64,
    centre_at: f64,
}

struct PedPlan {
    route: Route,
    /// Light of the crossed arm; walking starts only while it is red.
    light: Option<usize>,
    speed: f64,
    delay: usize,
}

enum Plan {
    Vehicle(VehiclePlan),
    Pedestrian(PedPlan),
}

struct Draft {
    net: Network,
    schedule: Box<dyn Fn(usize) -> Vec<LightState>>,
    agents: Vec<(AgentState, Plan, Option<usize>)>,
}

fn vehicle_dims<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    (rng.gen_range(4.2..5.0), rng.gen_range(1.8..2.0))
}

/// Places a vehicle on `route` at arclength `s`, with small lateral and
/// heading perturbations.
fn place<R: Rng + ?Sized>(route: &Route, s: f64, v: f64, rng: &mut R) -> AgentState {
    let (p, d) = route.point_at(s);
    let lat = rng.gen_range(-0.3..0.3);
    let psi = d[1].atan2(d[0]) + rng.gen_range(-0.03..0.03);
    let (l, w) = vehicle_dims(rng);
    AgentState::new(
        p[0] - d[1] * lat,
        p[1] + d[0] * lat,
        psi,
        v,
        l,
        w,
        AgentType::Vehicle,
    )
}

fn clear_of(existing: &[(AgentState, Plan, Option<usize>)], p: V2, gap: f64) -> bool {
    existing.iter().all(|(s, _, _)| dist([s.x, s.y], p) >= gap)
}

fn vehicle_plan(map: &Map, route: Route, v_des: f64, rng: &mut ChaCha8Rng, steps: usize) -> VehiclePlan {
    let mut lane_starts = Vec::with_capacity(route.lanes.len());
    let mut s = 0.0;
    for &l in &route.lanes {
        lane_starts.push(s);
        let c = &map.lanes[l].centerline;
        s += c.windows(2).map(|w| dist(w[0], w[1])).sum::<f64>();
    }
    let profile = rng
        .gen_bool(0.5)
        .then(|| (rng.gen_range(steps / 4..steps.max(2) * 3 / 4 + 1), rng.gen_range(5.0..13.0)));
    VehiclePlan {
        route,
        lane_starts,
        v_des,
        profile,
        light: None,
        yield_rule: Yield::None,
        yield_at: 0.0,
        centre_at: 0.0,
    }
}

fn no_lights() -> Box<dyn Fn(usize) -> Vec<LightState>> {
    Box::new(|_| Vec::new())
}

fn draft_straight(n: usize, rng: &mut ChaCha8Rng, steps: usize) -> Result<Draft> {
    let mut net = Network::default();
    net.edge(vec![[-ARM, -ROAD_HALF], [ARM, -ROAD_HALF]]);
    net.edge(vec![[ARM, ROAD_HALF], [-ARM, ROAD_HALF]]);
    let east = net.lane(vec![[-ARM, -LANE_OFFSET], [ARM, -LANE_OFFSET]]);
    let west = net.lane(vec![[ARM, LANE_OFFSET], [-ARM, LANE_OFFSET]]);
    let map = net.map()?;
    let mut agents = Vec::new();
    for k in 0..n {
        let lane = if k % 2 == 0 || rng.gen_bool(0.3) { east } else { west };
        let route = Route::from_lanes(&map, vec![lane]);
        let v_des = rng.gen_range(8.0..13.0);
        let state = (0..100)
            .map(|_| {
                let s = rng.gen_range(ARM - 90.0..ARM - 20.0);
                place(&route, s, v_des * rng.gen_range(0.6..1.0), rng)
            })
            .find(|s| clear_of(&agents, [s.x, s.y], 15.0))
            .ok_or_else(|| Error::Config(format!("cannot place {n} vehicles")))?;
        let plan = vehicle_plan(&map, route, v_des, rng, steps);
        agents.push((state, Plan::Vehicle(plan), Some(lane)));
    }
    Ok(Draft {
        net: rebuild(map),
        schedule: no_lights(),
        agents,
    })
}

fn rebuild(map: Map) -> Network {
    Network {
        edges: map
            .polylines
            .iter()
            .filter(|p| p.kind == PolylineKind::RoadEdge)
            .cloned()
            .collect(),
        extra: map
            .polylines
            .iter()
            .filter(|p| !matches!(p.kind, PolylineKind::RoadEdge | PolylineKind::LaneCenter))
            .cloned()
            .collect(),
        lanes: map.lanes,
        lights: map.lights,
    }
}

/// Spawns a vehicle on the approach of `arm` at centre distance `d`.
fn spawn_on_arm(
    map: &Map,
    lanes: Vec<usize>,
    d: f64,
    v: f64,
    v_des: f64,
    rng: &mut ChaCha8Rng,
    steps: usize,
) -> (AgentState, VehiclePlan) {
    let route = Route::from_lanes(map, lanes);
    let s = (ARM - d).max(0.0);
    let state = place(&route, s, v, rng);
    let mut plan = vehicle_plan(map, route, v_des, rng, steps);
    plan.centre_at = ARM;
    plan.yield_at = ARM - STOP;
    (state, plan)
}

fn draft_t_junction(n: usize, rng: &mut ChaCha8Rng, steps: usize) -> Result<Draft> {
    let mut net = Network::default();
    // arms: east (0), south (−π/2), west (π); the north side is a plain curb
    let east = junction_arm(&mut net, 0.0);
    let south = junction_arm(&mut net, -FRAC_PI_2);
    let west = junction_arm(&mut net, PI);
    net.edge(vec![[ARM, ROAD_HALF], [-ARM, ROAD_HALF]]);
    net.corner(-FRAC_PI_2);
    net.corner(PI);
    let main_ew = connect(&mut net, west, east);
    let main_we = connect(&mut net, east, west);
    let west_right = connect(&mut net, west, south);
    let south_right = connect(&mut net, south, east);
    let south_left = connect(&mut net, south, west);
    let map = net.map()?;
    let mut agents: Vec<(AgentState, Plan, Option<usize>)> = Vec::new();
    for k in 0..n {
        for _ in 0..100 {
            let (lanes, yield_rule) = match (k, rng.gen_range(0..5)) {
                (0, _) | (_, 0) => {
                    if rng.gen_bool(0.5) {
                        (vec![south.approach, south_right, east.exit], Yield::Junction)
                    } else {
                        (vec![south.approach, south_left, west.exit], Yield::Junction)
                    }
                }
                (_, 1) => (vec![west.approach, west_right, south.exit], Yield::None),
                (_, 2) | (_, 3) => (vec![west.approach, main_ew, east.exit], Yield::None),
                _ => (vec![east.approach, main_we, west.exit], Yield::None),
            };
            let v_des = rng.gen_range(7.0..12.0);
            let d = rng.gen_range(STOP + 6.0..STOP + 50.0);
            let v = if yield_rule == Yield::Junction {
                rng.gen_range(2.0..6.0)
            } else {
                v_des * rng.gen_range(0.6..1.0)
            };
            let start = lanes[0];
            let (state, mut plan) = spawn_on_arm(&map, lanes, d, v, v_des, rng, steps);
            plan.yield_rule = yield_rule;
            if clear_of(&agents, [state.x, state.y], 15.0) {
                agents.push((state, Plan::Vehicle(plan), Some(start)));
                break;
            }
        }
        if agents.len() != k + 1 {
            return Err(Error::Config(format!("cannot place {n} vehicles")));
        }
    }
    Ok(Draft {
        net: rebuild(map),
        schedule: no_lights(),
        agents,
    })
}

/// Light cycle in steps: green, yellow, all-red for the east-west phase,
/// then the same for north-south.
const GREEN: usize = 35;
const YELLOW: usize = 10;
const ALL_RED: usize = 5;
const CYCLE: usize = 2 * (GREEN + YELLOW + ALL_RED);

fn phase_state(t: usize, ns: bool) -> LightState {
    let half = GREEN + YELLOW + ALL_RED;
    let local = if ns { (t + half) % CYCLE } else { t % CYCLE };
    if local < GREEN {
        LightState::Green
    } else if local < GREEN + YELLOW {
        LightState::Yellow
    } else {
        LightState::Red
    }
}

fn draft_crossing(
    n: usize,
    peds: usize,
    rng: &mut ChaCha8Rng,
    steps: usize,
) -> Result<Draft> {
    let mut net = Network::default();
    let thetas = [0.0, FRAC_PI_2, PI, -FRAC_PI_2];
    let arms: Vec<Arm> = thetas.iter().map(|&t| junction_arm(&mut net, t)).collect();
    for &t in &thetas {
        net.corner(t);
    }
    let mut straight = Vec::new();
    let mut right = Vec::new();
    for k in 0..4 {
        let opposite = arms[(k + 2) % 4];
        // the right turn from arm k ends on the arm one quarter clockwise of
        // the travel direction, which is arm k + 1 in counter-clockwise order
        let right_target = arms[(k + 1) % 4];
        straight.push(connect(&mut net, arms[k], opposite));
        right.push(connect(&mut net, arms[k], right_target));
    }
    for (k, arm) in arms.iter().enumerate() {
        crosswalk(&mut net, *arm);
        net.lights.push(TrafficLight {
            lane: arm.approach,
            position: rot(arm.theta, [STOP, ROAD_HALF + 1.0]),
            stop_point: approach_point(*arm, STOP),
        });
        debug_assert_eq!(net.lights.len(), k + 1);
    }
    let map = net.map()?;
    let offset = rng.gen_range(0..CYCLE);
    // light k controls arm k; arms 1 and 3 are north-south
    let schedule: Box<dyn Fn(usize) -> Vec<LightState>> =
        Box::new(move |t| (0..4).map(|k| phase_state(t + offset, k % 2 == 1)).collect());
    let mut agents: Vec<(AgentState, Plan, Option<usize>)> = Vec::new();
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..100 {
            let k = rng.gen_range(0..4);
            let arm = arms[k];
            let turn = rng.gen_bool(0.25);
            let lanes = if turn {
                vec![arm.approach, right[k], arms[(k + 1) % 4].exit]
            } else {
                vec![arm.approach, straight[k], arms[(k + 2) % 4].exit]
            };
            let v_des = rng.gen_range(7.0..12.0);
            let d = rng.gen_range(STOP + 8.0..STOP + 45.0);
            // slow enough to stop comfortably before the stop point
            let v_max = (2.0 * 3.0 * (d - STOP - 2.0)).sqrt();
            let v = (v_des * rng.gen_range(0.6f64..1.0)).min(v_max);
            let (state, mut plan) = spawn_on_arm(&map, lanes, d, v, v_des, rng, steps);
            plan.light = Some((k, ARM - STOP));
            if clear_of(&agents, [state.x, state.y], 15.0) {
                agents.push((state, Plan::Vehicle(plan), Some(arm.approach)));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!("cannot place {n} vehicles")));
        }
    }
    if peds > 4 {
        return Err(Error::Config(format!("at most 4 pedestrians per crossing, got {peds}")));
    }
    let mut used = Vec::new();
    for _ in 0..peds {
        // prefer a crosswalk on a vehicle's path so the yielding is exercised
        // one pedestrian per crosswalk, so they never walk into each other
        let preferred = agents.iter().find_map(|(_, p, _)| match p {
            Plan::Vehicle(v) => v.light.map(|(k, _)| k),
            _ => None,
        });
        let k = match preferred {
            Some(k) if !used.contains(&k) && rng.gen_bool(0.7) => k,
            _ => {
                let free: Vec<usize> = (0..4).filter(|k| !used.contains(k)).collect();
                free[rng.gen_range(0..free.len())]
            }
        };
        used.push(k);
        let arm = arms[k];
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let along = CROSSWALK + rng.gen_range(-0.8..0.8);
        let a = rot(arm.theta, [along, side * (ROAD_HALF + 2.0)]);
        let b = rot(arm.theta, [along, -side * (ROAD_HALF + 40.0)]);
        let tmp = Map::new(
            vec![],
            vec![Lane {
                centerline: vec![a, b],
                successors: vec![],
            }],
            vec![],
        )?;
        let route = Route::from_lanes(&tmp, vec![0]);
        let psi = (b[1] - a[1]).atan2(b[0] - a[0]);
        let speed = rng.gen_range(1.15..1.45);
        let delay = rng.gen_range(0..15);
        let state = AgentState::new(a[0], a[1], psi, 0.0, 0.6, 0.6, AgentType::Pedestrian);
        agents.push((state, Plan::Pedestrian(PedPlan {
                route,
                light: Some(k),
                speed,
                delay,
            }), None));
    }
    Ok(Draft {
        net: rebuild(map),
        schedule,
        agents,
    })
}

fn draft_merge(n: usize, rng: &mut ChaCha8Rng, steps: usize) -> Result<Draft> {
    let mut net = Network::default();
    let taper = 40.0;
    net.edge(vec![[ARM, ROAD_HALF], [-ARM, ROAD_HALF]]);
    net.edge(vec![[-ARM, -ROAD_HALF], [0.0, -ROAD_HALF], [taper, 0.0], [ARM, 0.0]]);
    let main = net.lane(vec![[-ARM, LANE_OFFSET], [taper, LANE_OFFSET]]);
    let ramp = net.lane(vec![[-ARM, -LANE_OFFSET], [0.0, -LANE_OFFSET]]);
    let join = net.lane(vec![[0.0, -LANE_OFFSET], [taper, LANE_OFFSET]]);
    let after = net.lane(vec![[taper, LANE_OFFSET], [ARM, LANE_OFFSET]]);
    net.link(main, after);
    net.link(ramp, join);
    net.link(join, after);
    let map = net.map()?;
    let mut agents: Vec<(AgentState, Plan, Option<usize>)> = Vec::new();
    for k in 0..n {
        let mut placed = false;
        for _ in 0..100 {
            let on_ramp = if k == 0 { true } else { rng.gen_bool(0.4) };
            let lanes = if on_ramp {
                vec![ramp, join, after]
            } else {
                vec![main, after]
            };
            let route = Route::from_lanes(&map, lanes.clone());
            let v_des = rng.gen_range(9.0..13.0);
            let s = ARM + rng.gen_range(-100.0..-15.0);
            let state = place(&route, s, v_des * rng.gen_range(0.7..1.0), rng);
            if clear_of(&agents, [state.x, state.y], 12.0) {
                let plan = vehicle_plan(&map, route, v_des, rng, steps);
                agents.push((state, Plan::Vehicle(plan), Some(lanes[0])));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!("cannot place {n} vehicles")));
        }
    }
    Ok(Draft {
        net: rebuild(map),
        schedule: no_lights(),
        agents,
    })
}

/// IDM acceleration towards an obstacle at `gap` metres closing at `dv`.
fn idm(v: f64, v_des: f64, gap: Option<(f64, f64)>) -> f64 {
    const A: f64 = 2.0;
    const B: f64 = 3.0;
    const S0: f64 = 2.0;
    const HEADWAY: f64 = 1.2;
    let free = 1.0 - (v / v_des.max(0.1)).powi(4);
    match gap {
        None => A * free,
        Some((s, dv)) => {
            let s_star = S0 + (v * HEADWAY + v * dv / (2.0 * (A * B).sqrt())).max(0.0);
            A * (free - (s_star / s.max(0.1)).powi(2))
        }
    }
}

/// Arclength where the routes start sharing lanes, on each.
fn merge_point(a: &VehiclePlan, b: &VehiclePlan) -> Option<(f64, f64)> {
    let shared = a.route.lanes.iter().find(|l| b.route.lanes.contains(l))?;
    let ka = a.route.lanes.iter().position(|l| l == shared)?;
    let kb = b.route.lanes.iter().position(|l| l == shared)?;
    Some((a.lane_starts[ka], b.lane_starts[kb]))
}

struct Sim {
    kin: KinematicParams,
}

impl Sim {
    fn vehicle_action(
        &self,
        i: usize,
        t: usize,
        states: &[AgentState],
        plans: &[Plan],
        lights: &[LightState],
        committed: &mut [bool],
    ) -> Vec<f64> {
        let s = &states[i];
        let Plan::Vehicle(plan) = &plans[i] else {
            unreachable!()
        };
        let route = &plan.route;
        let here = route.project([s.x, s.y]).s;
        let v_des = match plan.profile {
            Some((at, v)) if t >= at => v,
            _ => plan.v_des,
        };
        let mut obstacles: Vec<(f64, f64)> = Vec::new();
        for (j, o) in states.iter().enumerate() {
            if j == i {
                continue;
            }
            match &plans[j] {
                Plan::Vehicle(other) => {
                    // anything already inside the corridor ahead
                    let proj = route.project([o.x, o.y]);
                    let ahead = proj.s - here;
                    if proj.lateral < 2.2 && ahead > 0.0 && ahead < 40.0 {
                        let (_, dir) = route.point_at(proj.s);
                        let along = o.v * (o.psi.cos() * dir[0] + o.psi.sin() * dir[1]);
                        obstacles.push((ahead - 0.5 * (s.length + o.length), s.v - along));
                    }
                    let Some((mi, mj)) = merge_point(plan, other) else {
                        continue;
                    };
                    let sj = other.route.project([o.x, o.y]).s;
                    let mapped = sj - mj + mi;
                    // only interact within 60 m of the merge point
                    if here < mi - 60.0 && mapped < mi - 60.0 {
                        continue;
                    }
                    let ahead = mapped - here;
                    let tie_ahead = ahead == 0.0 && j < i;
                    if ahead > 0.0 || tie_ahead {
                        let gap = ahead - 0.5 * (s.length + o.length);
                        obstacles.push((gap, s.v - o.v));
                    }
                }
                Plan::Pedestrian(_) => {
                    // predicted positions over the next 2 s
                    let (vx, vy) = (o.v * o.psi.cos(), o.v * o.psi.sin());
                    for k in 0..=4 {
                        let tt = 0.5 * k as f64;
                        let p = [o.x + vx * tt, o.y + vy * tt];
                        let proj = route.project(p);
                        let ahead = proj.s - here;
                        if proj.lateral < 2.8 && ahead > 0.0 && ahead < 40.0 {
                            obstacles.push((ahead - 0.5 * s.length - 1.5, s.v));
                            break;
                        }
                    }
                }
            }
        }
        if let Some((light, stop_s)) = plan.light {
            let d = stop_s - 1.0 - here;
            match lights.get(light) {
                Some(LightState::Red) if d > -0.5 => obstacles.push((d.max(0.1), s.v)),
                Some(LightState::Yellow) if d > s.v * s.v / (2.0 * 4.0) => {
                    obstacles.push((d, s.v))
                }
                _ => {}
            }
        }
        if plan.yield_rule == Yield::Junction && !committed[i] {
            let busy = states.iter().enumerate().any(|(j, o)| {
                let Plan::Vehicle(other) = &plans[j] else {
                    return false;
                };
                if j == i || other.yield_rule == Yield::Junction {
                    return false;
                }
                let sj = other.route.project([o.x, o.y]).s;
                let to_centre = other.centre_at - sj;
                to_centre > -JUNCTION && to_centre / o.v.max(1.0) < 8.0
            });
            let d = plan.yield_at - here;
            if busy && d > -0.5 {
                obstacles.push((d.max(0.1), s.v));
            } else if d < 1.5 && !busy {
                committed[i] = true;
            }
        }
        let gap = obstacles
            .into_iter()
            .map(|(g, dv)| (g, dv, idm(s.v, v_des, Some((g, dv)))))
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .map(|(g, dv, _)| (g, dv));
        let accel = idm(s.v, v_des, gap)
            .clamp(-self.kin.max_accel, 3.0)
            .max(-s.v / self.kin.dt);

        // pure pursuit on the route
        let look = (0.8 * s.v).max(5.0);
        let (target, _) = route.point_at(here + look);
        let alpha = wrap_angle((target[1] - s.y).atan2(target[0] - s.x) - s.psi);
        let lr = self.kin.rear_axle(s.length);
        let lf = self.kin.front_axle(s.length);
        let kappa = 2.0 * alpha.sin() / dist(target, [s.x, s.y]).max(1e-3);
        let rho = (kappa * lr).clamp(-0.99, 0.99).asin();
        let steer = (rho.tan() * (lf + lr) / lr)
            .atan()
            .clamp(-self.kin.max_steer, self.kin.max_steer);
        vec![accel, steer]
    }

    fn pedestrian_action(
        &self,
        i: usize,
        states: &[AgentState],
        plan: &PedPlan,
        lights: &[LightState],
        t: usize,
    ) -> Vec<f64> {
        let s = &states[i];
        if t < plan.delay {
            return vec![0.0, 0.0, 0.0];
        }
        let here = plan.route.project([s.x, s.y]).s;
        let step = plan.speed * self.kin.dt;
        let kerb = here < 1.5;
        if kerb && plan.light.is_some_and(|l| lights.get(l) != Some(&LightState::Red)) {
            return vec![0.0, 0.0, 0.0];
        }
        // wait while a vehicle blocks the next second of the walk
        let (ahead, _) = plan.route.point_at(here + plan.speed);
        let blocked = states.iter().enumerate().any(|(j, o)| {
            j != i
                && o.agent_type == AgentType::Vehicle
                && [ahead, [s.x, s.y]].iter().any(|p| {
                    let probe = s.with_pose([p[0], p[1], s.psi, 0.0]);
                    match (OrientedBox::of_agent(&probe), OrientedBox::of_agent(o)) {
                        (Ok(a), Ok(b)) => minkowski_signed_distance(&a, &b)
                            .map_or(false, |d| d.distance < 1.0),
                        _ => false,
                    }
                })
        });
        if blocked {
            return vec![0.0, 0.0, 0.0];
        }
        let (target, dir) = plan.route.point_at(here + step);
        // small correction back onto the path
        let dx = (target[0] - s.x).clamp(-self.kin.max_ped_step, self.kin.max_ped_step);
        let dy = (target[1] - s.y).clamp(-self.kin.max_ped_step, self.kin.max_ped_step);
        let heading = dir[1].atan2(dir[0]);
        let dpsi = wrap_angle(heading - s.psi).clamp(-self.kin.max_ped_turn, self.kin.max_ped_turn);
        vec![dx, dy, dpsi]
    }
}

fn generate_one(
    kind: ScenarioKind,
    name: &str,
    opts: &GeneratorOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Scenario> {
    let steps = opts.init_steps + opts.horizon;
    let n = opts.vehicles.unwrap_or(kind.default_vehicles());
    let peds = match kind {
        ScenarioKind::Crossing => opts.pedestrians.unwrap_or(1),
        _ => opts.pedestrians.unwrap_or(0),
    };
    if n + peds == 0 {
        return Err(Error::Config("a scenario needs at least one agent".into()));
    }
    if peds > 0 && kind != ScenarioKind::Crossing {
        return Err(Error::Config(format!(
            "pedestrians are only generated for crossing scenarios, not {kind}"
        )));
    }
    let draft = match kind {
        ScenarioKind::Straight => draft_straight(n, rng, steps)?,
        ScenarioKind::TJunction => draft_t_junction(n, rng, steps)?,
        ScenarioKind::Crossing => draft_crossing(n, peds, rng, steps)?,
        ScenarioKind::Merge => draft_merge(n, rng, steps)?,
    };
    let sim = Sim {
        kin: KinematicParams {
            dt: opts.dt,
            ..KinematicParams::default()
        },
    };
    let Draft {
        net,
        schedule,
        agents,
    } = draft;
    let (mut states, plans, starts): (Vec<_>, Vec<_>, Vec<_>) = agents.into_iter().fold(
        (Vec::new(), Vec::new(), Vec::new()),
        |(mut a, mut b, mut c), (s, p, l)| {
            a.push(s);
            b.push(p);
            c.push(l);
            (a, b, c)
        },
    );
    let light_schedule: Vec<Vec<LightState>> = (0..steps).map(schedule).collect();
    let mut logs: Vec<Vec<[f64; 4]>> = states.iter().map(|s| vec![s.pose()]).collect();
    let mut committed = vec![false; states.len()];
    for t in 0..steps - 1 {
        let actions: Vec<Vec<f64>> = (0..states.len())
            .map(|i| match &plans[i] {
                Plan::Vehicle(_) => {
                    sim.vehicle_action(i, t, &states, &plans, &light_schedule[t], &mut committed)
                }
                Plan::Pedestrian(p) => sim.pedestrian_action(i, &states, p, &light_schedule[t], t),
            })
            .collect();
        let next = states
            .iter()
            .zip(&actions)
            .map(|(s, a)| step_linearized(s, a, &sim.kin).map(|l| l.next))
            .collect::<Result<Vec<_>>>()?;
        for (log, s) in logs.iter_mut().zip(&next) {
            log.push(s.pose());
        }
        states = next;
    }
    let specs = states
        .iter()
        .zip(logs)
        .zip(starts)
        .map(|((s, log), start_lane)| AgentSpec {
            agent_type: s.agent_type,
            length: s.length,
            width: s.width,
            controlled: true,
            on_road_masked: false,
            start_lane,
            log,
        })
        .collect();
    Ok(Scenario {
        name: name.to_string(),
        kind: kind.name().to_string(),
        dt: opts.dt,
        init_steps: opts.init_steps,
        horizon: opts.horizon,
        map: net.map()?,
        light_schedule,
        agents: specs,
    })
}
