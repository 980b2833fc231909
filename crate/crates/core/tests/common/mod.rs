//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use drivesim::rewards::OrientedBox;
use drivesim::world::{
    AgentSpec, AgentState, AgentType, Lane, LightState, Map, Polyline, PolylineKind, Scenario,
    TrafficLight,
};

pub type V2 = [f64; 2];

fn sub(a: V2, b: V2) -> V2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: V2, b: V2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Boundary segments of `A ⊖ B`: an edge of one box translated by a support
/// vertex of the other.
pub fn minkowski_boundary(a: &OrientedBox, b: &OrientedBox) -> Vec<(V2, V2)> {
    let (va, vb) = (a.vertices(), b.vertices());
    let mut segs = Vec::new();
    let support = |vs: &[V2; 4], n: V2| {
        let best = vs.iter().map(|v| dot(*v, n)).fold(f64::INFINITY, f64::min);
        (0..4)
            .filter(move |&k| dot(vs[k], n) <= best + 1e-12)
            .collect::<Vec<_>>()
    };
    for k in 0..4 {
        let (p, q) = (va[k], va[(k + 1) % 4]);
        let e = sub(q, p);
        let n = [e[1], -e[0]]; // outward for a counter-clockwise box
        for m in support(&vb, n) {
            segs.push((sub(p, vb[m]), sub(q, vb[m])));
        }
    }
    for k in 0..4 {
        let (p, q) = (vb[k], vb[(k + 1) % 4]);
        let e = sub(q, p);
        let n = [e[1], -e[0]];
        // the matching edge of -B has outward normal -n, paired with A's support along -n
        for m in support(&va, n) {
            segs.push((sub(va[m], p), sub(va[m], q)));
        }
    }
    segs
}

fn seg_dist(p: V2, q: V2, t: f64) -> f64 {
    let x = [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
    x[0].hypot(x[1])
}

/// Minimum distance from the origin to the Minkowski boundary, by dense
/// sampling of `samples` points along it and ternary refinement on the
/// segments that come close to the sampled minimum.
pub fn boundary_min_distance(a: &OrientedBox, b: &OrientedBox, samples: usize) -> f64 {
    let segs = minkowski_boundary(a, b);
    let lengths: Vec<f64> = segs.iter().map(|(p, q)| sub(*q, *p)[0].hypot(sub(*q, *p)[1])).collect();
    let total: f64 = lengths.iter().sum();
    let spacing = total / samples as f64;
    let mut coarse = vec![f64::INFINITY; segs.len()];
    for (k, (p, q)) in segs.iter().enumerate() {
        let n = ((lengths[k] / spacing).ceil() as usize).max(1);
        for s in 0..=n {
            coarse[k] = coarse[k].min(seg_dist(*p, *q, s as f64 / n as f64));
        }
    }
    let best = coarse.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut refined = best;
    for (k, (p, q)) in segs.iter().enumerate() {
        if coarse[k] > best + 2.0 * spacing {
            continue;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if seg_dist(*p, *q, m1) < seg_dist(*p, *q, m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        refined = refined.min(seg_dist(*p, *q, 0.5 * (lo + hi)));
    }
    refined
}

/// Separating-axis test: true when the boxes are disjoint.
pub fn sat_disjoint(a: &OrientedBox, b: &OrientedBox) -> bool {
    let (va, vb) = (a.vertices(), b.vertices());
    for h in [a.heading, b.heading] {
        for axis in [[h.cos(), h.sin()], [-h.sin(), h.cos()]] {
            let pa = va.iter().map(|v| dot(*v, axis));
            let pb = vb.iter().map(|v| dot(*v, axis));
            let (amin, amax) = pa.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            let (bmin, bmax) = pb.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            if amax < bmin || bmax < amin {
                return true;
            }
        }
    }
    false
}

/// Signed oracle distance: positive when disjoint.
pub fn oracle_signed_distance(a: &OrientedBox, b: &OrientedBox, samples: usize) -> f64 {
    let d = boundary_min_distance(a, b, samples);
    if sat_disjoint(a, b) {
        d
    } else {
        -d
    }
}

/// A scenario holding the given agents at rest-equivalent constant logs.
pub fn static_scenario(agents: &[AgentState], map: Map, lights: Vec<LightState>, horizon: usize) -> Scenario {
    let n = 6 + horizon;
    Scenario {
        name: "test".into(),
        kind: "test".into(),
        dt: 0.2,
        init_steps: 6,
        horizon,
        map,
        light_schedule: vec![lights; n],
        agents: agents
            .iter()
            .map(|a| AgentSpec {
                agent_type: a.agent_type,
                length: a.length,
                width: a.width,
                controlled: true,
                on_road_masked: false,
                start_lane: None,
                log: vec![a.pose(); n],
            })
            .collect(),
    }
}

/// A straight two-sided road along +x between `y = -half` and `y = half`,
/// with one lane and an optional light whose stop point is at `stop_x`.
pub fn straight_road(half: f64, stop_x: Option<f64>) -> Map {
    let edges = vec![
        Polyline {
            kind: PolylineKind::RoadEdge,
            points: vec![[-200.0, -half], [200.0, -half]],
        },
        Polyline {
            kind: PolylineKind::RoadEdge,
            points: vec![[200.0, half], [-200.0, half]],
        },
    ];
    let lanes = vec![Lane {
        centerline: vec![[-200.0, 0.0], [200.0, 0.0]],
        successors: vec![],
    }];
    let lights = stop_x
        .map(|x| {
            vec![TrafficLight {
                lane: 0,
                position: [x, half + 1.0],
                stop_point: [x, 0.0],
            }]
        })
        .unwrap_or_default();
    Map::new(edges, lanes, lights).unwrap()
}

pub fn car(x: f64, y: f64, psi: f64, v: f64) -> AgentState {
    AgentState::new(x, y, psi, v, 4.0, 2.0, AgentType::Vehicle)
}

/// A scenario whose logs are generated by stepping each agent's motion model
/// with `action(agent, step)`, so the logs are exactly reproducible.
pub fn scripted_scenario(
    starts: &[AgentState],
    map: Map,
    lights: Vec<LightState>,
    horizon: usize,
    action: impl Fn(usize, usize) -> Vec<f64>,
) -> Scenario {
    let n = 6 + horizon;
    let kin = drivesim::world::KinematicParams::default();
    let agents = starts
        .iter()
        .enumerate()
        .map(|(i, s0)| {
            let mut s = *s0;
            let mut log = vec![s.pose()];
            for t in 1..n {
                s = drivesim::world::step_linearized(&s, &action(i, t - 1), &kin).unwrap().next;
                log.push(s.pose());
            }
            AgentSpec {
                agent_type: s0.agent_type,
                length: s0.length,
                width: s0.width,
                controlled: true,
                on_road_masked: false,
                start_lane: None,
                log,
            }
        })
        .collect();
    Scenario {
        name: "scripted".into(),
        kind: "test".into(),
        dt: kin.dt,
        init_steps: 6,
        horizon,
        map,
        light_schedule: vec![lights; n],
        agents,
    }
}

/// Scenes `0..=horizon` that follow the scenario's logs.
pub fn logged_scenes(sc: &std::sync::Arc<Scenario>) -> Vec<drivesim::world::Scene> {
    let env = sc.env_latent();
    let mut scenes = vec![drivesim::world::Scene::initial(sc.clone()).unwrap()];
    for _ in 0..sc.horizon {
        let cur = scenes.last().unwrap();
        let next = (0..cur.agents.len()).map(|i| sc.logged_state(i, cur.time_step + 1)).collect();
        scenes.push(cur.advanced(next, &env));
    }
    scenes
}

/// `scenes` with every evaluated agent's position moved by `(dx, dy)` after step 0.
pub fn shifted(scenes: &[drivesim::world::Scene], agent: usize, dx: f64, dy: f64) -> Vec<drivesim::world::Scene> {
    scenes
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut s = s.clone();
            if t > 0 {
                s.agents[agent].x += dx;
                s.agents[agent].y += dy;
            }
            s
        })
        .collect()
}
