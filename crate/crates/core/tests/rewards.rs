mod common;

use std::collections::HashSet;
use std::sync::Arc;

use common::*;
use drivesim::autodiff::Tape;
use drivesim::rewards::route::{route_search, route_search_bounded, MAX_DEPTH};
use drivesim::rewards::{
    collision_reward, minkowski_signed_distance, on_road_distance, on_road_reward, total_reward,
    total_reward_var, OrientedBox, RewardThresholds, RuleTracker,
};
use drivesim::tensor::Tensor;
use drivesim::world::{AgentState, AgentType, Lane, LightState, Map, Polyline, PolylineKind, Scene};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut impl Rng) -> OrientedBox {
    OrientedBox::new(
        [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)],
        rng.gen_range(-3.14..3.14),
        rng.gen_range(0.2..3.0),
        rng.gen_range(0.2..1.5),
    )
    .unwrap()
}

#[test]
fn rotated_box_matches_sampling_oracle() {
    let a = OrientedBox::new([0.0, 0.0], 0.0, 0.5, 0.5).unwrap();
    let b = OrientedBox::new([3.0, 0.0], std::f64::consts::FRAC_PI_4, 0.5, 0.5).unwrap();
    let d = minkowski_signed_distance(&a, &b).unwrap().distance;
    let oracle = oracle_signed_distance(&a, &b, 100_000);
    assert!((d - oracle).abs() <= 1e-6, "{d} vs {oracle}");
    // by hand: the rotated square's nearest corner sits at 3 - √2/2
    assert!((d - (2.5 - std::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-12);
}

#[test]
fn random_pairs_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let d = minkowski_signed_distance(&a, &b).unwrap().distance;
        let oracle = oracle_signed_distance(&a, &b, 100_000);
        assert!((d - oracle).abs() <= 1e-6, "{d} vs {oracle} for {a:?} {b:?}");
        assert_eq!(d > 0.0, sat_disjoint(&a, &b));
    }
}

/// Central and one-sided differences agree only away from support switches.
fn smooth_fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> Option<f64> {
    let (fp, f0, fm) = (f(x + h), f(x), f(x - h));
    let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
    if (fwd - bwd).abs() > 1e-4 * fwd.abs().max(1.0) {
        None
    } else {
        Some((fp - fm) / (2.0 * h))
    }
}

#[test]
fn minkowski_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for _ in 0..2000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let g = minkowski_signed_distance(&a, &b).unwrap();
        for k in 0..3 {
            let eval = |t: f64| {
                let mut a2 = a;
                match k {
                    0 => a2.center[0] = t,
                    1 => a2.center[1] = t,
                    _ => a2.heading = t,
                }
                minkowski_signed_distance(&a2, &b).unwrap().distance
            };
            let x = [a.center[0], a.center[1], a.heading][k];
            if let Some(fd) = smooth_fd(eval, x, 1e-6) {
                assert!(
                    (fd - g.grad_a[k]).abs() <= 1e-4 * fd.abs().max(1.0),
                    "coord {k}: fd {fd} vs {}",
                    g.grad_a[k]
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 4000, "only {checked} smooth checks");
}

proptest! {
    #[test]
    fn minkowski_symmetric_and_rigid_invariant(
        ax in -5.0f64..5.0, ay in -5.0f64..5.0, ah in -3.0f64..3.0, al in 0.2f64..3.0, aw in 0.2f64..2.0,
        bx in -5.0f64..5.0, by in -5.0f64..5.0, bh in -3.0f64..3.0, bl in 0.2f64..3.0, bw in 0.2f64..2.0,
        tx in -50.0f64..50.0, ty in -50.0f64..50.0, rot in -3.0f64..3.0,
    ) {
        let a = OrientedBox::new([ax, ay], ah, al, aw).unwrap();
        let b = OrientedBox::new([bx, by], bh, bl, bw).unwrap();
        let d = minkowski_signed_distance(&a, &b).unwrap().distance;
        let r = minkowski_signed_distance(&b, &a).unwrap().distance;
        prop_assert!((d - r).abs() < 1e-9);
        let (s, c) = rot.sin_cos();
        let tf = |bx: &OrientedBox| {
            let p = bx.center;
            OrientedBox::new([c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty], bx.heading + rot, bx.half_length, bx.half_width).unwrap()
        };
        let moved = minkowski_signed_distance(&tf(&a), &tf(&b)).unwrap().distance;
        prop_assert!((d - moved).abs() < 1e-9);
    }
}

fn scene_of(agents: &[AgentState], map: Map, lights: Vec<LightState>) -> Scene {
    Scene::initial(Arc::new(static_scenario(agents, map, lights, 2))).unwrap()
}

fn empty_map() -> Map {
    Map::new(vec![], vec![], vec![]).unwrap()
}

#[test]
fn collision_reward_examples() {
    let th = RewardThresholds::default();
    // 4 m long cars, centres 9 m apart: 5 m gap
    let s = scene_of(&[car(0.0, 0.0, 0.0, 0.0), car(9.0, 0.0, 0.0, 0.0)], empty_map(), vec![]);
    assert_eq!(collision_reward(&s, 0, &th).unwrap(), 1.0);
    // overlap depth 0.5
    let s = scene_of(&[car(0.0, 0.0, 0.0, 0.0), car(3.5, 0.0, 0.0, 0.0)], empty_map(), vec![]);
    assert!((collision_reward(&s, 0, &th).unwrap() + 0.5).abs() < 1e-12);
    let s = scene_of(&[car(0.0, 0.0, 0.0, 0.0)], empty_map(), vec![]);
    assert_eq!(collision_reward(&s, 0, &th).unwrap(), 1.0);
}

#[test]
fn on_road_examples() {
    let th = RewardThresholds::default();
    let edge = Map::new(
        vec![Polyline {
            kind: PolylineKind::RoadEdge,
            points: vec![[-10.0, 0.0], [10.0, 0.0]],
        }],
        vec![],
        vec![],
    )
    .unwrap();
    let inside = OrientedBox::new([0.0, 4.0], 0.0, 2.0, 1.0).unwrap();
    let (d, _) = on_road_distance(&inside, &edge).unwrap();
    assert!((d + 3.0).abs() < 1e-12);
    assert_eq!(on_road_reward(d, &th), 1.0);
    let straddle = OrientedBox::new([0.0, 0.6], 0.0, 2.0, 1.0).unwrap();
    let (d, _) = on_road_distance(&straddle, &edge).unwrap();
    assert!((d - 0.4).abs() < 1e-12);
    assert!((on_road_reward(d, &th) + 0.4).abs() < 1e-12);
    let touching = OrientedBox::new([0.0, 1.0], 0.0, 2.0, 1.0).unwrap();
    assert_eq!(on_road_distance(&touching, &edge).unwrap().0, 0.0);
    assert!(on_road_distance(&inside, &empty_map()).is_none());
}

/// Point-in-polygon plus nearest-segment distance for a closed road outline.
fn polygon_signed_distance(p: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    let mut inside = false;
    let mut best = f64::INFINITY;
    for k in 0..poly.len() - 1 {
        let (a, b) = (poly[k], poly[k + 1]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        let g = [b[0] - a[0], b[1] - a[1]];
        let t = (((p[0] - a[0]) * g[0] + (p[1] - a[1]) * g[1]) / (g[0] * g[0] + g[1] * g[1])).clamp(0.0, 1.0);
        best = best.min((p[0] - a[0] - t * g[0]).hypot(p[1] - a[1] - t * g[1]));
    }
    if inside {
        -best
    } else {
        best
    }
}

#[test]
fn on_road_matches_brute_force() {
    // counter-clockwise outline: the road is on the left of every edge
    let outline = vec![[-20.0, -6.0], [20.0, -6.0], [20.0, 6.0], [-20.0, 6.0], [-20.0, -6.0]];
    let map = Map::new(
        vec![Polyline {
            kind: PolylineKind::RoadEdge,
            points: outline.clone(),
        }],
        vec![],
        vec![],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let b = OrientedBox::new(
            [rng.gen_range(-25.0..25.0), rng.gen_range(-10.0..10.0)],
            rng.gen_range(-3.0..3.0),
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..1.2),
        )
        .unwrap();
        let oracle = b
            .vertices()
            .iter()
            .map(|v| polygon_signed_distance(*v, &outline))
            .fold(f64::NEG_INFINITY, f64::max);
        let (d, _) = on_road_distance(&b, &map).unwrap();
        assert!((d - oracle).abs() < 1e-9, "{d} vs {oracle} for {b:?}");
    }
}

#[test]
fn traffic_rule_examples() {
    let th = RewardThresholds::default();
    let map = straight_road(6.0, Some(0.0));
    let reward_at = |x: f64| {
        let mut sc = static_scenario(&[car(x, 0.0, 0.0, 0.0)], map.clone(), vec![LightState::Red], 2);
        sc.agents[0].start_lane = Some(0);
        // the car was before the stop point when the light turned red
        for p in sc.agents[0].log.iter_mut().take(5) {
            p[0] = -20.0;
        }
        let sc = Arc::new(sc);
        let mut scene = Scene::initial(Arc::clone(&sc)).unwrap();
        scene.agents[0] = car(-20.0, 0.0, 0.0, 0.0);
        let mut rules = RuleTracker::new(&scene);
        scene.agents[0] = car(x, 0.0, 0.0, 0.0);
        rules.update(&scene);
        total_reward(&scene, 0, &th, &rules).unwrap().traffic_rule
    };
    assert_eq!(reward_at(-5.0), 0.0);
    assert!((reward_at(1.0) + 1.0).abs() < 1e-12);
    assert_eq!(reward_at(10.0), -2.0);
}

#[test]
fn vehicle_past_stop_at_red_onset_is_not_bound() {
    let th = RewardThresholds::default();
    let mut sc = static_scenario(&[car(5.0, 0.0, 0.0, 0.0)], straight_road(6.0, Some(0.0)), vec![LightState::Red], 2);
    sc.agents[0].start_lane = Some(0);
    let scene = Scene::initial(Arc::new(sc)).unwrap();
    let rules = RuleTracker::new(&scene);
    assert_eq!(total_reward(&scene, 0, &th, &rules).unwrap().traffic_rule, 0.0);
}

#[test]
fn total_reward_examples() {
    let th = RewardThresholds::default();
    let map = straight_road(6.0, None);
    let ped = AgentState::new(0.0, 10.0, 0.0, 0.0, 0.5, 0.5, AgentType::Pedestrian);
    let s = scene_of(&[ped], map.clone(), vec![]);
    let rules = RuleTracker::new(&s);
    let t = total_reward(&s, 0, &th, &rules).unwrap();
    assert_eq!((t.collision, t.on_road, t.traffic_rule), (1.0, 0.0, 0.0));

    let s = scene_of(&[car(0.0, 0.0, 0.0, 5.0)], map.clone(), vec![]);
    let rules = RuleTracker::new(&s);
    assert_eq!(total_reward(&s, 0, &th, &rules).unwrap().total(), 2.0);

    // overlapping cars, one half off the road edge
    let s = scene_of(&[car(0.0, 5.6, 0.0, 0.0), car(3.0, 5.6, 0.0, 0.0)], map, vec![]);
    let rules = RuleTracker::new(&s);
    let t = total_reward(&s, 0, &th, &rules).unwrap();
    assert!(t.collision < 0.0 && t.on_road < 0.0);
    assert_eq!(t.total(), t.collision + t.on_road + t.traffic_rule);
}

#[test]
fn reward_var_gradient_matches_finite_differences() {
    let th = RewardThresholds::default();
    let map = straight_road(4.0, Some(0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for _ in 0..300 {
        let agents = vec![
            car(rng.gen_range(-3.0..3.0), rng.gen_range(-3.5..3.5), rng.gen_range(-0.5..0.5), 3.0),
            car(rng.gen_range(-3.0..6.0), rng.gen_range(-3.5..3.5), rng.gen_range(-3.0..3.0), 3.0),
        ];
        let mut sc = static_scenario(&agents, map.clone(), vec![LightState::Red], 2);
        sc.agents[0].start_lane = Some(0);
        for p in sc.agents[0].log.iter_mut() {
            p[0] = -10.0;
        }
        let sc = Arc::new(sc);
        let mut scene = Scene::initial(sc).unwrap();
        scene.agents = agents.clone();
        let rules = {
            let mut before = scene.clone();
            before.agents[0] = car(-10.0, 0.0, 0.0, 0.0);
            let mut r = RuleTracker::new(&before);
            r.update(&scene);
            r
        };
        let mut tape = Tape::new();
        let states: Vec<_> = scene
            .agents
            .iter()
            .map(|a| tape.leaf(Tensor::vector(a.pose().to_vec())))
            .collect();
        let r = total_reward_var(&mut tape, &scene, 0, &states, &th, &rules).unwrap();
        let value = total_reward(&scene, 0, &th, &rules).unwrap().total();
        assert!((tape.item(r) - value).abs() < 1e-12);
        let g = tape.backward(r).unwrap();
        for j in 0..2 {
            for c in 0..3 {
                let eval = |t: f64| {
                    let mut s2 = scene.clone();
                    let mut p = s2.agents[j].pose();
                    p[c] = t;
                    s2.agents[j] = s2.agents[j].with_pose(p);
                    total_reward(&s2, 0, &th, &rules).unwrap().total()
                };
                if let Some(fd) = smooth_fd(eval, scene.agents[j].pose()[c], 1e-6) {
                    let an = g.wrt(states[j]).data()[c];
                    assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1.0), "agent {j} coord {c}: {fd} vs {an}");
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 1000);
}

proptest! {
    #[test]
    fn reward_terms_bounded(
        x in -20.0f64..20.0, y in -8.0f64..8.0, h in -3.0f64..3.0,
        ox in -20.0f64..20.0, oy in -8.0f64..8.0,
    ) {
        let th = RewardThresholds::default();
        let mut sc = static_scenario(&[car(x, y, h, 1.0), car(ox, oy, 0.0, 1.0)], straight_road(4.0, Some(0.0)), vec![LightState::Red], 2);
        sc.agents[0].start_lane = Some(0);
        for p in sc.agents[0].log.iter_mut() {
            p[0] = -30.0;
        }
        let sc = Arc::new(sc);
        let mut scene = Scene::initial(sc).unwrap();
        let mut rules = RuleTracker::new(&scene);
        scene.agents[0] = car(x, y, h, 1.0);
        rules.update(&scene);
        let t = total_reward(&scene, 0, &th, &rules).unwrap();
        prop_assert!(t.collision <= th.eps1);
        prop_assert!(t.on_road <= -th.eps2);
        prop_assert!(t.traffic_rule >= -th.eps3 && t.traffic_rule <= -th.eps4);
    }
}

fn random_dag(rng: &mut impl Rng, n: usize) -> Map {
    let lanes = (0..n)
        .map(|i| {
            let mut succ: Vec<usize> = Vec::new();
            if i + 1 < n {
                for _ in 0..rng.gen_range(0..=3) {
                    let j = rng.gen_range(i + 1..n);
                    if !succ.contains(&j) {
                        succ.push(j);
                    }
                }
            }
            Lane {
                centerline: vec![[i as f64, 0.0], [i as f64 + 1.0, 0.5]],
                successors: succ,
            }
        })
        .collect();
    Map::new(vec![], lanes, vec![]).unwrap()
}

/// All maximal paths in DFS order, generated with an explicit stack, truncated.
fn enumerate_paths(map: &Map, start: usize, limit: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<usize>, usize)> = vec![(vec![start], 0)];
    while let Some((path, next)) = stack.pop() {
        if out.len() >= limit {
            break;
        }
        let last = *path.last().unwrap();
        let succ = &map.lanes[last].successors;
        if succ.is_empty() {
            out.push(path);
            continue;
        }
        if next < succ.len() {
            let mut child = path.clone();
            child.push(succ[next]);
            stack.push((path, next + 1));
            stack.push((child, 0));
        }
    }
    out
}

#[test]
fn route_search_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let map = random_dag(&mut rng, 100);
        let start = rng.gen_range(0..20);
        let found: HashSet<Vec<usize>> = route_search(&map, start).into_iter().map(|r| r.lanes).collect();
        let oracle: HashSet<Vec<usize>> = enumerate_paths(&map, start, 64).into_iter().collect();
        assert_eq!(found, oracle);
        for r in route_search(&map, start) {
            let unique: HashSet<_> = r.lanes.iter().collect();
            assert_eq!(unique.len(), r.lanes.len());
            assert!(r.lanes.len() <= MAX_DEPTH);
            assert!(r.arclength.windows(2).all(|w| w[1] > w[0]));
        }
    }
}

#[test]
fn route_depth_bound() {
    let lanes = (0..300)
        .map(|i| Lane {
            centerline: vec![[i as f64, 0.0], [i as f64 + 1.0, 0.0]],
            successors: if i + 1 < 300 { vec![i + 1] } else { vec![] },
        })
        .collect();
    let map = Map::new(vec![], lanes, vec![]).unwrap();
    let routes = route_search(&map, 0);
    assert_eq!(routes.len(), 1);
    assert_eq!(routes[0].lanes.len(), MAX_DEPTH);
    assert_eq!(route_search_bounded(&map, 0, 64, 3)[0].lanes, vec![0, 1, 2]);
}
