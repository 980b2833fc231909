//! Ego-centric observations with fixed element counts.
//!
//! Each modality keeps the `k` elements nearest to the ego centre (ties to
//! the lower element index), expressed in the ego frame and padded with zero
//! rows marked invalid. The tape variant records every modality as a single
//! Jacobian node, so gradients flow from observations back into the ego state
//! and into the states of the observed agents.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

use super::{AgentState, LightState, PolylineKind, Scene};

/// `[x, y, cos δ, sin δ, v]` of an ego state in the current ego frame.
pub const EGO_FEATURES: usize = 5;
/// `[x, y, cos δ, sin δ, v, vx, vy, length, width, type one-hot ×3]`.
pub const AGENT_FEATURES: usize = 12;
/// `[x, y, dir_x, dir_y, kind one-hot ×5]`.
pub const MAP_FEATURES: usize = 4 + PolylineKind::COUNT;
/// `[x, y, red, yellow, green, unknown]`.
pub const LIGHT_FEATURES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationConfig {
    /// Ego states including the current one.
    pub ego_history: usize,
    pub max_objects: usize,
    pub max_map_points: usize,
    pub max_lights: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            ego_history: 6,
            max_objects: 16,
            max_map_points: 2000,
            max_lights: 16,
        }
    }
}

impl ObservationConfig {
    /// Smaller counts for quick experiments on synthetic scenes.
    pub fn desk() -> Self {
        Self {
            ego_history: 6,
            max_objects: 8,
            max_map_points: 64,
            max_lights: 4,
        }
    }
}

/// Padded feature matrices and validity masks, valid rows first.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub ego: Tensor,
    pub ego_mask: Vec<bool>,
    pub objects: Tensor,
    pub object_mask: Vec<bool>,
    /// Source agent index of each valid object row.
    pub object_ids: Vec<usize>,
    pub map: Tensor,
    pub map_mask: Vec<bool>,
    pub lights: Tensor,
    pub light_mask: Vec<bool>,
}

impl Observation {
    pub fn valid_counts(&self) -> [usize; 4] {
        let c = |m: &[bool]| m.iter().filter(|&&b| b).count();
        [
            c(&self.ego_mask),
            c(&self.object_mask),
            c(&self.map_mask),
            c(&self.light_mask),
        ]
    }
}

/// The same observation recorded on a tape.
#[derive(Clone, Debug)]
pub struct ObservationVars {
    pub ego: Var,
    pub objects: Var,
    pub map: Var,
    pub lights: Var,
    pub value: Observation,
}

/// One modality: padded values plus a Jacobian against the listed inputs.
struct Block {
    values: Vec<f64>,
    mask: Vec<bool>,
    /// Input slots, each a 4-vector state; slot 0 is always the ego.
    jac: Vec<f64>,
    slots: usize,
}

impl Block {
    fn new(rows: usize, width: usize, slots: usize) -> Self {
        Self {
            values: vec![0.0; rows * width],
            mask: vec![false; rows],
            jac: vec![0.0; rows * width * slots * 4],
            slots,
        }
    }

    fn set_jac(&mut self, out: usize, slot: usize, d: [f64; 4]) {
        let cols = self.slots * 4;
        let base = out * cols + slot * 4;
        for (k, v) in d.iter().enumerate() {
            self.jac[base + k] += v;
        }
    }
}

struct Frame {
    x: f64,
    y: f64,
    psi: f64,
    c: f64,
    s: f64,
}

impl Frame {
    fn of(e: &AgentState) -> Self {
        let (s, c) = e.psi.sin_cos();
        Self {
            x: e.x,
            y: e.y,
            psi: e.psi,
            c,
            s,
        }
    }

    fn local(&self, p: [f64; 2]) -> (f64, f64) {
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        (self.c * dx + self.s * dy, -self.s * dx + self.c * dy)
    }

    /// d(x_l, y_l) / d ego state.
    fn d_ego(&self, xl: f64, yl: f64) -> ([f64; 4], [f64; 4]) {
        ([-self.c, -self.s, yl, 0.0], [self.s, -self.c, -xl, 0.0])
    }

    /// d(x_l, y_l) / d(x, y) of the observed point.
    fn d_point(&self) -> ([f64; 4], [f64; 4]) {
        ([self.c, self.s, 0.0, 0.0], [-self.s, self.c, 0.0, 0.0])
    }
}

/// Indices of the `k` items nearest to `centre`, nearest first, ties to lower index.
fn nearest(points: impl Iterator<Item = [f64; 2]>, centre: [f64; 2], k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = points
        .enumerate()
        .map(|(i, p)| ((p[0] - centre[0]).powi(2) + (p[1] - centre[1]).powi(2), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if keyed.len() > k && k > 0 {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    } else if k == 0 {
        keyed.clear();
    }
    keyed.sort_by(cmp);
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Writes the relative-state features of `other` into `row`, with
/// derivatives against the ego (slot 0) and `other` (slot `slot`).
fn relative_state(
    b: &mut Block,
    row: usize,
    width: usize,
    f: &Frame,
    other: &AgentState,
    slot: usize,
) -> [f64; 7] {
    let (xl, yl) = f.local([other.x, other.y]);
    let delta = other.psi - f.psi;
    let (sd, cd) = delta.sin_cos();
    let v = other.v;
    let vals = [xl, yl, cd, sd, v, v * cd, v * sd];
    let o = row * width;
    b.values[o..o + 7].copy_from_slice(&vals);
    let (dxe, dye) = f.d_ego(xl, yl);
    let (dxp, dyp) = f.d_point();
    b.set_jac(o, 0, dxe);
    b.set_jac(o, slot, dxp);
    b.set_jac(o + 1, 0, dye);
    b.set_jac(o + 1, slot, dyp);
    b.set_jac(o + 2, 0, [0.0, 0.0, sd, 0.0]);
    b.set_jac(o + 2, slot, [0.0, 0.0, -sd, 0.0]);
    b.set_jac(o + 3, 0, [0.0, 0.0, -cd, 0.0]);
    b.set_jac(o + 3, slot, [0.0, 0.0, cd, 0.0]);
    b.set_jac(o + 4, slot, [0.0, 0.0, 0.0, 1.0]);
    b.set_jac(o + 5, 0, [0.0, 0.0, v * sd, 0.0]);
    b.set_jac(o + 5, slot, [0.0, 0.0, -v * sd, cd]);
    b.set_jac(o + 6, 0, [0.0, 0.0, -v * cd, 0.0]);
    b.set_jac(o + 6, slot, [0.0, 0.0, v * cd, sd]);
    vals
}

struct Built {
    ego: Block,
    objects: Block,
    object_ids: Vec<usize>,
    map: Block,
    lights: Block,
}

fn build(scene: &Scene, i: usize, cfg: &ObservationConfig) -> Built {
    let me = &scene.agents[i];
    let f = Frame::of(me);

    // Ego history: current state, then the trail from most recent backwards.
    let trail: Vec<&AgentState> = scene.trails[i]
        .iter()
        .rev()
        .take(cfg.ego_history.saturating_sub(1))
        .collect();
    let mut ego = Block::new(cfg.ego_history, EGO_FEATURES, 1 + trail.len());
    if cfg.ego_history > 0 {
        ego.values[..EGO_FEATURES].copy_from_slice(&[0.0, 0.0, 1.0, 0.0, me.v]);
        ego.mask[0] = true;
        ego.set_jac(4, 0, [0.0, 0.0, 0.0, 1.0]);
    }
    for (k, past) in trail.iter().enumerate() {
        let row = k + 1;
        let mut tmp = Block::new(1, 7, 1 + trail.len());
        relative_state(&mut tmp, 0, 7, &f, past, row);
        let o = row * EGO_FEATURES;
        ego.values[o..o + EGO_FEATURES].copy_from_slice(&tmp.values[..EGO_FEATURES]);
        let cols = ego.slots * 4;
        ego.jac[o * cols..(o + EGO_FEATURES) * cols]
            .copy_from_slice(&tmp.jac[..EGO_FEATURES * cols]);
        ego.mask[row] = true;
    }

    let others: Vec<usize> = (0..scene.agents.len()).filter(|&j| j != i).collect();
    let picked = nearest(
        others.iter().map(|&j| [scene.agents[j].x, scene.agents[j].y]),
        [me.x, me.y],
        cfg.max_objects,
    );
    let object_ids: Vec<usize> = picked.iter().map(|&k| others[k]).collect();
    let mut objects = Block::new(cfg.max_objects, AGENT_FEATURES, 1 + object_ids.len());
    for (row, &j) in object_ids.iter().enumerate() {
        let a = &scene.agents[j];
        relative_state(&mut objects, row, AGENT_FEATURES, &f, a, row + 1);
        let o = row * AGENT_FEATURES;
        objects.values[o + 7] = a.length;
        objects.values[o + 8] = a.width;
        objects.values[o + 9 + a.agent_type.index()] = 1.0;
        objects.mask[row] = true;
    }

    let samples = scene.map().samples();
    let picked = nearest(samples.iter().map(|s| s.pos), [me.x, me.y], cfg.max_map_points);
    let mut map = Block::new(cfg.max_map_points, MAP_FEATURES, 1);
    for (row, &k) in picked.iter().enumerate() {
        let s = &samples[k];
        let (xl, yl) = f.local(s.pos);
        let dxl = f.c * s.dir[0] + f.s * s.dir[1];
        let dyl = -f.s * s.dir[0] + f.c * s.dir[1];
        let o = row * MAP_FEATURES;
        map.values[o..o + 4].copy_from_slice(&[xl, yl, dxl, dyl]);
        map.values[o + 4 + s.kind.index()] = 1.0;
        let (jx, jy) = f.d_ego(xl, yl);
        map.set_jac(o, 0, jx);
        map.set_jac(o + 1, 0, jy);
        map.set_jac(o + 2, 0, [0.0, 0.0, dyl, 0.0]);
        map.set_jac(o + 3, 0, [0.0, 0.0, -dxl, 0.0]);
        map.mask[row] = true;
    }

    let lights_def = &scene.map().lights;
    let picked = nearest(lights_def.iter().map(|l| l.position), [me.x, me.y], cfg.max_lights);
    let mut lights = Block::new(cfg.max_lights, LIGHT_FEATURES, 1);
    for (row, &k) in picked.iter().enumerate() {
        let (xl, yl) = f.local(lights_def[k].position);
        let state = scene
            .light_states
            .get(k)
            .copied()
            .unwrap_or(LightState::Unknown);
        let o = row * LIGHT_FEATURES;
        lights.values[o] = xl;
        lights.values[o + 1] = yl;
        lights.values[o + 2 + state.index()] = 1.0;
        let (jx, jy) = f.d_ego(xl, yl);
        lights.set_jac(o, 0, jx);
        lights.set_jac(o + 1, 0, jy);
        lights.mask[row] = true;
    }

    Built {
        ego,
        objects,
        object_ids,
        map,
        lights,
    }
}

fn to_observation(b: &Built, cfg: &ObservationConfig) -> Observation {
    let t = |blk: &Block, rows: usize, w: usize| {
        Tensor::new(vec![rows, w], blk.values.clone()).expect("block shape")
    };
    Observation {
        ego: t(&b.ego, cfg.ego_history, EGO_FEATURES),
        ego_mask: b.ego.mask.clone(),
        objects: t(&b.objects, cfg.max_objects, AGENT_FEATURES),
        object_mask: b.objects.mask.clone(),
        object_ids: b.object_ids.clone(),
        map: t(&b.map, cfg.max_map_points, MAP_FEATURES),
        map_mask: b.map.mask.clone(),
        lights: t(&b.lights, cfg.max_lights, LIGHT_FEATURES),
        light_mask: b.lights.mask.clone(),
    }
}

/// Observation of agent `i` in `scene`.
pub fn observe(scene: &Scene, i: usize, cfg: &ObservationConfig) -> Observation {
    to_observation(&build(scene, i, cfg), cfg)
}

/// Observation of agent `i` recorded on the tape.
///
/// `states[j]` is the `[4]` state variable of agent `j` (matching
/// `scene.agents`), and `trail` the ego's past state variables, oldest first
/// (matching `scene.trails[i]`). Pass constants to cut gradient paths.
pub fn observe_vars(
    tape: &mut Tape,
    scene: &Scene,
    i: usize,
    cfg: &ObservationConfig,
    states: &[Var],
    trail: &[Var],
) -> Result<ObservationVars> {
    let b = build(scene, i, cfg);
    let value = to_observation(&b, cfg);

    let ego_inputs: Vec<Var> = std::iter::once(states[i])
        .chain(trail.iter().rev().take(b.ego.slots - 1).copied())
        .collect();
    let ego = tape.jacobian_op(&ego_inputs, value.ego.clone(), b.ego.jac.clone())?;

    let obj_inputs: Vec<Var> = std::iter::once(states[i])
        .chain(b.object_ids.iter().map(|&j| states[j]))
        .collect();
    let objects = tape.jacobian_op(&obj_inputs, value.objects.clone(), b.objects.jac.clone())?;
    let map = tape.jacobian_op(&[states[i]], value.map.clone(), b.map.jac.clone())?;
    let lights = tape.jacobian_op(&[states[i]], value.lights.clone(), b.lights.jac.clone())?;
    Ok(ObservationVars {
        ego,
        objects,
        map,
        lights,
        value,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::world::{AgentSpec, AgentType, Map, Polyline, Scenario};

    fn scene_with(agents: &[[f64; 4]], polylines: Vec<Polyline>) -> Scene {
        let specs = agents
            .iter()
            .map(|p| AgentSpec {
                agent_type: AgentType::Vehicle,
                length: 4.0,
                width: 2.0,
                controlled: true,
                on_road_masked: false,
                start_lane: None,
                log: vec![*p; 8],
            })
            .collect();
        let sc = Scenario {
            name: "obs".into(),
            kind: "test".into(),
            dt: 0.2,
            init_steps: 6,
            horizon: 2,
            map: Map::new(polylines, vec![], vec![]).unwrap(),
            light_schedule: vec![vec![]; 8],
            agents: specs,
        };
        Scene::initial(Arc::new(sc)).unwrap()
    }

    #[test]
    fn lone_agent_sees_only_itself() {
        let mut scene = scene_with(&[[0.0, 0.0, 0.0, 3.0]], vec![]);
        scene.trails[0].clear();
        let o = observe(&scene, 0, &ObservationConfig::default());
        assert_eq!(o.valid_counts(), [1, 0, 0, 0]);
        assert_eq!(o.ego.row(0), &[0.0, 0.0, 1.0, 0.0, 3.0]);
        assert!(o.objects.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_frame() {
        let scene = scene_with(&[[0.0, 0.0, 0.0, 0.0], [5.0, 0.0, 0.0, 0.0]], vec![]);
        let o = observe(&scene, 0, &ObservationConfig::desk());
        assert_eq!(&o.objects.row(0)[..2], &[5.0, 0.0]);
    }

    #[test]
    fn rotated_frame() {
        let scene = scene_with(
            &[[0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0], [0.0, 5.0, 0.0, 0.0]],
            vec![],
        );
        let o = observe(&scene, 0, &ObservationConfig::desk());
        let r = o.objects.row(0);
        assert!((r[0] - 5.0).abs() < 1e-12 && r[1].abs() < 1e-12);
    }

    #[test]
    fn nearest_ties_prefer_lower_index() {
        let scene = scene_with(
            &[[0.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0], [3.0, 0.0, 0.0, 0.0], [0.0, -3.0, 0.0, 0.0]],
            vec![],
        );
        let cfg = ObservationConfig {
            max_objects: 2,
            ..ObservationConfig::desk()
        };
        let o = observe(&scene, 0, &cfg);
        assert_eq!(o.object_ids, vec![1, 2]);
    }

    #[test]
    fn map_points_padded() {
        let scene = scene_with(
            &[[0.0, 0.0, 0.0, 0.0]],
            vec![Polyline {
                kind: PolylineKind::RoadEdge,
                points: vec![[0.0, -2.0], [2.0, -2.0]],
            }],
        );
        let o = observe(&scene, 0, &ObservationConfig::desk());
        assert_eq!(o.valid_counts()[2], 3);
        assert_eq!(o.map.row(0)[4], 1.0);
        assert!(o.map.row(3).iter().all(|&x| x == 0.0));
    }
}
