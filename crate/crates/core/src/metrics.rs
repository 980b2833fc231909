//! Evaluation metrics: reconstruction error, infraction rates and
//! distribution divergence over feature histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::wrap_angle;
use crate::error::{Error, Result};
use crate::rewards::{agent_edge_distance, light_distance, object_distance, OrientedBox, RuleTracker};
use crate::world::{AgentType, Scene};

pub const HISTOGRAM_BINS: usize = 200;
/// Default number of rollouts per scenario.
pub const EVAL_ROLLOUTS: usize = 16;
pub const MAX_ACCEL: f64 = 6.0;
pub const MAX_CURVATURE: f64 = 0.3;
/// Below this speed (m/s) curvature is not estimated.
pub const CURVATURE_MIN_SPEED: f64 = 0.1;
/// Slack on the infeasibility thresholds so that actions exactly at the
/// bounds are not flagged by rounding.
const THRESHOLD_SLACK: f64 = 1e-9;

/// Rollouts of one scenario together with its log.
#[derive(Clone, Debug)]
pub struct EvalBatch {
    /// Logged scenes, steps `0..=T`.
    pub logged: Vec<Scene>,
    /// Simulated scenes per rollout, steps `0..=T`.
    pub rollouts: Vec<Vec<Scene>>,
    /// Indices of the evaluated agents.
    pub evaluated: Vec<usize>,
}

impl EvalBatch {
    pub fn validate(&self) -> Result<()> {
        if self.evaluated.is_empty() {
            return Err(Error::NoEvaluatedAgents);
        }
        let len = self.logged.len();
        if len < 2 || self.rollouts.is_empty() {
            return Err(Error::Config("evaluation needs a horizon and at least one rollout".into()));
        }
        if let Some(r) = self.rollouts.iter().find(|r| r.len() != len) {
            return Err(Error::Horizon {
                needed: len,
                have: r.len(),
            });
        }
        let n = self.logged[0].agents.len();
        if let Some(&i) = self.evaluated.iter().find(|&&i| i >= n) {
            return Err(Error::Config(format!("evaluated agent {i} out of {n}")));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.logged.len() - 1
    }

    /// `[k][agent]` mean position error over steps `1..=T`.
    fn errors(&self) -> Vec<Vec<f64>> {
        let t_max = self.horizon();
        self.rollouts
            .iter()
            .map(|r| {
                self.evaluated
                    .iter()
                    .map(|&i| {
                        (1..=t_max)
                            .map(|t| {
                                let (a, b) = (&r[t].agents[i], &self.logged[t].agents[i]);
                                (a.x - b.x).hypot(a.y - b.y)
                            })
                            .sum::<f64>()
                            / t_max as f64
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub min_ade: f64,
    pub min_sade: f64,
    pub ade: f64,
}

pub fn reconstruction_metrics(batch: &EvalBatch) -> Result<Reconstruction> {
    batch.validate()?;
    let e = batch.errors();
    let ne = batch.evaluated.len() as f64;
    let kr = e.len() as f64;
    let min_ade = (0..batch.evaluated.len())
        .map(|a| e.iter().map(|row| row[a]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / ne;
    let scene: Vec<f64> = e.iter().map(|row| row.iter().sum::<f64>() / ne).collect();
    let min_sade = scene.iter().copied().fold(f64::INFINITY, f64::min);
    let ade = scene.iter().sum::<f64>() / kr;
    Ok(Reconstruction { min_ade, min_sade, ade })
}

/// Per-rollout, per-agent infraction indicators with their denominators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InfractionCounts {
    pub collision: usize,
    pub off_road: usize,
    pub rule: usize,
    pub kinematic: usize,
    /// Evaluated agent-rollouts.
    pub agents: usize,
    /// Evaluated vehicle agent-rollouts not masked for off-road.
    pub off_road_agents: usize,
    /// Evaluated vehicle agent-rollouts.
    pub vehicles: usize,
}

impl InfractionCounts {
    pub fn merge(&mut self, o: &InfractionCounts) {
        self.collision += o.collision;
        self.off_road += o.off_road;
        self.rule += o.rule;
        self.kinematic += o.kinematic;
        self.agents += o.agents;
        self.off_road_agents += o.off_road_agents;
        self.vehicles += o.vehicles;
    }

    pub fn rates(&self) -> InfractionRates {
        let r = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        InfractionRates {
            collision: r(self.collision, self.agents),
            off_road: r(self.off_road, self.off_road_agents),
            rule_violation: r(self.rule, self.vehicles),
            kinematic_infeasibility: r(self.kinematic, self.vehicles),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InfractionRates {
    pub collision: f64,
    pub off_road: f64,
    pub rule_violation: f64,
    pub kinematic_infeasibility: f64,
}

/// Finite-difference speed, acceleration and curvature of one agent.
#[derive(Clone, Debug, Default)]
struct Motion {
    /// `|p_t − p_{t−1}| / Δt` for `t = 1..=T`.
    speed: Vec<f64>,
    angular_speed: Vec<f64>,
    /// Arclength of each step.
    step_len: Vec<f64>,
    heading_change: Vec<f64>,
}

fn motion(scenes: &[Scene], i: usize, dt: f64) -> Motion {
    let mut m = Motion::default();
    for w in scenes.windows(2) {
        let (a, b) = (&w[0].agents[i], &w[1].agents[i]);
        let ds = (b.x - a.x).hypot(b.y - a.y);
        let dpsi = wrap_angle(b.psi - a.psi);
        m.step_len.push(ds);
        m.heading_change.push(dpsi);
        m.speed.push(ds / dt);
        m.angular_speed.push(dpsi / dt);
    }
    m
}

impl Motion {
    fn accel(&self, dt: f64) -> Vec<f64> {
        self.speed.windows(2).map(|w| (w[1] - w[0]) / dt).collect()
    }

    fn angular_accel(&self, dt: f64) -> Vec<f64> {
        self.angular_speed.windows(2).map(|w| (w[1] - w[0]) / dt).collect()
    }

    /// `Δψ / Δs` for steps above the curvature speed guard.
    fn curvature(&self, dt: f64) -> Vec<f64> {
        self.step_len
            .iter()
            .zip(&self.heading_change)
            .filter(|(ds, _)| **ds / dt >= CURVATURE_MIN_SPEED)
            .map(|(ds, dpsi)| dpsi / ds)
            .collect()
    }

    fn infeasible(&self, dt: f64) -> bool {
        self.accel(dt).iter().any(|a| a.abs() > MAX_ACCEL + THRESHOLD_SLACK)
            || self.curvature(dt).iter().any(|k| k.abs() > MAX_CURVATURE + THRESHOLD_SLACK)
    }
}

/// Indicator counts of one rollout, steps `1..=T`.
pub fn rollout_infractions(scenes: &[Scene], evaluated: &[usize]) -> Result<InfractionCounts> {
    let mut c = InfractionCounts::default();
    let Some(first) = scenes.first() else {
        return Ok(c);
    };
    let dt = first.scenario.dt;
    let mut rules = RuleTracker::new(first);
    let n = evaluated.len();
    let (mut hit, mut off, mut red) = (vec![false; n], vec![false; n], vec![false; n]);
    for scene in &scenes[1..] {
        rules.update(scene);
        for (k, &i) in evaluated.iter().enumerate() {
            if object_distance(scene, i, 0.0)?.is_some_and(|d| d.value < 0.0) {
                hit[k] = true;
            }
            if agent_edge_distance(scene, i)?.is_some_and(|d| d.value > 0.0) {
                off[k] = true;
            }
            if light_distance(scene, i, &rules).is_some_and(|d| d.value > 0.0) {
                red[k] = true;
            }
        }
    }
    for (k, &i) in evaluated.iter().enumerate() {
        c.agents += 1;
        c.collision += hit[k] as usize;
        let spec = &first.scenario.agents[i];
        if spec.agent_type != AgentType::Vehicle {
            continue;
        }
        c.vehicles += 1;
        c.rule += red[k] as usize;
        if !spec.on_road_masked {
            c.off_road_agents += 1;
            c.off_road += off[k] as usize;
        }
        c.kinematic += motion(scenes, i, dt).infeasible(dt) as usize;
    }
    Ok(c)
}

pub fn infraction_counts(batch: &EvalBatch) -> Result<InfractionCounts> {
    batch.validate()?;
    let mut total = InfractionCounts::default();
    for r in &batch.rollouts {
        total.merge(&rollout_infractions(r, &batch.evaluated)?);
    }
    Ok(total)
}

pub fn infraction_rates(batch: &EvalBatch) -> Result<InfractionRates> {
    Ok(infraction_counts(batch)?.rates())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    LinearSpeed,
    AngularSpeed,
    LinearAcceleration,
    AngularAcceleration,
    ObjectDistance,
    TimeToCollision,
    EdgeDistance,
    Curvature,
    Progress,
}

impl Feature {
    pub const ALL: [Feature; 9] = [
        Feature::LinearSpeed,
        Feature::AngularSpeed,
        Feature::LinearAcceleration,
        Feature::AngularAcceleration,
        Feature::ObjectDistance,
        Feature::TimeToCollision,
        Feature::EdgeDistance,
        Feature::Curvature,
        Feature::Progress,
    ];

    /// Histogram range `(min, max)`.
    pub fn range(self) -> (f64, f64) {
        match self {
            Feature::LinearSpeed => (0.0, 35.0),
            Feature::AngularSpeed => (-1.0, 1.0),
            Feature::LinearAcceleration => (-10.0, 10.0),
            Feature::AngularAcceleration => (-2.0, 2.0),
            Feature::ObjectDistance => (-5.0, 40.0),
            Feature::TimeToCollision => (0.0, 5.0),
            Feature::EdgeDistance => (-20.0, 40.0),
            Feature::Curvature => (-0.2, 0.2),
            Feature::Progress => (0.0, 280.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::LinearSpeed => "linear_speed",
            Feature::AngularSpeed => "angular_speed",
            Feature::LinearAcceleration => "linear_acceleration",
            Feature::AngularAcceleration => "angular_acceleration",
            Feature::ObjectDistance => "object_distance",
            Feature::TimeToCollision => "time_to_collision",
            Feature::EdgeDistance => "edge_distance",
            Feature::Curvature => "curvature",
            Feature::Progress => "progress",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub feature: Feature,
    pub min: f64,
    pub max: f64,
    /// Normalized counts; all zero when there were no samples.
    pub counts: Vec<f64>,
    pub samples: usize,
}

impl Histogram {
    /// Bins `samples` over the feature's range; out-of-range samples land in
    /// the boundary bins. Non-finite samples are dropped.
    pub fn from_samples(feature: Feature, samples: &[f64]) -> Self {
        let (min, max) = feature.range();
        Self::with_range(feature, min, max, HISTOGRAM_BINS, samples)
    }

    pub fn with_range(feature: Feature, min: f64, max: f64, bins: usize, samples: &[f64]) -> Self {
        let mut counts = vec![0.0; bins];
        let width = (max - min) / bins as f64;
        let mut n = 0;
        for &x in samples.iter().filter(|x| x.is_finite()) {
            let b = ((x - min) / width).floor();
            let b = if b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
            counts[b] += 1.0;
            n += 1;
        }
        if n > 0 {
            counts.iter_mut().for_each(|c| *c /= n as f64);
        }
        Self {
            feature,
            min,
            max,
            counts,
            samples: n,
        }
    }

    pub fn mass(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Jensen-Shannon divergence with base-2 logarithms, in `[0, 1]`.
pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.counts.len() != q.counts.len() || p.min != q.min || p.max != q.max {
        return Err(Error::BinningMismatch);
    }
    jsd_counts(&p.counts, &q.counts)
}

/// [`jsd`] on raw probability vectors.
pub fn jsd_counts(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::BinningMismatch);
    }
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if m == 0.0 {
            continue;
        }
        if a > 0.0 {
            d += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            d += 0.5 * b * (b / m).log2();
        }
    }
    Ok(d.clamp(0.0, 1.0))
}

/// Pooled feature samples, indexed by [`Feature::index`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSamples {
    pub values: [Vec<f64>; 9],
}

impl FeatureSamples {
    pub fn get(&self, f: Feature) -> &[f64] {
        &self.values[f.index()]
    }

    pub fn extend(&mut self, other: &FeatureSamples) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.extend_from_slice(b);
        }
    }

    pub fn histograms(&self) -> Vec<Histogram> {
        Feature::ALL
            .iter()
            .map(|&f| Histogram::from_samples(f, self.get(f)))
            .collect()
    }
}

/// Time until two boxes moving at constant velocity first overlap, or
/// `None` if they do not within `cap` seconds. Zero if they overlap now.
pub fn time_to_overlap(a: &OrientedBox, va: [f64; 2], b: &OrientedBox, vb: [f64; 2], cap: f64) -> Option<f64> {
    // Overlap at time τ iff (v_b − v_a)τ lies in the Minkowski difference A − B.
    let mut pts = Vec::with_capacity(16);
    for p in a.vertices() {
        for q in b.vertices() {
            pts.push([p[0] - q[0], p[1] - q[1]]);
        }
    }
    let hull = convex_hull(pts);
    let d = [vb[0] - va[0], vb[1] - va[1]];
    // Clip the segment τ ∈ [0, cap] against each edge's inner half-plane.
    let (mut lo, mut hi) = (0.0f64, cap);
    let m = hull.len();
    for k in 0..m {
        let (p, q) = (hull[k], hull[(k + 1) % m]);
        // Counter-clockwise hull: inside is left of p→q, i.e. cross(q−p, x−p) ≥ 0.
        let e = [q[0] - p[0], q[1] - p[1]];
        let c0 = e[0] * (0.0 - p[1]) - e[1] * (0.0 - p[0]);
        let c1 = e[0] * d[1] - e[1] * d[0];
        if c1 == 0.0 {
            if c0 < 0.0 {
                return None;
            }
            continue;
        }
        let tau = -c0 / c1;
        if c1 > 0.0 {
            lo = lo.max(tau);
        } else {
            hi = hi.min(tau);
        }
        if lo > hi {
            return None;
        }
    }
    Some(lo)
}

/// Andrew's monotone chain, counter-clockwise without collinear points.
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Finite-difference velocity into step `t` (zero at the first step).
fn velocity(scenes: &[Scene], t: usize, i: usize) -> [f64; 2] {
    if t == 0 {
        return [0.0, 0.0];
    }
    let dt = scenes[t].scenario.dt;
    let (a, b) = (&scenes[t - 1].agents[i], &scenes[t].agents[i]);
    [(b.x - a.x) / dt, (b.y - a.y) / dt]
}

/// Smallest time-to-collision of agent `i` at step `t`, capped at the TTC range.
pub fn time_to_collision(scenes: &[Scene], t: usize, i: usize) -> Result<f64> {
    let cap = Feature::TimeToCollision.range().1;
    let scene = &scenes[t];
    let me = OrientedBox::of_agent(&scene.agents[i])?;
    let vi = velocity(scenes, t, i);
    let mut best = cap;
    for j in (0..scene.agents.len()).filter(|&j| j != i) {
        let other = OrientedBox::of_agent(&scene.agents[j])?;
        if let Some(tau) = time_to_overlap(&me, vi, &other, velocity(scenes, t, j), cap) {
            best = best.min(tau);
        }
    }
    Ok(best)
}

/// Feature samples of the given agents along one trajectory `0..=T`.
///
/// State features are taken at steps `1..=T`; trajectory features (average
/// curvature, progress) once per agent.
pub fn extract_features(scenes: &[Scene], agents: &[usize]) -> Result<FeatureSamples> {
    let mut out = FeatureSamples::default();
    if scenes.len() < 2 {
        return Ok(out);
    }
    let dt = scenes[0].scenario.dt;
    let far = Feature::ObjectDistance.range().1;
    for &i in agents {
        let m = motion(scenes, i, dt);
        let v = &mut out.values;
        v[Feature::LinearSpeed.index()].extend(&m.speed);
        v[Feature::AngularSpeed.index()].extend(&m.angular_speed);
        v[Feature::LinearAcceleration.index()].extend(m.accel(dt));
        v[Feature::AngularAcceleration.index()].extend(m.angular_accel(dt));
        for t in 1..scenes.len() {
            let d = object_distance(&scenes[t], i, far)?.map_or(far, |d| d.value);
            v[Feature::ObjectDistance.index()].push(d);
            v[Feature::TimeToCollision.index()].push(time_to_collision(scenes, t, i)?);
            if let Some(e) = agent_edge_distance(&scenes[t], i)? {
                v[Feature::EdgeDistance.index()].push(e.value);
            }
        }
        let k = m.curvature(dt);
        let mean_k = if k.is_empty() { 0.0 } else { k.iter().sum::<f64>() / k.len() as f64 };
        v[Feature::Curvature.index()].push(mean_k);
        v[Feature::Progress.index()].push(m.step_len.iter().sum());
    }
    Ok(out)
}

/// JSD per feature between simulated and logged samples; `None` where
/// either side has no samples.
pub fn feature_jsd(sim: &FeatureSamples, log: &FeatureSamples) -> Result<BTreeMap<Feature, Option<f64>>> {
    Feature::ALL
        .iter()
        .map(|&f| {
            let (p, q) = (Histogram::from_samples(f, sim.get(f)), Histogram::from_samples(f, log.get(f)));
            let d = if p.samples == 0 || q.samples == 0 { None } else { Some(jsd(&p, &q)?) };
            Ok((f, d))
        })
        .collect()
}

/// Accumulates metrics over evaluation batches.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    recon_sum: [f64; 3],
    scenes: usize,
    pub infractions: InfractionCounts,
    pub simulated: FeatureSamples,
    pub logged: FeatureSamples,
}

impl MetricsAccumulator {
    pub fn add(&mut self, batch: &EvalBatch) -> Result<()> {
        let r = reconstruction_metrics(batch)?;
        self.recon_sum[0] += r.min_ade;
        self.recon_sum[1] += r.min_sade;
        self.recon_sum[2] += r.ade;
        self.scenes += 1;
        self.infractions.merge(&infraction_counts(batch)?);
        for roll in &batch.rollouts {
            self.simulated.extend(&extract_features(roll, &batch.evaluated)?);
        }
        self.logged.extend(&extract_features(&batch.logged, &batch.evaluated)?);
        Ok(())
    }

    /// Scene-averaged reconstruction metrics, pooled rates and per-feature JSD.
    pub fn report(&self) -> Result<MetricsReport> {
        let n = self.scenes.max(1) as f64;
        Ok(MetricsReport {
            scenes: self.scenes,
            reconstruction: Reconstruction {
                min_ade: self.recon_sum[0] / n,
                min_sade: self.recon_sum[1] / n,
                ade: self.recon_sum[2] / n,
            },
            rates: self.infractions.rates(),
            jsd: feature_jsd(&self.simulated, &self.logged)?
                .into_iter()
                .map(|(f, d)| (f.name().to_string(), d))
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenes: usize,
    pub reconstruction: Reconstruction,
    pub rates: InfractionRates,
    pub jsd: BTreeMap<String, Option<f64>>,
}

impl MetricsReport {
    /// `metric,value` rows; missing JSD values are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let r = &self.reconstruction;
        let q = &self.rates;
        for (k, v) in [
            ("min_ade", r.min_ade),
            ("min_sade", r.min_sade),
            ("ade", r.ade),
            ("collision_rate", q.collision),
            ("off_road_rate", q.off_road),
            ("rule_violation_rate", q.rule_violation),
            ("kinematic_infeasibility_rate", q.kinematic_infeasibility),
        ] {
            let _ = writeln!(s, "{k},{v}");
        }
        for (k, v) in &self.jsd {
            let _ = writeln!(s, "jsd_{k},{}", v.map(|x| x.to_string()).unwrap_or_default());
        }
        s
    }
}
