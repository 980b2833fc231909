//! Static map: typed polylines, the lane graph and traffic-light placement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spacing of the map samples used by observations, metres.
pub const MAP_RESOLUTION: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    RoadEdge,
    LaneCenter,
    Crosswalk,
    Driveway,
    SpeedBump,
}

impl PolylineKind {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub kind: PolylineKind,
    pub points: Vec<[f64; 2]>,
}

/// A lane of the road graph; its id is its index in [`Map::lanes`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub centerline: Vec<[f64; 2]>,
    #[serde(default)]
    pub successors: Vec<usize>,
}

/// A signal controlling one lane. The stop point lies on that lane's
/// centerline, at the position where a vehicle must halt on red.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub lane: usize,
    pub position: [f64; 2],
    pub stop_point: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Yellow,
    Green,
    Unknown,
}

impl LightState {
    /// Column of the state in the one-hot light feature.
    pub fn index(self) -> usize {
        self as usize
    }
}

/// One resampled map point with its local direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapSample {
    pub pos: [f64; 2],
    pub dir: [f64; 2],
    pub kind: PolylineKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MapRecord {
    #[serde(default)]
    polylines: Vec<Polyline>,
    #[serde(default)]
    lanes: Vec<Lane>,
    #[serde(default)]
    lights: Vec<TrafficLight>,
}

/// Road edges are oriented so that the drivable area lies on their left.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "MapRecord", into = "MapRecord")]
pub struct Map {
    pub polylines: Vec<Polyline>,
    pub lanes: Vec<Lane>,
    pub lights: Vec<TrafficLight>,
    samples: Vec<MapSample>,
}

impl TryFrom<MapRecord> for Map {
    type Error = Error;

    fn try_from(r: MapRecord) -> Result<Self> {
        Map::new(r.polylines, r.lanes, r.lights)
    }
}

impl From<Map> for MapRecord {
    fn from(m: Map) -> Self {
        MapRecord {
            polylines: m.polylines,
            lanes: m.lanes,
            lights: m.lights,
        }
    }
}

impl Map {
    pub fn new(polylines: Vec<Polyline>, lanes: Vec<Lane>, lights: Vec<TrafficLight>) -> Result<Self> {
        let mut map = Map {
            polylines,
            lanes,
            lights,
            samples: Vec::new(),
        };
        map.validate()?;
        let mut samples = Vec::new();
        for p in &map.polylines {
            resample(&p.points, p.kind, &mut samples);
        }
        for lane in &map.lanes {
            resample(&lane.centerline, PolylineKind::LaneCenter, &mut samples);
        }
        map.samples = samples;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        for (i, p) in self.polylines.iter().enumerate() {
            if p.points.is_empty() {
                return bad(format!("polyline {i} is empty"));
            }
            if p.points.iter().flatten().any(|x| !x.is_finite()) {
                return bad(format!("polyline {i} has non-finite points"));
            }
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.centerline.len() < 2 {
                return bad(format!("lane {i} needs at least two points"));
            }
            if lane.successors.iter().any(|&s| s >= self.lanes.len()) {
                return bad(format!("lane {i} has an unknown successor"));
            }
        }
        for (i, l) in self.lights.iter().enumerate() {
            if l.lane >= self.lanes.len() {
                return bad(format!("light {i} controls unknown lane {}", l.lane));
            }
        }
        Ok(())
    }

    /// Map points at [`MAP_RESOLUTION`] spacing along every polyline and lane.
    pub fn samples(&self) -> &[MapSample] {
        &self.samples
    }

    pub fn road_edges(&self) -> impl Iterator<Item = &Polyline> {
        self.polylines
            .iter()
            .filter(|p| p.kind == PolylineKind::RoadEdge)
    }

    pub fn has_road_edges(&self) -> bool {
        self.road_edges().next().is_some()
    }
}

fn resample(points: &[[f64; 2]], kind: PolylineKind, out: &mut Vec<MapSample>) {
    if points.len() == 1 {
        out.push(MapSample {
            pos: points[0],
            dir: [1.0, 0.0],
            kind,
        });
        return;
    }
    // Distance already travelled past the last emitted sample.
    let mut carry = 0.0;
    let mut last_dir = [1.0, 0.0];
    let mut first = true;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = dx.hypot(dy);
        if len == 0.0 {
            continue;
        }
        let dir = [dx / len, dy / len];
        last_dir = dir;
        let mut s = if first { 0.0 } else { MAP_RESOLUTION - carry };
        first = false;
        // the tolerance keeps roundoff in `len` from emitting a near-duplicate of the endpoint
        while s < len - 1e-9 {
            out.push(MapSample {
                pos: [a[0] + dir[0] * s, a[1] + dir[1] * s],
                dir,
                kind,
            });
            s += MAP_RESOLUTION;
        }
        carry = len - (s - MAP_RESOLUTION);
    }
    let end = *points.last().expect("non-empty");
    let dup = out.last().is_some_and(|l| l.pos == end);
    if !dup {
        out.push(MapSample {
            pos: end,
            dir: last_dir,
            kind,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resampling_at_one_metre() {
        let map = Map::new(
            vec![Polyline {
                kind: PolylineKind::RoadEdge,
                points: vec![[0.0, 0.0], [2.5, 0.0], [2.5, 2.0]],
            }],
            vec![],
            vec![],
        )
        .unwrap();
        let xs: Vec<[f64; 2]> = map.samples().iter().map(|s| s.pos).collect();
        assert_eq!(
            xs,
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [2.5, 0.5], [2.5, 1.5], [2.5, 2.0]]
        );
        assert_eq!(map.samples()[4].dir, [0.0, 1.0]);
    }

    #[test]
    fn empty_polyline_rejected() {
        let err = Map::new(
            vec![Polyline {
                kind: PolylineKind::Crosswalk,
                points: vec![],
            }],
            vec![],
            vec![],
        );
        assert!(err.is_err());
    }

    #[test]
    fn serde_round_trip_rebuilds_samples() {
        let map = Map::new(
            vec![],
            vec![Lane {
                centerline: vec![[0.0, 0.0], [3.0, 0.0]],
                successors: vec![],
            }],
            vec![],
        )
        .unwrap();
        let json = serde_json::to_string(&map).unwrap();
        let back: Map = serde_json::from_str(&json).unwrap();
        assert_eq!(back.samples(), map.samples());
        assert_eq!(back.samples().len(), 4);
    }
}
