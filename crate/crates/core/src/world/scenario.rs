//! Scenario and dataset files.
//!
//! A dataset file is JSON with a format tag and version:
//!
//! ```json
//! {
//!   "format": "drivesim-dataset",
//!   "version": 1,
//!   "scenarios": [{
//!     "name": "straight-0", "kind": "straight",
//!     "dt": 0.2, "init_steps": 6, "horizon": 40,
//!     "map": { "polylines": [...], "lanes": [...], "lights": [...] },
//!     "light_schedule": [["red"], ["red"], ...],
//!     "agents": [{
//!       "agent_type": "vehicle", "length": 4.5, "width": 1.9,
//!       "controlled": true, "on_road_masked": false, "start_lane": 0,
//!       "log": [[x, y, psi, v], ...]
//!     }]
//!   }]
//! }
//! ```
//!
//! Logs are sampled at `dt` and hold `init_steps + horizon` states. The
//! light schedule holds one entry per logged step with one state per light.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{AgentState, AgentType, EnvLatent, LightState, Map};

pub const DATASET_FORMAT: &str = "drivesim-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_type: AgentType,
    pub length: f64,
    pub width: f64,
    /// Driven by the policy (otherwise replayed from the log).
    pub controlled: bool,
    /// Exempt from the on-road reward, e.g. while leaving a driveway.
    #[serde(default)]
    pub on_road_masked: bool,
    /// Lane the agent starts on, for route search.
    #[serde(default)]
    pub start_lane: Option<usize>,
    pub log: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub kind: String,
    pub dt: f64,
    pub init_steps: usize,
    pub horizon: usize,
    pub map: Map,
    pub light_schedule: Vec<Vec<LightState>>,
    pub agents: Vec<AgentSpec>,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.init_steps + self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(format!("{}: {m}", self.name)));
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.init_steps == 0 {
            return bad("init_steps must be at least 1".into());
        }
        if self.agents.is_empty() {
            return bad("no agents".into());
        }
        let needed = self.len();
        for (i, a) in self.agents.iter().enumerate() {
            if a.log.len() < needed {
                return Err(Error::Horizon {
                    needed,
                    have: a.log.len(),
                });
            }
            if !(a.length > 0.0 && a.width > 0.0) {
                return bad(format!("agent {i} has non-positive extent"));
            }
            if a.log.iter().flatten().any(|x| !x.is_finite()) {
                return bad(format!("agent {i} log has non-finite values"));
            }
            if a.start_lane.is_some_and(|l| l >= self.map.lanes.len()) {
                return bad(format!("agent {i} starts on an unknown lane"));
            }
        }
        if self.light_schedule.len() < needed {
            return bad(format!(
                "light schedule covers {} of {needed} steps",
                self.light_schedule.len()
            ));
        }
        if self
            .light_schedule
            .iter()
            .any(|s| s.len() != self.map.lights.len())
        {
            return bad("light schedule entries must list every light".into());
        }
        self.map.validate()
    }

    /// Logged state of agent `i` at absolute step `t` (clamped to the log end).
    pub fn logged_state(&self, i: usize, t: usize) -> AgentState {
        let a = &self.agents[i];
        let p = a.log[t.min(a.log.len() - 1)];
        AgentState::new(p[0], p[1], p[2], p[3], a.length, a.width, a.agent_type)
    }

    pub fn env_latent(&self) -> EnvLatent {
        EnvLatent {
            schedule: self.light_schedule.clone(),
        }
    }

    pub fn controlled_agents(&self) -> impl Iterator<Item = usize> + '_ {
        self.agents
            .iter()
            .enumerate()
            .filter(|(_, a)| a.controlled)
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub scenarios: Vec<Arc<Scenario>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    scenarios: Vec<Arc<Scenario>>,
}

impl Dataset {
    pub fn new(scenarios: Vec<Scenario>) -> Self {
        Self {
            scenarios: scenarios.into_iter().map(Arc::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        let file = DatasetFile {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            scenarios: self.scenarios.clone(),
        };
        serde_json::to_writer_pretty(w, &file)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let file: DatasetFile = serde_json::from_reader(r)?;
        if file.format != DATASET_FORMAT {
            return Err(Error::Format(format!(
                "expected format `{DATASET_FORMAT}`, found `{}`",
                file.format
            )));
        }
        if file.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {}",
                file.version
            )));
        }
        for s in &file.scenarios {
            s.validate()?;
        }
        Ok(Self {
            scenarios: file.scenarios,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.to_writer(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Lane, TrafficLight};

    fn sample() -> Scenario {
        Scenario {
            name: "s".into(),
            kind: "straight".into(),
            dt: 0.2,
            init_steps: 2,
            horizon: 1,
            map: Map::new(
                vec![],
                vec![Lane {
                    centerline: vec![[0.0, 0.0], [10.0, 0.0]],
                    successors: vec![],
                }],
                vec![TrafficLight {
                    lane: 0,
                    position: [10.0, 2.0],
                    stop_point: [10.0, 0.0],
                }],
            )
            .unwrap(),
            light_schedule: vec![vec![LightState::Green]; 3],
            agents: vec![AgentSpec {
                agent_type: AgentType::Vehicle,
                length: 4.0,
                width: 2.0,
                controlled: true,
                on_road_masked: false,
                start_lane: Some(0),
                log: vec![[0.0, 0.0, 0.0, 1.0], [0.2, 0.0, 0.0, 1.0], [0.4, 0.0, 0.0, 1.0]],
            }],
        }
    }

    #[test]
    fn round_trip() {
        let ds = Dataset::new(vec![sample()]);
        let mut buf = Vec::new();
        ds.to_writer(&mut buf).unwrap();
        let back = Dataset::from_reader(buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        back.to_writer(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn wrong_header_rejected() {
        let json = r#"{"format":"other","version":1,"scenarios":[]}"#;
        assert!(matches!(
            Dataset::from_reader(json.as_bytes()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn short_log_rejected() {
        let mut s = sample();
        s.agents[0].log.pop();
        assert!(matches!(s.validate(), Err(Error::Horizon { needed: 3, have: 2 })));
        let mut s = sample();
        s.light_schedule.pop();
        assert!(s.validate().is_err());
    }
}
