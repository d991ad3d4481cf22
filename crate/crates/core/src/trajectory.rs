//! City-day trajectories and the JSON Lines dataset format.
//!
//! One JSON object per line with keys `city_id, day_index, window_minutes,
//! states, actions, rides, gmv, drv, valid_length`. Floats are written with
//! 17 significant digits so a write/read cycle is bit-exact.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{horizon, is_valid_action, OBS_DIM, STATE_DIM};

/// Clean city-day trajectory. Row `t` of `states` is the augmented state
/// observed before the action for window `t` is chosen; `actions[t]` and the
/// per-window KPIs belong to window `t`. Positions `t >= valid_length` are
/// right padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub city_id: String,
    pub day_index: u32,
    pub window_minutes: u32,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<f64>,
    pub rides: Vec<f64>,
    pub gmv: Vec<f64>,
    pub drv: Vec<f64>,
    pub valid_length: usize,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = horizon(self.window_minutes)?;
        if self.states.len() != t {
            return Err(Error::Dimension {
                what: "trajectory length",
                expected: t,
                actual: self.states.len(),
            });
        }
        for row in &self.states {
            if row.len() != STATE_DIM {
                return Err(Error::Dimension {
                    what: "state row",
                    expected: STATE_DIM,
                    actual: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("non-finite state value".into()));
            }
        }
        for (name, v) in [
            ("actions", &self.actions),
            ("rides", &self.rides),
            ("gmv", &self.gmv),
            ("drv", &self.drv),
        ] {
            if v.len() != t {
                return Err(Error::Shape(format!(
                    "{name} has length {} but the horizon is {t}",
                    v.len()
                )));
            }
        }
        if self.valid_length > t || self.valid_length == 0 {
            return Err(Error::Index {
                what: "valid_length",
                index: self.valid_length,
                limit: t,
            });
        }
        for i in 0..self.valid_length {
            if !is_valid_action(self.actions[i]) {
                return Err(Error::PolicyAction {
                    window: i,
                    value: self.actions[i],
                });
            }
            let kpis = [self.rides[i], self.gmv[i], self.drv[i]];
            if kpis.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Domain(format!(
                    "negative or non-finite KPI at window {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn states_array(&self) -> Array2<f64> {
        let t = self.states.len();
        let flat: Vec<f64> = self.states.iter().flatten().copied().collect();
        Array2::from_shape_vec((t, STATE_DIM), flat).expect("validated trajectory rows")
    }

    pub fn total_rides(&self) -> f64 {
        self.rides[..self.valid_length].iter().sum()
    }

    pub fn total_gmv(&self) -> f64 {
        self.gmv[..self.valid_length].iter().sum()
    }

    pub fn total_drv(&self) -> f64 {
        self.drv[..self.valid_length].iter().sum()
    }

    /// Realized subsidy rate recorded in the last valid state.
    pub fn last_recorded_rate(&self) -> f64 {
        self.states[self.valid_length - 1][OBS_DIM]
    }

    /// Append `n` padding positions (zero states, unit actions, zero KPIs).
    pub fn padded(&self, n: usize) -> Trajectory {
        let mut out = self.clone();
        for _ in 0..n {
            out.states.push(vec![0.0; STATE_DIM]);
            out.actions.push(1.0);
            out.rides.push(0.0);
            out.gmv.push(0.0);
            out.drv.push(0.0);
        }
        out
    }
}

/// JSON formatter writing floats as `d.dddddddddddddddde±x` (17 significant digits).
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn to_json_line(traj: &Trajectory) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
    traj.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn from_json_line(line: &str) -> Result<Trajectory> {
    Ok(serde_json::from_str(line)?)
}

pub fn write_jsonl(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for traj in trajs {
        traj.validate()?;
        let line = to_json_line(traj)?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let traj = from_json_line(&line)?;
        traj.validate()?;
        out.push(traj);
    }
    Ok(out)
}
