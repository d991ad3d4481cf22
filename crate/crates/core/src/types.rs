//! Domain types shared across the crate.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of observable market features per window.
pub const OBS_DIM: usize = 19;
/// Augmented state dimension: observable features plus the realized subsidy rate.
pub const STATE_DIM: usize = OBS_DIM + 1;
/// Upper end of the admissible city-level control range `(0, 30]`.
pub const MAX_ACTION: f64 = 30.0;
pub const MINUTES_PER_DAY: u32 = 1440;

pub fn is_valid_action(lambda: f64) -> bool {
    lambda.is_finite() && lambda > 0.0 && lambda <= MAX_ACTION
}

pub(crate) fn check_action(lambda: f64) -> Result<f64> {
    if is_valid_action(lambda) {
        Ok(lambda)
    } else {
        Err(Error::Range {
            what: "lambda",
            value: lambda,
            range: "(0, 30]",
        })
    }
}

/// Number of decision windows in one day.
pub fn horizon(window_minutes: u32) -> Result<usize> {
    match window_minutes {
        2 | 5 | 10 => Ok((MINUTES_PER_DAY / window_minutes) as usize),
        other => Err(Error::Config(format!(
            "window_minutes must be one of 2, 5, 10 (got {other})"
        ))),
    }
}

/// Observable market features `s_t` and the realized subsidy rate `rho_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub features: Vec<f64>,
    pub subsidy_rate_so_far: f64,
}

impl MarketState {
    pub fn new(features: Vec<f64>, subsidy_rate_so_far: f64) -> Result<Self> {
        if features.len() != OBS_DIM {
            return Err(Error::Dimension {
                what: "market features",
                expected: OBS_DIM,
                actual: features.len(),
            });
        }
        check_rho(subsidy_rate_so_far)?;
        Ok(Self {
            features,
            subsidy_rate_so_far,
        })
    }

    pub fn augmented(&self) -> Vec<f64> {
        let mut x = self.features.clone();
        x.push(self.subsidy_rate_so_far);
        x
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho >= 0.0 {
        Ok(())
    } else {
        Err(Error::Range {
            what: "rho",
            value: rho,
            range: "[0, inf)",
        })
    }
}

/// Concatenate observable features and the realized subsidy rate.
pub fn augment_state(features: &[f64], rho: f64) -> Result<Vec<f64>> {
    if features.len() != OBS_DIM {
        return Err(Error::Dimension {
            what: "market features",
            expected: OBS_DIM,
            actual: features.len(),
        });
    }
    check_rho(rho)?;
    let mut x = Vec::with_capacity(STATE_DIM);
    x.extend_from_slice(features);
    x.push(rho);
    Ok(x)
}

/// Ordered list of cities seen in training. Anything else maps to the
/// trailing "unknown" slot of the one-hot encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CityIndex {
    known: Vec<String>,
}

impl CityIndex {
    pub fn new(mut known: Vec<String>) -> Self {
        known.sort();
        known.dedup();
        Self { known }
    }

    pub fn known(&self) -> &[String] {
        &self.known
    }

    /// One-hot width including the unknown slot.
    pub fn width(&self) -> usize {
        self.known.len() + 1
    }

    pub fn slot(&self, city_id: &str) -> usize {
        self.known
            .iter()
            .position(|c| c == city_id)
            .unwrap_or(self.known.len())
    }

    pub fn onehot(&self, city_id: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        v[self.slot(city_id)] = 1.0;
        v
    }
}

/// Sine/cosine encodings of time-of-day and day-of-week.
pub fn time_features(window: usize, window_minutes: u32, day_index: u32) -> [f64; 4] {
    let minute = (window as f64) * window_minutes as f64;
    let hour_phase = TAU * minute / MINUTES_PER_DAY as f64;
    let dow_phase = TAU * (day_index % 7) as f64 / 7.0;
    [
        hour_phase.sin(),
        hour_phase.cos(),
        dow_phase.sin(),
        dow_phase.cos(),
    ]
}

/// Conditioning vector: city identity, time semantics, budget regime and
/// the target-Rides signal (normalized by the city's trailing mean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub city_onehot: Vec<f64>,
    pub hour_sin: f64,
    pub hour_cos: f64,
    pub dow_sin: f64,
    pub dow_cos: f64,
    pub cap_c: f64,
    pub tolerance_delta: f64,
    pub target_rides: f64,
}

impl Context {
    pub fn new(
        city_onehot: Vec<f64>,
        cap_c: f64,
        tolerance_delta: f64,
        target_rides: f64,
    ) -> Result<Self> {
        let ctx = Self {
            city_onehot,
            hour_sin: 0.0,
            hour_cos: 1.0,
            dow_sin: 0.0,
            dow_cos: 1.0,
            cap_c,
            tolerance_delta,
            target_rides,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        let ones = self.city_onehot.iter().filter(|&&v| v == 1.0).count();
        let zeros = self.city_onehot.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != self.city_onehot.len() {
            return Err(Error::Domain(
                "context city encoding must have exactly one active slot".into(),
            ));
        }
        if !(self.cap_c > 0.0 && self.cap_c < 1.0) {
            return Err(Error::Range {
                what: "cap_c",
                value: self.cap_c,
                range: "(0, 1)",
            });
        }
        if !(self.tolerance_delta >= 0.0 && self.cap_c + self.tolerance_delta < 1.0) {
            return Err(Error::Range {
                what: "tolerance_delta",
                value: self.tolerance_delta,
                range: "[0, 1 - cap_c)",
            });
        }
        if !(self.target_rides.is_finite() && self.target_rides >= 0.0) {
            return Err(Error::Range {
                what: "target_rides",
                value: self.target_rides,
                range: "[0, inf)",
            });
        }
        Ok(())
    }

    /// Same context with the time fields set for the given window.
    pub fn at_time(&self, window: usize, window_minutes: u32, day_index: u32) -> Context {
        let [hs, hc, ds, dc] = time_features(window, window_minutes, day_index);
        Context {
            hour_sin: hs,
            hour_cos: hc,
            dow_sin: ds,
            dow_cos: dc,
            ..self.clone()
        }
    }

    /// Steering: multiply the target-Rides signal by `gamma`.
    pub fn with_target_scale(&self, gamma: f64) -> Context {
        Context {
            target_rides: self.target_rides * gamma,
            ..self.clone()
        }
    }

    pub fn dim_for(city_slots: usize) -> usize {
        city_slots + 7
    }

    pub fn dim(&self) -> usize {
        Self::dim_for(self.city_onehot.len())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.city_onehot.clone();
        v.extend_from_slice(&[
            self.hour_sin,
            self.hour_cos,
            self.dow_sin,
            self.dow_cos,
            self.cap_c,
            self.tolerance_delta,
            self.target_rides,
        ]);
        v
    }
}

/// One broadcast order-driver pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEconomics {
    /// Platform revenue on completion.
    pub reward: f64,
    pub gmv: f64,
    /// Completion-probability slope per monetary unit of subsidy.
    pub slope: f64,
    /// Order-level subsidy cap `b_max`.
    pub cap: f64,
    /// Completion probability with zero subsidy (simulator only).
    pub base_prob: f64,
}

impl PairEconomics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.reward >= 0.0
            && self.gmv >= 0.0
            && self.slope > 0.0
            && self.cap > 0.0
            && (0.0..1.0).contains(&self.base_prob)
            && [self.reward, self.gmv, self.slope, self.cap]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid pair economics {self:?}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augment_zero_case() {
        let x = augment_state(&[0.0; OBS_DIM], 0.0).unwrap();
        assert_eq!(x, vec![0.0; STATE_DIM]);
        assert_eq!(STATE_DIM, 20);
    }

    #[test]
    fn augment_appends_rho() {
        let s: Vec<f64> = (0..OBS_DIM).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = augment_state(&s, 0.12).unwrap();
        assert_eq!(x[STATE_DIM - 1], 0.12);
        assert_eq!(&x[..OBS_DIM], &s[..]);
    }

    #[test]
    fn augment_rejects_wrong_length() {
        match augment_state(&[0.0; 5], 0.0) {
            Err(Error::Dimension {
                expected, actual, ..
            }) => {
                assert_eq!((expected, actual), (19, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(augment_state(&[0.0; OBS_DIM], -0.1).is_err());
    }

    #[test]
    fn horizons() {
        assert_eq!(horizon(2).unwrap(), 720);
        assert_eq!(horizon(5).unwrap(), 288);
        assert_eq!(horizon(10).unwrap(), 144);
        assert!(horizon(3).is_err());
    }

    #[test]
    fn unknown_city_uses_last_slot() {
        let idx = CityIndex::new(vec!["b".into(), "a".into()]);
        assert_eq!(idx.onehot("a"), vec![1.0, 0.0, 0.0]);
        assert_eq!(idx.onehot("zzz"), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn context_validation() {
        let oh = vec![0.0, 1.0];
        assert!(Context::new(oh.clone(), 0.1, 0.01, 1.0).is_ok());
        assert!(Context::new(oh.clone(), 0.95, 0.1, 1.0).is_err());
        assert!(Context::new(vec![1.0, 1.0], 0.1, 0.01, 1.0).is_err());
        let c = Context::new(oh, 0.1, 0.01, 1.0).unwrap();
        assert_eq!(c.to_vec().len(), c.dim());
        assert_eq!(c.with_target_scale(2.0).target_rides, 2.0);
    }

    #[test]
    fn action_range() {
        assert!(is_valid_action(30.0));
        assert!(is_valid_action(1e-9));
        assert!(!is_valid_action(0.0));
        assert!(!is_valid_action(30.000001));
        assert!(!is_valid_action(f64::NAN));
    }
}
