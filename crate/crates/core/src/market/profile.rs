use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Parameters of one synthetic city.
///
/// Pairs arrive as a Poisson process with hourly rate
/// `demand_curve[hour] * demand_scale`. Each pair draws `gmv ~ LogNormal`,
/// `reward = margin * gmv`, `cap = cap_frac * gmv`, a pickup distance, a
/// slope `slope_base / (1 + slope_distance_decay * pickup_km)` and a base
/// completion probability in `[base_prob_lo, base_prob_hi]`. Margin, demand
/// and slope are perturbed once per day by lognormal shocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CityProfile {
    pub city_id: String,
    pub demand_curve: [f64; 24],
    pub demand_scale: f64,
    pub gmv_mu: f64,
    pub gmv_sigma: f64,
    pub margin: f64,
    pub slope_base: f64,
    pub slope_distance_decay: f64,
    pub pickup_km_mean: f64,
    pub base_prob_lo: f64,
    pub base_prob_hi: f64,
    pub cap_frac: f64,
    pub noise_sigma: f64,
    pub elasticity: f64,
    pub cap_c: f64,
    pub tolerance_delta: f64,
    pub margin_shock_sigma: f64,
    pub demand_shock_sigma: f64,
    pub slope_shock_sigma: f64,
    /// Test mode: every broadcast pair completes.
    pub force_completions: bool,
}

/// Relative hourly demand (peaks around 08:00 and 18:00).
const DEMAND_SHAPE: [f64; 24] = [
    0.35, 0.22, 0.15, 0.12, 0.14, 0.28, 0.62, 1.15, 1.45, 1.20, 0.95, 0.92, //
    1.00, 0.95, 0.90, 0.98, 1.15, 1.42, 1.55, 1.35, 1.10, 0.92, 0.72, 0.52,
];

impl CityProfile {
    /// A mid-sized city with the given identity and scale.
    pub fn synthetic(city_id: &str, demand_scale: f64, margin: f64, cap_c: f64) -> Self {
        Self {
            city_id: city_id.to_string(),
            demand_curve: DEMAND_SHAPE,
            demand_scale,
            gmv_mu: 2.9,
            gmv_sigma: 0.45,
            margin,
            slope_base: 0.08,
            slope_distance_decay: 0.25,
            pickup_km_mean: 2.0,
            base_prob_lo: 0.30,
            base_prob_hi: 0.70,
            cap_frac: 0.4,
            noise_sigma: 0.05,
            elasticity: 0.3,
            cap_c,
            tolerance_delta: 0.1 * cap_c,
            margin_shock_sigma: 0.12,
            demand_shock_sigma: 0.10,
            slope_shock_sigma: 0.10,
            force_completions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::Config(format!(
                "profile {}: invalid {what}",
                self.city_id
            )))
        };
        if self.city_id.is_empty() {
            return bad("city_id");
        }
        if self
            .demand_curve
            .iter()
            .any(|r| !(r.is_finite() && *r >= 0.0))
        {
            return bad("demand_curve");
        }
        if !(self.demand_scale > 0.0) {
            return bad("demand_scale");
        }
        if !(self.gmv_sigma >= 0.0 && self.gmv_mu.is_finite()) {
            return bad("gmv lognormal parameters");
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return bad("margin");
        }
        if !(self.slope_base > 0.0 && self.slope_distance_decay >= 0.0 && self.pickup_km_mean > 0.0)
        {
            return bad("slope coefficients");
        }
        if !(0.0 <= self.base_prob_lo
            && self.base_prob_lo <= self.base_prob_hi
            && self.base_prob_hi < 1.0)
        {
            return bad("base_prob_range");
        }
        if !(self.cap_frac > 0.0 && self.cap_frac <= 1.0) {
            return bad("cap_frac");
        }
        if !(self.noise_sigma >= 0.0 && self.elasticity > 0.0 && self.elasticity <= 1.0) {
            return bad("noise_sigma / elasticity");
        }
        if !(self.cap_c > 0.0
            && self.cap_c < 1.0
            && self.tolerance_delta >= 0.0
            && self.cap_c + self.tolerance_delta < 1.0)
        {
            return bad("cap_c / tolerance_delta");
        }
        if [
            self.margin_shock_sigma,
            self.demand_shock_sigma,
            self.slope_shock_sigma,
        ]
        .iter()
        .any(|s| !(*s >= 0.0))
        {
            return bad("shock sigmas");
        }
        Ok(())
    }

    /// Hour of day (0..24) at which window `t` starts.
    pub fn hour_of(t: usize, window_minutes: u32) -> usize {
        ((t * window_minutes as usize) / 60) % 24
    }

    /// Expected number of broadcast pairs in window `t`.
    pub fn pair_rate(&self, t: usize, window_minutes: u32) -> f64 {
        self.demand_curve[Self::hour_of(t, window_minutes)]
            * self.demand_scale
            * window_minutes as f64
            / 60.0
    }

    /// Day-average expected pairs per window.
    pub fn mean_pairs_per_window(&self, window_minutes: u32) -> f64 {
        let mean_hourly: f64 = self.demand_curve.iter().sum::<f64>() / 24.0;
        (mean_hourly * self.demand_scale * window_minutes as f64 / 60.0).max(1e-9)
    }

    pub fn mean_gmv(&self) -> f64 {
        (self.gmv_mu + 0.5 * self.gmv_sigma * self.gmv_sigma).exp()
    }

    /// The profile as realized on one day: margin, demand and slope scaled by
    /// mean-one lognormal shocks, shock sigmas zeroed.
    pub fn with_day_shocks(&self, rng: &mut SeededRng) -> CityProfile {
        let mut shock = |sigma: f64| {
            let z = rng.normal();
            (sigma * z - 0.5 * sigma * sigma).exp()
        };
        let m = shock(self.margin_shock_sigma);
        let d = shock(self.demand_shock_sigma);
        let s = shock(self.slope_shock_sigma);
        CityProfile {
            margin: (self.margin * m).min(0.95),
            demand_scale: self.demand_scale * d,
            slope_base: self.slope_base * s,
            margin_shock_sigma: 0.0,
            demand_shock_sigma: 0.0,
            slope_shock_sigma: 0.0,
            ..self.clone()
        }
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("city_id", &self.city_id);
        kv.set_list("demand_curve", &self.demand_curve);
        kv.set("demand_scale", self.demand_scale);
        kv.set_list("gmv_lognormal", &[self.gmv_mu, self.gmv_sigma]);
        kv.set("margin", self.margin);
        kv.set_list(
            "slope_coeffs",
            &[self.slope_base, self.slope_distance_decay],
        );
        kv.set("pickup_km_mean", self.pickup_km_mean);
        kv.set_list("base_prob_range", &[self.base_prob_lo, self.base_prob_hi]);
        kv.set("cap_frac", self.cap_frac);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("elasticity", self.elasticity);
        kv.set("cap_c", self.cap_c);
        kv.set("tolerance_delta", self.tolerance_delta);
        kv.set_list(
            "day_shock_sigmas",
            &[
                self.margin_shock_sigma,
                self.demand_shock_sigma,
                self.slope_shock_sigma,
            ],
        );
        kv.set("force_completions", self.force_completions);
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let pair = |key: &str| -> Result<[f64; 2]> {
            let v: Vec<f64> = kv
                .get_list(key)?
                .ok_or_else(|| Error::Config(format!("missing {key}")))?;
            <[f64; 2]>::try_from(v).map_err(|_| Error::Config(format!("{key} needs two values")))
        };
        let curve: Vec<f64> = kv
            .get_list("demand_curve")?
            .ok_or_else(|| Error::Config("missing demand_curve".into()))?;
        let demand_curve = <[f64; 24]>::try_from(curve)
            .map_err(|_| Error::Config("demand_curve needs 24 hourly values".into()))?;
        let [gmv_mu, gmv_sigma] = pair("gmv_lognormal")?;
        let [slope_base, slope_distance_decay] = pair("slope_coeffs")?;
        let [base_prob_lo, base_prob_hi] = pair("base_prob_range")?;
        let cap_c: f64 = kv.require("cap_c")?;
        let shocks: Vec<f64> = kv
            .get_list("day_shock_sigmas")?
            .unwrap_or_else(|| vec![0.0; 3]);
        let [margin_shock_sigma, demand_shock_sigma, slope_shock_sigma] =
            <[f64; 3]>::try_from(shocks)
                .map_err(|_| Error::Config("day_shock_sigmas needs three values".into()))?;
        let p = Self {
            city_id: kv.require("city_id")?,
            demand_curve,
            demand_scale: kv.require("demand_scale")?,
            gmv_mu,
            gmv_sigma,
            margin: kv.require("margin")?,
            slope_base,
            slope_distance_decay,
            pickup_km_mean: kv.get_or("pickup_km_mean", 2.0)?,
            base_prob_lo,
            base_prob_hi,
            cap_frac: kv.require("cap_frac")?,
            noise_sigma: kv.get_or("noise_sigma", 0.0)?,
            elasticity: kv.get_or("elasticity", 0.3)?,
            cap_c,
            tolerance_delta: kv.get_or("tolerance_delta", 0.1 * cap_c)?,
            margin_shock_sigma,
            demand_shock_sigma,
            slope_shock_sigma,
            force_completions: kv.get_or("force_completions", false)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_key_values().save(path)
    }
}

/// Six synthetic cities. The first three play the role of the main
/// evaluation cities, the last three are cold-start cities.
pub fn default_city_pool() -> Vec<CityProfile> {
    vec![
        CityProfile::synthetic("city-a", 160.0, 0.22, 0.10),
        CityProfile::synthetic("city-b", 45.0, 0.20, 0.08),
        CityProfile::synthetic("city-c", 80.0, 0.24, 0.12),
        CityProfile::synthetic("city-d", 30.0, 0.21, 0.10),
        CityProfile::synthetic("city-e", 18.0, 0.23, 0.09),
        CityProfile::synthetic("city-f", 60.0, 0.19, 0.11),
    ]
}
