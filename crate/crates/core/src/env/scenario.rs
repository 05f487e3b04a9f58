//! Scenario configuration, synthetic session generation and scenario files.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, CoreError, Result};

pub const SCENARIO_FORMAT_VERSION: u32 = 1;

/// One EV type drawn for an arriving session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvModel {
    pub capacity_kwh: f64,
    pub min_energy_kwh: f64,
    pub max_charge_kw: f64,
    pub min_charge_kw: f64,
    pub max_discharge_kw: f64,
    pub target_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalPeak {
    pub hour: f64,
    pub width_hours: f64,
    pub rate: f64,
}

/// Per-charger Bernoulli arrival probability as a function of the hour of day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalProcess {
    pub base_rate: f64,
    pub peaks: Vec<ArrivalPeak>,
}

impl ArrivalProcess {
    pub fn rate_at_hour(&self, hour: f64) -> f64 {
        let mut r = self.base_rate;
        for p in &self.peaks {
            // circular distance on the 24 h clock
            let d = (hour - p.hour).rem_euclid(24.0);
            let d = d.min(24.0 - d);
            r += p.rate * (-0.5 * (d / p.width_hours).powi(2)).exp();
        }
        r.clamp(0.0, 1.0)
    }

    fn shifted(&self, hours: f64) -> Self {
        let mut out = self.clone();
        for p in &mut out.peaks {
            p.hour = (p.hour + hours).rem_euclid(24.0);
        }
        out
    }

    /// Flat profile with the same daily mean rate.
    fn flattened(&self) -> Self {
        let n = 96;
        let mean = (0..n).map(|k| self.rate_at_hour(24.0 * k as f64 / n as f64)).sum::<f64>() / n as f64;
        Self {
            base_rate: mean,
            peaks: Vec::new(),
        }
    }
}

/// Log-normal stay length in steps, truncated to `[min_steps, max_steps]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayDuration {
    pub log_mean: f64,
    pub log_std: f64,
    pub min_steps: usize,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocArrival {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneralizationShift {
    None,
    Small,
    Medium,
    Extreme,
}

impl std::str::FromStr for GeneralizationShift {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "small" => Ok(Self::Small),
            "medium" => Ok(Self::Medium),
            "extreme" => Ok(Self::Extreme),
            other => Err(config_err(format!("unknown generalization shift `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub num_chargers: usize,
    pub num_transformer_groups: usize,
    pub charger_to_group: Vec<usize>,
    pub charger_max_charge_kw: Vec<f64>,
    pub charger_max_discharge_kw: Vec<f64>,
    pub horizon_t: usize,
    pub dt_hours: f64,
    pub steps_per_day: usize,
    pub price_charge: Vec<f64>,
    pub price_discharge: Vec<f64>,
    /// Relative std of the multiplicative noise applied to both price series.
    pub price_noise_std: f64,
    pub power_setpoint: Vec<f64>,
    pub group_limits: Vec<Vec<f64>>,
    pub arrival_process: ArrivalProcess,
    pub stay_duration_dist: StayDuration,
    pub soc_arrival_dist: SocArrival,
    pub ev_catalog: Vec<EvModel>,
    pub seed: u64,
    pub weight_violation: f64,
    pub weight_satisfaction: f64,
    pub generalization_shift: GeneralizationShift,
}

fn default_catalog() -> Vec<EvModel> {
    let ev = |cap: f64, p: f64| EvModel {
        capacity_kwh: cap,
        min_energy_kwh: 0.05 * cap,
        max_charge_kw: p,
        min_charge_kw: 0.0,
        max_discharge_kw: p,
        target_fraction: 0.8,
    };
    vec![ev(40.0, 7.4), ev(50.0, 11.0), ev(60.0, 11.0), ev(75.0, 11.0)]
}

impl ScenarioConfig {
    /// Synthetic defaults: 11 kW chargers, one group per `ceil(n / groups)`
    /// consecutive chargers, a setpoint of half the installed power and group
    /// limits at 80% of each group's installed power.
    pub fn synthetic(num_chargers: usize, num_groups: usize, horizon_t: usize) -> Self {
        let num_groups = num_groups.max(1).min(num_chargers.max(1));
        let per = num_chargers.div_ceil(num_groups).max(1);
        let charger_to_group: Vec<usize> = (0..num_chargers).map(|i| (i / per).min(num_groups - 1)).collect();
        let charger_power = vec![11.0; num_chargers];
        let steps_per_day = 96;
        let price_charge: Vec<f64> = (0..horizon_t)
            .map(|t| 0.20 + 0.10 * (2.0 * PI * t as f64 / steps_per_day as f64).sin())
            .collect();
        let price_discharge = price_charge.iter().map(|p| 0.9 * p).collect();
        let installed: f64 = charger_power.iter().sum();
        let group_limits = (0..num_groups)
            .map(|w| {
                let p: f64 = (0..num_chargers)
                    .filter(|&i| charger_to_group[i] == w)
                    .map(|i| charger_power[i])
                    .sum();
                vec![0.8 * p; horizon_t]
            })
            .collect();
        Self {
            num_chargers,
            num_transformer_groups: num_groups,
            charger_to_group,
            charger_max_charge_kw: charger_power.clone(),
            charger_max_discharge_kw: charger_power,
            horizon_t,
            dt_hours: 0.25,
            steps_per_day,
            price_charge,
            price_discharge,
            price_noise_std: 0.05,
            power_setpoint: vec![0.5 * installed; horizon_t],
            group_limits,
            arrival_process: ArrivalProcess {
                base_rate: 0.01,
                peaks: vec![
                    ArrivalPeak {
                        hour: 8.0,
                        width_hours: 1.5,
                        rate: 0.12,
                    },
                    ArrivalPeak {
                        hour: 17.0,
                        width_hours: 2.0,
                        rate: 0.10,
                    },
                ],
            },
            stay_duration_dist: StayDuration {
                log_mean: 16f64.ln(),
                log_std: 0.5,
                min_steps: 4,
                max_steps: 40,
            },
            soc_arrival_dist: SocArrival { low: 0.2, high: 0.6 },
            ev_catalog: default_catalog(),
            seed: 0,
            weight_violation: 100.0,
            weight_satisfaction: 10.0,
            generalization_shift: GeneralizationShift::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon_t;
        if t == 0 {
            return Err(config_err("horizon_t must be at least 1"));
        }
        if !(self.dt_hours > 0.0) {
            return Err(config_err("dt_hours must be positive"));
        }
        if self.steps_per_day == 0 {
            return Err(config_err("steps_per_day must be positive"));
        }
        let n = self.num_chargers;
        if self.charger_to_group.len() != n
            || self.charger_max_charge_kw.len() != n
            || self.charger_max_discharge_kw.len() != n
        {
            return Err(config_err("per-charger lists must have num_chargers entries"));
        }
        if self.charger_to_group.iter().any(|&w| w >= self.num_transformer_groups) {
            return Err(config_err("charger mapped to a non-existent group"));
        }
        if self.charger_max_charge_kw.iter().chain(&self.charger_max_discharge_kw).any(|p| !(*p >= 0.0)) {
            return Err(config_err("charger power limits must be non-negative"));
        }
        for (name, s) in [
            ("price_charge", &self.price_charge),
            ("price_discharge", &self.price_discharge),
            ("power_setpoint", &self.power_setpoint),
        ] {
            if s.len() != t || s.iter().any(|v| !v.is_finite()) {
                return Err(config_err(format!("{name} must have {t} finite entries")));
            }
        }
        if self.group_limits.len() != self.num_transformer_groups
            || self.group_limits.iter().any(|g| g.len() != t || g.iter().any(|v| !(*v >= 0.0)))
        {
            return Err(config_err("group_limits must hold one non-negative series of length T per group"));
        }
        if !(self.weight_violation > 0.0) || !(self.weight_satisfaction > 0.0) {
            return Err(config_err("reward weights must be positive"));
        }
        if !(self.price_noise_std >= 0.0) {
            return Err(config_err("price_noise_std must be non-negative"));
        }
        let a = &self.arrival_process;
        if !(0.0..=1.0).contains(&a.base_rate)
            || a.peaks.iter().any(|p| !(p.width_hours > 0.0) || !p.rate.is_finite())
        {
            return Err(config_err("arrival process must have rates in [0,1] and positive widths"));
        }
        let s = &self.stay_duration_dist;
        if s.min_steps == 0 || s.min_steps > s.max_steps || !(s.log_std >= 0.0) || !s.log_mean.is_finite() {
            return Err(config_err("stay duration needs 1 <= min_steps <= max_steps"));
        }
        let soc = &self.soc_arrival_dist;
        if !(0.0 <= soc.low && soc.low <= soc.high && soc.high <= 1.0) {
            return Err(config_err("soc arrival range must satisfy 0 <= low <= high <= 1"));
        }
        if self.ev_catalog.is_empty() {
            return Err(config_err("ev_catalog is empty"));
        }
        for ev in &self.ev_catalog {
            let ok = ev.capacity_kwh > 0.0
                && 0.0 <= ev.min_energy_kwh
                && ev.min_energy_kwh <= ev.capacity_kwh
                && 0.0 <= ev.min_charge_kw
                && ev.min_charge_kw <= ev.max_charge_kw
                && ev.max_discharge_kw >= 0.0
                && ev.target_fraction > 0.0
                && ev.target_fraction <= 1.0;
            if !ok {
                return Err(config_err(format!("invalid ev model {ev:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargingSession {
    pub session_id: usize,
    pub charger_id: usize,
    pub group_id: usize,
    pub t_arrival: usize,
    pub t_departure: usize,
    pub e_arrival: f64,
    pub e_target: f64,
    pub e_min: f64,
    pub e_max: f64,
    pub p_charge_max: f64,
    pub p_charge_min: f64,
    pub p_discharge_max_mag: f64,
}

/// A concrete episode: the effective configuration (after distribution
/// shifts and price noise) and the explicit session list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub format_version: u32,
    pub config: ScenarioConfig,
    pub sessions: Vec<ChargingSession>,
}

impl Scenario {
    /// Builds a scenario from explicit sessions, checking every invariant.
    pub fn from_parts(config: ScenarioConfig, sessions: Vec<ChargingSession>) -> Result<Self> {
        let s = Self {
            format_version: SCENARIO_FORMAT_VERSION,
            config,
            sessions,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let mut by_charger: Vec<Vec<(usize, usize)>> = vec![Vec::new(); c.num_chargers];
        for (j, s) in self.sessions.iter().enumerate() {
            let bad = |m: &str| Err(CoreError::Scenario(format!("session {j}: {m}")));
            if s.session_id != j {
                return bad("session ids must equal list positions");
            }
            if s.charger_id >= c.num_chargers || s.group_id != c.charger_to_group[s.charger_id] {
                return bad("charger/group mismatch");
            }
            if !(s.t_arrival < s.t_departure && s.t_departure <= c.horizon_t) {
                return bad("need t_arrival < t_departure <= horizon");
            }
            if !(s.e_min <= s.e_arrival && s.e_arrival <= s.e_max) {
                return bad("arrival energy outside battery bounds");
            }
            if !(s.e_min <= s.e_target && s.e_target <= s.e_max) {
                return bad("target energy outside battery bounds");
            }
            if !(0.0 <= s.p_charge_min && s.p_charge_min <= s.p_charge_max && s.p_discharge_max_mag >= 0.0) {
                return bad("invalid power limits");
            }
            by_charger[s.charger_id].push((s.t_arrival, s.t_departure));
        }
        for (i, mut iv) in by_charger.into_iter().enumerate() {
            iv.sort_unstable();
            if iv.windows(2).any(|w| w[1].0 < w[0].1) {
                return Err(CoreError::Scenario(format!("overlapping sessions on charger {i}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Stable SHA-256 of the scenario JSON, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if s.format_version != SCENARIO_FORMAT_VERSION {
            return Err(CoreError::Scenario(format!("unsupported scenario version {}", s.format_version)));
        }
        s.validate()?;
        Ok(s)
    }

    pub fn num_chargers(&self) -> usize {
        self.config.num_chargers
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon_t
    }
}

const MAX_STAY_RETRIES: usize = 1000;

fn sample_stay(dist: &StayDuration, rng: &mut ChaCha8Rng) -> Result<usize> {
    let ln = LogNormal::new(dist.log_mean, dist.log_std)
        .map_err(|e| CoreError::Scenario(format!("stay distribution: {e}")))?;
    for _ in 0..MAX_STAY_RETRIES {
        let d = ln.sample(rng).round();
        if d >= dist.min_steps as f64 && d <= dist.max_steps as f64 {
            return Ok(d as usize);
        }
    }
    Err(CoreError::Scenario(format!(
        "no stay duration within [{}, {}] after {MAX_STAY_RETRIES} draws",
        dist.min_steps, dist.max_steps
    )))
}

/// Applies the generalization preset to a copy of the configuration.
fn apply_shift(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> ScenarioConfig {
    let mut c = config.clone();
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    match config.generalization_shift {
        GeneralizationShift::None => {}
        GeneralizationShift::Small => c.arrival_process = c.arrival_process.shifted(2.0 * sign),
        GeneralizationShift::Medium => {
            c.arrival_process = c.arrival_process.shifted(4.0 * sign);
            c.stay_duration_dist.log_mean += 1.5f64.ln();
        }
        GeneralizationShift::Extreme => {
            c.arrival_process = c.arrival_process.flattened();
            c.soc_arrival_dist = SocArrival { low: 0.05, high: 0.9 };
            for p in &mut c.power_setpoint {
                *p *= 0.5;
            }
        }
    }
    c
}

/// Draws a scenario: price noise, then per-charger arrivals scanned forward in
/// time so that sessions on one charger never overlap.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = apply_shift(config, &mut rng);
    c.seed = seed;

    if c.price_noise_std > 0.0 {
        let noise = Normal::new(0.0, c.price_noise_std).expect("finite std");
        for t in 0..c.horizon_t {
            let m = (1.0 + noise.sample(&mut rng)).max(0.05);
            c.price_charge[t] *= m;
            c.price_discharge[t] *= m;
        }
    }

    let mut sessions = Vec::new();
    for i in 0..c.num_chargers {
        let mut t = 0;
        while t < c.horizon_t {
            let hour = (t % c.steps_per_day) as f64 * c.dt_hours;
            if rng.gen::<f64>() >= c.arrival_process.rate_at_hour(hour) {
                t += 1;
                continue;
            }
            let stay = sample_stay(&c.stay_duration_dist, &mut rng)?;
            let t_departure = (t + stay).min(c.horizon_t);
            let ev = &c.ev_catalog[rng.gen_range(0..c.ev_catalog.len())];
            let soc = rng.gen_range(c.soc_arrival_dist.low..=c.soc_arrival_dist.high);
            let e_arrival = (soc * ev.capacity_kwh).clamp(ev.min_energy_kwh, ev.capacity_kwh);
            let e_target = (ev.target_fraction * ev.capacity_kwh)
                .max(e_arrival)
                .clamp(ev.min_energy_kwh, ev.capacity_kwh);
            sessions.push(ChargingSession {
                session_id: 0,
                charger_id: i,
                group_id: c.charger_to_group[i],
                t_arrival: t,
                t_departure,
                e_arrival,
                e_target,
                e_min: ev.min_energy_kwh,
                e_max: ev.capacity_kwh,
                p_charge_max: ev.max_charge_kw.min(c.charger_max_charge_kw[i]),
                p_charge_min: ev.min_charge_kw.min(ev.max_charge_kw.min(c.charger_max_charge_kw[i])),
                p_discharge_max_mag: ev.max_discharge_kw.min(c.charger_max_discharge_kw[i]),
            });
            t = t_departure;
        }
    }
    sessions.sort_by_key(|s| (s.t_arrival, s.charger_id));
    for (j, s) in sessions.iter_mut().enumerate() {
        s.session_id = j;
    }
    Scenario::from_parts(c, sessions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_gives_no_sessions() {
        let mut c = ScenarioConfig::synthetic(1, 1, 8);
        c.arrival_process = ArrivalProcess {
            base_rate: 0.0,
            peaks: vec![],
        };
        let s = generate_scenario(&c, 3).unwrap();
        assert!(s.sessions.is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let c = ScenarioConfig::synthetic(3, 1, 96);
        let a = generate_scenario(&c, 11).unwrap().to_json().unwrap();
        let b = generate_scenario(&c, 11).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let other = generate_scenario(&c, 12).unwrap().to_json().unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn extreme_shift_halves_setpoint() {
        let mut c = ScenarioConfig::synthetic(4, 1, 96);
        c.generalization_shift = GeneralizationShift::Extreme;
        let s = generate_scenario(&c, 1).unwrap();
        assert_eq!(s.config.power_setpoint[0], 0.25 * 44.0);
        assert!(s.config.arrival_process.peaks.is_empty());
    }

    #[test]
    fn impossible_stay_window_is_rejected() {
        let mut c = ScenarioConfig::synthetic(1, 1, 96);
        c.arrival_process.base_rate = 1.0;
        c.stay_duration_dist = StayDuration {
            log_mean: 0.0,
            log_std: 0.01,
            min_steps: 30,
            max_steps: 40,
        };
        assert!(matches!(generate_scenario(&c, 0), Err(CoreError::Scenario(_))));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ScenarioConfig::synthetic(2, 1, 4);
        c.price_charge.pop();
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::synthetic(2, 1, 4);
        c.weight_violation = 0.0;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::synthetic(2, 1, 4);
        c.ev_catalog[0].min_charge_kw = 100.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_preserves_digest() {
        let s = generate_scenario(&ScenarioConfig::synthetic(3, 2, 48), 5).unwrap();
        let back: Scenario = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
        assert_eq!(s.digest().len(), 64);
    }
}
