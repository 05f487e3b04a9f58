//! Per-episode charging metrics and the fixed-column metrics table.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{mean_std, Trajectory};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub energy_charged_kwh: f64,
    pub energy_discharged_kwh: f64,
    /// Mean of `100 · e_dep / e*` over departed sessions; 100 when none departed.
    pub satisfaction_pct: f64,
    /// Episode sum of the per-step setpoint overflow.
    pub violation_kw: f64,
    /// Episode energy cost; negative is an expense.
    pub cost_eur: f64,
    pub reward: f64,
    pub exec_s_per_step: f64,
}

pub fn compute_metrics(traj: &Trajectory) -> Metrics {
    let dt = traj.dt_hours;
    let mut m = Metrics {
        energy_charged_kwh: 0.0,
        energy_discharged_kwh: 0.0,
        satisfaction_pct: 100.0,
        violation_kw: 0.0,
        cost_eur: 0.0,
        reward: 0.0,
        exec_s_per_step: 0.0,
    };
    let mut sat = Vec::new();
    for s in &traj.steps {
        for &p in &s.applied_power {
            if p > 0.0 {
                m.energy_charged_kwh += p * dt;
            } else {
                m.energy_discharged_kwh -= p * dt;
            }
        }
        m.violation_kw += s.breakdown.violation_kw;
        m.cost_eur += s.breakdown.energy_term;
        m.reward += s.reward;
        sat.extend(s.departures.iter().map(|d| 100.0 * d.energy / d.target));
    }
    if !sat.is_empty() {
        m.satisfaction_pct = sat.iter().sum::<f64>() / sat.len() as f64;
    }
    if !traj.steps.is_empty() {
        m.exec_s_per_step = traj.policy_seconds / traj.steps.len() as f64;
    }
    m
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub algorithm: String,
    pub scenario_seed: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "algorithm",
    "scenario_seed",
    "energy_charged_kwh",
    "energy_discharged_kwh",
    "satisfaction_pct",
    "violation_kw",
    "cost_eur",
    "reward",
    "exec_s_per_step",
];

pub fn write_metrics_csv(w: impl Write, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_COLUMNS)?;
    for r in rows {
        let m = &r.metrics;
        out.write_record(&[
            r.algorithm.clone(),
            r.scenario_seed.to_string(),
            m.energy_charged_kwh.to_string(),
            m.energy_discharged_kwh.to_string(),
            m.satisfaction_pct.to_string(),
            m.violation_kw.to_string(),
            m.cost_eur.to_string(),
            m.reward.to_string(),
            m.exec_s_per_step.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `mean ± std` (sample std) of a metric column.
pub fn summarize(values: &[f64]) -> (f64, f64) {
    mean_std(values)
}
