//! Experiment plumbing: run a policy on a (train, test) pair, record metrics,
//! and tabulate results.

use crate::baselines::{volume_target_curve, FixedParameter, Msvv, PidGains, PidPacing};
use crate::lp::{solve_dual, DualConfig, DualSolution, LpError};
use crate::market::{Contract, Controller, Impression, Market, MarketError, OutcomeReport, DEFAULT_HORIZON};
use crate::marlia::{self, EpisodeLog, EvalSet, MarliaConfig, MarliaModel, TrainError, TrainOutcome};
use crate::traffic::{DataError, TrafficConfig, TrafficError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown policy {0:?}; expected one of fp, msvv, pid, marlia")]
    UnknownPolicy(String),
    #[error("the marlia policy needs a trained model")]
    MissingModel,
    #[error("model has {got} inputs, expected {expected}")]
    ModelShape { expected: usize, got: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Fp,
    Msvv,
    Pid,
    Marlia,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Fp, Policy::Msvv, Policy::Pid, Policy::Marlia];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Fp => "fp",
            Policy::Msvv => "msvv",
            Policy::Pid => "pid",
            Policy::Marlia => "marlia",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarnessError::UnknownPolicy(s.to_string()))
    }
}

/// Everything a pipeline run reads from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub horizon: usize,
    pub traffic: TrafficConfig,
    pub dual: DualConfig,
    pub pid: PidGains,
    pub marlia: MarliaConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            traffic: TrafficConfig::default(),
            dual: DualConfig::default(),
            pid: PidGains::default(),
            marlia: MarliaConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, TrafficError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.traffic.validate()?;
        if cfg.horizon != cfg.traffic.horizon {
            return Err(TrafficError::InvalidConfig(format!(
                "horizon {} differs from traffic.horizon {}",
                cfg.horizon, cfg.traffic.horizon
            )));
        }
        Ok(cfg)
    }

    /// Overrides every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.traffic.seed = seed;
        self.marlia.seed = seed;
        self
    }
}

/// One line of the metrics CSV. Ratios are relative to the test day's `R*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub policy: String,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "R_star")]
    pub r_star: f64,
    pub ratio: f64,
    #[serde(rename = "R_GC_ratio")]
    pub r_gc_ratio: f64,
    #[serde(rename = "R_RTB_ratio")]
    pub r_rtb_ratio: f64,
    #[serde(rename = "Q_GC_ratio")]
    pub q_gc_ratio: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    /// `ratio` is the sum of the three component ratios.
    pub fn new(dataset: &str, policy: &str, report: &OutcomeReport, r_star: f64, wall_ms: u64) -> Self {
        let r_gc_ratio = report.r_gc / r_star;
        let r_rtb_ratio = report.r_rtb / r_star;
        let q_gc_ratio = report.q_gc / r_star;
        Self {
            dataset: dataset.to_string(),
            policy: policy.to_string(),
            r: report.total,
            r_star,
            ratio: r_gc_ratio + r_rtb_ratio + q_gc_ratio,
            r_gc_ratio,
            r_rtb_ratio,
            q_gc_ratio,
            wall_ms,
        }
    }
}

/// A train/test pair sharing one contract set.
#[derive(Debug, Clone, Copy)]
pub struct Experiment<'a> {
    pub name: &'a str,
    pub train: &'a [Impression],
    pub test: &'a [Impression],
    pub contracts: &'a [Contract],
    pub horizon: usize,
}

/// Solved duals of both days of an experiment.
#[derive(Debug, Clone)]
pub struct Oracles {
    pub train: DualSolution,
    pub test: DualSolution,
}

impl Experiment<'_> {
    pub fn oracles(&self, dual: &DualConfig) -> Result<Oracles, HarnessError> {
        Ok(Oracles {
            train: solve_dual(self.train, self.contracts, dual)?,
            test: solve_dual(self.test, self.contracts, dual)?,
        })
    }
}

/// Replays the test day under `policy`, starting from the training-day α*.
pub fn run_policy(
    policy: Policy,
    exp: &Experiment<'_>,
    oracles: &Oracles,
    config: &HarnessConfig,
    model: Option<&MarliaModel>,
) -> Result<MetricsRow, HarnessError> {
    let market = Market::new(exp.contracts, exp.test, exp.horizon)?;
    let init = oracles.train.alphas.clone();
    let mut controller: Box<dyn Controller + '_> = match policy {
        Policy::Fp => Box::new(FixedParameter::new(init.clone())),
        Policy::Msvv => Box::new(Msvv),
        Policy::Pid => Box::new(PidPacing::new(init.clone(), volume_target_curve(exp.train, exp.horizon), config.pid)),
        Policy::Marlia => {
            let model = model.ok_or(HarnessError::MissingModel)?;
            if model.actor.input_len() != marlia::OBS_DIM {
                return Err(HarnessError::ModelShape { expected: marlia::OBS_DIM, got: model.actor.input_len() });
            }
            Box::new(model.policy(init.clone()))
        }
    };
    let started = Instant::now();
    let report = market.run_episode(init, controller.as_mut())?;
    let wall_ms = started.elapsed().as_millis() as u64;
    Ok(MetricsRow::new(exp.name, policy.name(), &report, oracles.test.r_star, wall_ms))
}

/// Trains MARLIA on the experiment's training day. Checkpoints are scored on
/// `validation` when given, otherwise on the training day itself.
pub fn train_marlia(
    exp: &Experiment<'_>,
    oracles: &Oracles,
    validation: Option<&[Impression]>,
    config: &HarnessConfig,
) -> Result<TrainOutcome, HarnessError> {
    let eval = match validation {
        Some(day) => vec![EvalSet {
            impressions: day,
            contracts: exp.contracts,
            r_star: solve_dual(day, exp.contracts, &config.dual)?.r_star,
        }],
        None => vec![EvalSet { impressions: exp.train, contracts: exp.contracts, r_star: oracles.train.r_star }],
    };
    Ok(marlia::train(exp.train, exp.contracts, exp.horizon, &oracles.train.alphas, &eval, &config.marlia)?)
}

/// Appends rows to a metrics CSV, writing the header when the file is new or empty.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_training_log(path: &Path, log: &[EpisodeLog]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpisodeLog>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// R/R* per dataset (rows) and policy (columns), plus the column averages.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub policies: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    pub average: Vec<Option<f64>>,
}

impl ComparisonTable {
    /// Later rows for the same (dataset, policy) replace earlier ones.
    pub fn from_rows(rows: &[MetricsRow]) -> Self {
        let mut policies: Vec<String> = Vec::new();
        let known: Vec<&str> = Policy::ALL.iter().map(|p| p.name()).collect();
        for p in known.iter().map(|s| s.to_string()).chain(rows.iter().map(|r| r.policy.clone())) {
            if rows.iter().any(|r| r.policy == p) && !policies.contains(&p) {
                policies.push(p);
            }
        }
        let mut cells: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
        let mut order: Vec<&str> = Vec::new();
        for r in rows {
            if !order.contains(&r.dataset.as_str()) {
                order.push(&r.dataset);
            }
            cells.entry(&r.dataset).or_default().insert(&r.policy, r.ratio);
        }
        let table: Vec<(String, Vec<Option<f64>>)> = order
            .iter()
            .map(|d| (d.to_string(), policies.iter().map(|p| cells[d].get(p.as_str()).copied()).collect()))
            .collect();
        let average = (0..policies.len())
            .map(|k| {
                let vals: Vec<f64> = table.iter().filter_map(|(_, v)| v[k]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Self { policies, rows: table, average }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["dataset".to_string()];
        header.extend(self.policies.iter().cloned());
        w.write_record(&header)?;
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for (name, vals) in self.rows.iter().chain(std::iter::once(&("average".to_string(), self.average.clone()))) {
            let mut rec = vec![name.clone()];
            rec.extend(vals.iter().map(fmt));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<16}", "dataset")?;
        for p in &self.policies {
            write!(f, "{p:>10}")?;
        }
        writeln!(f)?;
        for (name, vals) in self.rows.iter().chain(std::iter::once(&("average".to_string(), self.average.clone()))) {
            write!(f, "{name:<16}")?;
            for v in vals {
                match v {
                    Some(x) => write!(f, "{x:>10.4}")?,
                    None => write!(f, "{:>10}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Per-episode R/R* of several training runs side by side: `episode,<name>...`.
pub fn write_convergence(path: &Path, runs: &[(String, Vec<EpisodeLog>)]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["episode".to_string()];
    header.extend(runs.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    let last = runs.iter().flat_map(|(_, l)| l.iter().map(|e| e.episode)).max();
    if let Some(last) = last {
        let lookup: Vec<BTreeMap<usize, f64>> =
            runs.iter().map(|(_, l)| l.iter().map(|e| (e.episode, e.ratio)).collect()).collect();
        for ep in 0..=last {
            let mut rec = vec![ep.to_string()];
            rec.extend(lookup.iter().map(|m| m.get(&ep).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(r_gc: f64, r_rtb: f64, q_gc: f64) -> OutcomeReport {
        OutcomeReport { r_gc, r_rtb, q_gc, total: r_gc + r_rtb + q_gc, shortfalls: vec![], delivered: vec![] }
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!(matches!("greedy".parse::<Policy>(), Err(HarnessError::UnknownPolicy(_))));
    }

    #[test]
    fn components_sum_to_ratio() {
        let row = MetricsRow::new("d", "fp", &report(0.3, 0.5, 0.1), 1.0, 0);
        assert_eq!(row.ratio, row.r_gc_ratio + row.r_rtb_ratio + row.q_gc_ratio);
        assert!((row.ratio - 0.9).abs() < 1e-12);
    }

    #[test]
    fn table_pivots_and_averages() {
        let rows = vec![
            MetricsRow::new("a", "fp", &report(0.0, 0.9, 0.0), 1.0, 0),
            MetricsRow::new("a", "marlia", &report(0.0, 0.95, 0.0), 1.0, 0),
            MetricsRow::new("b", "fp", &report(0.0, 0.8, 0.0), 1.0, 0),
        ];
        let t = ComparisonTable::from_rows(&rows);
        assert_eq!(t.policies, vec!["fp", "marlia"]);
        assert_eq!(t.rows[1].1, vec![Some(0.8), None]);
        assert!((t.average[0].unwrap() - 0.85).abs() < 1e-12);
        assert!((t.average[1].unwrap() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn config_toml_sections() {
        let cfg = HarnessConfig::from_toml_str("[traffic]\nm_contracts = 4\n[marlia]\nepisodes = 3\n").unwrap();
        assert_eq!(cfg.traffic.m_contracts, 4);
        assert_eq!(cfg.marlia.episodes, 3);
        assert_eq!(cfg.horizon, DEFAULT_HORIZON);
    }

    #[test]
    fn mismatched_horizons_are_rejected() {
        assert!(HarnessConfig::from_toml_str("horizon = 48\n").is_err());
        let cfg = HarnessConfig::from_toml_str("horizon = 48\n[traffic]\nhorizon = 48\n").unwrap();
        assert_eq!(cfg.traffic.horizon, 48);
    }
}
