//! Synthetic traffic days and the JSONL dataset format.

use crate::market::{Contract, Impression, MarketError, DEFAULT_HORIZON};
use crate::rng::substream;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("invalid traffic config: {0}")]
    InvalidConfig(String),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("line {line}: step {step} comes after step {previous}")]
    OutOfOrder { line: usize, step: u32, previous: u32 },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: MarketError },
}

/// RTB price model: `b1`, `b2` are the two highest of `bidders` log-normal bids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceModel {
    pub log_location: f64,
    pub log_spread: f64,
    pub bidders: usize,
}

impl Default for PriceModel {
    fn default() -> Self {
        Self { log_location: -0.5, log_spread: 0.5, bidders: 4 }
    }
}

/// Per-contract quality `q_ij ~ Beta(shape_a, shape_b)`, optionally mixed with
/// one draw shared by all contracts of the impression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityModel {
    pub shape_a: f64,
    pub shape_b: f64,
    /// Weight of the shared draw; 0 keeps contracts independent.
    pub shared_mix: f64,
}

impl Default for QualityModel {
    fn default() -> Self {
        Self { shape_a: 2.0, shape_b: 5.0, shared_mix: 0.0 }
    }
}

/// Uniform ranges the contract terms are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContractModel {
    pub unit_price: [f64; 2],
    pub penalty: [f64; 2],
    pub quality_weight: [f64; 2],
    /// Relative spread of contract sizes: weights are drawn in `[1 - s, 1 + s]`.
    pub size_spread: f64,
}

impl Default for ContractModel {
    fn default() -> Self {
        Self { unit_price: [0.8, 1.2], penalty: [1.5, 3.0], quality_weight: [0.5, 1.5], size_spread: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Drift {
    pub volume_multiplier: f64,
    pub price_multiplier: f64,
}

impl Default for Drift {
    fn default() -> Self {
        Self { volume_multiplier: 1.0, price_multiplier: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficConfig {
    /// Impressions on an undrifted day.
    pub n_impressions: usize,
    pub m_contracts: usize,
    /// Total contract demand as a share of `n_impressions`.
    pub demand_ratio: f64,
    pub horizon: usize,
    pub price: PriceModel,
    pub quality: QualityModel,
    pub contracts: ContractModel,
    /// Relative volume per step; empty selects the built-in daily curve.
    pub diurnal: Vec<f64>,
    pub drift: Drift,
    pub seed: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            n_impressions: 100_000,
            m_contracts: 10,
            demand_ratio: 0.39,
            horizon: DEFAULT_HORIZON,
            price: PriceModel::default(),
            quality: QualityModel::default(),
            contracts: ContractModel::default(),
            diurnal: Vec::new(),
            drift: Drift::default(),
            seed: 0,
        }
    }
}

fn range_ok(r: [f64; 2], min: f64) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] >= min && r[0] <= r[1]
}

impl TrafficConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, TrafficError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrafficError> {
        let bad = |msg: &str| Err(TrafficError::InvalidConfig(msg.to_string()));
        if self.n_impressions == 0 {
            return bad("n_impressions must be positive");
        }
        if !(self.demand_ratio > 0.0 && self.demand_ratio < 1.0) {
            return bad("demand_ratio must lie in (0, 1)");
        }
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        let d = self.drift;
        if !(d.volume_multiplier.is_finite() && d.volume_multiplier > 0.0) {
            return bad("volume_multiplier must be positive");
        }
        if !(d.price_multiplier.is_finite() && d.price_multiplier > 0.0) {
            return bad("price_multiplier must be positive");
        }
        if self.price.bidders < 2 {
            return bad("at least two RTB bidders are needed");
        }
        if !(self.price.log_location.is_finite() && self.price.log_spread.is_finite() && self.price.log_spread >= 0.0) {
            return bad("log-normal price parameters must be finite with a non-negative spread");
        }
        let q = &self.quality;
        if !(q.shape_a > 0.0 && q.shape_b > 0.0 && q.shape_a.is_finite() && q.shape_b.is_finite()) {
            return bad("quality shapes must be positive");
        }
        if !(0.0..=1.0).contains(&q.shared_mix) {
            return bad("shared_mix must lie in [0, 1]");
        }
        let c = &self.contracts;
        if !range_ok(c.unit_price, 0.0) || !range_ok(c.quality_weight, 0.0) {
            return bad("unit_price and quality_weight ranges must be ordered and non-negative");
        }
        if !range_ok(c.penalty, 0.0) || c.penalty[0] <= 0.0 {
            return bad("penalty range must be ordered and positive");
        }
        if !(0.0..1.0).contains(&c.size_spread) {
            return bad("size_spread must lie in [0, 1)");
        }
        if !self.diurnal.is_empty() {
            if self.diurnal.len() != self.horizon {
                return bad("diurnal curve needs one weight per step");
            }
            if self.diurnal.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.diurnal.iter().sum::<f64>() <= 0.0 {
                return bad("diurnal weights must be non-negative with a positive sum");
            }
        }
        Ok(())
    }

    /// Per-step volume weights.
    pub fn diurnal_curve(&self) -> Vec<f64> {
        if !self.diurnal.is_empty() {
            return self.diurnal.clone();
        }
        let h = self.horizon as f64;
        // Night trough around 4am, evening peak around 8pm.
        (0..self.horizon)
            .map(|t| {
                let x = (t as f64 + 0.5) / h;
                1.0 + 0.45 * (2.0 * PI * (x - 0.42)).sin() + 0.15 * (4.0 * PI * (x - 0.3)).sin()
            })
            .collect()
    }

    /// Total contract demand: `round(demand_ratio * n_impressions)`.
    pub fn total_demand(&self) -> u64 {
        (self.demand_ratio * self.n_impressions as f64).round() as u64
    }
}

/// Splits `total` in proportion to `weights` with the largest-remainder rule.
pub fn apportion(total: u64, weights: &[f64]) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum <= 0.0 {
        return apportion(total, &vec![1.0; weights.len()]);
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &j in order.iter().cycle().take(total.saturating_sub(assigned) as usize) {
        out[j] += 1;
    }
    out
}

/// Contract terms for one configuration; demands sum to [`TrafficConfig::total_demand`].
pub fn generate_contracts<R: Rng + ?Sized>(config: &TrafficConfig, rng: &mut R) -> Vec<Contract> {
    let c = &config.contracts;
    let mut draw = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };
    let mut terms = Vec::with_capacity(config.m_contracts);
    for _ in 0..config.m_contracts {
        let size = if c.size_spread == 0.0 { 1.0 } else { draw([1.0 - c.size_spread, 1.0 + c.size_spread]) };
        terms.push((size, draw(c.unit_price), draw(c.penalty), draw(c.quality_weight)));
    }
    let sizes: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let demands = apportion(config.total_demand(), &sizes);
    terms
        .into_iter()
        .zip(demands)
        .enumerate()
        .map(|(j, ((_, unit_price, penalty, quality_weight), demand))| Contract {
            id: j as u32,
            demand,
            unit_price,
            penalty,
            quality_weight,
        })
        .collect()
}

/// Impression stream of one day under `drift`, sorted by step with ids in
/// stream order.
pub fn generate_impressions<R: Rng + ?Sized>(config: &TrafficConfig, drift: Drift, rng: &mut R) -> Vec<Impression> {
    let n = (config.n_impressions as f64 * drift.volume_multiplier).round() as usize;
    let m = config.m_contracts;
    let steps = WeightedIndex::new(config.diurnal_curve()).expect("validated diurnal curve");
    let price = LogNormal::new(config.price.log_location, config.price.log_spread).expect("validated price model");
    let quality = Beta::new(config.quality.shape_a, config.quality.shape_b).expect("validated quality model");
    let mix = config.quality.shared_mix;

    let mut out: Vec<Impression> = (0..n)
        .map(|_| {
            let step = steps.sample(rng) as u32 + 1;
            let (mut b1, mut b2) = (0.0f64, 0.0f64);
            for _ in 0..config.price.bidders {
                let b = price.sample(rng);
                if b > b1 {
                    b2 = b1;
                    b1 = b;
                } else if b > b2 {
                    b2 = b;
                }
            }
            let shared = if mix > 0.0 { quality.sample(rng) } else { 0.0 };
            let q = (0..m).map(|_| ((1.0 - mix) * quality.sample(rng) + mix * shared).clamp(0.0, 1.0)).collect();
            Impression {
                id: 0,
                step,
                first_bid: b1 * drift.price_multiplier,
                second_bid: b2 * drift.price_multiplier,
                quality: q,
            }
        })
        .collect();
    out.sort_by_key(|i| i.step);
    for (k, imp) in out.iter_mut().enumerate() {
        imp.id = k as u64;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Day {
    pub impressions: Vec<Impression>,
    pub contracts: Vec<Contract>,
}

/// One day under the configured drift.
pub fn generate_day(config: &TrafficConfig) -> Result<Day, TrafficError> {
    config.validate()?;
    let contracts = generate_contracts(config, &mut substream(config.seed, "generation/contracts"));
    let impressions = generate_impressions(config, config.drift, &mut substream(config.seed, "generation/day"));
    Ok(Day { impressions, contracts })
}

/// Training day without drift, test day with the configured drift, and the
/// contracts both days share.
#[derive(Debug, Clone, PartialEq)]
pub struct DayPair {
    pub train: Vec<Impression>,
    pub test: Vec<Impression>,
    pub contracts: Vec<Contract>,
}

pub fn generate_pair(config: &TrafficConfig) -> Result<DayPair, TrafficError> {
    config.validate()?;
    let contracts = generate_contracts(config, &mut substream(config.seed, "generation/contracts"));
    let train = generate_impressions(config, Drift::default(), &mut substream(config.seed, "generation/train"));
    let test = generate_impressions(config, config.drift, &mut substream(config.seed, "generation/test"));
    Ok(DayPair { train, test, contracts })
}

/// Another day drawn from the test-day distribution, independent of the pair.
pub fn generate_validation(config: &TrafficConfig) -> Result<Vec<Impression>, TrafficError> {
    config.validate()?;
    Ok(generate_impressions(config, config.drift, &mut substream(config.seed, "generation/validation")))
}

fn write_jsonl<T: Serialize, W: Write>(items: &[T], writer: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_impressions<W: Write>(impressions: &[Impression], writer: W) -> std::io::Result<()> {
    write_jsonl(impressions, writer)
}

pub fn write_contracts<W: Write>(contracts: &[Contract], writer: W) -> std::io::Result<()> {
    write_jsonl(contracts, writer)
}

fn read_jsonl<T, R, F>(reader: R, mut check: F) -> Result<Vec<T>, DataError>
where
    T: for<'de> Deserialize<'de>,
    R: Read,
    F: FnMut(usize, &T) -> Result<(), DataError>,
{
    let mut out = Vec::new();
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|source| DataError::Parse { line: k + 1, source })?;
        check(k + 1, &item)?;
        out.push(item);
    }
    Ok(out)
}

/// Reads a step-sorted impression stream. Blank lines are skipped.
pub fn read_impressions<R: Read>(reader: R) -> Result<Vec<Impression>, DataError> {
    let mut previous = 0u32;
    let mut width: Option<usize> = None;
    read_jsonl(reader, |line, imp: &Impression| {
        if imp.step < previous {
            return Err(DataError::OutOfOrder { line, step: imp.step, previous });
        }
        previous = imp.step;
        let m = *width.get_or_insert(imp.quality.len());
        imp.validate(m).map_err(|source| DataError::Invalid { line, source })
    })
}

pub fn read_contracts<R: Read>(reader: R) -> Result<Vec<Contract>, DataError> {
    read_jsonl(reader, |line, c: &Contract| c.validate().map_err(|source| DataError::Invalid { line, source }))
}

pub fn save_impressions(path: &Path, impressions: &[Impression]) -> std::io::Result<()> {
    write_impressions(impressions, std::fs::File::create(path)?)
}

pub fn save_contracts(path: &Path, contracts: &[Contract]) -> std::io::Result<()> {
    write_contracts(contracts, std::fs::File::create(path)?)
}

pub fn load_impressions(path: &Path) -> Result<Vec<Impression>, DataError> {
    read_impressions(std::fs::File::open(path)?)
}

pub fn load_contracts(path: &Path) -> Result<Vec<Contract>, DataError> {
    read_contracts(std::fs::File::open(path)?)
}
