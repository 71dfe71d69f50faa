//! Problem flows: an initial `(A⁽⁰⁾, c⁽⁰⁾)` followed by a stream of
//! `(g⁽ᵗ⁾, c⁽ᵗ⁾)` with `A⁽ᵗ⁾ = A⁽ᵗ⁻¹⁾ + g⁽ᵗ⁾g⁽ᵗ⁾ᵀ`.

use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One step of a flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStep {
    pub g: Vec<f64>,
    pub c: Vec<f64>,
}

pub trait Flow {
    fn n(&self) -> usize;
    fn a0(&self) -> DMatrix<f64>;
    fn c0(&self) -> Vec<f64>;
    /// Next `(g, c)`, given the solution of the previous problem. `None`
    /// when the flow is exhausted.
    fn next_step(&mut self, x_prev: &[f64]) -> Option<FlowStep>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Ons,
    Markowitz,
    #[default]
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub kind: FlowKind,
    pub n: usize,
    pub steps: usize,
    /// Regularization of `A⁽⁰⁾ = εI`.
    pub epsilon: f64,
    /// Scale of the target `y = c_factor · y₀` (synthetic flow).
    pub c_factor: f64,
    pub seed: u64,
    /// Risk-return trade-off of the Markowitz flow; 0 gives `c ≡ 0`.
    pub lambda: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            kind: FlowKind::Synthetic,
            n: 100,
            steps: 1000,
            epsilon: 1e-4,
            c_factor: 0.1,
            seed: 0,
            lambda: 0.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSupport(m.to_string()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.c_factor >= 0.0) {
            return bad("c_factor must be nonnegative");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        Ok(())
    }
}

/// Standard QP `½(x − y)ᵀA⁽ᵗ⁾(x − y)` with `A⁽ᵗ⁾ = εI + Σ g gᵀ`,
/// `g ~ N(0, I)` and `y = c_factor · y₀`, `y₀ ~ N(0, I)`. In the form
/// `½xᵀAx − cᵀx` the linear term is `c⁽ᵗ⁾ = A⁽ᵗ⁾y`, so
/// `c⁽ᵗ⁾ − c⁽ᵗ⁻¹⁾ = g(gᵀy)`.
///
/// Random numbers come from ChaCha8 seeded with `seed`; `y₀` is drawn
/// first, then one `g` per step.
#[derive(Debug, Clone)]
pub struct SyntheticFlow {
    rng: ChaCha8Rng,
    y: Vec<f64>,
    c: Vec<f64>,
    epsilon: f64,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

impl SyntheticFlow {
    pub fn new(cfg: &FlowConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let y: Vec<f64> = normals(&mut rng, cfg.n).into_iter().map(|v| cfg.c_factor * v).collect();
        let c = y.iter().map(|v| cfg.epsilon * v).collect();
        SyntheticFlow {
            rng,
            y,
            c,
            epsilon: cfg.epsilon,
        }
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }
}

impl Flow for SyntheticFlow {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn a0(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) * self.epsilon
    }

    fn c0(&self) -> Vec<f64> {
        self.y.iter().map(|v| self.epsilon * v).collect()
    }

    fn next_step(&mut self, _x_prev: &[f64]) -> Option<FlowStep> {
        let g = normals(&mut self.rng, self.y.len());
        let gy: f64 = g.iter().zip(&self.y).map(|(a, b)| a * b).sum();
        for (ci, gi) in self.c.iter_mut().zip(&g) {
            *ci += gi * gy;
        }
        Some(FlowStep { g, c: self.c.clone() })
    }
}

/// Daily price table.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    /// One row per date.
    pub prices: Vec<Vec<f64>>,
}

impl PriceSeries {
    pub fn n(&self) -> usize {
        self.tickers.len()
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prices.is_empty() {
            return Err(Error::EmptySeries);
        }
        for (r, row) in self.prices.iter().enumerate() {
            if row.len() != self.n() {
                return Err(Error::DimensionMismatch {
                    what: "price row",
                    expected: self.n(),
                    got: row.len(),
                });
            }
            for (c, &p) in row.iter().enumerate() {
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::NonPositivePrice { row: r, col: c, value: p });
                }
            }
        }
        Ok(())
    }

    /// `w⁽ᵗ⁾ = log(P_t / P_{t−1})`, one row per consecutive pair.
    pub fn log_returns(&self) -> Vec<Vec<f64>> {
        self.prices
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| (a / b).ln()).collect())
            .collect()
    }
}

/// Geometric random walk: `P₀ = 100`, daily log-returns `N(μᵢ, σᵢ²)` with
/// per-asset drift and volatility drawn once from the seed.
pub fn synthetic_prices(n: usize, rows: usize, seed: u64) -> PriceSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drift: Vec<f64> = (0..n)
        .map(|_| 2e-4 + 5e-4 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let vol: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.03)).collect();
    let mut prices = Vec::with_capacity(rows);
    let mut p = vec![100.0; n];
    let start = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
    let mut dates = Vec::with_capacity(rows);
    for t in 0..rows {
        if t > 0 {
            for i in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                p[i] *= (drift[i] + vol[i] * z).exp();
            }
        }
        prices.push(p.clone());
        dates.push(start + chrono::Days::new(t as u64));
    }
    PriceSeries {
        dates,
        tickers: (0..n).map(|i| format!("A{i:04}")).collect(),
        prices,
    }
}

/// Online Newton Step projections: `A⁽⁰⁾ = I`, `c⁽⁰⁾ = 0`,
/// `g⁽ᵗ⁾ = γ_t/(x_{t−1}ᵀγ_t)` with price ratios `γ_t = P_t/P_{t−1}`,
/// `c⁽ᵗ⁾ = c⁽ᵗ⁻¹⁾ + g⁽ᵗ⁾/4`. Closed loop: `x_{t−1}` is the solver output.
#[derive(Debug, Clone)]
pub struct OnsFlow {
    prices: PriceSeries,
    t: usize,
    c: Vec<f64>,
}

impl OnsFlow {
    pub fn new(prices: PriceSeries) -> Result<Self> {
        prices.validate()?;
        let n = prices.n();
        Ok(OnsFlow {
            prices,
            t: 0,
            c: vec![0.0; n],
        })
    }
}

impl Flow for OnsFlow {
    fn n(&self) -> usize {
        self.prices.n()
    }

    fn a0(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n())
    }

    fn c0(&self) -> Vec<f64> {
        vec![0.0; self.n()]
    }

    fn next_step(&mut self, x_prev: &[f64]) -> Option<FlowStep> {
        if self.t + 1 >= self.prices.len() {
            return None;
        }
        let prev = &self.prices.prices[self.t];
        let cur = &self.prices.prices[self.t + 1];
        let gamma: Vec<f64> = cur.iter().zip(prev).map(|(a, b)| a / b).collect();
        let wealth: f64 = gamma.iter().zip(x_prev).map(|(a, b)| a * b).sum();
        let g: Vec<f64> = gamma.iter().map(|v| v / wealth).collect();
        for (ci, gi) in self.c.iter_mut().zip(&g) {
            *ci += 0.25 * gi;
        }
        self.t += 1;
        Some(FlowStep { g, c: self.c.clone() })
    }
}

/// Markowitz flow on log-returns: `A⁽ᵗ⁾ = εI + tΣ̂⁽ᵗ⁾` and
/// `c⁽ᵗ⁾ = λtμ̂⁽ᵗ⁾`, where `μ̂⁽ᵗ⁾` is the running mean and `Σ̂⁽ᵗ⁾` the
/// sample covariance about it. The first step emits `g = 0`; afterwards
/// `g⁽ᵗ⁾ = √((t−1)/t)(w⁽ᵗ⁾ − μ̂⁽ᵗ⁻¹⁾)`.
#[derive(Debug, Clone)]
pub struct MarkowitzFlow {
    returns: Vec<Vec<f64>>,
    t: usize,
    mean: Vec<f64>,
    epsilon: f64,
    lambda: f64,
}

impl MarkowitzFlow {
    pub fn new(returns: Vec<Vec<f64>>, epsilon: f64, lambda: f64) -> Result<Self> {
        let n = returns.first().map_or(0, |r| r.len());
        if n == 0 {
            return Err(Error::EmptySeries);
        }
        if let Some(r) = returns.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                what: "return row",
                expected: n,
                got: r.len(),
            });
        }
        Ok(MarkowitzFlow {
            returns,
            t: 0,
            mean: vec![0.0; n],
            epsilon,
            lambda,
        })
    }

    pub fn from_prices(prices: &PriceSeries, epsilon: f64, lambda: f64) -> Result<Self> {
        prices.validate()?;
        MarkowitzFlow::new(prices.log_returns(), epsilon, lambda)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

impl Flow for MarkowitzFlow {
    fn n(&self) -> usize {
        self.mean.len()
    }

    fn a0(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) * self.epsilon
    }

    fn c0(&self) -> Vec<f64> {
        vec![0.0; self.n()]
    }

    fn next_step(&mut self, _x_prev: &[f64]) -> Option<FlowStep> {
        let w = self.returns.get(self.t)?;
        self.t += 1;
        let t = self.t as f64;
        let g = if self.t == 1 {
            self.mean.copy_from_slice(w);
            vec![0.0; w.len()]
        } else {
            let scale = ((t - 1.0) / t).sqrt();
            let dev: Vec<f64> = w.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
            for (m, d) in self.mean.iter_mut().zip(&dev) {
                *m += d / t;
            }
            dev.into_iter().map(|d| scale * d).collect()
        };
        let c = self.mean.iter().map(|m| self.lambda * t * m).collect();
        Some(FlowStep { g, c })
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("nan") || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("null")
}

/// Reads a wide CSV `date,ticker_1,…,ticker_n` (ISO dates). Rows with a
/// missing, NaN or non-positive price are dropped; the second value is the
/// number of dropped rows.
pub fn load_prices(path: impl AsRef<Path>) -> Result<(PriceSeries, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path.as_ref())
        .map_err(|e| Error::Io(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| parse_err(0, 0, e))?.clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            row: 0,
            col: 0,
            msg: "expected a date column and at least one ticker".into(),
        });
    }
    let tickers: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut dates = Vec::new();
    let mut prices = Vec::new();
    let mut dropped = 0;
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| parse_err(row, 0, e))?;
        let date = NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d").map_err(|e| parse_err(row, 0, e))?;
        let mut vals = Vec::with_capacity(tickers.len());
        let mut ok = true;
        for (c, cell) in rec.iter().enumerate().skip(1) {
            if is_missing(cell) {
                ok = false;
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|e| parse_err(row, c, e))?;
            if !(v > 0.0) || !v.is_finite() {
                ok = false;
            }
            vals.push(v);
        }
        if !ok {
            log::warn!("dropping row {row} ({date}): missing or non-positive price");
            dropped += 1;
            continue;
        }
        if dates.last().is_some_and(|d| *d >= date) {
            return Err(Error::Parse {
                row,
                col: 0,
                msg: format!("dates must be strictly increasing ({date})"),
            });
        }
        dates.push(date);
        prices.push(vals);
    }
    if prices.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok((PriceSeries { dates, tickers, prices }, dropped))
}

fn parse_err(row: usize, col: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        row,
        col,
        msg: e.to_string(),
    }
}

/// Writes the wide CSV read by [`load_prices`].
pub fn write_prices(path: impl AsRef<Path>, series: &PriceSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Io(e.to_string()))?;
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header = vec!["date".to_string()];
    header.extend(series.tickers.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for (d, row) in series.dates.iter().zip(&series.prices) {
        let mut rec = vec![d.format("%Y-%m-%d").to_string()];
        rec.extend(row.iter().map(|p| format!("{p:?}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Builds the flow described by `cfg`. Price-driven flows use `prices`
/// when given, otherwise a synthetic random walk with `steps + 1` rows.
pub fn build_flow(cfg: &FlowConfig, prices: Option<&PriceSeries>) -> Result<Box<dyn Flow + Send>> {
    cfg.validate()?;
    let synth;
    let series = match prices {
        Some(p) => p,
        None => {
            synth = synthetic_prices(cfg.n, cfg.steps + 1, cfg.seed);
            &synth
        }
    };
    Ok(match cfg.kind {
        FlowKind::Synthetic => Box::new(SyntheticFlow::new(cfg)),
        FlowKind::Ons => Box::new(OnsFlow::new(series.clone())?),
        FlowKind::Markowitz => Box::new(MarkowitzFlow::from_prices(series, cfg.epsilon, cfg.lambda)?),
    })
}
