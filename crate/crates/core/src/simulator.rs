//! Closed-loop market simulation.
//!
//! Each period the in-box assets bid, the market clears, and every asset
//! moves by `x⁺ = a·x + d`. Assets outside their state box sit out the
//! market and follow the fallback policy. With nobody in the market the
//! price is the base price and supply is zero.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bidding::BidCurve;
use crate::clearing::{clear_market, default_tolerance, ClearingOutcome, SupplyModel};
use crate::der::{DerParams, MarketState};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng, uniform};

/// A validated, nonempty set of controllable assets.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Population(Vec<DerParams>);

impl Population {
    pub fn new(assets: Vec<DerParams>) -> Result<Self> {
        if assets.is_empty() {
            return Err(Error::EmptyPopulation);
        }
        for (index, p) in assets.iter().enumerate() {
            p.validate()?;
            let c = p.check_controllability();
            if !c.controllable {
                return Err(Error::NotControllable {
                    index,
                    lower_margin: c.lower_margin,
                    upper_margin: c.upper_margin,
                });
            }
        }
        Ok(Self(assets))
    }

    pub fn assets(&self) -> &[DerParams] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn lower_bounds(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.x_lo).collect()
    }

    pub fn upper_bounds(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.x_hi).collect()
    }

    /// Per-asset uniform draw over each state box.
    pub fn uniform_state(&self, seed: u64) -> MarketState {
        let x = self
            .0
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = stream_rng(seed, stream::INITIAL_STATE, i as u64);
                uniform(&mut rng, p.x_lo, p.x_hi)
            })
            .collect();
        MarketState { x }
    }

    /// Bound on `|Σd − s|` guaranteed by a clearing at bracket width `tol`.
    pub fn gap_bound(&self, sm: &SupplyModel, tol: f64) -> f64 {
        (self.0.iter().map(|p| 1.0 / p.q).sum::<f64>() + 1.0 / sm.beta1) * tol
    }
}

impl<'de> Deserialize<'de> for Population {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let assets = Vec::<DerParams>::deserialize(d)?;
        Population::new(assets).map_err(serde::de::Error::custom)
    }
}

/// What happened in one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Clearing over the participating assets; `d_star` is indexed like
    /// `participants`.
    pub clearing: ClearingOutcome,
    pub participants: Vec<usize>,
    /// Consumption of every asset, market or fallback.
    pub allocation: Vec<f64>,
}

/// One period of the closed loop.
pub fn closed_loop_step(
    population: &Population,
    sm: &SupplyModel,
    x: &MarketState,
    tol: f64,
) -> Result<(MarketState, StepOutcome)> {
    let assets = population.assets();
    if x.len() != assets.len() {
        return Err(Error::DimensionMismatch {
            expected: assets.len(),
            got: x.len(),
        });
    }
    let mut participants = Vec::with_capacity(assets.len());
    let mut curves = Vec::with_capacity(assets.len());
    let mut allocation = vec![0.0; assets.len()];
    for (i, (p, &xi)) in assets.iter().zip(&x.x).enumerate() {
        if p.in_box(xi) {
            participants.push(i);
            curves.push(BidCurve::new(p, xi)?);
        } else {
            allocation[i] = p.fallback_policy(xi)?;
        }
    }

    let clearing = if curves.is_empty() {
        ClearingOutcome {
            lambda_star: sm.beta2,
            d_star: Vec::new(),
            s_star: 0.0,
            gap: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
        }
    } else {
        clear_market(&curves, sm, tol)?
    };
    for (&i, &d) in participants.iter().zip(&clearing.d_star) {
        allocation[i] = d;
    }
    // d ∈ Ω(x) keeps a participant in its box exactly; clamping only
    // removes the rounding of a·x + d at an active bound, which would
    // otherwise push the state an ulp outside and into the fallback branch
    let mut next: Vec<f64> = assets
        .iter()
        .zip(&x.x)
        .zip(&allocation)
        .map(|((p, &xi), &d)| p.step(xi, d))
        .collect();
    for &i in &participants {
        let p = &assets[i];
        next[i] = next[i].clamp(p.x_lo, p.x_hi);
    }
    Ok((
        MarketState { x: next },
        StepOutcome {
            clearing,
            participants,
            allocation,
        },
    ))
}

/// A run of `duration` periods at base price `beta2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub beta2: f64,
    pub duration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Explicit(Vec<f64>),
    /// Independent uniform draws over each asset's state box.
    Uniform { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub population: Population,
    pub supply: SupplyModel,
    /// Base-price schedule; empty means the supply's own `beta2` throughout.
    #[serde(default)]
    pub schedule: Vec<Segment>,
    /// Defaults to the schedule length; may cut the schedule short.
    #[serde(default)]
    pub horizon: Option<usize>,
    pub initial: InitialState,
    /// Clearing bracket width; defaults to `1e-10·max(1, |β₂|)` per period.
    #[serde(default)]
    pub tolerance: Option<f64>,
}

impl ScenarioConfig {
    /// Resolved horizon and the segment spans it covers.
    pub fn plan(&self) -> Result<(usize, Vec<SegmentSpan>)> {
        if let Some(s) = self.schedule.iter().find(|s| s.duration == 0) {
            return Err(Error::Scenario(format!(
                "segment at base price {} has zero duration",
                s.beta2
            )));
        }
        if let Some(s) = self
            .schedule
            .iter()
            .find(|s| !(s.beta2.is_finite() && s.beta2 > 0.0))
        {
            return Err(Error::Scenario(format!(
                "base price must be finite and > 0, got {}",
                s.beta2
            )));
        }
        let total: usize = self.schedule.iter().map(|s| s.duration).sum();
        let horizon = match (self.horizon, self.schedule.is_empty()) {
            (Some(h), true) => h,
            (None, true) => {
                return Err(Error::Scenario(
                    "an empty schedule needs an explicit horizon".into(),
                ))
            }
            (Some(h), false) if h > total => {
                return Err(Error::Scenario(format!(
                    "horizon {h} exceeds the schedule length {total}"
                )))
            }
            (Some(h), false) => h,
            (None, false) => total,
        };
        let mut spans = Vec::new();
        if self.schedule.is_empty() {
            if horizon > 0 {
                spans.push(SegmentSpan {
                    start: 0,
                    len: horizon,
                    beta2: self.supply.beta2,
                });
            }
        } else {
            let mut start = 0;
            for s in &self.schedule {
                if start >= horizon {
                    break;
                }
                let len = s.duration.min(horizon - start);
                spans.push(SegmentSpan {
                    start,
                    len,
                    beta2: s.beta2,
                });
                start += len;
            }
        }
        Ok((horizon, spans))
    }

    pub fn initial_state(&self) -> Result<MarketState> {
        match &self.initial {
            InitialState::Explicit(x) => {
                if x.len() != self.population.len() {
                    return Err(Error::DimensionMismatch {
                        expected: self.population.len(),
                        got: x.len(),
                    });
                }
                MarketState::new(x.clone())
            }
            InitialState::Uniform { seed } => Ok(self.population.uniform_state(*seed)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub start: usize,
    pub len: usize,
    pub beta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub period: usize,
    pub beta2: f64,
    pub lambda: f64,
    /// Cleared demand of the market participants.
    pub aggregate_demand: f64,
    pub supply: f64,
    pub kkt_residual: f64,
    pub gap: f64,
}

/// Recorded trajectory of a scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub records: Vec<PeriodRecord>,
    /// `x(0) … x(horizon)`
    pub states: Vec<Vec<f64>>,
    pub segments: Vec<SegmentSpan>,
}

/// Fixed leading CSV columns; state columns `x_1 … x_m` follow when requested.
pub const CSV_COLUMNS: [&str; 6] = [
    "period",
    "beta2",
    "lambda",
    "aggregate_demand",
    "supply",
    "kkt_residual",
];

impl TimeSeries {
    pub fn horizon(&self) -> usize {
        self.records.len()
    }

    pub fn prices(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lambda).collect()
    }

    pub fn num_assets(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn csv_header(&self, include_states: bool) -> Vec<String> {
        let mut header: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
        if include_states {
            header.extend((1..=self.num_assets()).map(|i| format!("x_{i}")));
        }
        header
    }

    /// One row per cleared period; `x_i` is the state the period started
    /// from. Floats use the shortest representation that round-trips.
    pub fn write_csv<W: Write>(&self, out: W, include_states: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header(include_states))?;
        for (rec, x) in self.records.iter().zip(&self.states) {
            let mut row = vec![
                rec.period.to_string(),
                rec.beta2.to_string(),
                rec.lambda.to_string(),
                rec.aggregate_demand.to_string(),
                rec.supply.to_string(),
                rec.kkt_residual.to_string(),
            ];
            if include_states {
                row.extend(x.iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// Classifies every schedule segment.
    pub fn convergence_report(&self, tol: f64) -> Result<ConvergenceReport> {
        let prices = self.prices();
        let mut segments = Vec::with_capacity(self.segments.len());
        for (index, span) in self.segments.iter().enumerate() {
            let range = span.start..span.start + span.len;
            let view = SegmentView {
                prices: &prices[range.clone()],
                states: Some(&self.states[range]),
            };
            let class = classify_segment(&view, tol)?;
            segments.push(SegmentReport {
                index,
                start: span.start,
                len: span.len,
                beta2: span.beta2,
                class,
            });
        }
        Ok(ConvergenceReport { segments })
    }
}

/// Runs the scenario for its full horizon.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<TimeSeries> {
    let (horizon, segments) = cfg.plan()?;
    let mut x = cfg.initial_state()?;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut records = Vec::with_capacity(horizon);
    states.push(x.x.clone());
    for span in &segments {
        let sm = cfg.supply.with_base_price(span.beta2);
        let tol = cfg.tolerance.unwrap_or_else(|| default_tolerance(&sm));
        for period in span.start..span.start + span.len {
            let (next, out) = closed_loop_step(&cfg.population, &sm, &x, tol).map_err(|e| {
                Error::Period {
                    period,
                    source: Box::new(e),
                }
            })?;
            records.push(PeriodRecord {
                period,
                beta2: span.beta2,
                lambda: out.clearing.lambda_star,
                aggregate_demand: out.clearing.total_demand(),
                supply: out.clearing.s_star,
                kkt_residual: out.clearing.kkt_residual,
                gap: out.clearing.gap,
            });
            x = next;
            states.push(x.x.clone());
        }
    }
    Ok(TimeSeries {
        records,
        states,
        segments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub state: MarketState,
    pub iterations: usize,
    /// `‖T(x*) − x*‖₂` at the returned state.
    pub residual: f64,
}

/// Iterates the closed loop from `x0` until a step moves less than `tol`.
pub fn find_equilibrium(
    population: &Population,
    sm: &SupplyModel,
    x0: &MarketState,
    tol: f64,
    max_iters: usize,
) -> Result<Equilibrium> {
    let clearing_tol = default_tolerance(sm);
    let mut x = x0.clone();
    let mut residual = f64::INFINITY;
    for iteration in 0..max_iters {
        let (next, _) = closed_loop_step(population, sm, &x, clearing_tol)?;
        residual = next.distance(&x);
        if residual <= tol {
            return Ok(Equilibrium {
                state: x,
                iterations: iteration,
                residual,
            });
        }
        x = next;
    }
    Err(Error::NonConvergence {
        iterations: max_iters,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentClass {
    Converged,
    Oscillating,
    Drifting,
}

/// Price trace of one segment, with the states it started from when known.
#[derive(Debug, Clone, Copy)]
pub struct SegmentView<'a> {
    pub prices: &'a [f64],
    pub states: Option<&'a [Vec<f64>]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentClassification {
    pub classification: SegmentClass,
    /// First period after which the price stays within 1% of its final
    /// value; only for converged segments.
    pub settle_time: Option<usize>,
    /// Least-squares geometric rate of the step sizes `‖v(k+1) − v(k)‖`.
    pub decay_rate: Option<f64>,
    /// Peak-to-peak price over the last 10 periods.
    pub amplitude: f64,
    pub mean_price: f64,
}

pub const MIN_SEGMENT_LEN: usize = 4;
const STATIONARY_WINDOW: usize = 5;
const AMPLITUDE_WINDOW: usize = 10;
const STATIONARY_REL: f64 = 1e-3;
const OSCILLATION_REL: f64 = 0.01;
const SETTLE_BAND_REL: f64 = 0.01;

/// Converged when the last five price moves are all below
/// `1e-3·max(1, |λ̄|)`; oscillating when the tail peak-to-peak exceeds 1%
/// of the segment mean; drifting otherwise.
///
/// The decay rate is fitted on states when present, else on prices, and
/// ignores steps from the first one below `10·tol` (scaled by the trace
/// magnitude) onwards.
pub fn classify_segment(view: &SegmentView<'_>, tol: f64) -> Result<SegmentClassification> {
    let prices = view.prices;
    let n = prices.len();
    if n < MIN_SEGMENT_LEN {
        return Err(Error::SegmentTooShort {
            len: n,
            min: MIN_SEGMENT_LEN,
        });
    }
    let mean_price = prices.iter().sum::<f64>() / n as f64;
    let tail = &prices[n - AMPLITUDE_WINDOW.min(n)..];
    let amplitude = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let recent = &prices[n - (STATIONARY_WINDOW + 1).min(n)..];
    let last_moves = recent
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max);

    let classification = if last_moves < STATIONARY_REL * mean_price.abs().max(1.0) {
        SegmentClass::Converged
    } else if amplitude > OSCILLATION_REL * mean_price.abs() {
        SegmentClass::Oscillating
    } else {
        SegmentClass::Drifting
    };

    let settle_time = (classification == SegmentClass::Converged).then(|| {
        let last = prices[n - 1];
        let band = SETTLE_BAND_REL * last.abs().max(1.0);
        prices
            .iter()
            .rposition(|p| (p - last).abs() > band)
            .map_or(0, |k| k + 1)
    });

    let decay_rate = match view.states {
        Some(states) if states.len() >= 2 => fit_decay(states, tol),
        _ => {
            let as_vecs: Vec<Vec<f64>> = prices.iter().map(|p| vec![*p]).collect();
            fit_decay(&as_vecs, tol)
        }
    };

    Ok(SegmentClassification {
        classification,
        settle_time,
        decay_rate,
        amplitude,
        mean_price,
    })
}

fn fit_decay(trace: &[Vec<f64>], tol: f64) -> Option<f64> {
    let scale = trace
        .iter()
        .flatten()
        .fold(1.0f64, |acc, v| acc.max(v.abs()));
    let floor = 10.0 * tol * scale;
    let mut points = Vec::new();
    for (k, w) in trace.windows(2).enumerate() {
        let step = w[0]
            .iter()
            .zip(&w[1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if !(step > floor) {
            break;
        }
        points.push((k as f64, step.ln()));
    }
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_k = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_l = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (num, den) = points.iter().fold((0.0, 0.0), |(num, den), (k, l)| {
        (num + (k - mean_k) * (l - mean_l), den + (k - mean_k) * (k - mean_k))
    });
    Some((num / den).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub index: usize,
    pub start: usize,
    pub len: usize,
    pub beta2: f64,
    #[serde(flatten)]
    pub class: SegmentClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub segments: Vec<SegmentReport>,
}

impl ConvergenceReport {
    pub fn count(&self, class: SegmentClass) -> usize {
        self.segments
            .iter()
            .filter(|s| s.class.classification == class)
            .count()
    }

    pub fn max_settle_time(&self) -> Option<usize> {
        self.segments.iter().filter_map(|s| s.class.settle_time).max()
    }
}
