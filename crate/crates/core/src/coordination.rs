//! Grid/data-center coordination.
//!
//! [`run_iterative`] publishes a signal, lets a rotating subset of data
//! centers respond, damps the change in aggregate load and repeats.
//! [`solve_integrated`] instead co-optimizes dispatch and load shifts in one
//! multi-period LP using each data center's learned response envelope.
//! [`drift_monitor`] watches declared baselines for persistent inflation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dispatch::{build_ptdf, solve_dc_opf, DispatchResult, DispatchStatus, PeriodDispatch};
use crate::error::{Error, Result};
use crate::flexload::{baseline_schedule, materialize, respond, FlexLoads, RespondParams, ResponseEnvelope, Schedule};
use crate::grid::{BusId, BusLoads, GridCase, TimeGrid};
use crate::lp::{LinearProgram, LpStatus, Sense};
use crate::signals::{compute_metric, FtciMode, MetricKind, SignalSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopParams {
    pub metric: MetricKind,
    pub ftci_mode: FtciMode,
    pub alpha: f64,
    pub max_rounds: usize,
    /// MW; defaults to 0.1% of peak deferrable load.
    pub tolerance: Option<f64>,
    pub stagger_fraction: f64,
    pub rng_seed: u64,
    pub respond: RespondParams,
}

impl Default for LoopParams {
    fn default() -> Self {
        LoopParams {
            metric: MetricKind::Ftci,
            ftci_mode: FtciMode::LoadMix,
            alpha: 0.5,
            max_rounds: 50,
            tolerance: None,
            stagger_fraction: 0.5,
            rng_seed: 0,
            respond: RespondParams::default(),
        }
    }
}

impl LoopParams {
    pub fn check(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Invalid(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.stagger_fraction > 0.0 && self.stagger_fraction <= 1.0) {
            return Err(Error::Invalid(format!(
                "stagger_fraction {} outside (0, 1]",
                self.stagger_fraction
            )));
        }
        if self.max_rounds == 0 {
            return Err(Error::Invalid("max_rounds must be >= 1".into()));
        }
        if matches!(self.metric, MetricKind::External | MetricKind::Composite) {
            return Err(Error::Invalid(format!("{} cannot be published by the loop", self.metric)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    Converged,
    MaxRounds,
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    /// Signal published at the start of the round.
    pub signal: SignalSeries,
    /// Indices of the data centers that re-optimized.
    pub updated: Vec<usize>,
    pub step: f64,
    pub schedules: Vec<Schedule>,
    /// Aggregate bus load after the damped update.
    pub aggregate: BusLoads,
    /// tCO2 over the horizon at the updated aggregate.
    pub emissions: f64,
    /// max |delta aggregate load|, MW.
    pub metric: f64,
}

#[derive(Debug, Clone)]
pub struct LoopTrace {
    pub status: LoopStatus,
    pub tolerance: f64,
    pub baseline_emissions: f64,
    pub baseline_schedules: Vec<Schedule>,
    pub baseline_signal: Option<SignalSeries>,
    pub rounds: Vec<RoundRecord>,
    pub final_dispatch: DispatchResult,
}

impl LoopTrace {
    pub fn final_emissions(&self) -> f64 {
        self.rounds.last().map_or(self.baseline_emissions, |r| r.emissions)
    }

    pub fn final_schedules(&self) -> &[Schedule] {
        self.rounds.last().map_or(&self.baseline_schedules, |r| &r.schedules)
    }

    pub fn converged(&self) -> bool {
        self.status == LoopStatus::Converged
    }

    /// The loop result is adopted only if it does not raise emissions.
    pub fn adopted(&self) -> bool {
        self.final_emissions() <= self.baseline_emissions + 1e-6
    }

    /// Columns: round, metric_MW, emissions_tCO2, step, updated.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("round,metric_MW,emissions_tCO2,step,updated\n");
        for r in &self.rounds {
            let updated: Vec<String> = r.updated.iter().map(|u| u.to_string()).collect();
            let _ = writeln!(s, "{},{},{},{},{}", r.round, r.metric, r.emissions, r.step, updated.join("|"));
        }
        s
    }

    /// Columns: period, bus, signal, load_MW.
    pub fn round_csv(&self, index: usize) -> String {
        let r = &self.rounds[index];
        let mut s = String::from("period,bus,signal,load_MW\n");
        for t in 0..r.aggregate.horizon() {
            for (b, bus) in r.signal.bus_ids.iter().enumerate() {
                let _ = writeln!(s, "{t},{bus},{},{}", r.signal.values[t][b], r.aggregate.values[t][b]);
            }
        }
        s
    }
}

/// Horizon emissions of a solved dispatch, tCO2.
pub fn dispatch_emissions(case: &GridCase, dispatch: &DispatchResult) -> Vec<f64> {
    let h = case.period_hours();
    dispatch
        .periods
        .iter()
        .enumerate()
        .map(|(t, p)| p.emission_rate(case, t) * h)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemEmissions {
    /// tCO2 per period.
    pub per_period: Vec<f64>,
    pub total: f64,
}

pub fn system_emissions(case: &GridCase, loads: &BusLoads) -> Result<SystemEmissions> {
    let d = solve_dc_opf(case, loads)?;
    require_optimal(&d, "system emissions")?;
    let per_period = dispatch_emissions(case, &d);
    Ok(SystemEmissions {
        total: per_period.iter().sum(),
        per_period,
    })
}

fn require_optimal(d: &DispatchResult, context: &str) -> Result<()> {
    match d.first_failure() {
        None => Ok(()),
        Some((t, p)) => Err(Error::Infeasible(format!(
            "{context}: period {t} {}: {}",
            status_word(p),
            p.violated.join(", ")
        ))),
    }
}

fn status_word(p: &PeriodDispatch) -> &'static str {
    match p.status {
        DispatchStatus::Optimal => "optimal",
        DispatchStatus::Infeasible => "infeasible",
        DispatchStatus::Unbounded => "unbounded",
    }
}

/// Seeded rotating partition of data centers.
pub fn stagger_groups(n: usize, fraction: f64, seed: u64) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let size = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    order.chunks(size).map(|c| c.to_vec()).collect()
}

fn site_loads(case: &GridCase, schedules: &[Schedule]) -> Vec<Vec<f64>> {
    let mut v = vec![vec![0.0; case.buses.len()]; case.horizon()];
    for s in schedules {
        for (site, p) in &s.power {
            if let Some(b) = case.bus_index(*site) {
                for t in 0..case.horizon() {
                    v[t][b] += p[t];
                }
            }
        }
    }
    v
}

fn max_abs(a: &[Vec<f64>]) -> f64 {
    a.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

fn diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect()
}

fn dot(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x * y).sum()
}

struct State {
    case: GridCase,
    loads: BusLoads,
    dispatch: DispatchResult,
}

fn evaluate(case: &GridCase, flex: &FlexLoads, schedules: &[Schedule], round: usize) -> Result<State> {
    let mat = materialize(case, flex, schedules)?;
    let loads = mat.bus_loads();
    let dispatch = solve_dc_opf(&mat, &loads)?;
    require_optimal(&dispatch, &format!("round {round}"))?;
    Ok(State {
        case: mat,
        loads,
        dispatch,
    })
}

pub fn run_iterative(case: &GridCase, flex: &FlexLoads, params: &LoopParams) -> Result<LoopTrace> {
    params.check()?;
    flex.check(case)?;
    let time = &case.time;
    let baseline: Vec<Schedule> = flex
        .data_centers
        .iter()
        .map(|dc| baseline_schedule(&dc.jobs, time))
        .collect::<Result<_>>()?;
    let peak = flex.peak_deferrable(time)?;
    let tol = params.tolerance.unwrap_or(1e-3 * peak);
    let groups = stagger_groups(flex.data_centers.len(), params.stagger_fraction, params.rng_seed);
    let rotation = groups.len();

    let mut state = evaluate(case, flex, &baseline, 0)?;
    let baseline_emissions: f64 = dispatch_emissions(&state.case, &state.dispatch).iter().sum();
    let mut schedules = baseline.clone();
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let n = flex.data_centers.len();
    let mut alpha = vec![params.alpha; n];
    let mut prev_delta: Vec<Option<Vec<Vec<f64>>>> = vec![None; n];
    let mut prev_aggregate: Option<Vec<Vec<f64>>> = None;
    let mut quiet = 0;
    let mut status = LoopStatus::MaxRounds;
    let mut baseline_signal = None;

    for r in 1..=params.max_rounds {
        let signal = compute_metric(&state.case, &state.dispatch, params.metric, params.ftci_mode)?;
        if r == 1 {
            baseline_signal = Some(signal.clone());
        }
        let group = &groups[(r - 1) % rotation];
        let mut proposed = schedules.clone();
        for &i in group {
            proposed[i] = respond(&flex.data_centers[i].jobs, &signal, time, params.respond)?;
        }
        let old_sites = site_loads(case, &schedules);
        let full = diff(&site_loads(case, &proposed), &old_sites);
        let full_max = max_abs(&full);
        let group_alpha = group.iter().map(|&i| alpha[i]).fold(0.0, f64::max);
        let mut step = group_alpha;
        if r >= 3 && full_max > 0.0 {
            let cap = rounds
                .iter()
                .rev()
                .take(rotation)
                .map(|x| x.metric)
                .fold(0.0, f64::max);
            if step * full_max > cap {
                step = cap / full_max;
            }
        }
        // Each data center keeps its own step; the rotation cap scales all of them.
        let scale = if group_alpha > 0.0 { step / group_alpha } else { 1.0 };
        for &i in group {
            let before = site_loads(case, std::slice::from_ref(&schedules[i]));
            schedules[i] = proposed[i].blend(&schedules[i], alpha[i] * scale);
            let own = diff(&site_loads(case, std::slice::from_ref(&schedules[i])), &before);
            if max_abs(&own) > 0.0 {
                if prev_delta[i].as_ref().is_some_and(|p| dot(&own, p) < 0.0) {
                    alpha[i] *= 0.5;
                }
                prev_delta[i] = Some(own);
            }
        }
        let delta = diff(&site_loads(case, &schedules), &old_sites);
        let metric = max_abs(&delta);
        // Halve on reversal, per data center above and system-wide here.
        if prev_aggregate.as_ref().is_some_and(|p| dot(&delta, p) < 0.0) {
            alpha.iter_mut().for_each(|a| *a *= 0.5);
        }
        if metric > 0.0 {
            prev_aggregate = Some(delta);
        }
        state = evaluate(case, flex, &schedules, r)?;
        let emissions = dispatch_emissions(&state.case, &state.dispatch).iter().sum();
        rounds.push(RoundRecord {
            round: r,
            signal,
            updated: group.clone(),
            step,
            schedules: schedules.clone(),
            aggregate: state.loads.clone(),
            emissions,
            metric,
        });
        if peak <= 0.0 {
            status = LoopStatus::Converged;
            break;
        }
        quiet = if metric < tol { quiet + 1 } else { 0 };
        if quiet >= rotation {
            status = LoopStatus::Converged;
            break;
        }
    }

    Ok(LoopTrace {
        status,
        tolerance: tol,
        baseline_emissions,
        baseline_schedules: baseline,
        baseline_signal,
        rounds,
        final_dispatch: state.dispatch,
    })
}

/// One-shot response: every data center responds once to the baseline
/// signal, undamped.
pub fn one_shot(case: &GridCase, flex: &FlexLoads, params: &LoopParams) -> Result<LoopTrace> {
    let p = LoopParams {
        alpha: 1.0,
        max_rounds: 1,
        stagger_fraction: 1.0,
        ..*params
    };
    run_iterative(case, flex, &p)
}

/// One (signal deviation, realized shift) sample for a data center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub period: usize,
    /// tCO2/MWh relative to the signal's horizon mean.
    pub deviation: f64,
    /// MW relative to baseline.
    pub shift: f64,
}

/// Monotone piecewise-linear map from signal deviation to load shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseModel {
    pub data_center: String,
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    /// Deviation range the fit is valid over.
    pub bounds: (f64, f64),
    pub residual_norm: f64,
    pub observations: usize,
    pub envelope: ResponseEnvelope,
}

pub const MAX_KNOTS: usize = 8;

impl ResponseModel {
    /// Shift for a deviation, without envelope clipping.
    pub fn raw(&self, deviation: f64) -> f64 {
        let d = deviation.clamp(self.bounds.0, self.bounds.1);
        let k = &self.knots;
        if k.len() == 1 {
            return self.values[0];
        }
        let i = match k.iter().position(|&x| x >= d) {
            Some(0) => return self.values[0],
            Some(i) => i,
            None => return *self.values.last().unwrap(),
        };
        let w = (d - k[i - 1]) / (k[i] - k[i - 1]);
        self.values[i - 1] + w * (self.values[i] - self.values[i - 1])
    }

    /// Shift in period `t`, clipped to the envelope's aggregate range.
    pub fn shift(&self, deviation: f64, period: usize) -> f64 {
        let (lo, hi) = self.envelope.period_range(period);
        self.raw(deviation).clamp(lo, hi)
    }

    /// Average slope over the fitted range, MW per tCO2/MWh.
    pub fn slope(&self) -> f64 {
        let (a, b) = self.bounds;
        if b > a {
            (self.raw(b) - self.raw(a)) / (b - a)
        } else {
            0.0
        }
    }

    /// Smallest deviation producing the given shift, if within range.
    pub fn inverse(&self, shift: f64) -> Option<f64> {
        for w in 0..self.knots.len().saturating_sub(1) {
            let (v0, v1) = (self.values[w], self.values[w + 1]);
            if (v0 >= shift && shift >= v1) && v0 != v1 {
                return Some(self.knots[w] + (v0 - shift) / (v0 - v1) * (self.knots[w + 1] - self.knots[w]));
            }
            if v0 == shift {
                return Some(self.knots[w]);
            }
        }
        (self.values.last() == Some(&shift)).then(|| *self.knots.last().unwrap())
    }
}

fn pava_nonincreasing(values: &mut [f64], weights: &[f64]) {
    // Pool adjacent violators of v[i] >= v[i+1].
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let n = blocks.len();
            if blocks[n - 2].0 >= blocks[n - 1].0 {
                break;
            }
            let (v2, w2, c2) = blocks.pop().unwrap();
            let (v1, w1, c1) = blocks.pop().unwrap();
            let w = w1 + w2;
            blocks.push(((v1 * w1 + v2 * w2) / w, w, c1 + c2));
        }
    }
    let mut i = 0;
    for (v, _, c) in blocks {
        for _ in 0..c {
            values[i] = v;
            i += 1;
        }
    }
}

fn choose_knots(devs: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = devs.to_vec();
    d.sort_by(f64::total_cmp);
    d.dedup();
    let mut knots: Vec<f64> = if d.len() < MAX_KNOTS {
        d.clone()
    } else {
        let m = MAX_KNOTS - 1;
        (0..m)
            .map(|q| d[((d.len() - 1) as f64 * q as f64 / (m - 1) as f64).round() as usize])
            .collect()
    };
    if !knots.contains(&0.0) {
        knots.push(0.0);
    }
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    knots
}

fn hat_row(knots: &[f64], d: f64) -> Vec<(usize, f64)> {
    let d = d.clamp(knots[0], *knots.last().unwrap());
    match knots.iter().position(|&x| x >= d) {
        Some(0) | None => vec![(if d <= knots[0] { 0 } else { knots.len() - 1 }, 1.0)],
        Some(i) => {
            let w = (d - knots[i - 1]) / (knots[i] - knots[i - 1]);
            vec![(i - 1, 1.0 - w), (i, w)]
        }
    }
}

/// Least-squares monotone fit with at most eight knots, shift(0) = 0.
pub fn fit_response_model(
    data_center: &str,
    history: &[Observation],
    envelope: ResponseEnvelope,
) -> Result<ResponseModel> {
    let devs: Vec<f64> = history.iter().map(|o| o.deviation).collect();
    let mut distinct = devs.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Invalid(format!(
            "data center {data_center}: response history needs at least two distinct signal levels"
        )));
    }
    let knots = choose_knots(&devs);
    let n = knots.len();
    let zero = knots.iter().position(|&k| k == 0.0).expect("zero knot");
    let mut ata = DMatrix::<f64>::zeros(n, n);
    let mut aty = DVector::<f64>::zeros(n);
    let mut add = |row: &[(usize, f64)], y: f64, w: f64| {
        for &(i, a) in row {
            aty[i] += w * a * y;
            for &(j, b) in row {
                ata[(i, j)] += w * a * b;
            }
        }
    };
    for o in history {
        add(&hat_row(&knots, o.deviation), o.shift, 1.0);
    }
    let pin = 1e6 * (1.0 + history.len() as f64);
    add(&[(zero, 1.0)], 0.0, pin);
    let ridge = 1e-10 * (1.0 + ata.trace() / n as f64);
    for i in 0..n {
        ata[(i, i)] += ridge;
    }
    let weights: Vec<f64> = (0..n).map(|i| ata[(i, i)]).collect();
    let sol = ata
        .cholesky()
        .ok_or_else(|| Error::Singular("response fit normal equations".into()))?
        .solve(&aty);
    let mut values: Vec<f64> = sol.iter().copied().collect();
    pava_nonincreasing(&mut values, &weights);
    for (i, v) in values.iter_mut().enumerate() {
        *v = match i.cmp(&zero) {
            std::cmp::Ordering::Less => v.max(0.0),
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => v.min(0.0),
        };
    }
    let mut model = ResponseModel {
        data_center: data_center.to_string(),
        bounds: (knots[0], knots[n - 1]),
        knots,
        values,
        residual_norm: 0.0,
        observations: history.len(),
        envelope,
    };
    model.residual_norm = history
        .iter()
        .map(|o| (o.shift - model.raw(o.deviation)).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(model)
}

/// Signal value per period averaged over the given sites.
fn site_mean(signal: &SignalSeries, sites: &[BusId], t: usize) -> f64 {
    let vals: Vec<f64> = sites.iter().filter_map(|&s| signal.value(t, s)).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Observations from a schedule realized under a signal.
pub fn observe(
    signal: &SignalSeries,
    sites: &[BusId],
    baseline: &Schedule,
    realized: &Schedule,
) -> Vec<Observation> {
    let n = baseline.horizon;
    let level: Vec<f64> = (0..n).map(|t| site_mean(signal, sites, t)).collect();
    let mean = level.iter().sum::<f64>() / n.max(1) as f64;
    (0..n)
        .map(|t| {
            let shift: f64 = sites
                .iter()
                .map(|&s| realized.site_power(s, t) - baseline.site_power(s, t))
                .sum();
            Observation {
                period: t,
                deviation: level[t] - mean,
                shift,
            }
        })
        .collect()
}

/// Probes `respond` with seeded perturbations of a reference signal.
pub fn synthesize_history(
    flex: &FlexLoads,
    dc_index: usize,
    time: &TimeGrid,
    reference: &SignalSeries,
    probes: usize,
    seed: u64,
) -> Result<Vec<Observation>> {
    let dc = flex
        .data_centers
        .get(dc_index)
        .ok_or_else(|| Error::Invalid(format!("no data center {dc_index}")))?;
    let sites: Vec<BusId> = dc.sites().into_iter().collect();
    let base = baseline_schedule(&dc.jobs, time)?;
    let (lo, hi) = reference
        .values
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let spread = if hi > lo { hi - lo } else { 0.1 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in 0..probes {
        let mut s = reference.clone();
        if p > 0 {
            for v in s.values.iter_mut().flatten() {
                *v += spread * rng.random_range(-0.5..0.5);
            }
        }
        let realized = respond(&dc.jobs, &s, time, RespondParams::default())?;
        out.extend(observe(&s, &sites, &base, &realized));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratedOptions {
    /// Money per tCO2-equivalent unit of signal.
    pub kappa: f64,
    pub metric: MetricKind,
    pub ftci_mode: FtciMode,
}

impl Default for IntegratedOptions {
    fn default() -> Self {
        IntegratedOptions {
            kappa: 1.0,
            metric: MetricKind::Ftci,
            ftci_mode: FtciMode::LoadMix,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataCenterTarget {
    pub data_center: String,
    /// Planned site MW per period.
    pub site_power: BTreeMap<BusId, Vec<f64>>,
    /// Aggregate shift from baseline per period, MW.
    pub shift: Vec<f64>,
    /// Deviation the learned model associates with each shift.
    pub implied_deviation: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct IntegratedPlan {
    pub dispatch: DispatchResult,
    pub targets: Vec<DataCenterTarget>,
    /// kappa x published signal at the planned load.
    pub tariffs: SignalSeries,
    pub loads: BusLoads,
    /// tCO2 per period of the co-optimized dispatch.
    pub emissions: Vec<f64>,
}

impl IntegratedPlan {
    pub fn total_emissions(&self) -> f64 {
        self.emissions.iter().sum()
    }

    /// Columns: period, data_center, site, target_MW, shift_MW, tariff, implied_deviation.
    pub fn targets_csv(&self) -> String {
        let mut s = String::from("period,data_center,site,target_MW,shift_MW,tariff,implied_deviation\n");
        for tg in &self.targets {
            for (site, p) in &tg.site_power {
                for (t, mw) in p.iter().enumerate() {
                    let tariff = self.tariffs.value(t, *site).unwrap_or(0.0);
                    let dev = tg.implied_deviation[t].map(|d| d.to_string()).unwrap_or_default();
                    let _ = writeln!(s, "{t},{},{site},{mw},{},{tariff},{dev}", tg.data_center, tg.shift[t]);
                }
            }
        }
        s
    }
}

/// Multi-period emissions-minimizing dispatch with envelope-bounded shifts.
pub fn solve_integrated(
    case: &GridCase,
    flex: &FlexLoads,
    models: &[ResponseModel],
    opts: &IntegratedOptions,
) -> Result<IntegratedPlan> {
    flex.check(case)?;
    if models.len() > flex.data_centers.len() {
        return Err(Error::LengthMismatch {
            what: "response models".into(),
            expected: flex.data_centers.len(),
            found: models.len(),
        });
    }
    let by_dc: BTreeMap<&str, &ResponseModel> =
        models.iter().map(|m| (m.data_center.as_str(), m)).collect();
    let time = &case.time;
    let h = time.period_hours();
    let nt = time.horizon;
    let ng = case.generators.len();
    let ptdf = build_ptdf(case)?;
    let conv = case.bus_loads();

    // Fixed load: conventional plus every data center's baseline.
    let baselines: Vec<Schedule> = flex
        .data_centers
        .iter()
        .map(|dc| baseline_schedule(&dc.jobs, time))
        .collect::<Result<_>>()?;
    let mut fixed = conv.clone();
    for (t, row) in site_loads(case, &baselines).into_iter().enumerate() {
        for (b, v) in row.into_iter().enumerate() {
            fixed.values[t][b] += v;
        }
    }

    let mut lp = LinearProgram::new();
    let mut secondary = Vec::new();
    let mut gen_var = vec![vec![0usize; ng]; nt];
    for t in 0..nt {
        for (g, gen) in case.generators.iter().enumerate() {
            gen_var[t][g] = lp.add_var(gen.p_min, gen.p_max, gen.emission_at(t) * h);
            secondary.push(gen.cost * h);
        }
    }
    // Shift variables: (dc index, bus index, var per period).
    let mut shift_vars: Vec<(usize, BusId, usize, Vec<usize>)> = Vec::new();
    for (d, dc) in flex.data_centers.iter().enumerate() {
        let Some(m) = by_dc.get(dc.id.as_str()) else {
            continue;
        };
        for (si, &site) in m.envelope.sites.iter().enumerate() {
            let b = case
                .bus_index(site)
                .ok_or_else(|| Error::Invalid(format!("model {} uses missing bus {site}", m.data_center)))?;
            let vars = (0..nt)
                .map(|t| {
                    secondary.push(0.0);
                    lp.add_var(m.envelope.lower[si][t], m.envelope.upper[si][t], 0.0)
                })
                .collect();
            shift_vars.push((d, site, b, vars));
        }
    }

    let mut row_names = Vec::new();
    for t in 0..nt {
        let mut coeffs: Vec<(usize, f64)> = (0..ng).map(|g| (gen_var[t][g], 1.0)).collect();
        coeffs.extend(shift_vars.iter().map(|(_, _, _, v)| (v[t], -1.0)));
        lp.add_row(coeffs, Sense::Eq, fixed.total(t));
        row_names.push(format!("balance period {t}"));
        for (l, line) in case.lines.iter().enumerate() {
            if !line.in_service {
                continue;
            }
            let f = lp.add_var(-line.flow_limit, line.flow_limit, 0.0);
            secondary.push(0.0);
            let mut coeffs: Vec<(usize, f64)> = Vec::new();
            for (g, gen) in case.generators.iter().enumerate() {
                let a = ptdf.factor(l, case.bus_index(gen.bus).unwrap_or(ptdf.slack));
                if a != 0.0 {
                    coeffs.push((gen_var[t][g], a));
                }
            }
            for (_, _, b, v) in &shift_vars {
                let a = ptdf.factor(l, *b);
                if a != 0.0 {
                    coeffs.push((v[t], -a));
                }
            }
            coeffs.push((f, -1.0));
            let rhs: f64 = fixed.period(t).iter().enumerate().map(|(i, x)| ptdf.factor(l, i) * x).sum();
            lp.add_row(coeffs, Sense::Eq, rhs);
            row_names.push(format!("line {} period {t}", line.id));
        }
    }
    for (d, dc) in flex.data_centers.iter().enumerate() {
        let Some(m) = by_dc.get(dc.id.as_str()) else {
            continue;
        };
        let (a, b) = m.envelope.window;
        let coeffs: Vec<(usize, f64)> = shift_vars
            .iter()
            .filter(|(k, ..)| *k == d)
            .flat_map(|(_, _, _, v)| (a..=b).map(move |t| (v[t], 1.0)))
            .collect();
        if !coeffs.is_empty() {
            lp.add_row(coeffs, Sense::Eq, 0.0);
            row_names.push(format!("window {a}-{b} of data center {}", dc.id));
        }
        if m.envelope.max_migration_fraction < 1.0 {
            let limit = m.envelope.max_migration_fraction * dc.deferrable_energy();
            for (_, site, _, v) in shift_vars.iter().filter(|(k, ..)| *k == d) {
                let coeffs: Vec<(usize, f64)> = v.iter().map(|&x| (x, h)).collect();
                lp.add_row(coeffs.clone(), Sense::Le, limit);
                lp.add_row(coeffs, Sense::Ge, -limit);
                row_names.push(format!("migration cap at site {site} of data center {}", dc.id));
                row_names.push(format!("migration floor at site {site} of data center {}", dc.id));
            }
        }
    }

    secondary.resize(lp.num_vars(), 0.0);
    let sol = lp.solve_lexicographic(&[secondary]);
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            let rows: Vec<&str> = sol.infeasible_rows.iter().map(|&r| row_names[r].as_str()).collect();
            return Err(Error::Infeasible(format!("integrated plan: {}", rows.join(", "))));
        }
        LpStatus::Unbounded => return Err(Error::Infeasible("integrated plan unbounded".into())),
    }

    let mut loads = fixed.clone();
    let mut targets: Vec<DataCenterTarget> = Vec::new();
    for (d, dc) in flex.data_centers.iter().enumerate() {
        let mut site_power: BTreeMap<BusId, Vec<f64>> = baselines[d].power.clone();
        let mut shift = vec![0.0; nt];
        for (_, site, b, v) in shift_vars.iter().filter(|(k, ..)| *k == d) {
            let p = site_power.entry(*site).or_insert_with(|| vec![0.0; nt]);
            for t in 0..nt {
                let x = sol.x[v[t]];
                p[t] = (p[t] + x).max(0.0);
                shift[t] += x;
                loads.values[t][*b] = (loads.values[t][*b] + x).max(0.0);
            }
        }
        let implied = match by_dc.get(dc.id.as_str()) {
            Some(m) => shift.iter().map(|&s| m.inverse(s)).collect(),
            None => vec![None; nt],
        };
        targets.push(DataCenterTarget {
            data_center: dc.id.clone(),
            site_power,
            shift,
            implied_deviation: implied,
        });
    }

    let periods: Vec<PeriodDispatch> = (0..nt)
        .map(|t| {
            let gen_mw: Vec<f64> = (0..ng).map(|g| sol.x[gen_var[t][g]]).collect();
            let mut inj: Vec<f64> = loads.period(t).iter().map(|l| -l).collect();
            for (g, gen) in case.generators.iter().enumerate() {
                if let Some(b) = case.bus_index(gen.bus) {
                    inj[b] += gen_mw[g];
                }
            }
            PeriodDispatch {
                status: DispatchStatus::Optimal,
                flows: ptdf.flows(&inj),
                objective: case.generators.iter().zip(&gen_mw).map(|(g, p)| g.cost * p).sum(),
                gen_mw,
                lambda: vec![0.0; case.buses.len()],
                mu: vec![0.0; case.lines.len()],
                bus_load: loads.period(t).to_vec(),
                violated: vec![],
            }
        })
        .collect();
    let dispatch = DispatchResult {
        gen_ids: case.generators.iter().map(|g| g.id).collect(),
        line_ids: case.lines.iter().map(|l| l.id).collect(),
        bus_ids: case.bus_ids(),
        periods,
    };
    let emissions = dispatch_emissions(case, &dispatch);

    // Tariffs from the published metric at the planned load.
    let planned: Vec<Schedule> = targets
        .iter()
        .map(|tg| Schedule {
            horizon: nt,
            period_hours: h,
            allocations: BTreeMap::new(),
            power: tg.site_power.clone(),
        })
        .collect();
    let mat = materialize(case, flex, &planned)?;
    let market = solve_dc_opf(&mat, &mat.bus_loads())?;
    require_optimal(&market, "tariff dispatch")?;
    let mut tariffs = compute_metric(&mat, &market, opts.metric, opts.ftci_mode)?;
    tariffs.values.iter_mut().flatten().for_each(|v| *v *= opts.kappa);
    tariffs.provenance = format!("kappa {} x {}", opts.kappa, tariffs.provenance);

    Ok(IntegratedPlan {
        dispatch,
        targets,
        tariffs,
        loads,
        emissions,
    })
}

/// Response models for every data center, fitted to probed histories.
pub fn learn_models(
    case: &GridCase,
    flex: &FlexLoads,
    reference: &SignalSeries,
    probes: usize,
    seed: u64,
    max_migration_fraction: f64,
) -> Result<Vec<ResponseModel>> {
    flex.data_centers
        .iter()
        .enumerate()
        .map(|(i, dc)| {
            let hist = synthesize_history(flex, i, &case.time, reference, probes, seed.wrapping_add(i as u64))?;
            let env = ResponseEnvelope::from_jobs(&dc.jobs, &case.time, max_migration_fraction)?;
            match fit_response_model(&dc.id, &hist, env.clone()) {
                Ok(m) => Ok(m),
                // A flat reference with no response is a valid zero model.
                Err(Error::Invalid(_)) => Ok(ResponseModel {
                    data_center: dc.id.clone(),
                    knots: vec![0.0],
                    values: vec![0.0],
                    bounds: (0.0, 0.0),
                    residual_norm: 0.0,
                    observations: hist.len(),
                    envelope: env,
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftResult {
    /// Final CUSUM value.
    pub statistic: f64,
    pub max_statistic: f64,
    pub flagged: bool,
    /// First index (into the analyzed window) where S > h.
    pub alarm_at: Option<usize>,
    pub sigma: f64,
    pub threshold: f64,
    pub slack: f64,
}

/// One-sided CUSUM on declared minus realized over the last `window`
/// samples, h = 5 sigma, k = 0.5 sigma.
pub fn drift_monitor(declared: &[f64], realized: &[f64], window: usize) -> Result<DriftResult> {
    if declared.len() != realized.len() {
        return Err(Error::LengthMismatch {
            what: "drift series".into(),
            expected: declared.len(),
            found: realized.len(),
        });
    }
    if window < 10 || window > declared.len() {
        return Err(Error::Invalid(format!(
            "window {window} must be >= 10 and <= series length {}",
            declared.len()
        )));
    }
    let start = declared.len() - window;
    let x: Vec<f64> = declared[start..]
        .iter()
        .zip(&realized[start..])
        .map(|(d, r)| d - r)
        .collect();
    let mean = x.iter().sum::<f64>() / window as f64;
    let sigma = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (window - 1) as f64).sqrt();
    let (h, k) = (5.0 * sigma, 0.5 * sigma);
    let mut s: f64 = 0.0;
    let mut max_s: f64 = 0.0;
    let mut alarm = None;
    for (i, v) in x.iter().enumerate() {
        s = (s + v - k).max(0.0);
        max_s = max_s.max(s);
        if alarm.is_none() && s > h {
            alarm = Some(i);
        }
    }
    Ok(DriftResult {
        statistic: s,
        max_statistic: max_s,
        flagged: alarm.is_some(),
        alarm_at: alarm,
        sigma,
        threshold: h,
        slack: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flexload::{ComputeJob, Criticality, DataCenter};
    use crate::grid::fixtures::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal};

    fn dc_job(id: u32, bus: BusId, energy: f64, cap: f64, window: (usize, usize)) -> ComputeJob {
        ComputeJob {
            id,
            home_site: bus,
            release: window.0,
            deadline: window.1,
            energy,
            power_cap: cap,
            divisible: true,
            migratable_sites: Default::default(),
            criticality: Criticality::Deferrable,
        }
    }

    /// Single bus, two periods; the cheap unit is dirty then clean.
    pub(crate) fn two_period(e_backup: f64, headroom_cap: f64) -> GridCase {
        let mut c = single_bus(0.9);
        c.time = TimeGrid::hourly(2);
        c.generators = vec![gen(1, 1, headroom_cap, 0.0, 0.9), gen(2, 1, 1000.0, 30.0, e_backup)];
        c.generators[0].emission_profile = Some(vec![0.9, 0.1]);
        c.loads[0].baseline = vec![100.0, 100.0];
        c
    }

    fn flex(dcs: Vec<Vec<ComputeJob>>) -> FlexLoads {
        FlexLoads {
            data_centers: dcs
                .into_iter()
                .enumerate()
                .map(|(i, jobs)| DataCenter {
                    id: format!("dc{i}"),
                    jobs,
                })
                .collect(),
        }
    }

    /// Exhaustive search over clean-period placement on a 0.5 MW grid.
    fn brute_force(case: &GridCase, energy: f64) -> f64 {
        let mut best = f64::INFINITY;
        let mut x = 0.0;
        while x <= energy + 1e-9 {
            let mut loads = case.bus_loads();
            loads.values[0][0] += energy - x;
            loads.values[1][0] += x;
            best = best.min(system_emissions(case, &loads).unwrap().total);
            x += 0.5;
        }
        best
    }

    #[test]
    fn system_emissions_examples() {
        let c = single_bus(0.5);
        assert_abs_diff_eq!(system_emissions(&c, &c.bus_loads()).unwrap().total, 50.0, epsilon = 1e-9);
        let c = two_bus();
        assert_abs_diff_eq!(system_emissions(&c, &c.bus_loads()).unwrap().total, 52.0, epsilon = 1e-9);
        let mut c = single_bus(0.5);
        c.loads[0].baseline = vec![0.0];
        assert_eq!(system_emissions(&c, &c.bus_loads()).unwrap().total, 0.0);
    }

    #[test]
    fn zero_flexible_load_converges_immediately() {
        let c = two_bus();
        let t = run_iterative(&c, &FlexLoads::none(), &LoopParams::default()).unwrap();
        assert_eq!(t.rounds.len(), 1);
        assert!(t.converged());
        assert_eq!(t.final_emissions(), t.baseline_emissions);
    }

    #[test]
    fn ample_headroom_moves_everything_clean() {
        let c = two_period(0.9, 200.0);
        let f = flex(vec![vec![dc_job(1, 1, 50.0, 50.0, (0, 1))]]);
        let t = run_iterative(&c, &f, &LoopParams::default()).unwrap();
        assert!(t.converged(), "{:?}", t.summary_csv());
        assert!(t.rounds.len() <= 50);
        let opt = brute_force(&c, 50.0);
        assert_abs_diff_eq!(opt, 105.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.baseline_emissions, 145.0, epsilon = 1e-9);
        assert!(t.final_emissions() < t.baseline_emissions);
        assert!((t.final_emissions() - opt) / opt < 0.05);
        let s = &t.final_schedules()[0];
        assert!(s.site_power(1, 1) > 50.0 - 0.1);
        // Non-increasing metric after round 2 for a single data center.
        for w in t.rounds.windows(2).skip(1) {
            assert!(w[1].metric <= w[0].metric + 1e-12);
        }
    }

    #[test]
    fn damping_prevents_crowding() {
        let c = two_period(1.0, 200.0);
        let jobs = |id| vec![dc_job(id, 1, 80.0, 80.0, (0, 1))];
        let f = flex(vec![jobs(1), jobs(2)]);
        let p = LoopParams {
            metric: MetricKind::Lmci,
            ..LoopParams::default()
        };
        let shot = one_shot(&c, &f, &p).unwrap();
        let conv = run_iterative(&c, &f, &p).unwrap();
        let overshoot = |t: &LoopTrace| (t.rounds.last().unwrap().aggregate.values[1][0] - 200.0).max(0.0);
        assert_abs_diff_eq!(overshoot(&shot), 60.0, epsilon = 1e-9);
        assert!(conv.converged());
        assert!(overshoot(&conv) < overshoot(&shot));
        assert!(overshoot(&conv) < 1.0, "{}", overshoot(&conv));
    }

    #[test]
    fn loop_is_deterministic() {
        let c = two_period(1.0, 200.0);
        let f = flex(vec![vec![dc_job(1, 1, 80.0, 80.0, (0, 1))], vec![dc_job(2, 1, 60.0, 60.0, (0, 1))]]);
        let a = run_iterative(&c, &f, &LoopParams::default()).unwrap();
        let b = run_iterative(&c, &f, &LoopParams::default()).unwrap();
        assert_eq!(a.summary_csv(), b.summary_csv());
    }

    #[test]
    fn stagger_rotation_covers_everyone() {
        let g = stagger_groups(5, 0.5, 7);
        assert_eq!(g.len(), 2);
        let mut all: Vec<usize> = g.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(stagger_groups(4, 1.0, 1).len(), 1);
    }

    fn envelope() -> ResponseEnvelope {
        ResponseEnvelope::from_jobs(&[dc_job(1, 1, 40.0, 100.0, (0, 9))], &TimeGrid::hourly(10), 1.0).unwrap()
    }

    fn linear_history(slope: f64, noise: f64, seed: u64) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        (0..200)
            .map(|i| {
                let d = -0.3 + 0.6 * i as f64 / 199.0;
                Observation {
                    period: i % 10,
                    deviation: d,
                    shift: slope * d + noise * n.sample(&mut rng),
                }
            })
            .collect()
    }

    #[test]
    fn recovers_linear_responder() {
        // -2 MW per 0.1 tCO2/MWh.
        let m = fit_response_model("a", &linear_history(-20.0, 0.0, 0), envelope()).unwrap();
        assert!((m.slope() + 20.0).abs() / 20.0 < 0.01, "{}", m.slope());
        assert!(m.knots.len() <= MAX_KNOTS);
        assert_eq!(m.raw(0.0), 0.0);
    }

    #[test]
    fn noisy_responder_stays_monotone() {
        let range = 20.0 * 0.6;
        let m = fit_response_model("a", &linear_history(-20.0, 0.05 * range, 42), envelope()).unwrap();
        assert!(m.values.windows(2).all(|w| w[0] >= w[1]));
        assert!((m.slope() + 20.0).abs() / 20.0 < 0.10, "{}", m.slope());
        assert!(m.residual_norm > 0.0);
    }

    #[test]
    fn flat_and_degenerate_histories() {
        let flat: Vec<Observation> = (0..10)
            .map(|i| Observation {
                period: i,
                deviation: i as f64 * 0.01 - 0.05,
                shift: 0.0,
            })
            .collect();
        let m = fit_response_model("a", &flat, envelope()).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
        let single = vec![Observation { period: 0, deviation: 0.1, shift: -1.0 }; 5];
        assert!(fit_response_model("a", &single, envelope()).is_err());
    }

    #[test]
    fn model_inverse_round_trips() {
        let m = fit_response_model("a", &linear_history(-20.0, 0.0, 0), envelope()).unwrap();
        let d = m.inverse(-3.0).unwrap();
        assert_abs_diff_eq!(m.raw(d), -3.0, epsilon = 1e-6);
    }

    #[test]
    fn integrated_without_models_is_plain_opf() {
        let c = two_period(0.9, 200.0);
        let f = flex(vec![vec![dc_job(1, 1, 50.0, 50.0, (0, 1))]]);
        let plan = solve_integrated(&c, &f, &[], &IntegratedOptions::default()).unwrap();
        assert_abs_diff_eq!(plan.total_emissions(), 145.0, epsilon = 1e-6);
    }

    #[test]
    fn integrated_reaches_brute_force_optimum() {
        let c = two_period(0.9, 200.0);
        let f = flex(vec![vec![dc_job(1, 1, 50.0, 50.0, (0, 1))]]);
        let probe = run_iterative(&c, &FlexLoads::none(), &LoopParams::default()).unwrap();
        let reference = probe.baseline_signal.unwrap();
        let models = learn_models(&c, &f, &reference, 8, 3, 1.0).unwrap();
        let plan = solve_integrated(&c, &f, &models, &IntegratedOptions::default()).unwrap();
        assert_abs_diff_eq!(plan.total_emissions(), brute_force(&c, 50.0), epsilon = 1e-6);
        let iter = run_iterative(&c, &f, &LoopParams::default()).unwrap();
        assert!(plan.total_emissions() <= iter.final_emissions() + 1e-6);
        assert!(iter.final_emissions() <= iter.baseline_emissions + 1e-6);
    }

    #[test]
    fn drift_examples() {
        let base: Vec<f64> = vec![100.0; 40];
        let r = drift_monitor(&base, &base, 40).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(!r.flagged);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 2.0).unwrap();
        let realized: Vec<f64> = (0..40).map(|_| 100.0 + n.sample(&mut rng)).collect();
        let declared: Vec<f64> = (0..40)
            .map(|i| (if i >= 10 { 110.0 } else { 100.0 }) + n.sample(&mut rng))
            .collect();
        let r = drift_monitor(&declared, &realized, 40).unwrap();
        assert!(r.flagged);
        assert!(r.alarm_at.unwrap() < 40);

        assert!(drift_monitor(&base[..5], &base[..5], 5).is_err());
        assert!(drift_monitor(&base, &base[..39], 20).is_err());
    }

    #[test]
    fn pava_pools_violations() {
        let mut v = vec![1.0, 3.0, 2.0, 0.0];
        pava_nonincreasing(&mut v, &[1.0; 4]);
        assert_eq!(v, vec![2.0, 2.0, 2.0, 0.0]);
    }
}
