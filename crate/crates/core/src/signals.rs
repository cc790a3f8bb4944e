//! Carbon-intensity metrics and their publication as coordination signals.
//!
//! Four accounting metrics are computed from a dispatch:
//!
//! * average intensity (ACI): system emissions over system load, the same
//!   value at every bus;
//! * flow-traced intensity (FTCI): the emission mix of the power actually
//!   delivered to each bus, found by proportional sharing along the
//!   directed DC flows;
//! * locational marginal intensity (LMCI): the change in system emissions
//!   for a marginal change in load at a bus, found by re-solving the OPF;
//! * adjusted LMCI (ALMCI): LMCI shifted by a bus-uniform term so that the
//!   load-weighted total matches system emissions.
//!
//! By default FTCI is reported as a consumption-weighted intensity
//! (`sum_g f_gi P_g e_g / L_i`), which conserves total emissions. The
//! unweighted share sum is available as [`FtciMode::Literal`].

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use crate::dispatch::{build_ptdf, emission_sensitivity, solve_dc_opf, DispatchResult};
use crate::error::{Error, Result};
use crate::grid::{BusId, BusLoads, GenId, GridCase, LineId, LoadId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MetricKind {
    Aci,
    Ftci,
    Lmci,
    Almci,
    #[serde(rename = "external")]
    External,
    #[serde(rename = "composite")]
    Composite,
}

impl MetricKind {
    pub const ACCOUNTING: [MetricKind; 4] = [
        MetricKind::Aci,
        MetricKind::Ftci,
        MetricKind::Lmci,
        MetricKind::Almci,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Aci => "ACI",
            MetricKind::Ftci => "FTCI",
            MetricKind::Lmci => "LMCI",
            MetricKind::Almci => "ALMCI",
            MetricKind::External => "external",
            MetricKind::Composite => "composite",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
    pub struct SignalFlags: u16 {
        /// No meaningful value (zero load or failed base solve); value is 0.
        const UNDEFINED = 1;
        /// Bus has no load; value is the incoming-mix intensity.
        const NO_LOAD = 1 << 1;
        /// One-sided sensitivities disagree.
        const DEGENERATE = 1 << 2;
        /// One probe was infeasible.
        const ONE_SIDED = 1 << 3;
        /// Negative marginal value driven by binding line limits.
        const CONGESTION = 1 << 4;
        /// Sensitivity probe failed on both sides.
        const PROBE_FAILED = 1 << 5;
        /// Value held from the previous period to fill a gap.
        const GAP_FILLED = 1 << 6;
        /// Zone had no load; unweighted mean used.
        const ZONE_FALLBACK = 1 << 7;
    }
}

impl SignalFlags {
    pub fn label(self) -> String {
        self.iter_names()
            .map(|(n, _)| n.to_ascii_lowercase())
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Per-bus, per-period intensity signal in tCO2/MWh.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSeries {
    pub kind: MetricKind,
    pub bus_ids: Vec<BusId>,
    /// `values[t][b]`, buses ordered as `bus_ids`.
    pub values: Vec<Vec<f64>>,
    pub flags: Vec<Vec<SignalFlags>>,
    pub provenance: String,
    /// Binding lines per period, recorded for marginal metrics.
    pub binding: Vec<Vec<LineId>>,
}

impl SignalSeries {
    pub fn new(kind: MetricKind, bus_ids: Vec<BusId>, horizon: usize, provenance: impl Into<String>) -> Self {
        let nb = bus_ids.len();
        SignalSeries {
            kind,
            bus_ids,
            values: vec![vec![0.0; nb]; horizon],
            flags: vec![vec![SignalFlags::empty(); nb]; horizon],
            provenance: provenance.into(),
            binding: vec![Vec::new(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn bus_pos(&self, bus: BusId) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == bus)
    }

    pub fn value(&self, period: usize, bus: BusId) -> Option<f64> {
        let b = self.bus_pos(bus)?;
        self.values.get(period).map(|row| row[b])
    }

    /// (min, max) across buses in one period.
    pub fn range(&self, period: usize) -> (f64, f64) {
        self.values[period]
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn flag_count(&self, flag: SignalFlags) -> usize {
        self.flags
            .iter()
            .flatten()
            .filter(|f| f.intersects(flag))
            .count()
    }

    /// Columns: period, bus, kind, value_tCO2_per_MWh, flags.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("period,bus,kind,value_tCO2_per_MWh,flags\n");
        for (t, (row, frow)) in self.values.iter().zip(&self.flags).enumerate() {
            for ((bus, v), f) in self.bus_ids.iter().zip(row).zip(frow) {
                let _ = writeln!(s, "{t},{bus},{},{v},{}", self.kind, f.label());
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodEmissions {
    /// tCO2 per hour of the period.
    pub e_total: f64,
    /// e_g P_g per generator, ordered as the case.
    pub contributions: Vec<f64>,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionBreakdown {
    pub gen_ids: Vec<GenId>,
    pub periods: Vec<PeriodEmissions>,
}

pub fn emission_breakdown(case: &GridCase, dispatch: &DispatchResult) -> EmissionBreakdown {
    let periods = dispatch
        .periods
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let contributions: Vec<f64> = case
                .generators
                .iter()
                .zip(&p.gen_mw)
                .map(|(g, mw)| g.emission_at(t) * mw)
                .collect();
            PeriodEmissions {
                e_total: contributions.iter().sum(),
                contributions,
                l_total: p.bus_load.iter().sum(),
            }
        })
        .collect();
    EmissionBreakdown {
        gen_ids: dispatch.gen_ids.clone(),
        periods,
    }
}

pub fn average_intensity(breakdown: &EmissionBreakdown, bus_ids: &[BusId]) -> SignalSeries {
    let mut s = SignalSeries::new(
        MetricKind::Aci,
        bus_ids.to_vec(),
        breakdown.periods.len(),
        "system average",
    );
    for (t, p) in breakdown.periods.iter().enumerate() {
        if p.l_total > 0.0 {
            let aci = p.e_total / p.l_total;
            s.values[t].iter_mut().for_each(|v| *v = aci);
        } else {
            s.flags[t].iter_mut().for_each(|f| *f = SignalFlags::UNDEFINED);
        }
    }
    s
}

/// Proportional-sharing allocation of generator output to loads in one
/// period.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceShares {
    pub period: usize,
    pub gen_ids: Vec<GenId>,
    pub load_ids: Vec<LoadId>,
    /// MW drawn by each load in this period.
    pub load_mw: Vec<f64>,
    /// Bus index of each load.
    pub load_bus: Vec<usize>,
    /// `fractions[g][i]`: share of generator g's output delivered to load i.
    pub fractions: Vec<Vec<f64>>,
    /// `bus_mix[k][g]`: MW of generator g passing through bus k.
    pub bus_mix: Vec<Vec<f64>>,
    /// Total MW passing through each bus.
    pub throughput: Vec<f64>,
}

const FLOW_EPS: f64 = 1e-9;

pub fn trace_generator_shares(
    case: &GridCase,
    dispatch: &DispatchResult,
    period: usize,
) -> Result<TraceShares> {
    let p = dispatch
        .periods
        .get(period)
        .ok_or_else(|| Error::Invalid(format!("period {period} out of range")))?;
    if !p.is_optimal() {
        return Err(Error::Infeasible(format!("dispatch in period {period} is not optimal")));
    }
    let nb = case.buses.len();
    let ng = case.generators.len();

    // Directed graph over nonzero flows.
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nb];
    let mut outgoing: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for (line, &f) in case.lines.iter().zip(&p.flows) {
        if !line.in_service || f.abs() <= FLOW_EPS {
            continue;
        }
        let (a, b) = (
            case.bus_index(line.from_bus).ok_or(Error::BadLine(line.id))?,
            case.bus_index(line.to_bus).ok_or(Error::BadLine(line.id))?,
        );
        let (src, dst) = if f > 0.0 { (a, b) } else { (b, a) };
        incoming[dst].push((src, f.abs()));
        outgoing[src].push(dst);
    }

    // Kahn's algorithm, lowest bus index first.
    let mut indeg: Vec<usize> = incoming.iter().map(Vec::len).collect();
    let mut ready: std::collections::BTreeSet<usize> =
        (0..nb).filter(|&k| indeg[k] == 0).collect();
    let mut order = Vec::with_capacity(nb);
    while let Some(k) = ready.pop_first() {
        order.push(k);
        for &d in &outgoing[k] {
            indeg[d] -= 1;
            if indeg[d] == 0 {
                ready.insert(d);
            }
        }
    }
    if order.len() != nb {
        return Err(Error::CyclicFlows(period));
    }

    let mut bus_mix = vec![vec![0.0; ng]; nb];
    let mut throughput = vec![0.0; nb];
    for &k in &order {
        let mut mix = vec![0.0; ng];
        for (g, gen) in case.generators.iter().enumerate() {
            if case.bus_index(gen.bus) == Some(k) {
                mix[g] += p.gen_mw[g];
            }
        }
        for &(src, f) in &incoming[k] {
            let t_src = throughput[src];
            if t_src > 0.0 {
                for g in 0..ng {
                    mix[g] += f * bus_mix[src][g] / t_src;
                }
            }
        }
        throughput[k] = mix.iter().sum();
        bus_mix[k] = mix;
    }

    // Split each bus's load among its load points by their baselines.
    let mut per_bus_weight = vec![0.0; nb];
    let mut load_bus = Vec::new();
    for l in &case.loads {
        let b = case
            .bus_index(l.bus)
            .ok_or_else(|| Error::Invalid(format!("load {} on missing bus", l.id)))?;
        per_bus_weight[b] += l.baseline.get(period).copied().unwrap_or(0.0);
        load_bus.push(b);
    }
    let load_mw: Vec<f64> = case
        .loads
        .iter()
        .zip(&load_bus)
        .map(|(l, &b)| {
            let w = l.baseline.get(period).copied().unwrap_or(0.0);
            if per_bus_weight[b] > 0.0 {
                p.bus_load[b] * w / per_bus_weight[b]
            } else {
                0.0
            }
        })
        .collect();

    let mut fractions = vec![vec![0.0; case.loads.len()]; ng];
    for (i, (&b, &li)) in load_bus.iter().zip(&load_mw).enumerate() {
        if throughput[b] <= 0.0 || li <= 0.0 {
            continue;
        }
        for g in 0..ng {
            let pg = p.gen_mw[g];
            if pg > 0.0 {
                fractions[g][i] = li * bus_mix[b][g] / (throughput[b] * pg);
            }
        }
    }

    Ok(TraceShares {
        period,
        gen_ids: case.generators.iter().map(|g| g.id).collect(),
        load_ids: case.loads.iter().map(|l| l.id).collect(),
        load_mw,
        load_bus,
        fractions,
        bus_mix,
        throughput,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtciMode {
    /// Consumption-weighted mix, conserves total emissions.
    #[default]
    LoadMix,
    /// Unweighted sum of shares times emission factors.
    Literal,
}

pub fn flow_traced_intensity(
    shares: &[TraceShares],
    case: &GridCase,
    dispatch: &DispatchResult,
) -> SignalSeries {
    flow_traced_intensity_with(shares, case, dispatch, FtciMode::LoadMix)
}

pub fn flow_traced_intensity_with(
    shares: &[TraceShares],
    case: &GridCase,
    dispatch: &DispatchResult,
    mode: FtciMode,
) -> SignalSeries {
    let nb = case.buses.len();
    let mut s = SignalSeries::new(
        MetricKind::Ftci,
        case.bus_ids(),
        dispatch.periods.len(),
        format!("{}: proportional sharing ({mode:?})", case.name),
    );
    for sh in shares {
        let t = sh.period;
        let p = &dispatch.periods[t];
        let e: Vec<f64> = case.generators.iter().map(|g| g.emission_at(t)).collect();
        let mut emitted = vec![0.0; nb];
        let mut literal = vec![0.0; nb];
        let mut load = vec![0.0; nb];
        for (i, (&b, &li)) in sh.load_bus.iter().zip(&sh.load_mw).enumerate() {
            load[b] += li;
            for g in 0..e.len() {
                let f = sh.fractions[g][i];
                emitted[b] += f * p.gen_mw[g] * e[g];
                literal[b] += f * e[g];
            }
        }
        let aci = {
            let l: f64 = p.bus_load.iter().sum();
            if l > 0.0 {
                p.emission_rate(case, t) / l
            } else {
                0.0
            }
        };
        for b in 0..nb {
            let (value, flag) = match mode {
                FtciMode::LoadMix if load[b] > 0.0 => (emitted[b] / load[b], SignalFlags::empty()),
                FtciMode::Literal if load[b] > 0.0 => (literal[b], SignalFlags::empty()),
                _ if sh.throughput[b] > 0.0 => {
                    let mix: f64 = sh.bus_mix[b].iter().zip(&e).map(|(m, eg)| m * eg).sum();
                    (mix / sh.throughput[b], SignalFlags::NO_LOAD)
                }
                _ => (aci, SignalFlags::NO_LOAD | SignalFlags::UNDEFINED),
            };
            s.values[t][b] = value;
            s.flags[t][b] = flag;
        }
    }
    s
}

/// Traces every period and returns the FTCI series.
pub fn ftci_series(case: &GridCase, dispatch: &DispatchResult, mode: FtciMode) -> Result<SignalSeries> {
    let shares = (0..dispatch.periods.len())
        .map(|t| trace_generator_shares(case, dispatch, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(flow_traced_intensity_with(&shares, case, dispatch, mode))
}

pub fn locational_marginal_intensity(case: &GridCase, loads: &BusLoads) -> Result<SignalSeries> {
    let dispatch = solve_dc_opf(case, loads)?;
    lmci_from_dispatch(case, &dispatch)
}

pub fn lmci_from_dispatch(case: &GridCase, dispatch: &DispatchResult) -> Result<SignalSeries> {
    let ptdf = build_ptdf(case)?;
    let mut s = SignalSeries::new(
        MetricKind::Lmci,
        case.bus_ids(),
        dispatch.periods.len(),
        format!("{}: finite-difference OPF re-solve", case.name),
    );
    for (t, p) in dispatch.periods.iter().enumerate() {
        if !p.is_optimal() {
            s.flags[t].iter_mut().for_each(|f| *f = SignalFlags::UNDEFINED);
            continue;
        }
        s.binding[t] = p.binding_lines(case);
        for b in 0..case.buses.len() {
            match emission_sensitivity(case, &ptdf, p, b, t) {
                Ok(sens) => {
                    let mut f = SignalFlags::empty();
                    if sens.degenerate {
                        f |= SignalFlags::DEGENERATE;
                    }
                    if sens.one_sided {
                        f |= SignalFlags::ONE_SIDED;
                    }
                    if sens.value < 0.0 {
                        f |= SignalFlags::CONGESTION;
                    }
                    s.values[t][b] = sens.value;
                    s.flags[t][b] = f;
                }
                Err(_) => s.flags[t][b] = SignalFlags::PROBE_FAILED | SignalFlags::UNDEFINED,
            }
        }
    }
    Ok(s)
}

pub fn adjusted_lmci(
    lmci: &SignalSeries,
    breakdown: &EmissionBreakdown,
    loads: &BusLoads,
) -> Result<SignalSeries> {
    if lmci.horizon() != breakdown.periods.len() || loads.horizon() != lmci.horizon() {
        return Err(Error::LengthMismatch {
            what: "ALMCI inputs".into(),
            expected: lmci.horizon(),
            found: breakdown.periods.len().min(loads.horizon()),
        });
    }
    let mut s = lmci.clone();
    s.kind = MetricKind::Almci;
    s.provenance = format!("{}; reconciled to system total", lmci.provenance);
    for t in 0..lmci.horizon() {
        let l = loads.period(t);
        let l_total: f64 = l.iter().sum();
        if l_total <= 0.0 {
            s.flags[t].iter_mut().for_each(|f| *f |= SignalFlags::UNDEFINED);
            continue;
        }
        let weighted: f64 = l.iter().zip(&lmci.values[t]).map(|(a, b)| a * b).sum();
        let adj = (breakdown.periods[t].e_total - weighted) / l_total;
        for b in 0..s.bus_ids.len() {
            s.values[t][b] = lmci.values[t][b] + adj;
            if s.values[t][b] < 0.0 {
                s.flags[t][b] |= SignalFlags::CONGESTION;
            }
        }
    }
    Ok(s)
}

/// Load-weighted zonal mean, replicated back to member buses.
pub fn aggregate_signal(
    signal: &SignalSeries,
    zones: &BTreeMap<BusId, String>,
    loads: &BusLoads,
) -> Result<SignalSeries> {
    for b in &signal.bus_ids {
        if !zones.contains_key(b) {
            return Err(Error::Invalid(format!("bus {b} has no zone")));
        }
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, b) in signal.bus_ids.iter().enumerate() {
        members.entry(zones[b].as_str()).or_default().push(i);
    }
    let mut out = signal.clone();
    out.provenance = format!(
        "{}; zoned [{}]",
        signal.provenance,
        members
            .iter()
            .map(|(z, m)| format!("{z}:{}", m.iter().map(|&i| signal.bus_ids[i].to_string()).collect::<Vec<_>>().join("+")))
            .collect::<Vec<_>>()
            .join(" ")
    );
    for t in 0..signal.horizon() {
        let l = loads.period(t);
        for m in members.values() {
            let w: f64 = m.iter().map(|&i| l[i]).sum();
            let (v, fallback) = if w > 0.0 {
                (m.iter().map(|&i| l[i] * signal.values[t][i]).sum::<f64>() / w, false)
            } else {
                (m.iter().map(|&i| signal.values[t][i]).sum::<f64>() / m.len() as f64, true)
            };
            for &i in m {
                out.values[t][i] = v;
                if fallback {
                    out.flags[t][i] |= SignalFlags::ZONE_FALLBACK;
                }
            }
        }
    }
    Ok(out)
}

/// Emitted mass for an energy use, tCO2 = MWh x tCO2/MWh.
pub fn footprint(energy_mwh: f64, intensity: f64) -> Result<f64> {
    if !(energy_mwh >= 0.0) {
        return Err(Error::Invalid(format!("energy must be >= 0, got {energy_mwh}")));
    }
    Ok(energy_mwh * intensity)
}

pub mod units {
    //! Display-unit helpers. 1 tCO2/MWh = 1000 gCO2/kWh.

    pub fn wh_to_mwh(wh: f64) -> f64 {
        wh * 1e-6
    }

    pub fn g_per_kwh_to_t_per_mwh(g_per_kwh: f64) -> f64 {
        g_per_kwh / 1000.0
    }

    pub fn t_per_mwh_to_g_per_kwh(t_per_mwh: f64) -> f64 {
        t_per_mwh * 1000.0
    }

    pub fn tonnes_to_grams(t: f64) -> f64 {
        t * 1e6
    }

    /// Footprint in grams for energy in Wh at an intensity in gCO2/kWh.
    pub fn footprint_grams(energy_wh: f64, intensity_g_per_kwh: f64) -> f64 {
        energy_wh * intensity_g_per_kwh / 1000.0
    }
}

/// All four accounting metrics for one dispatch.
#[derive(Debug, Clone)]
pub struct MetricSet {
    pub breakdown: EmissionBreakdown,
    pub aci: SignalSeries,
    pub ftci: SignalSeries,
    pub lmci: SignalSeries,
    pub almci: SignalSeries,
}

impl MetricSet {
    pub fn get(&self, kind: MetricKind) -> Option<&SignalSeries> {
        match kind {
            MetricKind::Aci => Some(&self.aci),
            MetricKind::Ftci => Some(&self.ftci),
            MetricKind::Lmci => Some(&self.lmci),
            MetricKind::Almci => Some(&self.almci),
            _ => None,
        }
    }
}

pub fn compute_metrics(case: &GridCase, dispatch: &DispatchResult, mode: FtciMode) -> Result<MetricSet> {
    let breakdown = emission_breakdown(case, dispatch);
    let loads = BusLoads {
        values: dispatch.periods.iter().map(|p| p.bus_load.clone()).collect(),
    };
    let aci = average_intensity(&breakdown, &case.bus_ids());
    let ftci = ftci_series(case, dispatch, mode)?;
    let lmci = lmci_from_dispatch(case, dispatch)?;
    let almci = adjusted_lmci(&lmci, &breakdown, &loads)?;
    Ok(MetricSet {
        breakdown,
        aci,
        ftci,
        lmci,
        almci,
    })
}

/// Computes a single metric; cheaper than [`compute_metrics`] for ACI/FTCI.
pub fn compute_metric(
    case: &GridCase,
    dispatch: &DispatchResult,
    kind: MetricKind,
    mode: FtciMode,
) -> Result<SignalSeries> {
    match kind {
        MetricKind::Aci => Ok(average_intensity(&emission_breakdown(case, dispatch), &case.bus_ids())),
        MetricKind::Ftci => ftci_series(case, dispatch, mode),
        MetricKind::Lmci => lmci_from_dispatch(case, dispatch),
        MetricKind::Almci => Ok(compute_metrics(case, dispatch, mode)?.almci),
        other => Err(Error::Invalid(format!("{other} is not computed from a dispatch"))),
    }
}
