//! Stress detection and the emissions-first to stability-first pivot.
//!
//! Stress is judged on the flows the pre-contingency economic dispatch
//! would produce on the post-contingency topology, i.e. with line limits
//! not enforced. Flexible load is then the only relief lever: data centers
//! respond to a composite of the carbon signal and a congestion score.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::coordination::LoopParams;
use crate::dispatch::{build_ptdf, solve_period, DispatchResult, OpfOptions, PeriodDispatch, PtdfMatrix};
use crate::error::{Error, Result};
use crate::flexload::{baseline_schedule, materialize, respond, FlexLoads, JobId, Schedule};
use crate::grid::{BusId, GridCase, LineId};
use crate::signals::{compute_metric, MetricKind, SignalSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StressThresholds {
    /// Loading ratio above which a line counts as stressed.
    pub overload: f64,
    /// Reserve margin below which the system counts as stressed.
    pub reserve: f64,
}

impl Default for StressThresholds {
    fn default() -> Self {
        StressThresholds {
            overload: 0.98,
            reserve: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StressState {
    pub line_ids: Vec<LineId>,
    /// |flow| / limit per line; 0 for lines out of service.
    pub loading: Vec<f64>,
    /// Signed MW per line.
    pub flows: Vec<f64>,
    pub reserve_margin: f64,
    pub stressed: bool,
    /// Lines above the overload threshold.
    pub binding: Vec<LineId>,
}

impl StressState {
    pub fn max_loading(&self) -> f64 {
        self.loading.iter().copied().fold(0.0, f64::max)
    }

    /// Lines with loading strictly above 1.
    pub fn overloaded(&self) -> impl Iterator<Item = usize> + '_ {
        self.loading.iter().enumerate().filter(|(_, &r)| r > 1.0).map(|(i, _)| i)
    }

    /// Largest MW above limit over all lines.
    pub fn residual_overload(&self, case: &GridCase) -> f64 {
        self.overloaded()
            .map(|l| self.flows[l].abs() - case.lines[l].flow_limit)
            .fold(0.0, f64::max)
    }
}

pub fn detect_stress(case: &GridCase, flows: &[f64], total_load: f64, thresholds: &StressThresholds) -> StressState {
    let loading: Vec<f64> = case
        .lines
        .iter()
        .zip(flows)
        .map(|(l, f)| if l.in_service { f.abs() / l.flow_limit } else { 0.0 })
        .collect();
    let capacity: f64 = case.generators.iter().map(|g| g.p_max).sum();
    let reserve_margin = if total_load > 0.0 {
        (capacity - total_load) / total_load
    } else {
        f64::INFINITY
    };
    let binding: Vec<LineId> = case
        .lines
        .iter()
        .zip(&loading)
        .filter(|(_, &r)| r > thresholds.overload)
        .map(|(l, _)| l.id)
        .collect();
    StressState {
        line_ids: case.lines.iter().map(|l| l.id).collect(),
        loading,
        flows: flows.to_vec(),
        stressed: !binding.is_empty() || reserve_margin < thresholds.reserve,
        reserve_margin,
        binding,
    }
}

/// Default blend weight: 1 when calm, 0.1 under stress.
pub fn default_beta(stress: &StressState) -> f64 {
    if stress.stressed {
        0.1
    } else {
        1.0
    }
}

/// Raw congestion score per bus: how much extra load there worsens
/// current overloads.
fn stress_scores(stress: &StressState, ptdf: &PtdfMatrix) -> Vec<f64> {
    let nb = ptdf.bus_ids.len();
    let mut raw = vec![0.0; nb];
    for l in stress.overloaded() {
        let excess = stress.loading[l] - 1.0;
        let sign = stress.flows[l].signum();
        for (i, r) in raw.iter_mut().enumerate() {
            *r += excess * sign * -ptdf.factor(l, i);
        }
    }
    raw
}

/// composite = beta x carbon + (1 - beta) x stress, per period.
pub fn stability_signal(
    stress: &[StressState],
    carbon: &SignalSeries,
    ptdf: &[&PtdfMatrix],
    beta: &[f64],
) -> Result<SignalSeries> {
    let n = carbon.horizon();
    if stress.len() != n || ptdf.len() != n || beta.len() != n {
        return Err(Error::LengthMismatch {
            what: "stability signal inputs".into(),
            expected: n,
            found: stress.len().min(ptdf.len()).min(beta.len()),
        });
    }
    let mut out = carbon.clone();
    out.kind = MetricKind::Composite;
    out.provenance = format!("stability blend of {}", carbon.provenance);
    for t in 0..n {
        let b = beta[t];
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::Invalid(format!("beta {b} outside [0, 1]")));
        }
        if b == 1.0 {
            continue;
        }
        if ptdf[t].bus_ids != carbon.bus_ids {
            return Err(Error::Invalid("signal and network buses differ".into()));
        }
        let raw = stress_scores(&stress[t], ptdf[t]);
        let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), &v| (a.min(v), c.max(v)));
        let (clo, chi) = carbon.range(t);
        let scale = if chi > clo {
            chi - clo
        } else if chi > 0.0 {
            chi
        } else {
            1.0
        };
        for i in 0..raw.len() {
            let s = if hi > lo { (raw[i] - lo) / (hi - lo) * scale } else { 0.0 };
            out.values[t][i] = b * carbon.values[t][i] + (1.0 - b) * s;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContingencyKind {
    LineOutage,
    GeneratorOutage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contingency {
    pub kind: ContingencyKind,
    pub element: u32,
    #[serde(default)]
    pub start: usize,
    /// Periods; 0 means until the end of the horizon.
    #[serde(default)]
    pub duration: usize,
}

impl Contingency {
    pub fn active(&self, t: usize, horizon: usize) -> bool {
        let end = if self.duration == 0 { horizon } else { self.start + self.duration };
        t >= self.start && t < end
    }

    /// The case with the element removed.
    pub fn apply(&self, case: &GridCase) -> Result<GridCase> {
        let end = if self.duration == 0 { case.horizon() } else { self.start + self.duration };
        if self.start >= case.horizon() || end > case.horizon() {
            return Err(Error::Invalid(format!(
                "contingency window {}..{end} outside horizon {}",
                self.start,
                case.horizon()
            )));
        }
        match self.kind {
            ContingencyKind::LineOutage => {
                if !case.lines.iter().any(|l| l.id == self.element) {
                    return Err(Error::Invalid(format!("no line {}", self.element)));
                }
                Ok(case.without_line(self.element))
            }
            ContingencyKind::GeneratorOutage => {
                let mut c = case.clone();
                let g = c
                    .generators
                    .iter_mut()
                    .find(|g| g.id == self.element)
                    .ok_or_else(|| Error::Invalid(format!("no generator {}", self.element)))?;
                g.p_min = 0.0;
                g.p_max = 0.0;
                Ok(c)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmergencyParams {
    pub thresholds: StressThresholds,
    /// Carbon metric blended into the composite.
    pub metric: MetricKind,
    /// Response step; emergencies apply responses in full by default.
    pub alpha: f64,
    pub max_rounds: usize,
    /// Calm rounds run after relief, each rejected if it re-creates stress.
    pub recovery_rounds: usize,
    /// Fixed beta overriding the stress-driven default.
    pub beta: Option<f64>,
    /// Defer, then shed, deferrable load still causing overloads.
    pub allow_shedding: bool,
}

impl Default for EmergencyParams {
    fn default() -> Self {
        EmergencyParams {
            thresholds: StressThresholds::default(),
            metric: MetricKind::Ftci,
            alpha: 1.0,
            max_rounds: 10,
            recovery_rounds: 3,
            beta: None,
            allow_shedding: false,
        }
    }
}

impl EmergencyParams {
    pub fn from_loop(p: &LoopParams) -> Self {
        EmergencyParams {
            metric: p.metric,
            ..EmergencyParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShedRecord {
    pub job: JobId,
    pub data_center: String,
    pub period: usize,
    pub site: BusId,
    /// MWh moved past the deadline to a calm period.
    pub deferred_mwh: f64,
    pub deferred_to: Option<usize>,
    pub shed_mwh: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeRound {
    pub round: usize,
    pub beta: Vec<f64>,
    pub signal: SignalSeries,
    /// Post-update stress per period.
    pub stress: Vec<StressState>,
    pub emissions: f64,
    /// Reverted because it re-created stress.
    pub rejected: bool,
    pub recovery: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub pre: Vec<StressState>,
    /// Stress right after the contingency, before any response.
    pub initial: Vec<StressState>,
    pub rounds: Vec<EpisodeRound>,
    pub relief: bool,
    pub rounds_to_relief: Option<usize>,
    /// MW above limit on the worst line, after the episode.
    pub residual_overload: f64,
    pub shed_mwh: f64,
    pub shed_log: Vec<ShedRecord>,
    pub baseline_emissions: f64,
    pub emissions: f64,
    pub schedules: Vec<Schedule>,
}

impl EpisodeResult {
    /// Columns: round, period, line, loading, flow_MW, stressed, reserve_margin.
    pub fn stress_csv(&self) -> String {
        let mut s = String::from("round,period,line,loading,flow_MW,stressed,reserve_margin\n");
        let mut emit = |label: &str, states: &[StressState]| {
            for (t, st) in states.iter().enumerate() {
                for (i, id) in st.line_ids.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "{label},{t},{id},{},{},{},{}",
                        st.loading[i], st.flows[i], st.stressed as u8, st.reserve_margin
                    );
                }
            }
        };
        emit("pre", &self.pre);
        emit("0", &self.initial);
        for r in &self.rounds {
            emit(&r.round.to_string(), &r.stress);
        }
        let _ = writeln!(
            s,
            "# relief={} rounds={} shed_MWh={}",
            self.relief,
            self.rounds_to_relief.map_or("none".to_string(), |r| r.to_string()),
            self.shed_mwh
        );
        s
    }

    /// Columns: job, data_center, period, site, deferred_MWh, deferred_to, shed_MWh.
    pub fn shed_csv(&self) -> String {
        let mut s = String::from("job,data_center,period,site,deferred_MWh,deferred_to,shed_MWh\n");
        for r in &self.shed_log {
            let to = r.deferred_to.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{to},{}",
                r.job, r.data_center, r.period, r.site, r.deferred_mwh, r.shed_mwh
            );
        }
        s
    }
}

struct Topology {
    pre: GridCase,
    post: GridCase,
    ptdf_pre: PtdfMatrix,
    ptdf_post: PtdfMatrix,
    active: Vec<bool>,
}

impl Topology {
    fn case(&self, t: usize) -> &GridCase {
        if self.active[t] {
            &self.post
        } else {
            &self.pre
        }
    }

    fn ptdf(&self, t: usize) -> &PtdfMatrix {
        if self.active[t] {
            &self.ptdf_post
        } else {
            &self.ptdf_pre
        }
    }
}

struct Snapshot {
    stress: Vec<StressState>,
    signal: SignalSeries,
    emissions: f64,
}

const LIMIT_FREE: OpfOptions = OpfOptions {
    enforce_line_limits: false,
    objective: crate::dispatch::Objective::Cost,
};

fn limit_free(case: &GridCase, ptdf: &PtdfMatrix, loads: &crate::grid::BusLoads) -> Result<DispatchResult> {
    let periods: Vec<PeriodDispatch> = (0..case.horizon())
        .map(|t| solve_period(case, ptdf, loads.period(t), t, LIMIT_FREE))
        .collect();
    if let Some((t, p)) = periods.iter().enumerate().find(|(_, p)| !p.is_optimal()) {
        return Err(Error::Infeasible(format!(
            "limit-free dispatch in period {t}: {}",
            p.violated.join(", ")
        )));
    }
    Ok(DispatchResult {
        gen_ids: case.generators.iter().map(|g| g.id).collect(),
        line_ids: case.lines.iter().map(|l| l.id).collect(),
        bus_ids: case.bus_ids(),
        periods,
    })
}

fn snapshot(topo: &Topology, flex: &FlexLoads, schedules: &[Schedule], params: &EmergencyParams) -> Result<Snapshot> {
    let n = topo.pre.horizon();
    let h = topo.pre.period_hours();
    let mut per_case = Vec::new();
    for (case, ptdf) in [(&topo.pre, &topo.ptdf_pre), (&topo.post, &topo.ptdf_post)] {
        let mat = materialize(case, flex, schedules)?;
        let loads = mat.bus_loads();
        let d = limit_free(&mat, ptdf, &loads)?;
        let sig = compute_metric(&mat, &d, params.metric, Default::default())?;
        per_case.push((mat, d, sig));
    }
    let mut signal = per_case[0].2.clone();
    let mut stress = Vec::with_capacity(n);
    let mut emissions = 0.0;
    for t in 0..n {
        let k = usize::from(topo.active[t]);
        let (mat, d, sig) = &per_case[k];
        let p = &d.periods[t];
        stress.push(detect_stress(mat, &p.flows, p.bus_load.iter().sum(), &params.thresholds));
        signal.values[t] = sig.values[t].clone();
        signal.flags[t] = sig.flags[t].clone();
        emissions += p.emission_rate(mat, t) * h;
    }
    Ok(Snapshot {
        stress,
        signal,
        emissions,
    })
}

fn any_overload(stress: &[StressState]) -> bool {
    stress.iter().any(|s| s.overloaded().next().is_some())
}

fn any_stress(stress: &[StressState]) -> bool {
    stress.iter().any(|s| s.stressed)
}

fn residual(topo: &Topology, stress: &[StressState]) -> f64 {
    stress
        .iter()
        .enumerate()
        .map(|(t, s)| s.residual_overload(topo.case(t)))
        .fold(0.0, f64::max)
}

pub fn run_emergency(
    case: &GridCase,
    flex: &FlexLoads,
    contingency: &Contingency,
    params: &EmergencyParams,
) -> Result<EpisodeResult> {
    flex.check(case)?;
    if !(params.alpha > 0.0 && params.alpha <= 1.0) {
        return Err(Error::Invalid(format!("alpha {} outside (0, 1]", params.alpha)));
    }
    let post = contingency.apply(case)?;
    let topo = Topology {
        ptdf_pre: build_ptdf(case)?,
        ptdf_post: build_ptdf(&post)?,
        active: (0..case.horizon()).map(|t| contingency.active(t, case.horizon())).collect(),
        pre: case.clone(),
        post,
    };
    let time = &case.time;
    let baseline: Vec<Schedule> = flex
        .data_centers
        .iter()
        .map(|dc| baseline_schedule(&dc.jobs, time))
        .collect::<Result<_>>()?;

    let calm = Topology {
        active: vec![false; case.horizon()],
        pre: topo.pre.clone(),
        post: topo.pre.clone(),
        ptdf_pre: topo.ptdf_pre.clone(),
        ptdf_post: topo.ptdf_pre.clone(),
    };
    let pre = snapshot(&calm, flex, &baseline, params)?;
    let mut snap = snapshot(&topo, flex, &baseline, params)?;
    let initial = snap.stress.clone();
    let baseline_emissions = snap.emissions;
    let mut schedules = baseline;
    let mut rounds = Vec::new();
    let mut rounds_to_relief = (!any_overload(&snap.stress)).then_some(0);

    let mut r = 0;
    while rounds_to_relief.is_none() && r < params.max_rounds {
        r += 1;
        let beta: Vec<f64> = snap
            .stress
            .iter()
            .map(|s| params.beta.unwrap_or_else(|| default_beta(s)))
            .collect();
        let ptdfs: Vec<&PtdfMatrix> = (0..case.horizon()).map(|t| topo.ptdf(t)).collect();
        let signal = stability_signal(&snap.stress, &snap.signal, &ptdfs, &beta)?;
        let mut next = schedules.clone();
        for (i, dc) in flex.data_centers.iter().enumerate() {
            let resp = respond(&dc.jobs, &signal, time, Default::default())?;
            next[i] = resp.blend(&schedules[i], params.alpha);
        }
        let moved = next.iter().zip(&schedules).map(|(a, b)| a.max_diff(b)).fold(0.0, f64::max);
        schedules = next;
        snap = snapshot(&topo, flex, &schedules, params)?;
        rounds.push(EpisodeRound {
            round: r,
            beta,
            signal,
            stress: snap.stress.clone(),
            emissions: snap.emissions,
            rejected: false,
            recovery: false,
        });
        if !any_overload(&snap.stress) {
            rounds_to_relief = Some(r);
        } else if moved <= 1e-9 {
            break;
        }
    }

    // Return to green: calm rounds that keep the grid unstressed.
    if rounds_to_relief.is_some_and(|x| x > 0) {
        for _ in 0..params.recovery_rounds {
            r += 1;
            let beta = vec![1.0; case.horizon()];
            let mut next = schedules.clone();
            for (i, dc) in flex.data_centers.iter().enumerate() {
                let resp = respond(&dc.jobs, &snap.signal, time, Default::default())?;
                next[i] = resp.blend(&schedules[i], params.alpha);
            }
            let moved = next.iter().zip(&schedules).map(|(a, b)| a.max_diff(b)).fold(0.0, f64::max);
            if moved <= 1e-9 {
                break;
            }
            let trial = snapshot(&topo, flex, &next, params)?;
            let rejected = any_stress(&trial.stress) && !any_stress(&snap.stress) || any_overload(&trial.stress);
            rounds.push(EpisodeRound {
                round: r,
                beta,
                signal: snap.signal.clone(),
                stress: trial.stress.clone(),
                emissions: trial.emissions,
                rejected,
                recovery: true,
            });
            if rejected {
                break;
            }
            schedules = next;
            snap = trial;
        }
    }

    let mut shed_log = Vec::new();
    if params.allow_shedding && any_overload(&snap.stress) {
        shed_log = shed(&topo, flex, &mut schedules, params)?;
        snap = snapshot(&topo, flex, &schedules, params)?;
    }
    let shed_mwh = shed_log.iter().map(|s| s.shed_mwh).fold(0.0, |a, b| a + b);
    Ok(EpisodeResult {
        pre: pre.stress,
        initial,
        relief: !any_overload(&snap.stress),
        rounds_to_relief,
        residual_overload: residual(&topo, &snap.stress),
        rounds,
        shed_mwh,
        shed_log,
        baseline_emissions,
        emissions: snap.emissions,
        schedules,
    })
}

/// Defers, then sheds, deferrable allocations at buses that worsen an
/// overload. Jobs are visited by id; energy is logged per job.
fn shed(
    topo: &Topology,
    flex: &FlexLoads,
    schedules: &mut [Schedule],
    params: &EmergencyParams,
) -> Result<Vec<ShedRecord>> {
    let n = topo.pre.horizon();
    let h = topo.pre.period_hours();
    let mut log = Vec::new();
    let mut owner: BTreeMap<JobId, (usize, &crate::flexload::ComputeJob)> = BTreeMap::new();
    for (d, dc) in flex.data_centers.iter().enumerate() {
        for j in dc.jobs.iter().filter(|j| j.is_deferrable()) {
            owner.insert(j.id, (d, j));
        }
    }
    for t in 0..n {
        loop {
            let snap = snapshot(topo, flex, schedules, params)?;
            let st = &snap.stress[t];
            let Some(l) = st.overloaded().next() else { break };
            let excess = st.flows[l].abs() - topo.case(t).lines[l].flow_limit;
            let sign = st.flows[l].signum();
            let ptdf = topo.ptdf(t);
            // Best candidate: largest relief per MW, then lowest job id.
            let mut best: Option<(f64, JobId, BusId)> = None;
            for (&jid, &(d, _)) in &owner {
                for (&site, mw) in &schedules[d].allocations[&jid] {
                    if mw[t] <= 1e-9 {
                        continue;
                    }
                    let b = topo.pre.bus_index(site).expect("site validated");
                    let relief = sign * -ptdf.factor(l, b);
                    if relief > 1e-9 && best.is_none_or(|(r, ..)| relief > r + 1e-12) {
                        best = Some((relief, jid, site));
                    }
                }
            }
            let Some((relief, jid, site)) = best else { break };
            let (d, job) = owner[&jid];
            let avail = schedules[d].allocations[&jid][&site][t];
            let cut = avail.min(excess / relief + 1e-9);
            let calm_later = (t + 1..n).find(|&u| {
                !snap.stress[u].stressed
                    && schedules[d].allocations[&jid].values().map(|m| m[u]).sum::<f64>() + cut <= job.power_cap + 1e-9
            });
            let alloc = schedules[d].allocations.get_mut(&jid).unwrap();
            alloc.get_mut(&site).unwrap()[t] -= cut;
            let mut rec = ShedRecord {
                job: jid,
                data_center: flex.data_centers[d].id.clone(),
                period: t,
                site,
                deferred_mwh: 0.0,
                deferred_to: None,
                shed_mwh: 0.0,
            };
            let mut deferred = false;
            if let Some(u) = calm_later {
                alloc.get_mut(&site).unwrap()[u] += cut;
                schedules[d].recompute_power();
                let trial = snapshot(topo, flex, schedules, params)?;
                if trial.stress[u].stressed {
                    let alloc = schedules[d].allocations.get_mut(&jid).unwrap();
                    alloc.get_mut(&site).unwrap()[u] -= cut;
                } else {
                    rec.deferred_mwh = cut * h;
                    rec.deferred_to = Some(u);
                    deferred = true;
                }
            }
            if !deferred {
                rec.shed_mwh = cut * h;
            }
            schedules[d].recompute_power();
            log.push(rec);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flexload::{ComputeJob, Criticality, DataCenter};
    use crate::grid::fixtures::*;
    use crate::grid::TimeGrid;
    use approx::assert_abs_diff_eq;

    /// Three buses; losing 1-2 forces bus 2's supply through the 100 MW
    /// line 3-2.
    fn toy() -> GridCase {
        GridCase {
            name: "outage_toy".into(),
            buses: vec![bus(1), bus(2), bus(3)],
            lines: vec![
                line(1, 1, 2, 0.1, 200.0),
                line(2, 1, 3, 0.1, 200.0),
                line(3, 3, 2, 0.1, 100.0),
            ],
            generators: vec![gen(1, 1, 500.0, 10.0, 0.5), gen(2, 3, 200.0, 40.0, 0.6)],
            loads: vec![load(1, 2, &[70.0, 70.0]), load(2, 3, &[50.0, 50.0])],
            slack_bus: 1,
            time: TimeGrid::hourly(2),
        }
    }

    /// 40 MW at bus 2 per period, `flexible` MW of it migratable to bus 3.
    fn dc(flexible: f64) -> FlexLoads {
        let mut jobs = Vec::new();
        for t in 0..2 {
            let id = 10 * t as u32;
            jobs.push(ComputeJob {
                id: id + 1,
                home_site: 2,
                release: t,
                deadline: t,
                energy: 40.0 - flexible,
                power_cap: 40.0,
                divisible: true,
                migratable_sites: Default::default(),
                criticality: Criticality::Critical,
            });
            jobs.push(ComputeJob {
                id: id + 2,
                home_site: 2,
                release: t,
                deadline: t,
                energy: flexible,
                power_cap: 40.0,
                divisible: true,
                migratable_sites: [2, 3].into(),
                criticality: Criticality::Deferrable,
            });
        }
        FlexLoads {
            data_centers: vec![DataCenter { id: "a".into(), jobs }],
        }
    }

    fn outage() -> Contingency {
        Contingency {
            kind: ContingencyKind::LineOutage,
            element: 1,
            start: 0,
            duration: 0,
        }
    }

    #[test]
    fn stress_examples() {
        let c = two_bus();
        let th = StressThresholds::default();
        let s = detect_stress(&c, &[40.0], 100.0, &StressThresholds { reserve: 0.05, ..th });
        assert!(!s.stressed);
        let s = detect_stress(&c, &[88.0], 120.0, &th);
        assert!(s.stressed);
        assert_eq!(s.binding, vec![1]);
        let s = detect_stress(&c, &[40.0], 245.0, &th);
        assert!(s.reserve_margin < 0.05 && s.stressed && s.binding.is_empty());
    }

    #[test]
    fn beta_one_is_carbon_exactly() {
        let c = two_bus();
        let ptdf = build_ptdf(&c).unwrap();
        let st = detect_stress(&c, &[88.0], 120.0, &StressThresholds::default());
        let mut carbon = SignalSeries::new(MetricKind::Ftci, c.bus_ids(), 1, "x");
        carbon.values[0] = vec![0.2, 0.4333];
        let out = stability_signal(std::slice::from_ref(&st), &carbon, &[&ptdf], &[1.0]).unwrap();
        assert_eq!(out.values, carbon.values);
        let out = stability_signal(&[st], &carbon, &[&ptdf], &[0.1]).unwrap();
        assert!(out.values[0][1] > out.values[0][0]);
    }

    #[test]
    fn no_overload_means_no_stress_term() {
        let c = two_bus();
        let ptdf = build_ptdf(&c).unwrap();
        let st = detect_stress(&c, &[40.0], 120.0, &StressThresholds::default());
        let mut carbon = SignalSeries::new(MetricKind::Ftci, c.bus_ids(), 1, "x");
        carbon.values[0] = vec![0.2, 0.6];
        let out = stability_signal(&[st], &carbon, &[&ptdf], &[0.1]).unwrap();
        assert_abs_diff_eq!(out.values[0][0], 0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(out.values[0][1], 0.06, epsilon = 1e-15);
    }

    #[test]
    fn outage_overloads_import_path_by_ten_percent() {
        let r = run_emergency(&toy(), &dc(0.0), &outage(), &EmergencyParams::default()).unwrap();
        let l3 = &r.initial[0];
        assert_abs_diff_eq!(l3.loading[2], 1.1, epsilon = 1e-9);
        assert!(r.pre.iter().all(|s| s.max_loading() < 1.0));
    }

    #[test]
    fn sufficient_flexibility_relieves() {
        let r = run_emergency(&toy(), &dc(40.0), &outage(), &EmergencyParams::default()).unwrap();
        assert!(r.relief);
        assert!(r.rounds_to_relief.unwrap() <= 3);
        let last = r.rounds.iter().rev().find(|x| !x.rejected).unwrap();
        assert!(last.stress.iter().all(|s| s.max_loading() <= 1.0));
    }

    #[test]
    fn insufficient_flexibility_leaves_residual() {
        let r = run_emergency(&toy(), &dc(5.0), &outage(), &EmergencyParams::default()).unwrap();
        assert!(!r.relief);
        assert_abs_diff_eq!(r.residual_overload, 10.0 - 5.0, epsilon = 1e-6);
    }

    #[test]
    fn unloaded_line_outage_needs_no_rounds() {
        let mut c = toy();
        c.lines.push(line(4, 1, 3, 0.1, 500.0));
        c.lines[3].reactance = 1e3;
        let cont = Contingency { element: 4, ..outage() };
        let r = run_emergency(&c, &dc(40.0), &cont, &EmergencyParams::default()).unwrap();
        assert_eq!(r.rounds_to_relief, Some(0));
        assert!(r.rounds.is_empty());
        assert_eq!(r.schedules[0], baseline_schedule(&dc(40.0).data_centers[0].jobs, &c.time).unwrap());
    }

    #[test]
    fn more_flexibility_never_slows_relief() {
        let mut last = 0;
        for f in [10.0, 15.0, 20.0, 30.0, 40.0] {
            let r = run_emergency(&toy(), &dc(f), &outage(), &EmergencyParams::default()).unwrap();
            let n = r.rounds_to_relief.unwrap_or(usize::MAX);
            if last > 0 {
                assert!(n <= last);
            }
            last = n;
        }
    }

    fn home_only_dc() -> FlexLoads {
        let jobs = (0..2)
            .map(|t| ComputeJob {
                id: t as u32 + 1,
                home_site: 2,
                release: t,
                deadline: t,
                energy: 40.0,
                power_cap: 40.0,
                divisible: true,
                migratable_sites: Default::default(),
                criticality: Criticality::Deferrable,
            })
            .collect();
        FlexLoads {
            data_centers: vec![DataCenter { id: "a".into(), jobs }],
        }
    }

    #[test]
    fn shedding_defers_before_dropping() {
        let p = EmergencyParams {
            allow_shedding: true,
            ..EmergencyParams::default()
        };
        let f = home_only_dc();
        let r = run_emergency(&toy(), &f, &outage(), &p).unwrap();
        assert!(r.relief);
        assert_abs_diff_eq!(r.shed_mwh, 20.0, epsilon = 1e-6);

        let brief = Contingency { duration: 1, ..outage() };
        let r = run_emergency(&toy(), &f, &brief, &p).unwrap();
        assert!(r.relief);
        assert_eq!(r.shed_mwh, 0.0);
        assert_eq!(r.shed_log[0].deferred_to, Some(1));
        assert_abs_diff_eq!(r.shed_log[0].deferred_mwh, 10.0, epsilon = 1e-6);
    }

    #[test]
    fn shedding_accounts_for_every_mwh() {
        let p = EmergencyParams {
            allow_shedding: true,
            ..EmergencyParams::default()
        };
        let f = home_only_dc();
        let r = run_emergency(&toy(), &f, &outage(), &p).unwrap();
        let delivered: f64 = f.data_centers[0]
            .jobs
            .iter()
            .map(|j| r.schedules[0].job_energy(j.id))
            .sum();
        let baseline: f64 = f.data_centers[0].jobs.iter().map(|j| j.energy).sum();
        assert_abs_diff_eq!(delivered + r.shed_mwh, baseline, epsilon = 1e-9);
    }
}
