//! Data centers as flexible compute loads.
//!
//! Each data center owns a set of [`ComputeJob`]s. A [`Schedule`] records
//! per-job, per-site, per-period MW. [`baseline_schedule`] is the
//! earliest-fit reference; [`respond`] minimizes carbon exposure against a
//! published signal.
//!
//! Divisible jobs are independent given a signal (sites carry no capacity
//! limit), so the per-job allocation LP is a fractional knapsack. It is
//! solved exactly by filling the cheapest (period, site) cells first, with
//! ties going to the earlier period, then the home site, then the lower bus
//! id. The result depends only on the ordering of signal values.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BusId, GridCase, LoadPoint, TimeGrid};
use crate::signals::SignalSeries;

pub type JobId = u32;

const ENERGY_TOL: f64 = 1e-6;
const POWER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    Critical,
    #[default]
    Deferrable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeJob {
    pub id: JobId,
    pub home_site: BusId,
    pub release: usize,
    /// Last period the job may run in (inclusive).
    pub deadline: usize,
    /// MWh.
    pub energy: f64,
    /// MW.
    pub power_cap: f64,
    #[serde(default = "default_true")]
    pub divisible: bool,
    /// Empty means home site only.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub migratable_sites: BTreeSet<BusId>,
    #[serde(default)]
    pub criticality: Criticality,
}

fn default_true() -> bool {
    true
}

impl ComputeJob {
    pub fn sites(&self) -> BTreeSet<BusId> {
        let mut s = self.migratable_sites.clone();
        s.insert(self.home_site);
        s
    }

    pub fn window_len(&self) -> usize {
        self.deadline + 1 - self.release
    }

    /// Periods of slack beyond the minimum run length.
    pub fn slack(&self, hours: f64) -> f64 {
        self.window_len() as f64 - self.energy / (self.power_cap * hours)
    }

    pub fn is_deferrable(&self) -> bool {
        self.criticality == Criticality::Deferrable
    }

    fn check(&self, time: &TimeGrid) -> Result<()> {
        let fail = |what: String| Err(Error::Infeasible(format!("job {}: {what}", self.id)));
        if self.release > self.deadline {
            return fail(format!("release {} after deadline {}", self.release, self.deadline));
        }
        if self.deadline >= time.horizon {
            return fail(format!("deadline {} beyond horizon {}", self.deadline, time.horizon));
        }
        if !(self.energy >= 0.0) || !(self.power_cap > 0.0) {
            return fail("energy must be >= 0 and power_cap > 0".into());
        }
        let max = self.power_cap * self.window_len() as f64 * time.period_hours();
        if self.energy > max + ENERGY_TOL {
            return fail(format!("energy {} MWh exceeds cap x window {max} MWh", self.energy));
        }
        if self.criticality == Criticality::Critical && self.sites().len() > 1 {
            return fail("critical jobs cannot migrate".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataCenter {
    pub id: String,
    pub jobs: Vec<ComputeJob>,
}

impl DataCenter {
    pub fn sites(&self) -> BTreeSet<BusId> {
        self.jobs.iter().flat_map(ComputeJob::sites).collect()
    }

    pub fn deferrable_energy(&self) -> f64 {
        self.jobs
            .iter()
            .filter(|j| j.is_deferrable())
            .map(|j| j.energy)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlexLoads {
    pub data_centers: Vec<DataCenter>,
}

impl FlexLoads {
    pub fn none() -> Self {
        FlexLoads::default()
    }

    /// Checks ids, site references and per-job feasibility.
    pub fn check(&self, case: &GridCase) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut dcs = BTreeSet::new();
        for dc in &self.data_centers {
            if !dcs.insert(dc.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate data center {}", dc.id)));
            }
            for j in &dc.jobs {
                if !seen.insert(j.id) {
                    return Err(Error::Invalid(format!("duplicate job id {}", j.id)));
                }
                for s in j.sites() {
                    if case.bus_index(s).is_none() {
                        return Err(Error::Invalid(format!("job {} references missing bus {s}", j.id)));
                    }
                }
                j.check(&case.time)?;
            }
        }
        Ok(())
    }

    /// Peak over periods of total deferrable baseline MW.
    pub fn peak_deferrable(&self, time: &TimeGrid) -> Result<f64> {
        let mut total = vec![0.0; time.horizon];
        for dc in &self.data_centers {
            let jobs: Vec<ComputeJob> = dc.jobs.iter().filter(|j| j.is_deferrable()).cloned().collect();
            let s = baseline_schedule(&jobs, time)?;
            for p in s.power.values() {
                for (t, v) in p.iter().enumerate() {
                    total[t] += v;
                }
            }
        }
        Ok(total.into_iter().fold(0.0, f64::max))
    }
}

/// MW per job, per site, per period.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub horizon: usize,
    pub period_hours: f64,
    pub allocations: BTreeMap<JobId, BTreeMap<BusId, Vec<f64>>>,
    /// Site MW, the sum of allocations.
    pub power: BTreeMap<BusId, Vec<f64>>,
}

impl Schedule {
    pub fn empty(time: &TimeGrid) -> Self {
        Schedule {
            horizon: time.horizon,
            period_hours: time.period_hours(),
            allocations: BTreeMap::new(),
            power: BTreeMap::new(),
        }
    }

    fn set_job(&mut self, job: JobId, alloc: BTreeMap<BusId, Vec<f64>>) {
        self.allocations.insert(job, alloc);
    }

    pub(crate) fn recompute_power(&mut self) {
        let mut power: BTreeMap<BusId, Vec<f64>> = BTreeMap::new();
        for alloc in self.allocations.values() {
            for (site, mw) in alloc {
                let p = power.entry(*site).or_insert_with(|| vec![0.0; self.horizon]);
                for (a, b) in p.iter_mut().zip(mw) {
                    *a += b;
                }
            }
        }
        self.power = power;
    }

    pub fn site_power(&self, site: BusId, period: usize) -> f64 {
        self.power.get(&site).map_or(0.0, |p| p[period])
    }

    pub fn job_energy(&self, job: JobId) -> f64 {
        self.allocations.get(&job).map_or(0.0, |a| {
            a.values().flatten().sum::<f64>() * self.period_hours
        })
    }

    pub fn total_energy(&self) -> f64 {
        self.power.values().flatten().sum::<f64>() * self.period_hours
    }

    /// Carbon exposure sum power x hours x signal, tCO2.
    pub fn exposure(&self, signal: &SignalSeries) -> Result<f64> {
        Ok(schedule_report(self, signal)?.total_tco2)
    }

    /// `alpha * self + (1 - alpha) * other`, job by job.
    pub fn blend(&self, other: &Schedule, alpha: f64) -> Schedule {
        let mut out = Schedule {
            horizon: self.horizon,
            period_hours: self.period_hours,
            allocations: BTreeMap::new(),
            power: BTreeMap::new(),
        };
        let jobs: BTreeSet<JobId> = self.allocations.keys().chain(other.allocations.keys()).copied().collect();
        for j in jobs {
            let mut sites: BTreeMap<BusId, Vec<f64>> = BTreeMap::new();
            for (src, w) in [(self, alpha), (other, 1.0 - alpha)] {
                if w == 0.0 {
                    continue;
                }
                if let Some(a) = src.allocations.get(&j) {
                    for (s, mw) in a {
                        let v = sites.entry(*s).or_insert_with(|| vec![0.0; self.horizon]);
                        for (x, y) in v.iter_mut().zip(mw) {
                            *x += w * y;
                        }
                    }
                }
            }
            out.set_job(j, sites);
        }
        out.recompute_power();
        out
    }

    /// Largest absolute site-power difference.
    pub fn max_diff(&self, other: &Schedule) -> f64 {
        let sites: BTreeSet<BusId> = self.power.keys().chain(other.power.keys()).copied().collect();
        let mut m: f64 = 0.0;
        for s in sites {
            for t in 0..self.horizon {
                m = m.max((self.site_power(s, t) - other.site_power(s, t)).abs());
            }
        }
        m
    }
}

fn fill_earliest(job: &ComputeJob, hours: f64, order: &[(usize, BusId)], horizon: usize) -> BTreeMap<BusId, Vec<f64>> {
    let mut alloc: BTreeMap<BusId, Vec<f64>> = BTreeMap::new();
    let mut remaining = job.energy;
    for &(t, site) in order {
        if remaining <= 0.0 {
            break;
        }
        let p = job.power_cap.min(remaining / hours);
        remaining -= p * hours;
        alloc.entry(site).or_insert_with(|| vec![0.0; horizon])[t] = p;
        if remaining <= ENERGY_TOL * 1e-6 {
            remaining = 0.0;
        }
    }
    if alloc.is_empty() {
        alloc.insert(job.home_site, vec![0.0; horizon]);
    }
    alloc
}

/// Earliest-fit, home-site-only reference schedule.
pub fn baseline_schedule(jobs: &[ComputeJob], time: &TimeGrid) -> Result<Schedule> {
    let mut s = Schedule::empty(time);
    let h = time.period_hours();
    for j in jobs {
        j.check(time)?;
        let order: Vec<(usize, BusId)> = (j.release..=j.deadline).map(|t| (t, j.home_site)).collect();
        s.set_job(j.id, fill_earliest(j, h, &order, time.horizon));
    }
    s.recompute_power();
    Ok(s)
}

fn signal_at(signal: &SignalSeries, t: usize, site: BusId) -> Result<f64> {
    let v = signal
        .value(t, site)
        .ok_or_else(|| Error::Invalid(format!("signal has no value for site {site} period {t}")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Invalid(format!("signal gap at site {site} period {t}")))
    }
}

/// Preference key for a (period, site) cell; smaller is better.
fn cell_key(v: f64, t: usize, site: BusId, home: BusId) -> (f64, usize, bool, BusId) {
    (v, t, site != home, site)
}

fn cmp_key(a: &(f64, usize, bool, BusId), b: &(f64, usize, bool, BusId)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
        .then(a.3.cmp(&b.3))
}

fn respond_divisible(job: &ComputeJob, signal: &SignalSeries, time: &TimeGrid) -> Result<BTreeMap<BusId, Vec<f64>>> {
    let mut cells = Vec::with_capacity(job.window_len());
    for t in job.release..=job.deadline {
        let mut best: Option<(f64, usize, bool, BusId)> = None;
        for site in job.sites() {
            let k = cell_key(signal_at(signal, t, site)?, t, site, job.home_site);
            if best.as_ref().is_none_or(|b| cmp_key(&k, b).is_lt()) {
                best = Some(k);
            }
        }
        cells.extend(best);
    }
    cells.sort_by(cmp_key);
    let order: Vec<(usize, BusId)> = cells.iter().map(|c| (c.1, c.3)).collect();
    Ok(fill_earliest(job, time.period_hours(), &order, time.horizon))
}

/// Contiguous block at full cap, partial last period, single site.
fn respond_indivisible(job: &ComputeJob, signal: &SignalSeries, time: &TimeGrid) -> Result<BTreeMap<BusId, Vec<f64>>> {
    let h = time.period_hours();
    let mut profile = Vec::new();
    let mut remaining = job.energy;
    while remaining > ENERGY_TOL * 1e-6 && profile.len() < job.window_len() {
        let p = job.power_cap.min(remaining / h);
        profile.push(p);
        remaining -= p * h;
    }
    if profile.is_empty() {
        return Ok(BTreeMap::from([(job.home_site, vec![0.0; time.horizon])]));
    }
    let m = profile.len();
    let mut best: Option<(f64, usize, bool, BusId)> = None;
    for start in job.release..=(job.deadline + 1 - m) {
        for site in job.sites() {
            let mut exposure = 0.0;
            for (k, p) in profile.iter().enumerate() {
                exposure += p * h * signal_at(signal, start + k, site)?;
            }
            let key = cell_key(exposure, start, site, job.home_site);
            if best.as_ref().is_none_or(|b| cmp_key(&key, b).is_lt()) {
                best = Some(key);
            }
        }
    }
    let (_, start, _, site) = best.expect("window holds at least one block");
    let mut mw = vec![0.0; time.horizon];
    mw[start..start + m].copy_from_slice(&profile);
    Ok(BTreeMap::from([(site, mw)]))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RespondParams {
    /// Disable migration so only timing changes.
    #[serde(default)]
    pub home_only: bool,
}

/// Exposure-minimizing schedule against a published signal.
pub fn respond(
    jobs: &[ComputeJob],
    signal: &SignalSeries,
    time: &TimeGrid,
    params: RespondParams,
) -> Result<Schedule> {
    if signal.horizon() < time.horizon {
        return Err(Error::LengthMismatch {
            what: "signal horizon".into(),
            expected: time.horizon,
            found: signal.horizon(),
        });
    }
    let h = time.period_hours();
    let mut order: Vec<&ComputeJob> = jobs.iter().collect();
    order.sort_by(|a, b| a.slack(h).total_cmp(&b.slack(h)).then(a.id.cmp(&b.id)));
    let mut s = Schedule::empty(time);
    for j in order {
        j.check(time)?;
        let alloc = if !j.is_deferrable() {
            let order: Vec<(usize, BusId)> = (j.release..=j.deadline).map(|t| (t, j.home_site)).collect();
            fill_earliest(j, h, &order, time.horizon)
        } else {
            let local;
            let job = if params.home_only {
                local = ComputeJob {
                    migratable_sites: BTreeSet::new(),
                    ..j.clone()
                };
                &local
            } else {
                j
            };
            if job.divisible {
                respond_divisible(job, signal, time)?
            } else {
                respond_indivisible(job, signal, time)?
            }
        };
        s.set_job(j.id, alloc);
    }
    s.recompute_power();
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleViolation {
    MissingJob(JobId),
    UnknownJob(JobId),
    EnergyMismatch { job: JobId, expected: f64, found: f64 },
    CapExceeded { job: JobId, period: usize, mw: f64 },
    NegativePower { job: JobId, period: usize },
    OutsideWindow { job: JobId, period: usize },
    Locality { job: JobId, site: BusId },
    SitePowerMismatch { site: BusId, period: usize },
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ScheduleViolation::*;
        match self {
            MissingJob(j) => write!(f, "job {j} missing from schedule"),
            UnknownJob(j) => write!(f, "schedule allocates unknown job {j}"),
            EnergyMismatch { job, expected, found } => {
                write!(f, "job {job} energy {found} MWh, expected {expected} MWh")
            }
            CapExceeded { job, period, mw } => write!(f, "job {job} draws {mw} MW above cap in period {period}"),
            NegativePower { job, period } => write!(f, "job {job} negative power in period {period}"),
            OutsideWindow { job, period } => write!(f, "job {job} runs outside its window in period {period}"),
            Locality { job, site } => write!(f, "job {job} placed at non-migratable site {site}"),
            SitePowerMismatch { site, period } => {
                write!(f, "site {site} power differs from job sum in period {period}")
            }
        }
    }
}

pub fn validate_schedule(jobs: &[ComputeJob], schedule: &Schedule) -> Vec<ScheduleViolation> {
    use ScheduleViolation::*;
    let mut out = Vec::new();
    let known: BTreeSet<JobId> = jobs.iter().map(|j| j.id).collect();
    for id in schedule.allocations.keys() {
        if !known.contains(id) {
            out.push(UnknownJob(*id));
        }
    }
    for j in jobs {
        let Some(alloc) = schedule.allocations.get(&j.id) else {
            out.push(MissingJob(j.id));
            continue;
        };
        let sites = j.sites();
        for (site, mw) in alloc {
            if !sites.contains(site) && mw.iter().any(|&p| p.abs() > POWER_TOL) {
                out.push(Locality { job: j.id, site: *site });
            }
        }
        for t in 0..schedule.horizon {
            let p: f64 = alloc.values().map(|mw| mw[t]).sum();
            if alloc.values().any(|mw| mw[t] < -POWER_TOL) {
                out.push(NegativePower { job: j.id, period: t });
            }
            if p > j.power_cap + POWER_TOL.max(j.power_cap * 1e-12) {
                out.push(CapExceeded { job: j.id, period: t, mw: p });
            }
            if (t < j.release || t > j.deadline) && p.abs() > POWER_TOL {
                out.push(OutsideWindow { job: j.id, period: t });
            }
        }
        let found = schedule.job_energy(j.id);
        if (found - j.energy).abs() > ENERGY_TOL {
            out.push(EnergyMismatch { job: j.id, expected: j.energy, found });
        }
    }
    let mut check = schedule.clone();
    check.recompute_power();
    let sites: BTreeSet<BusId> = check.power.keys().chain(schedule.power.keys()).copied().collect();
    for s in sites {
        for t in 0..schedule.horizon {
            if (check.site_power(s, t) - schedule.site_power(s, t)).abs() > POWER_TOL {
                out.push(SitePowerMismatch { site: s, period: t });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub period: usize,
    pub site: BusId,
    pub power_mw: f64,
    pub intensity: f64,
    pub tco2: f64,
}

/// Time- and location-resolved workload report.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadReport {
    pub rows: Vec<ReportRow>,
    pub site_tco2: BTreeMap<BusId, f64>,
    pub total_tco2: f64,
    pub total_mwh: f64,
}

impl WorkloadReport {
    /// Columns: period, site, power_MW, intensity, tCO2.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("period,site,power_MW,intensity,tCO2\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.period, r.site, r.power_mw, r.intensity, r.tco2);
        }
        s
    }
}

pub fn schedule_report(schedule: &Schedule, signal: &SignalSeries) -> Result<WorkloadReport> {
    if signal.horizon() < schedule.horizon {
        return Err(Error::LengthMismatch {
            what: "signal horizon".into(),
            expected: schedule.horizon,
            found: signal.horizon(),
        });
    }
    let mut rows = Vec::new();
    let mut site_tco2 = BTreeMap::new();
    let mut total = 0.0;
    let mut mwh = 0.0;
    for t in 0..schedule.horizon {
        for (site, p) in &schedule.power {
            let intensity = signal
                .value(t, *site)
                .ok_or_else(|| Error::Invalid(format!("signal has no site {site}")))?;
            let energy = p[t] * schedule.period_hours;
            let tco2 = energy * intensity;
            rows.push(ReportRow {
                period: t,
                site: *site,
                power_mw: p[t],
                intensity,
                tco2,
            });
            *site_tco2.entry(*site).or_insert(0.0) += tco2;
            total += tco2;
            mwh += energy;
        }
    }
    Ok(WorkloadReport {
        rows,
        site_tco2,
        total_tco2: total,
        total_mwh: mwh,
    })
}

/// Per site per period shift bounds relative to the baseline schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseEnvelope {
    pub sites: Vec<BusId>,
    /// `baseline[s][t]`, all jobs including critical ones.
    pub baseline: Vec<Vec<f64>>,
    /// Delta minus, <= 0.
    pub lower: Vec<Vec<f64>>,
    /// Delta plus, >= 0.
    pub upper: Vec<Vec<f64>>,
    /// Inclusive period range over which shifts sum to zero.
    pub window: (usize, usize),
    pub max_migration_fraction: f64,
    pub period_hours: f64,
}

impl ResponseEnvelope {
    pub fn from_jobs(jobs: &[ComputeJob], time: &TimeGrid, max_migration_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&max_migration_fraction) {
            return Err(Error::Invalid(format!(
                "max_migration_fraction {max_migration_fraction} outside [0, 1]"
            )));
        }
        let base = baseline_schedule(jobs, time)?;
        let sites: Vec<BusId> = jobs
            .iter()
            .flat_map(ComputeJob::sites)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let n = time.horizon;
        let mut baseline = vec![vec![0.0; n]; sites.len()];
        let mut lower = vec![vec![0.0; n]; sites.len()];
        let mut caps = vec![vec![0.0; n]; sites.len()];
        let mut flex_base = vec![vec![0.0; n]; sites.len()];
        let mut window: Option<(usize, usize)> = None;
        for j in jobs {
            let alloc = &base.allocations[&j.id];
            for (si, s) in sites.iter().enumerate() {
                if let Some(mw) = alloc.get(s) {
                    for t in 0..n {
                        baseline[si][t] += mw[t];
                        if j.is_deferrable() {
                            flex_base[si][t] += mw[t];
                        }
                    }
                }
            }
            if j.is_deferrable() {
                window = Some(match window {
                    None => (j.release, j.deadline),
                    Some((a, b)) => (a.min(j.release), b.max(j.deadline)),
                });
                for s in j.sites() {
                    let si = sites.binary_search(&s).expect("site collected above");
                    for t in j.release..=j.deadline {
                        caps[si][t] += j.power_cap;
                    }
                }
            }
        }
        let mut upper = vec![vec![0.0; n]; sites.len()];
        for si in 0..sites.len() {
            for t in 0..n {
                lower[si][t] = -flex_base[si][t];
                upper[si][t] = (caps[si][t] - flex_base[si][t]).max(0.0);
            }
        }
        Ok(ResponseEnvelope {
            sites,
            baseline,
            lower,
            upper,
            window: window.unwrap_or((0, 0)),
            max_migration_fraction,
            period_hours: time.period_hours(),
        })
    }

    /// Largest feasible upward/downward aggregate shift in one period.
    pub fn period_range(&self, t: usize) -> (f64, f64) {
        let lo = self.lower.iter().map(|r| r[t]).sum();
        let hi = self.upper.iter().map(|r| r[t]).sum();
        (lo, hi)
    }

    pub fn is_rigid(&self) -> bool {
        self.lower.iter().flatten().all(|&v| v == 0.0) && self.upper.iter().flatten().all(|&v| v == 0.0)
    }
}

/// Adds each data center's site power to the case as extra load points.
pub fn materialize(case: &GridCase, flex: &FlexLoads, schedules: &[Schedule]) -> Result<GridCase> {
    if schedules.len() != flex.data_centers.len() {
        return Err(Error::LengthMismatch {
            what: "data-center schedules".into(),
            expected: flex.data_centers.len(),
            found: schedules.len(),
        });
    }
    let mut out = case.clone();
    let mut next = case.loads.iter().map(|l| l.id).max().map_or(1, |m| m + 1);
    for (dc, s) in flex.data_centers.iter().zip(schedules) {
        for (site, p) in &s.power {
            if case.bus_index(*site).is_none() {
                return Err(Error::Invalid(format!("data center {} uses missing bus {site}", dc.id)));
            }
            let mut baseline = p.clone();
            baseline.resize(case.horizon(), 0.0);
            baseline.iter_mut().for_each(|v| *v = v.max(0.0));
            out.loads.push(LoadPoint {
                id: next,
                bus: *site,
                baseline,
                flexible: Some(dc.id.clone()),
            });
            next += 1;
        }
    }
    Ok(out)
}
