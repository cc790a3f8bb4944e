//! Scenario files driving reproducible runs and their artifact trees.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coordination::{
    learn_models, one_shot, run_iterative, solve_integrated, system_emissions, IntegratedOptions, LoopParams,
};
use crate::dispatch::{solve_dc_opf, DispatchResult};
use crate::error::{Error, Result};
use crate::flexload::{baseline_schedule, materialize, schedule_report, FlexLoads, Schedule};
use crate::grid::{BusLoads, GridCase};
use crate::io::{
    apply_profile, fetch_external_signal, import_matpower, load_case_file, load_flexloads, load_profiles, read_text,
    EndpointConfig, ProfileKind,
};
use crate::resilience::{run_emergency, Contingency, EmergencyParams};
use crate::signals::{compute_metrics, FtciMode, MetricKind, SignalFlags, SignalSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dispatch,
    Signals,
    Coordinate,
    Plan,
    Resilience,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Dispatch => "dispatch",
            Mode::Signals => "signals",
            Mode::Coordinate => "coordinate",
            Mode::Plan => "plan",
            Mode::Resilience => "resilience",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRef {
    pub path: PathBuf,
    pub kind: ProfileKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalRef {
    pub endpoint: EndpointConfig,
    pub zone: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanParams {
    pub kappa: f64,
    pub probes: usize,
    pub max_migration_fraction: f64,
}

impl Default for PlanParams {
    fn default() -> Self {
        PlanParams {
            kappa: 1.0,
            probes: 12,
            max_migration_fraction: 1.0,
        }
    }
}

/// Paths are relative to the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Native JSON, or MATPOWER when the extension is `.m`.
    pub case: PathBuf,
    /// Repeats single-period loads over this many periods before profiles apply.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub profiles: Vec<ProfileRef>,
    #[serde(default)]
    pub flexloads: Option<PathBuf>,
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub metric: Option<MetricKind>,
    #[serde(default)]
    pub ftci_mode: FtciMode,
    #[serde(default, rename = "loop")]
    pub loop_params: LoopParams,
    #[serde(default)]
    pub plan: PlanParams,
    #[serde(default)]
    pub emergency: EmergencyParams,
    #[serde(default)]
    pub contingency: Option<Contingency>,
    #[serde(default)]
    pub external: Option<ExternalRef>,
    /// Output directory, relative to the scenario file.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl Scenario {
    pub fn from_file(path: &Path) -> Result<(Scenario, PathBuf)> {
        let sc: Scenario = crate::io::parse_json(&read_text(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((sc, base))
    }

    /// Referenced paths exist and the mode has what it needs.
    pub fn check(&self, base: &Path) -> Result<()> {
        let mut paths = vec![&self.case];
        paths.extend(self.profiles.iter().map(|p| &p.path));
        paths.extend(self.flexloads.iter());
        paths.extend(self.external.iter().filter_map(|e| e.endpoint.fixture.as_ref()));
        for p in paths {
            let full = base.join(p);
            if !full.is_file() {
                return Err(Error::io(full, std::io::ErrorKind::NotFound.into()));
            }
        }
        match self.mode {
            Mode::Coordinate | Mode::Plan | Mode::Resilience if self.flexloads.is_none() => {
                return Err(Error::Invalid(format!("mode {} needs flexloads", self.mode.as_str())));
            }
            Mode::Resilience if self.contingency.is_none() => {
                return Err(Error::Invalid("mode resilience needs a contingency".into()));
            }
            _ => {}
        }
        self.params().check()
    }

    /// Loop parameters with the scenario seed and metric applied.
    pub fn params(&self) -> LoopParams {
        LoopParams {
            rng_seed: self.seed,
            metric: self.metric.unwrap_or(self.loop_params.metric),
            ftci_mode: self.ftci_mode,
            ..self.loop_params
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emissions_tco2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_emissions_tco2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emissions_delta_tco2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub one_shot_emissions_tco2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub integrated_emissions_tco2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adopted: Option<bool>,
    /// integrated <= iterative <= baseline, each to 1e-6.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ordering_holds: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relief: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds_to_relief: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_overload_mw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shed_mwh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub horizon: usize,
    pub totals: Totals,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub summary: Summary,
    /// File name to contents, including `summary.json`.
    pub artifacts: BTreeMap<String, String>,
}

impl RunOutput {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for (name, body) in &self.artifacts {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: MetricKind,
    /// |sum L*signal - E| / E over the horizon.
    pub residual: f64,
    /// Largest per-period max - min across buses.
    pub spread: f64,
    pub degenerate: usize,
}

/// Conservation and locational diagnostics per metric.
pub fn emit_comparison(signals: &[&SignalSeries], loads: &BusLoads, emissions: &[f64]) -> Result<Vec<ComparisonRow>> {
    let horizon = emissions.len();
    if loads.horizon() != horizon {
        return Err(Error::LengthMismatch {
            what: "comparison loads".into(),
            expected: horizon,
            found: loads.horizon(),
        });
    }
    let e_total: f64 = emissions.iter().sum();
    let mut rows = Vec::new();
    for s in signals {
        if s.horizon() != horizon {
            return Err(Error::LengthMismatch {
                what: format!("{} horizon", s.kind),
                expected: horizon,
                found: s.horizon(),
            });
        }
        if s.bus_ids.len() != loads.period(0).len() {
            return Err(Error::LengthMismatch {
                what: format!("{} buses", s.kind),
                expected: loads.period(0).len(),
                found: s.bus_ids.len(),
            });
        }
        let mut accounted = 0.0;
        let mut spread: f64 = 0.0;
        for t in 0..horizon {
            accounted += loads.period(t).iter().zip(&s.values[t]).map(|(l, v)| l * v).sum::<f64>();
            let (lo, hi) = s.range(t);
            spread = spread.max(hi - lo);
        }
        let residual = if e_total > 0.0 {
            (accounted - e_total).abs() / e_total
        } else {
            accounted.abs()
        };
        rows.push(ComparisonRow {
            metric: s.kind,
            residual,
            spread,
            degenerate: s.flag_count(SignalFlags::DEGENERATE),
        });
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("metric,residual,spread,degenerate\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.metric, r.residual, r.spread, r.degenerate);
    }
    s
}

fn load_case_any(path: &Path) -> Result<GridCase> {
    if path.extension().is_some_and(|e| e == "m") {
        Ok(import_matpower(&read_text(path)?)?.case)
    } else {
        load_case_file(path)
    }
}

fn extend_horizon(case: &mut GridCase, horizon: usize) -> Result<()> {
    if case.horizon() == horizon {
        return Ok(());
    }
    if case.horizon() != 1 {
        return Err(Error::LengthMismatch {
            what: "case horizon".into(),
            expected: 1,
            found: case.horizon(),
        });
    }
    for l in &mut case.loads {
        l.baseline = vec![l.baseline[0]; horizon];
    }
    for g in &mut case.generators {
        if let Some(p) = &mut g.emission_profile {
            *p = vec![p[0]; horizon];
        }
    }
    case.time.horizon = horizon;
    Ok(())
}

/// Case with profiles applied, and the flexible loads if any.
pub fn prepare(scenario: &Scenario, base: &Path) -> Result<(GridCase, FlexLoads)> {
    let mut case = load_case_any(&base.join(&scenario.case))?;
    if let Some(h) = scenario.horizon {
        extend_horizon(&mut case, h)?;
    }
    for p in &scenario.profiles {
        let table = load_profiles(&read_text(&base.join(&p.path))?, p.kind, case.horizon())?;
        apply_profile(&mut case, &table)?;
    }
    let flex = match &scenario.flexloads {
        Some(p) => load_flexloads(&read_text(&base.join(p))?)?,
        None => FlexLoads::none(),
    };
    flex.check(&case)?;
    Ok((case, flex))
}

fn checked_dispatch(case: &GridCase) -> Result<DispatchResult> {
    let d = solve_dc_opf(case, &case.bus_loads())?;
    if let Some((t, p)) = d.first_failure() {
        return Err(Error::Infeasible(format!("period {t}: {:?}", p.status)));
    }
    Ok(d)
}

fn baselines(case: &GridCase, flex: &FlexLoads) -> Result<Vec<Schedule>> {
    flex.data_centers.iter().map(|dc| baseline_schedule(&dc.jobs, &case.time)).collect()
}

fn schedule_artifacts(
    out: &mut BTreeMap<String, String>,
    prefix: &str,
    flex: &FlexLoads,
    schedules: &[Schedule],
    signal: &SignalSeries,
) -> Result<()> {
    for (dc, s) in flex.data_centers.iter().zip(schedules) {
        out.insert(format!("{prefix}_{}.csv", dc.id), schedule_report(s, signal)?.to_csv());
    }
    Ok(())
}

fn rows(name: &str, body: &str) -> usize {
    let lines = body.lines().filter(|l| !l.starts_with('#')).count();
    if name.ends_with(".csv") {
        lines.saturating_sub(1)
    } else {
        lines
    }
}

fn report(summary: &Summary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", summary.scenario);
    let _ = writeln!(s, "mode: {}", summary.mode);
    let _ = writeln!(s, "seed: {}", summary.seed);
    let _ = writeln!(s, "horizon: {} periods", summary.horizon);
    let t = &summary.totals;
    let f = |v: Option<f64>| v.map(|v| format!("{v:.6}"));
    let lines: [(&str, Option<String>); 13] = [
        ("emissions (tCO2)", f(t.emissions_tco2)),
        ("baseline emissions (tCO2)", f(t.baseline_emissions_tco2)),
        ("emissions delta (tCO2)", f(t.emissions_delta_tco2)),
        ("one-shot emissions (tCO2)", f(t.one_shot_emissions_tco2)),
        ("integrated emissions (tCO2)", f(t.integrated_emissions_tco2)),
        ("rounds", t.rounds.map(|v| v.to_string())),
        ("converged", t.converged.map(|v| v.to_string())),
        ("adopted", t.adopted.map(|v| v.to_string())),
        ("ordering holds", t.ordering_holds.map(|v| v.to_string())),
        ("relief", t.relief.map(|v| v.to_string())),
        ("rounds to relief", t.rounds_to_relief.map(|v| v.to_string())),
        ("residual overload (MW)", f(t.residual_overload_mw)),
        ("shed (MWh)", f(t.shed_mwh)),
    ];
    for (k, v) in lines {
        if let Some(v) = v {
            let _ = writeln!(s, "{k}: {v}");
        }
    }
    s.push_str("artifacts:\n");
    for m in &summary.manifest {
        let _ = writeln!(s, "  {} ({} rows) {}", m.name, m.rows, m.sha256);
    }
    s
}

/// Runs the mode pipeline and renders every artifact in memory.
pub fn run_scenario(scenario: &Scenario, base: &Path) -> Result<RunOutput> {
    scenario.check(base)?;
    let (case, flex) = prepare(scenario, base)?;
    let params = scenario.params();
    let mut out = BTreeMap::new();
    let mut totals = Totals::default();
    let base_sched = baselines(&case, &flex)?;
    let planned = materialize(&case, &flex, &base_sched)?;

    match scenario.mode {
        Mode::Dispatch => {
            let d = checked_dispatch(&planned)?;
            totals.emissions_tco2 = Some(system_emissions(&planned, &planned.bus_loads())?.total);
            out.insert("dispatch.csv".into(), d.to_csv());
        }
        Mode::Signals => {
            let d = checked_dispatch(&planned)?;
            let m = compute_metrics(&planned, &d, params.ftci_mode)?;
            let h = planned.period_hours();
            let emissions: Vec<f64> = m.breakdown.periods.iter().map(|p| p.e_total).collect();
            totals.emissions_tco2 = Some(emissions.iter().sum::<f64>() * h);
            let mut all = vec![&m.aci, &m.ftci, &m.lmci, &m.almci];
            for s in &all {
                out.insert(format!("signal_{}.csv", s.kind), s.to_csv());
            }
            let ext;
            if let Some(x) = &scenario.external {
                let mut cfg = x.endpoint.clone();
                cfg.fixture = cfg.fixture.map(|f| base.join(f));
                ext = fetch_external_signal(&cfg, &x.zone, &planned.time, &planned.bus_ids())?;
                out.insert("signal_external.csv".into(), ext.to_csv());
                all.push(&ext);
            }
            let rows = emit_comparison(&all, &planned.bus_loads(), &emissions)?;
            out.insert("comparison.csv".into(), comparison_csv(&rows));
            out.insert("dispatch.csv".into(), d.to_csv());
        }
        Mode::Coordinate | Mode::Plan => {
            let trace = run_iterative(&case, &flex, &params)?;
            let single = one_shot(&case, &flex, &params)?;
            totals.baseline_emissions_tco2 = Some(trace.baseline_emissions);
            totals.emissions_tco2 = Some(trace.final_emissions());
            totals.emissions_delta_tco2 = Some(trace.final_emissions() - trace.baseline_emissions);
            totals.one_shot_emissions_tco2 = Some(single.final_emissions());
            totals.rounds = Some(trace.rounds.len());
            totals.converged = Some(trace.converged());
            totals.adopted = Some(trace.adopted());
            out.insert("loop.csv".into(), trace.summary_csv());
            for i in 0..trace.rounds.len() {
                out.insert(format!("rounds/round_{:03}.csv", trace.rounds[i].round), trace.round_csv(i));
            }
            out.insert("final_dispatch.csv".into(), trace.final_dispatch.to_csv());
            if let Some(last) = trace.rounds.last() {
                schedule_artifacts(&mut out, "schedule", &flex, trace.final_schedules(), &last.signal)?;
            }
            if scenario.mode == Mode::Plan {
                let reference = match &trace.baseline_signal {
                    Some(s) => s.clone(),
                    None => {
                        let d = checked_dispatch(&planned)?;
                        crate::signals::compute_metric(&planned, &d, params.metric, params.ftci_mode)?
                    }
                };
                let p = &scenario.plan;
                let models = learn_models(&case, &flex, &reference, p.probes, scenario.seed, p.max_migration_fraction)?;
                let opts = IntegratedOptions {
                    kappa: p.kappa,
                    metric: params.metric,
                    ftci_mode: params.ftci_mode,
                };
                let plan = solve_integrated(&case, &flex, &models, &opts)?;
                let integrated = plan.total_emissions();
                totals.integrated_emissions_tco2 = Some(integrated);
                totals.ordering_holds = Some(
                    integrated <= trace.final_emissions() + 1e-6
                        && trace.final_emissions() <= trace.baseline_emissions + 1e-6,
                );
                out.insert("plan_targets.csv".into(), plan.targets_csv());
                out.insert("plan_dispatch.csv".into(), plan.dispatch.to_csv());
                out.insert("plan_tariffs.csv".into(), plan.tariffs.to_csv());
            }
        }
        Mode::Resilience => {
            let c = scenario.contingency.expect("checked");
            let ep = EmergencyParams {
                metric: params.metric,
                ..scenario.emergency
            };
            let r = run_emergency(&case, &flex, &c, &ep)?;
            totals.baseline_emissions_tco2 = Some(r.baseline_emissions);
            totals.emissions_tco2 = Some(r.emissions);
            totals.emissions_delta_tco2 = Some(r.emissions - r.baseline_emissions);
            totals.rounds = Some(r.rounds.len());
            totals.relief = Some(r.relief);
            totals.rounds_to_relief = r.rounds_to_relief;
            totals.residual_overload_mw = Some(r.residual_overload);
            totals.shed_mwh = Some(r.shed_mwh);
            out.insert("stress.csv".into(), r.stress_csv());
            if ep.allow_shedding {
                out.insert("shed.csv".into(), r.shed_csv());
            }
            if let Some(last) = r.rounds.last() {
                schedule_artifacts(&mut out, "schedule", &flex, &r.schedules, &last.signal)?;
            }
        }
    }

    let manifest_of = |out: &BTreeMap<String, String>| -> Vec<ManifestEntry> {
        out.iter()
            .map(|(name, body)| ManifestEntry {
                name: name.clone(),
                rows: rows(name, body),
                sha256: hex::encode(Sha256::digest(body.as_bytes())),
            })
            .collect()
    };
    let mut summary = Summary {
        scenario: if scenario.name.is_empty() { case.name.clone() } else { scenario.name.clone() },
        mode: scenario.mode.as_str().into(),
        seed: scenario.seed,
        horizon: case.horizon(),
        totals,
        manifest: manifest_of(&out),
    };
    out.insert("report.txt".into(), report(&summary));
    summary.manifest = manifest_of(&out);
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    out.insert("summary.json".into(), json);
    Ok(RunOutput {
        summary,
        artifacts: out,
    })
}

/// Loads, runs and writes one scenario file; returns the output directory.
pub fn run_scenario_file(path: &Path, out_root: Option<&Path>, seed_override: Option<u64>) -> Result<PathBuf> {
    let (mut sc, base) = Scenario::from_file(path)?;
    if let Some(s) = seed_override {
        sc.seed = s;
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let dir = match (out_root, &sc.output) {
        (Some(root), _) => root.join(&stem),
        (None, Some(o)) => base.join(o),
        (None, None) => base.join("out").join(&stem),
    };
    let run = run_scenario(&sc, &base)?;
    run.write_to(&dir)?;
    Ok(dir)
}
