//! Network data model shared by every other module.
//!
//! Units are fixed throughout the crate: MW for power, MWh for energy and
//! tCO2/MWh for intensities. The network is lossless (DC model).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub type BusId = u32;
pub type LineId = u32;
pub type GenId = u32;
pub type LoadId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: BusId,
    #[serde(default)]
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub id: GenId,
    pub bus: BusId,
    pub p_min: f64,
    pub p_max: f64,
    /// Linear cost, money per MWh.
    pub cost: f64,
    /// Direct emission rate, tCO2/MWh.
    pub emission_factor: f64,
    /// Optional per-period override of `emission_factor` (fuel-mix changes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emission_profile: Option<Vec<f64>>,
}

impl Generator {
    pub fn emission_at(&self, period: usize) -> f64 {
        match &self.emission_profile {
            Some(p) => p.get(period).copied().unwrap_or(self.emission_factor),
            None => self.emission_factor,
        }
    }
}

fn default_true() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub id: LineId,
    pub from_bus: BusId,
    pub to_bus: BusId,
    /// Series reactance, per unit.
    pub reactance: f64,
    /// Thermal limit, MW.
    pub flow_limit: f64,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadPoint {
    pub id: LoadId,
    pub bus: BusId,
    /// MW per period.
    pub baseline: Vec<f64>,
    /// Data center whose schedule replaces this meter when flexible loads
    /// are simulated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flexible: Option<String>,
}

pub const SUPPORTED_STEPS: [u32; 5] = [5, 10, 15, 30, 60];

fn default_step() -> u32 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    #[serde(default = "default_step")]
    pub step_minutes: u32,
    pub horizon: usize,
    #[serde(default)]
    pub start_label: String,
}

impl TimeGrid {
    pub fn hourly(horizon: usize) -> Self {
        TimeGrid {
            step_minutes: 60,
            horizon,
            start_label: String::new(),
        }
    }

    pub fn period_hours(&self) -> f64 {
        f64::from(self.step_minutes) / 60.0
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid::hourly(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCase {
    #[serde(default)]
    pub name: String,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub loads: Vec<LoadPoint>,
    pub slack_bus: BusId,
    pub time: TimeGrid,
}

impl GridCase {
    pub fn horizon(&self) -> usize {
        self.time.horizon
    }

    pub fn period_hours(&self) -> f64 {
        self.time.period_hours()
    }

    /// Position of a bus in `buses`.
    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn bus_ids(&self) -> Vec<BusId> {
        self.buses.iter().map(|b| b.id).collect()
    }

    pub fn in_service_lines(&self) -> impl Iterator<Item = &Line> {
        self.lines.iter().filter(|l| l.in_service)
    }

    /// Per-period, per-bus load (indexed like `buses`) from the load points.
    pub fn bus_loads(&self) -> BusLoads {
        let mut out = BusLoads::zeros(self.horizon(), self.buses.len());
        for load in &self.loads {
            if let Some(b) = self.bus_index(load.bus) {
                for t in 0..self.horizon() {
                    out.values[t][b] += load.baseline.get(t).copied().unwrap_or(0.0);
                }
            }
        }
        out
    }

    /// A copy with a single line taken out of service.
    pub fn without_line(&self, line: LineId) -> GridCase {
        let mut c = self.clone();
        for l in c.lines.iter_mut().filter(|l| l.id == line) {
            l.in_service = false;
        }
        c
    }
}

/// Load per period per bus, buses ordered as in the owning case.
#[derive(Debug, Clone, PartialEq)]
pub struct BusLoads {
    pub values: Vec<Vec<f64>>,
}

impl BusLoads {
    pub fn zeros(horizon: usize, buses: usize) -> Self {
        BusLoads {
            values: vec![vec![0.0; buses]; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn period(&self, t: usize) -> &[f64] {
        &self.values[t]
    }

    pub fn total(&self, t: usize) -> f64 {
        self.values[t].iter().sum()
    }

    pub fn add(&mut self, other: &BusLoads) {
        for (row, orow) in self.values.iter_mut().zip(&other.values) {
            for (v, o) in row.iter_mut().zip(orow) {
                *v += o;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Violation {
    NoBuses,
    DuplicateId { kind: &'static str, id: u32 },
    MissingBus { element: String, bus: BusId },
    SlackMissing { bus: BusId },
    GeneratorBounds { generator: GenId },
    NegativeEmission { generator: GenId },
    NonFiniteCost { generator: GenId },
    SelfLoop { line: LineId },
    BadReactance { line: LineId },
    BadFlowLimit { line: LineId },
    NegativeLoad { load: LoadId, period: usize },
    ProfileLength { element: String, expected: usize, found: usize },
    UnsupportedStep { step_minutes: u32 },
    EmptyHorizon,
    Disconnected { islands: Vec<Vec<BusId>> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoBuses => write!(f, "case has no buses"),
            Violation::DuplicateId { kind, id } => write!(f, "duplicate {kind} id {id}"),
            Violation::MissingBus { element, bus } => {
                write!(f, "{element} references missing bus {bus}")
            }
            Violation::SlackMissing { bus } => write!(f, "slack bus {bus} does not exist"),
            Violation::GeneratorBounds { generator } => {
                write!(f, "generator {generator}: bounds must satisfy 0 <= p_min <= p_max")
            }
            Violation::NegativeEmission { generator } => {
                write!(f, "generator {generator}: emission factor must be >= 0")
            }
            Violation::NonFiniteCost { generator } => {
                write!(f, "generator {generator}: cost must be finite")
            }
            Violation::SelfLoop { line } => write!(f, "line {line}: from_bus equals to_bus"),
            Violation::BadReactance { line } => write!(f, "line {line}: reactance must be > 0"),
            Violation::BadFlowLimit { line } => write!(f, "line {line}: flow_limit must be > 0"),
            Violation::NegativeLoad { load, period } => {
                write!(f, "load {load}: negative baseline in period {period}")
            }
            Violation::ProfileLength {
                element,
                expected,
                found,
            } => write!(f, "{element}: expected {expected} periods, found {found}"),
            Violation::UnsupportedStep { step_minutes } => {
                write!(f, "time step {step_minutes} min not in {{5,10,15,30,60}}")
            }
            Violation::EmptyHorizon => write!(f, "horizon must be >= 1"),
            Violation::Disconnected { islands } => {
                write!(f, "network is disconnected into islands {islands:?}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components over in-service lines, each as sorted bus ids.
pub fn islands(case: &GridCase) -> Vec<Vec<BusId>> {
    let n = case.buses.len();
    let mut uf = UnionFind::new(n);
    for line in case.in_service_lines() {
        if let (Some(a), Some(b)) = (case.bus_index(line.from_bus), case.bus_index(line.to_bus)) {
            uf.union(a, b);
        }
    }
    let mut groups: BTreeMap<usize, Vec<BusId>> = BTreeMap::new();
    for i in 0..n {
        let root = uf.find(i);
        groups.entry(root).or_default().push(case.buses[i].id);
    }
    let mut out: Vec<Vec<BusId>> = groups
        .into_values()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect();
    out.sort();
    out
}

/// Collect every structural or physical invariant violation of `case`.
pub fn validate_case(case: &GridCase) -> ValidationReport {
    let mut v = Vec::new();
    if case.buses.is_empty() {
        v.push(Violation::NoBuses);
    }
    let buses: BTreeSet<BusId> = case.buses.iter().map(|b| b.id).collect();
    dup_ids("bus", case.buses.iter().map(|b| b.id), &mut v);
    dup_ids("line", case.lines.iter().map(|l| l.id), &mut v);
    dup_ids("generator", case.generators.iter().map(|g| g.id), &mut v);
    dup_ids("load", case.loads.iter().map(|l| l.id), &mut v);

    if !buses.contains(&case.slack_bus) {
        v.push(Violation::SlackMissing {
            bus: case.slack_bus,
        });
    }
    if !SUPPORTED_STEPS.contains(&case.time.step_minutes) {
        v.push(Violation::UnsupportedStep {
            step_minutes: case.time.step_minutes,
        });
    }
    if case.time.horizon == 0 {
        v.push(Violation::EmptyHorizon);
    }

    for g in &case.generators {
        if !buses.contains(&g.bus) {
            v.push(Violation::MissingBus {
                element: format!("generator {}", g.id),
                bus: g.bus,
            });
        }
        if !(g.p_min >= 0.0 && g.p_min <= g.p_max && g.p_max.is_finite()) {
            v.push(Violation::GeneratorBounds { generator: g.id });
        }
        let negative_profile = g
            .emission_profile
            .as_ref()
            .is_some_and(|p| p.iter().any(|e| !(*e >= 0.0)));
        if !(g.emission_factor >= 0.0) || negative_profile {
            v.push(Violation::NegativeEmission { generator: g.id });
        }
        if !g.cost.is_finite() {
            v.push(Violation::NonFiniteCost { generator: g.id });
        }
        if let Some(p) = &g.emission_profile {
            if p.len() != case.time.horizon {
                v.push(Violation::ProfileLength {
                    element: format!("generator {}", g.id),
                    expected: case.time.horizon,
                    found: p.len(),
                });
            }
        }
    }

    for l in &case.lines {
        for bus in [l.from_bus, l.to_bus] {
            if !buses.contains(&bus) {
                v.push(Violation::MissingBus {
                    element: format!("line {}", l.id),
                    bus,
                });
            }
        }
        if l.from_bus == l.to_bus {
            v.push(Violation::SelfLoop { line: l.id });
        }
        if !(l.reactance > 0.0 && l.reactance.is_finite()) {
            v.push(Violation::BadReactance { line: l.id });
        }
        if !(l.flow_limit > 0.0) {
            v.push(Violation::BadFlowLimit { line: l.id });
        }
    }

    for load in &case.loads {
        if !buses.contains(&load.bus) {
            v.push(Violation::MissingBus {
                element: format!("load {}", load.id),
                bus: load.bus,
            });
        }
        if load.baseline.len() != case.time.horizon {
            v.push(Violation::ProfileLength {
                element: format!("load {}", load.id),
                expected: case.time.horizon,
                found: load.baseline.len(),
            });
        }
        for (t, x) in load.baseline.iter().enumerate() {
            if !(*x >= 0.0 && x.is_finite()) {
                v.push(Violation::NegativeLoad {
                    load: load.id,
                    period: t,
                });
            }
        }
    }

    if !case.buses.is_empty() {
        let isl = islands(case);
        if isl.len() > 1 {
            v.push(Violation::Disconnected { islands: isl });
        }
    }
    ValidationReport { violations: v }
}

fn dup_ids(kind: &'static str, ids: impl Iterator<Item = u32>, out: &mut Vec<Violation>) {
    let mut seen = BTreeSet::new();
    let mut reported = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) && reported.insert(id) {
            out.push(Violation::DuplicateId { kind, id });
        }
    }
}
