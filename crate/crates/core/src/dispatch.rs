//! DC power flow, DC optimal power flow and emission sensitivities.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{islands, BusId, BusLoads, GenId, GridCase, LineId};
use crate::lp::{LinearProgram, LpStatus, Sense};

/// Balanced-injection tolerance for DC power flow, MW.
pub const BALANCE_TOL: f64 = 1e-6;
/// Agreement tolerance between one-sided probes, tCO2/MWh.
pub const SENSITIVITY_TOL: f64 = 1e-4;

/// Injection-shift factors. Rows follow `case.lines` (out-of-service lines
/// are all-zero rows), columns follow `case.buses`.
#[derive(Debug, Clone)]
pub struct PtdfMatrix {
    pub line_ids: Vec<LineId>,
    pub bus_ids: Vec<BusId>,
    pub slack: usize,
    pub values: DMatrix<f64>,
}

impl PtdfMatrix {
    pub fn factor(&self, line: usize, bus: usize) -> f64 {
        self.values[(line, bus)]
    }

    /// Line flows for a per-bus injection vector (MW, withdrawn at slack).
    pub fn flows(&self, injections: &[f64]) -> Vec<f64> {
        let inj = DVector::from_column_slice(injections);
        (&self.values * inj).iter().copied().collect()
    }
}

struct Susceptance {
    reduced: DMatrix<f64>,
    /// Position of each bus in the reduced system (None for slack).
    map: Vec<Option<usize>>,
}

fn susceptance(case: &GridCase) -> Result<Susceptance> {
    let n = case.buses.len();
    let slack = case
        .bus_index(case.slack_bus)
        .ok_or_else(|| Error::Invalid(format!("slack bus {} missing", case.slack_bus)))?;
    let isl = islands(case);
    if isl.len() > 1 {
        let out: Vec<String> = case
            .lines
            .iter()
            .filter(|l| !l.in_service)
            .map(|l| l.id.to_string())
            .collect();
        return Err(Error::Singular(format!(
            "network splits into islands {isl:?} (out-of-service lines: [{}])",
            out.join(", ")
        )));
    }
    let mut map = vec![None; n];
    let mut k = 0;
    for (i, m) in map.iter_mut().enumerate() {
        if i != slack {
            *m = Some(k);
            k += 1;
        }
    }
    let mut b = DMatrix::zeros(n - 1, n - 1);
    for line in case.in_service_lines() {
        if !(line.reactance > 0.0 && line.reactance.is_finite()) {
            return Err(Error::BadLine(line.id));
        }
        let y = 1.0 / line.reactance;
        let i = case.bus_index(line.from_bus).ok_or(Error::BadLine(line.id))?;
        let j = case.bus_index(line.to_bus).ok_or(Error::BadLine(line.id))?;
        if let Some(a) = map[i] {
            b[(a, a)] += y;
        }
        if let Some(c) = map[j] {
            b[(c, c)] += y;
        }
        if let (Some(a), Some(c)) = (map[i], map[j]) {
            b[(a, c)] -= y;
            b[(c, a)] -= y;
        }
    }
    Ok(Susceptance { reduced: b, map })
}

pub fn build_ptdf(case: &GridCase) -> Result<PtdfMatrix> {
    let n = case.buses.len();
    let sus = susceptance(case)?;
    let slack = case.bus_index(case.slack_bus).unwrap_or(0);
    let x = if n > 1 {
        sus.reduced
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("susceptance matrix is not invertible".into()))?
    } else {
        DMatrix::zeros(0, 0)
    };
    let mut values = DMatrix::zeros(case.lines.len(), n);
    for (l, line) in case.lines.iter().enumerate() {
        if !line.in_service {
            continue;
        }
        let y = 1.0 / line.reactance;
        let fi = case.bus_index(line.from_bus).ok_or(Error::BadLine(line.id))?;
        let ti = case.bus_index(line.to_bus).ok_or(Error::BadLine(line.id))?;
        for k in 0..n {
            let Some(kk) = sus.map[k] else { continue };
            let xf = sus.map[fi].map_or(0.0, |r| x[(r, kk)]);
            let xt = sus.map[ti].map_or(0.0, |r| x[(r, kk)]);
            values[(l, k)] = y * (xf - xt);
        }
    }
    Ok(PtdfMatrix {
        line_ids: case.lines.iter().map(|l| l.id).collect(),
        bus_ids: case.bus_ids(),
        slack,
        values,
    })
}

/// Solves the DC angle equations directly and returns flows per line.
pub fn solve_dc_powerflow(case: &GridCase, injections: &[f64]) -> Result<Vec<f64>> {
    if injections.len() != case.buses.len() {
        return Err(Error::LengthMismatch {
            what: "injections".into(),
            expected: case.buses.len(),
            found: injections.len(),
        });
    }
    let net: f64 = injections.iter().sum();
    if net.abs() > BALANCE_TOL {
        return Err(Error::Unbalanced(net));
    }
    let sus = susceptance(case)?;
    let mut rhs = DVector::zeros(sus.reduced.nrows());
    for (i, m) in sus.map.iter().enumerate() {
        if let Some(k) = m {
            rhs[*k] = injections[i];
        }
    }
    let theta = if rhs.is_empty() {
        rhs
    } else {
        sus.reduced
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("susceptance matrix is not invertible".into()))?
    };
    let angle = |bus: BusId| -> f64 {
        case.bus_index(bus)
            .and_then(|i| sus.map[i])
            .map_or(0.0, |k| theta[k])
    };
    Ok(case
        .lines
        .iter()
        .map(|l| {
            if l.in_service {
                (angle(l.from_bus) - angle(l.to_bus)) / l.reactance
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

impl DispatchStatus {
    pub fn code(self) -> u8 {
        match self {
            DispatchStatus::Optimal => 0,
            DispatchStatus::Infeasible => 1,
            DispatchStatus::Unbounded => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PeriodDispatch {
    pub status: DispatchStatus,
    /// MW per generator, ordered as `case.generators`.
    pub gen_mw: Vec<f64>,
    /// Signed MW per line (from -> to positive), ordered as `case.lines`.
    pub flows: Vec<f64>,
    /// Nodal marginal cost, money/MWh, ordered as `case.buses`.
    pub lambda: Vec<f64>,
    /// Flow-limit shadow price, money/MWh, ordered as `case.lines`.
    pub mu: Vec<f64>,
    pub objective: f64,
    pub bus_load: Vec<f64>,
    /// Constraint names left violated when infeasible.
    pub violated: Vec<String>,
}

impl PeriodDispatch {
    pub fn is_optimal(&self) -> bool {
        self.status == DispatchStatus::Optimal
    }

    /// Net injection per bus (generation minus load).
    pub fn injections(&self, case: &GridCase) -> Vec<f64> {
        let mut inj: Vec<f64> = self.bus_load.iter().map(|l| -l).collect();
        for (g, p) in case.generators.iter().zip(&self.gen_mw) {
            if let Some(b) = case.bus_index(g.bus) {
                inj[b] += p;
            }
        }
        inj
    }

    /// Emission rate sum_g e_g P_g, tCO2/h.
    pub fn emission_rate(&self, case: &GridCase, period: usize) -> f64 {
        case.generators
            .iter()
            .zip(&self.gen_mw)
            .map(|(g, p)| g.emission_at(period) * p)
            .sum()
    }

    /// Lines whose flow limit binds.
    pub fn binding_lines(&self, case: &GridCase) -> Vec<LineId> {
        case.lines
            .iter()
            .zip(&self.flows)
            .filter(|(l, f)| l.in_service && f.abs() >= l.flow_limit - 1e-6)
            .map(|(l, _)| l.id)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DispatchResult {
    pub gen_ids: Vec<GenId>,
    pub line_ids: Vec<LineId>,
    pub bus_ids: Vec<BusId>,
    pub periods: Vec<PeriodDispatch>,
}

impl DispatchResult {
    pub fn all_optimal(&self) -> bool {
        self.periods.iter().all(PeriodDispatch::is_optimal)
    }

    pub fn objective(&self) -> f64 {
        self.periods.iter().map(|p| p.objective).sum()
    }

    /// First non-optimal period with its violated constraints.
    pub fn first_failure(&self) -> Option<(usize, &PeriodDispatch)> {
        self.periods.iter().enumerate().find(|(_, p)| !p.is_optimal())
    }

    /// One row per (period, entity) with a kind column.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("period,entity,kind,value\n");
        for (t, p) in self.periods.iter().enumerate() {
            let _ = writeln!(s, "{t},system,status,{}", p.status.code());
            let _ = writeln!(s, "{t},system,objective,{}", finite_or_zero(p.objective));
            for (id, v) in self.gen_ids.iter().zip(&p.gen_mw) {
                let _ = writeln!(s, "{t},gen:{id},p_mw,{}", finite_or_zero(*v));
            }
            for (id, v) in self.line_ids.iter().zip(&p.flows) {
                let _ = writeln!(s, "{t},line:{id},flow_mw,{}", finite_or_zero(*v));
            }
            for (id, v) in self.line_ids.iter().zip(&p.mu) {
                let _ = writeln!(s, "{t},line:{id},mu,{}", finite_or_zero(*v));
            }
            for (id, v) in self.bus_ids.iter().zip(&p.lambda) {
                let _ = writeln!(s, "{t},bus:{id},lambda,{}", finite_or_zero(*v));
            }
        }
        s
    }
}

fn finite_or_zero(v: f64) -> f64 {
    if v.is_finite() {
        v + 0.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Linear generation cost.
    Cost,
    /// Emission rate for the period.
    Emissions,
}

#[derive(Debug, Clone, Copy)]
pub struct OpfOptions {
    pub enforce_line_limits: bool,
    pub objective: Objective,
}

impl Default for OpfOptions {
    fn default() -> Self {
        OpfOptions {
            enforce_line_limits: true,
            objective: Objective::Cost,
        }
    }
}

/// Ranks generators by id; the OPF prefers lower ids among tied optima.
fn id_ranks(case: &GridCase) -> Vec<f64> {
    let mut order: Vec<usize> = (0..case.generators.len()).collect();
    order.sort_by_key(|&g| case.generators[g].id);
    let mut rank = vec![0.0; order.len()];
    for (r, g) in order.into_iter().enumerate() {
        rank[g] = (r + 1) as f64;
    }
    rank
}

/// Per-period DC-OPF in injection-shift form.
pub fn solve_period(
    case: &GridCase,
    ptdf: &PtdfMatrix,
    bus_load: &[f64],
    period: usize,
    opts: OpfOptions,
) -> PeriodDispatch {
    let ng = case.generators.len();
    let mut lp = LinearProgram::new();
    let gen_bus: Vec<usize> = case
        .generators
        .iter()
        .map(|g| case.bus_index(g.bus).unwrap_or(ptdf.slack))
        .collect();
    for g in &case.generators {
        let c = match opts.objective {
            Objective::Cost => g.cost,
            Objective::Emissions => g.emission_at(period),
        };
        lp.add_var(g.p_min, g.p_max, c);
    }
    let total_load: f64 = bus_load.iter().sum();
    lp.add_row((0..ng).map(|g| (g, 1.0)).collect(), Sense::Eq, total_load);

    // flow_l = sum_g ptdf P_g - sum_i ptdf L_i, bounded by the limit.
    let mut line_rows = Vec::new();
    for (l, line) in case.lines.iter().enumerate() {
        if !line.in_service {
            continue;
        }
        if !opts.enforce_line_limits {
            continue;
        }
        let f = lp.add_var(-line.flow_limit, line.flow_limit, 0.0);
        let mut coeffs: Vec<(usize, f64)> = (0..ng)
            .filter_map(|g| {
                let a = ptdf.factor(l, gen_bus[g]);
                (a != 0.0).then_some((g, a))
            })
            .collect();
        coeffs.push((f, -1.0));
        let rhs: f64 = bus_load
            .iter()
            .enumerate()
            .map(|(i, li)| ptdf.factor(l, i) * li)
            .sum();
        let row = lp.add_row(coeffs, Sense::Eq, rhs);
        line_rows.push((l, f, row));
    }

    let mut tie = id_ranks(case);
    tie.resize(lp.num_vars(), 0.0);
    let sol = lp.solve_lexicographic(&[tie]);

    let nl = case.lines.len();
    let nb = case.buses.len();
    let status = match sol.status {
        LpStatus::Optimal => DispatchStatus::Optimal,
        LpStatus::Infeasible => DispatchStatus::Infeasible,
        LpStatus::Unbounded => DispatchStatus::Unbounded,
    };
    let mut flows = vec![0.0; nl];
    let mut mu = vec![0.0; nl];
    let mut lambda = vec![0.0; nb];
    let mut violated = Vec::new();
    if status == DispatchStatus::Optimal && !opts.enforce_line_limits {
        lambda.iter_mut().for_each(|v| *v = sol.duals[0]);
        let mut inj: Vec<f64> = bus_load.iter().map(|l| -l).collect();
        for (g, p) in gen_bus.iter().zip(&sol.x) {
            inj[*g] += p;
        }
        flows = ptdf.flows(&inj);
    } else if status == DispatchStatus::Optimal {
        let y0 = sol.duals[0];
        lambda.iter_mut().for_each(|v| *v = y0);
        for &(l, f, row) in &line_rows {
            flows[l] = sol.x[f];
            let y = sol.duals[row];
            mu[l] = y.abs();
            for (i, lam) in lambda.iter_mut().enumerate() {
                *lam += y * ptdf.factor(l, i);
            }
        }
    } else {
        for &r in &sol.infeasible_rows {
            if r == 0 {
                violated.push(format!(
                    "balance (load {total_load} MW vs capacity {} MW)",
                    case.generators.iter().map(|g| g.p_max).sum::<f64>()
                ));
            } else if let Some(&(l, _, _)) = line_rows.iter().find(|(_, _, row)| *row == r) {
                violated.push(format!("line {} limit", case.lines[l].id));
            }
        }
        if violated.is_empty() {
            violated.push("balance".into());
        }
    }
    PeriodDispatch {
        status,
        gen_mw: sol.x[..ng].to_vec(),
        flows,
        lambda,
        mu,
        objective: if status == DispatchStatus::Optimal {
            case.generators
                .iter()
                .zip(&sol.x)
                .map(|(g, p)| g.cost * p)
                .sum()
        } else {
            f64::NAN
        },
        bus_load: bus_load.to_vec(),
        violated,
    }
}

fn check_loads(case: &GridCase, loads: &BusLoads) -> Result<()> {
    if loads.horizon() != case.horizon() {
        return Err(Error::LengthMismatch {
            what: "load periods".into(),
            expected: case.horizon(),
            found: loads.horizon(),
        });
    }
    for row in &loads.values {
        if row.len() != case.buses.len() {
            return Err(Error::LengthMismatch {
                what: "bus loads".into(),
                expected: case.buses.len(),
                found: row.len(),
            });
        }
        if row.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid("loads must be nonnegative".into()));
        }
    }
    Ok(())
}

pub fn solve_dc_opf(case: &GridCase, loads: &BusLoads) -> Result<DispatchResult> {
    solve_dc_opf_with(case, loads, OpfOptions::default())
}

pub fn solve_dc_opf_with(
    case: &GridCase,
    loads: &BusLoads,
    opts: OpfOptions,
) -> Result<DispatchResult> {
    check_loads(case, loads)?;
    let ptdf = build_ptdf(case)?;
    let periods = (0..case.horizon())
        .map(|t| solve_period(case, &ptdf, loads.period(t), t, opts))
        .collect();
    Ok(DispatchResult {
        gen_ids: case.generators.iter().map(|g| g.id).collect(),
        line_ids: case.lines.iter().map(|l| l.id).collect(),
        bus_ids: case.bus_ids(),
        periods,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivity {
    /// Two-sided difference, or the surviving one-sided value.
    pub value: f64,
    pub up: Option<f64>,
    pub down: Option<f64>,
    /// One-sided differences disagree beyond tolerance.
    pub degenerate: bool,
    /// A probe was infeasible and only one side was used.
    pub one_sided: bool,
}

/// Probe size: max(1e-4 x total load, 0.01 MW).
pub fn probe_size(total_load: f64) -> f64 {
    (1e-4 * total_load).max(0.01)
}

/// dE_total/dL_i by re-solving the OPF at L_i +/- eps.
pub fn emission_sensitivity(
    case: &GridCase,
    ptdf: &PtdfMatrix,
    base: &PeriodDispatch,
    bus: usize,
    period: usize,
) -> Result<Sensitivity> {
    emission_sensitivity_with(case, ptdf, base, bus, period, OpfOptions::default())
}

pub fn emission_sensitivity_with(
    case: &GridCase,
    ptdf: &PtdfMatrix,
    base: &PeriodDispatch,
    bus: usize,
    period: usize,
    opts: OpfOptions,
) -> Result<Sensitivity> {
    if !base.is_optimal() {
        return Err(Error::Infeasible(format!(
            "base dispatch in period {period} is not optimal"
        )));
    }
    let eps = probe_size(base.bus_load.iter().sum());
    let e0 = base.emission_rate(case, period);
    let probe = |delta: f64| -> Option<f64> {
        let mut load = base.bus_load.clone();
        load[bus] += delta;
        let d = solve_period(case, ptdf, &load, period, opts);
        d.is_optimal().then(|| d.emission_rate(case, period))
    };
    let plus = probe(eps);
    let minus = probe(-eps);
    let up = plus.map(|e| (e - e0) / eps);
    let down = minus.map(|e| (e0 - e) / eps);
    match (plus, minus) {
        (Some(ep), Some(em)) => {
            let (u, d) = (up.unwrap_or(0.0), down.unwrap_or(0.0));
            Ok(Sensitivity {
                value: (ep - em) / (2.0 * eps),
                up,
                down,
                degenerate: (u - d).abs() > SENSITIVITY_TOL,
                one_sided: false,
            })
        }
        (Some(_), None) | (None, Some(_)) => Ok(Sensitivity {
            value: up.or(down).unwrap_or(0.0),
            up,
            down,
            degenerate: true,
            one_sided: true,
        }),
        (None, None) => Err(Error::Infeasible(format!(
            "both load probes infeasible at bus {} period {period}",
            case.buses[bus].id
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fixtures::*;
    use crate::grid::{GridCase, TimeGrid};
    use approx::assert_abs_diff_eq;

    fn opf1(case: &GridCase) -> PeriodDispatch {
        let r = solve_dc_opf(case, &case.bus_loads()).unwrap();
        r.periods.into_iter().next().unwrap()
    }

    #[test]
    fn two_bus_ptdf_is_unit() {
        let c = two_bus();
        let p = build_ptdf(&c).unwrap();
        assert_eq!(p.factor(0, 0), 0.0);
        assert_abs_diff_eq!(p.factor(0, 1), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn triangle_ptdf_matches_hand_kirchhoff() {
        // Slack at bus 3: injecting at bus 1 splits 2/3 direct, 1/3 via bus 2.
        let c = triangle();
        let p = build_ptdf(&c).unwrap();
        assert_abs_diff_eq!(p.factor(2, 0), 2.0 / 3.0, epsilon = 1e-12); // 1->3
        assert_abs_diff_eq!(p.factor(0, 0), 1.0 / 3.0, epsilon = 1e-12); // 1->2
        assert_abs_diff_eq!(p.factor(1, 0), 1.0 / 3.0, epsilon = 1e-12); // 2->3
        for l in 0..3 {
            assert_eq!(p.factor(l, 2), 0.0);
        }
    }

    #[test]
    fn powerflow_examples() {
        let c = two_bus();
        let f = solve_dc_powerflow(&c, &[100.0, -100.0]).unwrap();
        assert_abs_diff_eq!(f[0], 100.0, epsilon = 1e-9);
        let t = triangle();
        let f = solve_dc_powerflow(&t, &[90.0, 0.0, -90.0]).unwrap();
        assert_abs_diff_eq!(f[2], 60.0, epsilon = 1e-9);
        assert_abs_diff_eq!(f[0], 30.0, epsilon = 1e-9);
        assert_abs_diff_eq!(f[1], 30.0, epsilon = 1e-9);
        assert_eq!(solve_dc_powerflow(&t, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn powerflow_errors() {
        let t = triangle();
        assert!(matches!(
            solve_dc_powerflow(&t, &[10.0, 0.0, 0.0]),
            Err(Error::Unbalanced(_))
        ));
        let mut z = triangle();
        z.lines[1].reactance = 0.0;
        assert!(matches!(build_ptdf(&z), Err(Error::BadLine(2))));
        let iso = two_bus().without_line(1);
        assert!(matches!(build_ptdf(&iso), Err(Error::Singular(m)) if m.contains('1')));
    }

    #[test]
    fn single_bus_opf() {
        let d = opf1(&single_bus(0.5));
        assert!(d.is_optimal());
        assert_abs_diff_eq!(d.gen_mw[0], 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.lambda[0], 10.0, epsilon = 1e-9);
    }

    #[test]
    fn two_bus_hand_lp() {
        let c = two_bus();
        let d = opf1(&c);
        assert_abs_diff_eq!(d.gen_mw[0], 80.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.gen_mw[1], 40.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.flows[0], 80.0, epsilon = 1e-9);
        // Expensive local unit sets bus-2 price; bus 1 is priced by the cheap unit.
        assert_abs_diff_eq!(d.lambda[0], 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.lambda[1], 30.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.mu[0], 20.0, epsilon = 1e-9);
        assert_eq!(d.binding_lines(&c), vec![1]);
        assert_abs_diff_eq!(d.emission_rate(&c, 0), 52.0, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_when_load_exceeds_capacity() {
        let mut c = two_bus();
        c.loads[0].baseline = vec![500.0];
        let d = opf1(&c);
        assert_eq!(d.status, DispatchStatus::Infeasible);
        assert!(d.violated.iter().any(|v| v.contains("balance")));
    }

    #[test]
    fn equal_cost_ties_go_to_lower_id() {
        let mut c = single_bus(0.5);
        c.generators.push(gen(2, 1, 200.0, 10.0, 0.9));
        c.generators.swap(0, 1);
        let d = opf1(&c);
        // generators[1] has id 1 and takes the whole load.
        assert_abs_diff_eq!(d.gen_mw[1], 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.gen_mw[0], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn sensitivity_examples() {
        let c = single_bus(0.5);
        let p = build_ptdf(&c).unwrap();
        let d = opf1(&c);
        let s = emission_sensitivity(&c, &p, &d, 0, 0).unwrap();
        assert_abs_diff_eq!(s.value, 0.5, epsilon = 1e-9);
        assert!(!s.degenerate);

        let c = two_bus();
        let p = build_ptdf(&c).unwrap();
        let d = opf1(&c);
        let s1 = emission_sensitivity(&c, &p, &d, 0, 0).unwrap();
        let s2 = emission_sensitivity(&c, &p, &d, 1, 0).unwrap();
        assert_abs_diff_eq!(s1.value, 0.2, epsilon = 1e-6);
        assert_abs_diff_eq!(s2.value, 0.9, epsilon = 1e-6);
        assert!(!s1.degenerate && !s2.degenerate);
    }

    #[test]
    fn sensitivity_flags_marginal_unit_at_bound() {
        let c = GridCase {
            name: String::new(),
            buses: vec![bus(1)],
            lines: vec![],
            generators: vec![gen(1, 1, 100.0, 10.0, 0.2), gen(2, 1, 100.0, 20.0, 0.8)],
            loads: vec![load(1, 1, &[100.0])],
            slack_bus: 1,
            time: TimeGrid::hourly(1),
        };
        let p = build_ptdf(&c).unwrap();
        let d = opf1(&c);
        let s = emission_sensitivity(&c, &p, &d, 0, 0).unwrap();
        assert!(s.degenerate);
        assert_abs_diff_eq!(s.up.unwrap(), 0.8, epsilon = 1e-6);
        assert_abs_diff_eq!(s.down.unwrap(), 0.2, epsilon = 1e-6);
    }

    #[test]
    fn uniform_emissions_give_uniform_sensitivity() {
        let mut c = two_bus();
        for g in &mut c.generators {
            g.emission_factor = 0.3;
        }
        let p = build_ptdf(&c).unwrap();
        let d = opf1(&c);
        for b in 0..2 {
            let s = emission_sensitivity(&c, &p, &d, b, 0).unwrap();
            assert_abs_diff_eq!(s.value, 0.3, epsilon = 1e-6);
        }
    }

    #[test]
    fn opf_flows_match_ptdf_and_powerflow() {
        let c = two_bus();
        let d = opf1(&c);
        let inj = d.injections(&c);
        let p = build_ptdf(&c).unwrap();
        let via_ptdf = p.flows(&inj);
        let via_angles = solve_dc_powerflow(&c, &inj).unwrap();
        assert_abs_diff_eq!(via_ptdf[0], d.flows[0], epsilon = 1e-6);
        assert_abs_diff_eq!(via_angles[0], d.flows[0], epsilon = 1e-6);
    }

    #[test]
    fn csv_has_kind_column() {
        let c = two_bus();
        let r = solve_dc_opf(&c, &c.bus_loads()).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("period,entity,kind,value\n"));
        assert!(csv.contains("0,gen:1,p_mw,80"));
        assert!(csv.contains("0,line:1,flow_mw,80"));
    }
}
