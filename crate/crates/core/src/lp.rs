//! Dense bounded-variable primal simplex.
//!
//! Problems are small (tens to a few hundred rows), so a dense tableau is
//! fast enough and keeps pivots easy to reason about. Every decision is
//! deterministic: Dantzig pricing with lowest-index ties, switching to
//! Bland's rule after a run of degenerate pivots.
//!
//! Row duals are reported as the sensitivity of the optimal objective to
//! the row right-hand side, `dz/db_i`.

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;
const OPT_TOL: f64 = 1e-9;
const DEGENERATE_RUN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    /// Value of the primary objective.
    #[cfg_attr(not(test), allow(dead_code))]
    pub objective: f64,
    /// `dz/db` per row for the primary objective.
    pub duals: Vec<f64>,
    /// Rows still carrying artificial infeasibility when phase one ended.
    pub infeasible_rows: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    lower: Vec<f64>,
    upper: Vec<f64>,
    objective: Vec<f64>,
    rows: Vec<Row>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a variable with finite lower bound and returns its index.
    pub fn add_var(&mut self, lower: f64, upper: f64, cost: f64) -> usize {
        assert!(lower.is_finite(), "variables need a finite lower bound");
        self.lower.push(lower);
        self.upper.push(upper.max(lower));
        self.objective.push(cost);
        self.lower.len() - 1
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, sense: Sense, rhs: f64) -> usize {
        self.rows.push(Row { coeffs, sense, rhs });
        self.rows.len() - 1
    }

    pub fn num_vars(&self) -> usize {
        self.lower.len()
    }

    #[cfg(test)]
    pub fn set_cost(&mut self, var: usize, cost: f64) {
        self.objective[var] = cost;
    }

    #[cfg(test)]
    pub fn solve(&self) -> LpSolution {
        self.solve_lexicographic(&[])
    }

    /// Minimises the primary objective, then each secondary objective in
    /// turn over the optimal face of the previous stages.
    pub fn solve_lexicographic(&self, secondary: &[Vec<f64>]) -> LpSolution {
        let mut tab = Tableau::build(self);
        let phase1 = tab.run(Phase::One);
        let m = self.rows.len();
        if phase1 == RunOutcome::Unbounded || tab.artificial_mass() > FEAS_TOL * (1.0 + tab.rhs_scale) {
            let infeasible_rows = (0..m)
                .filter(|&i| tab.artificial_value(i) > FEAS_TOL)
                .collect();
            return LpSolution {
                status: LpStatus::Infeasible,
                x: tab.primal(self.num_vars()),
                objective: f64::NAN,
                duals: vec![0.0; m],
                infeasible_rows,
            };
        }
        tab.fix_artificials();
        tab.set_costs(&self.objective);
        if tab.run(Phase::Two) == RunOutcome::Unbounded {
            return LpSolution {
                status: LpStatus::Unbounded,
                x: tab.primal(self.num_vars()),
                objective: f64::NEG_INFINITY,
                duals: vec![0.0; m],
                infeasible_rows: vec![],
            };
        }
        let duals = tab.row_duals();
        for costs in secondary {
            tab.fix_nonzero_reduced_costs();
            tab.set_costs(costs);
            // The optimal face is bounded whenever the primary was.
            let _ = tab.run(Phase::Two);
        }
        let x = tab.primal(self.num_vars());
        let objective = x.iter().zip(&self.objective).map(|(a, c)| a * c).sum();
        LpSolution {
            status: LpStatus::Optimal,
            x,
            objective,
            duals,
            infeasible_rows: vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunOutcome {
    Optimal,
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Basic,
    AtLower,
    AtUpper,
}

struct Tableau {
    m: usize,
    cols: usize,
    /// First artificial column; artificials are `art0..art0+m`.
    art0: usize,
    t: Vec<f64>,
    beta: Vec<f64>,
    basis: Vec<usize>,
    state: Vec<State>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    cost: Vec<f64>,
    d: Vec<f64>,
    art_sign: Vec<f64>,
    rhs_scale: f64,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.num_vars();
        let m = lp.rows.len();
        let slack_rows: Vec<usize> = (0..m).filter(|&i| lp.rows[i].sense != Sense::Eq).collect();
        let art0 = n + slack_rows.len();
        let cols = art0 + m;
        let mut t = vec![0.0; m * cols];
        let mut lower = lp.lower.clone();
        let mut upper = lp.upper.clone();
        lower.resize(cols, 0.0);
        upper.resize(art0, f64::INFINITY);
        upper.resize(cols, f64::INFINITY);

        let mut state = vec![State::AtLower; cols];
        let start = |j: usize| lp.lower[j];
        for (k, &i) in slack_rows.iter().enumerate() {
            let s = if lp.rows[i].sense == Sense::Le { 1.0 } else { -1.0 };
            t[i * cols + n + k] = s;
        }
        let mut beta = vec![0.0; m];
        let mut art_sign = vec![1.0; m];
        let mut rhs_scale: f64 = 0.0;
        for (i, row) in lp.rows.iter().enumerate() {
            let mut resid = row.rhs;
            rhs_scale = rhs_scale.max(row.rhs.abs());
            for &(j, a) in &row.coeffs {
                t[i * cols + j] += a;
                resid -= a * start(j);
            }
            let sign = if resid < 0.0 { -1.0 } else { 1.0 };
            art_sign[i] = sign;
            t[i * cols + art0 + i] = sign;
            beta[i] = resid.abs();
            // B = diag(sign): scale the row so the artificial has unit coefficient.
            if sign < 0.0 {
                for v in &mut t[i * cols..(i + 1) * cols] {
                    *v = -*v;
                }
            }
        }
        let basis: Vec<usize> = (art0..cols).collect();
        for &b in &basis {
            state[b] = State::Basic;
        }
        Tableau {
            m,
            cols,
            art0,
            t,
            beta,
            basis,
            state,
            lower,
            upper,
            cost: vec![0.0; cols],
            d: vec![0.0; cols],
            art_sign,
            rhs_scale,
        }
    }

    fn value(&self, j: usize) -> f64 {
        match self.state[j] {
            State::AtLower => self.lower[j],
            State::AtUpper => self.upper[j],
            State::Basic => {
                let r = self.basis.iter().position(|&b| b == j).expect("basic var in basis");
                self.beta[r]
            }
        }
    }

    fn primal(&self, n: usize) -> Vec<f64> {
        let mut x: Vec<f64> = (0..n)
            .map(|j| match self.state[j] {
                State::AtLower => self.lower[j],
                State::AtUpper => self.upper[j],
                State::Basic => 0.0,
            })
            .collect();
        for (r, &b) in self.basis.iter().enumerate() {
            if b < n {
                x[b] = self.beta[r].clamp(self.lower[b], self.upper[b]);
            }
        }
        x
    }

    fn artificial_value(&self, row: usize) -> f64 {
        self.value(self.art0 + row)
    }

    fn artificial_mass(&self) -> f64 {
        (0..self.m).map(|i| self.artificial_value(i)).sum()
    }

    fn fix_artificials(&mut self) {
        for j in self.art0..self.cols {
            self.upper[j] = 0.0;
        }
    }

    fn fix_nonzero_reduced_costs(&mut self) {
        for j in 0..self.art0 {
            if self.state[j] != State::Basic && self.d[j].abs() > OPT_TOL {
                let v = self.value(j);
                self.lower[j] = v;
                self.upper[j] = v;
            }
        }
    }

    fn set_costs(&mut self, costs: &[f64]) {
        self.cost.iter_mut().for_each(|c| *c = 0.0);
        self.cost[..costs.len()].copy_from_slice(costs);
        self.reprice();
    }

    fn reprice(&mut self) {
        let cols = self.cols;
        self.d.copy_from_slice(&self.cost);
        for (r, &b) in self.basis.iter().enumerate() {
            let cb = self.cost[b];
            if cb != 0.0 {
                let row = &self.t[r * cols..(r + 1) * cols];
                for (dj, a) in self.d.iter_mut().zip(row) {
                    *dj -= cb * a;
                }
            }
        }
    }

    fn row_duals(&self) -> Vec<f64> {
        (0..self.m)
            .map(|i| -self.d[self.art0 + i] * self.art_sign[i])
            .collect()
    }

    fn run(&mut self, phase: Phase) -> RunOutcome {
        if phase == Phase::One {
            let mut c = vec![0.0; self.cols];
            c[self.art0..].iter_mut().for_each(|v| *v = 1.0);
            self.cost = c;
            self.reprice();
        }
        let priced_cols = match phase {
            Phase::One => self.cols,
            Phase::Two => self.art0,
        };
        let max_iter = 50 * (self.m + self.cols) + 1000;
        let mut degenerate = 0usize;
        for _ in 0..max_iter {
            let bland = degenerate >= DEGENERATE_RUN;
            let Some((j, dir)) = self.price(priced_cols, bland) else {
                return RunOutcome::Optimal;
            };
            match self.ratio(j, dir, bland) {
                None => return RunOutcome::Unbounded,
                Some((theta, leave)) => {
                    if theta <= PIVOT_TOL {
                        degenerate += 1;
                    } else {
                        degenerate = 0;
                    }
                    self.step(j, dir, theta, leave);
                }
            }
        }
        // Iteration cap hit; best effort is the current basis.
        RunOutcome::Optimal
    }

    fn price(&self, priced_cols: usize, bland: bool) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..priced_cols {
            if self.upper[j] - self.lower[j] <= 0.0 && self.state[j] != State::Basic {
                continue;
            }
            let dj = self.d[j];
            let dir = match self.state[j] {
                State::Basic => continue,
                State::AtLower if dj < -OPT_TOL => 1.0,
                State::AtUpper if dj > OPT_TOL => -1.0,
                _ => continue,
            };
            if bland {
                return Some((j, dir));
            }
            if best.is_none_or(|(_, _, s)| dj.abs() > s) {
                best = Some((j, dir, dj.abs()));
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    /// Returns the step length and, unless the entering variable simply
    /// flips bounds, the leaving row with the bound the leaving var hits.
    fn ratio(&self, j: usize, dir: f64, bland: bool) -> Option<(f64, Option<(usize, State)>)> {
        let cols = self.cols;
        let mut theta = self.upper[j] - self.lower[j];
        let mut leave: Option<(usize, State)> = None;
        let mut leave_piv = 0.0;
        for r in 0..self.m {
            let a = self.t[r * cols + j];
            let rate = -dir * a; // d beta_r / d theta
            if rate.abs() <= PIVOT_TOL {
                continue;
            }
            let b = self.basis[r];
            let (limit, hit) = if rate < 0.0 {
                ((self.beta[r] - self.lower[b]) / -rate, State::AtLower)
            } else if self.upper[b].is_finite() {
                ((self.upper[b] - self.beta[r]) / rate, State::AtUpper)
            } else {
                continue;
            };
            let limit = limit.max(0.0);
            let better = if limit < theta - PIVOT_TOL {
                true
            } else if limit <= theta + PIVOT_TOL {
                match leave {
                    Some((lr, _)) if bland => b < self.basis[lr],
                    Some(_) => a.abs() > leave_piv,
                    None => false,
                }
            } else {
                false
            };
            if better {
                theta = limit;
                leave = Some((r, hit));
                leave_piv = a.abs();
            }
        }
        if theta.is_infinite() {
            return None;
        }
        Some((theta, leave))
    }

    fn step(&mut self, j: usize, dir: f64, theta: f64, leave: Option<(usize, State)>) {
        let cols = self.cols;
        let entering_old = match self.state[j] {
            State::AtLower => self.lower[j],
            _ => self.upper[j],
        };
        for r in 0..self.m {
            let a = self.t[r * cols + j];
            if a != 0.0 {
                self.beta[r] -= dir * a * theta;
            }
        }
        let Some((r, hit)) = leave else {
            self.state[j] = if dir > 0.0 { State::AtUpper } else { State::AtLower };
            return;
        };
        let leaving = self.basis[r];
        self.state[leaving] = hit;
        self.state[j] = State::Basic;
        self.basis[r] = j;
        self.beta[r] = entering_old + dir * theta;

        let piv = self.t[r * cols + j];
        let (before, rest) = self.t.split_at_mut(r * cols);
        let (prow, after) = rest.split_at_mut(cols);
        for v in prow.iter_mut() {
            *v /= piv;
        }
        prow[j] = 1.0;
        for chunk in before.chunks_mut(cols).chain(after.chunks_mut(cols)) {
            let f = chunk[j];
            if f != 0.0 {
                for (v, p) in chunk.iter_mut().zip(prow.iter()) {
                    *v -= f * p;
                }
                chunk[j] = 0.0;
            }
        }
        let f = self.d[j];
        if f != 0.0 {
            for (v, p) in self.d.iter_mut().zip(prow.iter()) {
                *v -= f * p;
            }
            self.d[j] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn textbook_maximisation() {
        // max 3x + 5y, x <= 4, 2y <= 12, 3x + 2y <= 18 -> (2, 6), z = 36
        let mut lp = LinearProgram::new();
        let x = lp.add_var(0.0, f64::INFINITY, -3.0);
        let y = lp.add_var(0.0, f64::INFINITY, -5.0);
        lp.add_row(vec![(x, 1.0)], Sense::Le, 4.0);
        lp.add_row(vec![(y, 2.0)], Sense::Le, 12.0);
        lp.add_row(vec![(x, 3.0), (y, 2.0)], Sense::Le, 18.0);
        let s = lp.solve();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_abs_diff_eq!(s.x[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.x[1], 6.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.objective, -36.0, epsilon = 1e-9);
        // Known shadow prices of the max problem: (0, 1.5, 1); sign flips for min.
        assert_abs_diff_eq!(s.duals[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.duals[1], -1.5, epsilon = 1e-9);
        assert_abs_diff_eq!(s.duals[2], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn bounded_variables_and_equality() {
        // min x + 2y, x + y = 10, x in [0, 4], y in [0, 100]
        let mut lp = LinearProgram::new();
        let x = lp.add_var(0.0, 4.0, 1.0);
        let y = lp.add_var(0.0, 100.0, 2.0);
        lp.add_row(vec![(x, 1.0), (y, 1.0)], Sense::Eq, 10.0);
        let s = lp.solve();
        assert_abs_diff_eq!(s.x[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[1], 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.duals[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_rows_reported() {
        let mut lp = LinearProgram::new();
        let x = lp.add_var(0.0, 5.0, 1.0);
        lp.add_row(vec![(x, 1.0)], Sense::Ge, 8.0);
        let s = lp.solve();
        assert_eq!(s.status, LpStatus::Infeasible);
        assert_eq!(s.infeasible_rows, vec![0]);
    }

    #[test]
    fn unbounded_detected() {
        let mut lp = LinearProgram::new();
        let x = lp.add_var(0.0, f64::INFINITY, -1.0);
        let y = lp.add_var(0.0, f64::INFINITY, 0.0);
        lp.add_row(vec![(x, 1.0), (y, -1.0)], Sense::Le, 1.0);
        assert_eq!(lp.solve().status, LpStatus::Unbounded);
    }

    #[test]
    fn lexicographic_tie_break() {
        // Two identical-cost units; secondary prefers the first.
        let mut lp = LinearProgram::new();
        let a = lp.add_var(0.0, 100.0, 10.0);
        let b = lp.add_var(0.0, 100.0, 10.0);
        lp.add_row(vec![(a, 1.0), (b, 1.0)], Sense::Eq, 60.0);
        let s = lp.solve_lexicographic(&[vec![0.0, 1.0]]);
        assert_abs_diff_eq!(s.x[a], 60.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.x[b], 0.0, epsilon = 1e-9);
        let s = lp.solve_lexicographic(&[vec![1.0, 0.0]]);
        assert_abs_diff_eq!(s.x[b], 60.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.objective, 600.0, epsilon = 1e-9);
    }

    #[test]
    fn negative_lower_bounds() {
        // min -x, x in [-5, 3], x >= -2 -> x = 3
        let mut lp = LinearProgram::new();
        let x = lp.add_var(-5.0, 3.0, -1.0);
        lp.add_row(vec![(x, 1.0)], Sense::Ge, -2.0);
        let s = lp.solve();
        assert_abs_diff_eq!(s.x[x], 3.0, epsilon = 1e-12);
        // min x -> -2 and the row is binding
        let mut lp2 = lp.clone();
        lp2.set_cost(x, 1.0);
        let s = lp2.solve();
        assert_abs_diff_eq!(s.x[x], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.duals[0], 1.0, epsilon = 1e-12);
    }

    // Brute-force vertex enumeration on random 2-variable LPs.
    #[test]
    fn matches_grid_search_on_random_2d() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut lp = LinearProgram::new();
            let c = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let x = lp.add_var(0.0, 10.0, c[0]);
            let y = lp.add_var(0.0, 10.0, c[1]);
            let mut rows = vec![];
            for _ in 0..3 {
                let a: [f64; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let b: f64 = rng.random_range(1.0..20.0);
                lp.add_row(vec![(x, a[0]), (y, a[1])], Sense::Le, b);
                rows.push((a, b));
            }
            let s = lp.solve();
            // (0,0) is always feasible since b > 0
            assert_eq!(s.status, LpStatus::Optimal);
            let mut best = f64::INFINITY;
            let n = 400;
            for i in 0..=n {
                for k in 0..=n {
                    let p = [10.0 * i as f64 / n as f64, 10.0 * k as f64 / n as f64];
                    if rows.iter().all(|(a, b)| a[0] * p[0] + a[1] * p[1] <= *b + 1e-12) {
                        best = best.min(c[0] * p[0] + c[1] * p[1]);
                    }
                }
            }
            assert!(s.objective <= best + 1e-9, "{} vs grid {}", s.objective, best);
            assert!(s.objective >= best - 0.5, "{} vs grid {}", s.objective, best);
        }
    }
}
