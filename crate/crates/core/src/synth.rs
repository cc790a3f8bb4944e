//! Seeded random cases, feasible by construction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dispatch::build_ptdf;
use crate::error::Result;
use crate::grid::{Bus, GridCase, Generator, Line, LoadPoint, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub buses: usize,
    pub horizon: usize,
    /// Every generator's emission factor, when set.
    pub uniform_emission: Option<f64>,
    /// Fraction of lines whose limit sits just above a feasible flow.
    pub tight_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            buses: 10,
            horizon: 1,
            uniform_emission: None,
            tight_fraction: 0.3,
        }
    }
}

/// Random spanning tree plus chords, generators on about half the buses and
/// loads on most. Line limits are set from the flows of a proportional
/// dispatch, so that dispatch stays feasible in every period.
pub fn random_case(seed: u64, p: &SynthParams) -> Result<GridCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.buses.max(1);
    let buses: Vec<Bus> = (1..=n as u32)
        .map(|id| Bus {
            id,
            name: format!("b{id}"),
        })
        .collect();

    let mut lines = Vec::new();
    let mut order: Vec<u32> = (1..=n as u32).collect();
    order.shuffle(&mut rng);
    for k in 1..n {
        let parent = order[rng.random_range(0..k)];
        lines.push((parent, order[k]));
    }
    for _ in 0..n / 3 {
        let a = rng.random_range(1..=n as u32);
        let b = rng.random_range(1..=n as u32);
        if a != b && !lines.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)) {
            lines.push((a, b));
        }
    }

    let mut gen_buses: Vec<u32> = (1..=n as u32).filter(|_| rng.random_bool(0.5)).collect();
    if gen_buses.is_empty() {
        gen_buses.push(order[0]);
    }
    let mut loads = Vec::new();
    for b in 1..=n as u32 {
        if rng.random_bool(0.7) || (n == 1) {
            let base = rng.random_range(10.0..100.0);
            let baseline = (0..p.horizon).map(|_| base * rng.random_range(0.7..1.1)).collect();
            loads.push(LoadPoint {
                id: b,
                bus: b,
                baseline,
                flexible: None,
            });
        }
    }
    if loads.is_empty() {
        loads.push(LoadPoint {
            id: 1,
            bus: 1,
            baseline: vec![50.0; p.horizon],
            flexible: None,
        });
    }
    let peak: f64 = (0..p.horizon)
        .map(|t| loads.iter().map(|l| l.baseline[t]).sum::<f64>())
        .fold(0.0, f64::max);
    let weights: Vec<f64> = gen_buses.iter().map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    let generators: Vec<Generator> = gen_buses
        .iter()
        .zip(&weights)
        .enumerate()
        .map(|(i, (&bus, w))| Generator {
            id: i as u32 + 1,
            bus,
            p_min: 0.0,
            p_max: 1.6 * peak * w / wsum,
            cost: rng.random_range(5.0..60.0_f64).round(),
            emission_factor: p.uniform_emission.unwrap_or_else(|| (rng.random_range(0.0..1.0_f64) * 100.0).round() / 100.0),
            emission_profile: None,
        })
        .collect();

    let mut case = GridCase {
        name: format!("synth_{seed}_{n}"),
        buses,
        lines: lines
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Line {
                id: i as u32 + 1,
                from_bus: a,
                to_bus: b,
                reactance: rng.random_range(0.02..0.3),
                flow_limit: f64::INFINITY,
                in_service: true,
            })
            .collect(),
        generators,
        loads,
        slack_bus: order[0],
        time: TimeGrid::hourly(p.horizon),
    };

    // Proportional dispatch flows bound the limits from below.
    let mut worst = vec![0.0_f64; case.lines.len()];
    if !case.lines.is_empty() {
        let ptdf = build_ptdf(&case)?;
        let cap: f64 = case.generators.iter().map(|g| g.p_max).sum();
        let demand = case.bus_loads();
        for t in 0..p.horizon {
            let total = demand.total(t);
            let mut inj: Vec<f64> = demand.period(t).iter().map(|l| -l).collect();
            for g in &case.generators {
                let b = case.bus_index(g.bus).expect("generator bus exists");
                inj[b] += g.p_max * total / cap;
            }
            for (w, f) in worst.iter_mut().zip(ptdf.flows(&inj)) {
                *w = w.max(f.abs());
            }
        }
    }
    for (line, w) in case.lines.iter_mut().zip(worst) {
        line.flow_limit = if rng.random_bool(p.tight_fraction) {
            (w * 1.02 + 1.0).round()
        } else {
            (peak + w).round()
        };
    }
    Ok(case)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::solve_dc_opf;
    use crate::grid::validate_case;

    #[test]
    fn random_cases_validate_and_solve() {
        for seed in 0..20 {
            let p = SynthParams {
                buses: 3 + (seed as usize % 20),
                horizon: 2,
                ..SynthParams::default()
            };
            let c = random_case(seed, &p).unwrap();
            assert!(validate_case(&c).is_valid(), "seed {seed}: {}", validate_case(&c));
            let d = solve_dc_opf(&c, &c.bus_loads()).unwrap();
            assert!(d.first_failure().is_none(), "seed {seed}");
        }
    }

    #[test]
    fn same_seed_same_case() {
        let p = SynthParams::default();
        assert_eq!(random_case(4, &p).unwrap(), random_case(4, &p).unwrap());
    }
}
