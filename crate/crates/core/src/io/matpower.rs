//! MATPOWER case subset: `bus`, `gen`, `branch`, `gencost`, plus an
//! optional `gen_emission` column of tCO2/MWh per generator row.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{validate_case, Bus, GridCase, Generator, Line, LoadPoint, TimeGrid};

/// Stand-in limit for branches with rateA = 0 (unlimited).
pub const UNLIMITED_MW: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct MatpowerImport {
    pub case: GridCase,
    pub warnings: Vec<String>,
}

fn strip_comment(line: &str) -> &str {
    line.split('%').next().unwrap_or("")
}

fn parse_rows(body: &str, key: &str, ln: usize, rows: &mut Vec<Vec<f64>>) -> Result<()> {
    for chunk in body.split(';') {
        let row = chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| Error::parse(format!("line {ln}"), format!("{c:?} in mpc.{key} is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if !row.is_empty() {
            rows.push(row);
        }
    }
    Ok(())
}

type Matrices = BTreeMap<String, Vec<Vec<f64>>>;

fn matrices(text: &str) -> Result<(String, Matrices)> {
    let mut name = String::from("matpower");
    let mut out = BTreeMap::new();
    let mut open: Option<(String, Vec<Vec<f64>>, usize)> = None;
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let body = match open.as_ref() {
            Some(_) => line,
            None => {
                if let Some(rest) = line.strip_prefix("function") {
                    if let Some((_, n)) = rest.split_once('=') {
                        name = n.trim().trim_end_matches(';').to_string();
                    }
                    continue;
                }
                let Some((key, rhs)) = line.strip_prefix("mpc.").and_then(|r| r.split_once('=')) else {
                    continue;
                };
                let Some(after) = rhs.trim().strip_prefix('[') else {
                    continue;
                };
                open = Some((key.trim().to_string(), Vec::new(), ln));
                after
            }
        };
        let (key, rows, _) = open.as_mut().unwrap();
        match body.find(']') {
            Some(end) => {
                parse_rows(&body[..end], key, ln, rows)?;
                let (key, rows, _) = open.take().unwrap();
                out.insert(key, rows);
            }
            None => parse_rows(body, key, ln, rows)?,
        }
    }
    if let Some((key, _, start)) = open {
        return Err(Error::parse(format!("line {start}"), format!("mpc.{key} is not closed")));
    }
    Ok((name, out))
}

fn col(row: &[f64], i: usize, what: &str, r: usize) -> Result<f64> {
    row.get(i)
        .copied()
        .ok_or_else(|| Error::parse(format!("{what} row {}", r + 1), format!("missing column {}", i + 1)))
}

pub fn import_matpower(text: &str) -> Result<MatpowerImport> {
    let (name, m) = matrices(text)?;
    let get = |k: &str| -> Result<&Vec<Vec<f64>>> {
        match m.get(k) {
            Some(rows) if !rows.is_empty() => Ok(rows),
            Some(_) => Err(Error::parse(format!("mpc.{k}"), "matrix is empty")),
            None => Err(Error::parse(format!("mpc.{k}"), "matrix missing")),
        }
    };
    let (bus_rows, gen_rows, branch_rows, cost_rows) = (get("bus")?, get("gen")?, get("branch")?, get("gencost")?);
    let mut warnings = Vec::new();
    for k in m.keys() {
        if !matches!(k.as_str(), "bus" | "gen" | "branch" | "gencost" | "gen_emission") {
            warnings.push(format!("mpc.{k} ignored"));
        }
    }

    let mut buses = Vec::new();
    let mut loads = Vec::new();
    let mut slack = None;
    for (r, row) in bus_rows.iter().enumerate() {
        let id = col(row, 0, "bus", r)? as u32;
        let kind = col(row, 1, "bus", r)?;
        let pd = col(row, 2, "bus", r)?;
        if kind == 3.0 && slack.is_none() {
            slack = Some(id);
        }
        if row.len() > 3 && row[3] != 0.0 {
            warnings.push(format!("bus {id}: reactive demand ignored"));
        }
        buses.push(Bus {
            id,
            name: format!("bus{id}"),
        });
        if pd != 0.0 {
            loads.push(LoadPoint {
                id,
                bus: id,
                baseline: vec![pd],
                flexible: None,
            });
        }
    }
    let slack_bus = match slack {
        Some(s) => s,
        None => {
            warnings.push("no reference bus; using the first bus".into());
            buses[0].id
        }
    };

    if cost_rows.len() != gen_rows.len() {
        return Err(Error::parse(
            "mpc.gencost",
            format!("{} cost rows for {} generators", cost_rows.len(), gen_rows.len()),
        ));
    }
    let emission = m.get("gen_emission");
    if emission.is_none() {
        warnings.push("no mpc.gen_emission; emission factors set to 0".into());
    }
    let mut generators = Vec::new();
    for (r, (row, cost)) in gen_rows.iter().zip(cost_rows).enumerate() {
        let id = r as u32 + 1;
        let model = col(cost, 0, "gencost", r)?;
        if model != 2.0 {
            return Err(Error::Unsupported(format!("gencost row {}: piecewise-linear costs", r + 1)));
        }
        let n = col(cost, 3, "gencost", r)? as usize;
        let coeffs: Vec<f64> = (0..n).map(|i| col(cost, 4 + i, "gencost", r)).collect::<Result<_>>()?;
        let linear = match n {
            0 | 1 => 0.0,
            2 => coeffs[0],
            _ => {
                if coeffs[..n - 2].iter().any(|&c| c != 0.0) {
                    return Err(Error::Unsupported(format!("gencost row {}: quadratic or higher costs", r + 1)));
                }
                coeffs[n - 2]
            }
        };
        if coeffs.last().is_some_and(|&c| c != 0.0) && n >= 1 {
            warnings.push(format!("generator {id}: constant cost term ignored"));
        }
        let status = row.get(7).copied().unwrap_or(1.0);
        if status == 0.0 {
            warnings.push(format!("generator {id} out of service; capacity set to 0"));
        }
        let e = match emission {
            Some(rows) => rows
                .get(r)
                .and_then(|x| x.first())
                .copied()
                .ok_or_else(|| Error::parse("mpc.gen_emission", format!("missing row {}", r + 1)))?,
            None => 0.0,
        };
        let (pmax, pmin) = (col(row, 8, "gen", r)?, col(row, 9, "gen", r)?);
        generators.push(Generator {
            id,
            bus: col(row, 0, "gen", r)? as u32,
            p_min: if status == 0.0 { 0.0 } else { pmin },
            p_max: if status == 0.0 { 0.0 } else { pmax },
            cost: linear,
            emission_factor: e,
            emission_profile: None,
        });
    }

    let mut lines = Vec::new();
    for (r, row) in branch_rows.iter().enumerate() {
        let id = r as u32 + 1;
        let rate = col(row, 5, "branch", r)?;
        if rate == 0.0 {
            warnings.push(format!("branch {id}: rateA 0 treated as {UNLIMITED_MW} MW"));
        }
        if row.len() > 8 && row[8] != 0.0 && row[8] != 1.0 {
            warnings.push(format!("branch {id}: tap ratio ignored"));
        }
        lines.push(Line {
            id,
            from_bus: col(row, 0, "branch", r)? as u32,
            to_bus: col(row, 1, "branch", r)? as u32,
            reactance: col(row, 3, "branch", r)?,
            flow_limit: if rate == 0.0 { UNLIMITED_MW } else { rate },
            in_service: row.get(10).copied().unwrap_or(1.0) != 0.0,
        });
    }

    let case = GridCase {
        name,
        buses,
        lines,
        generators,
        loads,
        slack_bus,
        time: TimeGrid::hourly(1),
    };
    let report = validate_case(&case);
    if !report.is_valid() {
        return Err(Error::Validation(report));
    }
    Ok(MatpowerImport { case, warnings })
}

/// Writes the subset read by [`import_matpower`], using period-0 loads.
pub fn export_matpower(case: &GridCase) -> String {
    let loads = case.bus_loads();
    let mut s = String::new();
    let _ = writeln!(s, "function mpc = {}", if case.name.is_empty() { "case" } else { &case.name });
    s.push_str("mpc.version = '2';\nmpc.baseMVA = 100;\n\n");
    s.push_str("%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin\nmpc.bus = [\n");
    for (b, bus) in case.buses.iter().enumerate() {
        let kind = if bus.id == case.slack_bus { 3 } else { 1 };
        let pd = loads.values.first().map_or(0.0, |r| r[b]);
        let _ = writeln!(s, "\t{}\t{kind}\t{pd}\t0\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;", bus.id);
    }
    s.push_str("];\n\n%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin\nmpc.gen = [\n");
    for g in &case.generators {
        let _ = writeln!(s, "\t{}\t0\t0\t0\t0\t1\t100\t1\t{}\t{};", g.bus, g.p_max, g.p_min);
    }
    s.push_str("];\n\n%% fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax\nmpc.branch = [\n");
    for l in &case.lines {
        let rate = if l.flow_limit >= UNLIMITED_MW { 0.0 } else { l.flow_limit };
        let _ = writeln!(
            s,
            "\t{}\t{}\t0\t{}\t0\t{rate}\t0\t0\t0\t0\t{}\t-360\t360;",
            l.from_bus,
            l.to_bus,
            l.reactance,
            u8::from(l.in_service)
        );
    }
    s.push_str("];\n\n%% model startup shutdown n c1 c0\nmpc.gencost = [\n");
    for g in &case.generators {
        let _ = writeln!(s, "\t2\t0\t0\t2\t{}\t0;", g.cost);
    }
    s.push_str("];\n\n%% tCO2/MWh\nmpc.gen_emission = [\n");
    for g in &case.generators {
        let _ = writeln!(s, "\t{};", g.emission_factor);
    }
    s.push_str("];\n");
    s
}
