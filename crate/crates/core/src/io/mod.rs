//! Reading and writing cases, profiles and external signals.

mod external;
mod matpower;

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flexload::FlexLoads;
use crate::grid::{validate_case, GridCase};

pub use external::{fetch_external_signal, parse_signal_records, signal_from_records, EndpointConfig, SignalRecord};
pub use matpower::{export_matpower, import_matpower, MatpowerImport};

/// Deserializes JSON, reporting the field path and position on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::parse(
            format!("{path} (line {}, column {})", inner.line(), inner.column()),
            inner.to_string(),
        )
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses and validates a native case document.
pub fn load_case(text: &str) -> Result<GridCase> {
    let case: GridCase = parse_json(text)?;
    let report = validate_case(&case);
    if report.is_valid() {
        Ok(case)
    } else {
        Err(Error::Validation(report))
    }
}

pub fn load_case_file(path: &Path) -> Result<GridCase> {
    load_case(&read_text(path)?)
}

/// Canonical JSON: struct field order, two-space indent, trailing newline.
pub fn export_case(case: &GridCase) -> String {
    let mut s = serde_json::to_string_pretty(case).expect("cases serialize");
    s.push('\n');
    s
}

pub fn load_flexloads(text: &str) -> Result<FlexLoads> {
    parse_json(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    #[serde(rename = "load_MW")]
    LoadMw,
    #[serde(rename = "emission_factor_tCO2_per_MWh")]
    EmissionFactor,
    SignalIntensity,
}

/// Per-id time series with one value per period.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    pub kind: ProfileKind,
    pub columns: BTreeMap<u32, Vec<f64>>,
    /// Header order.
    pub order: Vec<u32>,
}

impl ProfileTable {
    pub fn horizon(&self) -> usize {
        self.columns.values().next().map_or(0, Vec::len)
    }
}

pub fn load_profiles(text: &str, kind: ProfileKind, horizon: usize) -> Result<ProfileTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse("header", e.to_string()))?
        .clone();
    let mut order = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        let id: u32 = h
            .parse()
            .map_err(|_| Error::parse(format!("header column {}", i + 1), format!("id {h:?} is not an integer")))?;
        if order.contains(&id) {
            return Err(Error::parse(format!("header column {}", i + 1), format!("duplicate id {id}")));
        }
        order.push(id);
    }
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); order.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(format!("row {}", r + 2), e.to_string()))?;
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::parse(format!("row {}, column {}", r + 2, c + 1), format!("{cell:?} is not a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(format!("row {}, column {}", r + 2, c + 1), "non-finite value"));
            }
            cols[c].push(v);
        }
    }
    let rows = cols.first().map_or(0, Vec::len);
    if rows != horizon {
        return Err(Error::LengthMismatch {
            what: "profile rows".into(),
            expected: horizon,
            found: rows,
        });
    }
    Ok(ProfileTable {
        kind,
        columns: order.iter().copied().zip(cols).collect(),
        order,
    })
}

/// Replaces load baselines or generator emission profiles from a table.
pub fn apply_profile(case: &mut GridCase, table: &ProfileTable) -> Result<()> {
    if table.horizon() != case.horizon() {
        return Err(Error::LengthMismatch {
            what: "profile horizon".into(),
            expected: case.horizon(),
            found: table.horizon(),
        });
    }
    for (&id, values) in &table.columns {
        match table.kind {
            ProfileKind::LoadMw => {
                let l = case
                    .loads
                    .iter_mut()
                    .find(|l| l.id == id)
                    .ok_or_else(|| Error::Invalid(format!("profile names missing load {id}")))?;
                l.baseline = values.clone();
            }
            ProfileKind::EmissionFactor => {
                let g = case
                    .generators
                    .iter_mut()
                    .find(|g| g.id == id)
                    .ok_or_else(|| Error::Invalid(format!("profile names missing generator {id}")))?;
                g.emission_profile = Some(values.clone());
            }
            ProfileKind::SignalIntensity => {
                return Err(Error::Invalid("signal profiles are not case data".into()));
            }
        }
    }
    let report = validate_case(case);
    if report.is_valid() {
        Ok(())
    } else {
        Err(Error::Validation(report))
    }
}
