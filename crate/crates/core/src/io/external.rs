//! Third-party carbon-intensity feeds.

use std::path::PathBuf;
use std::time::Duration;

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BusId, TimeGrid};
use crate::signals::{units, MetricKind, SignalFlags, SignalSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default)]
    pub url: String,
    /// Sent as a bearer token when present.
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Recorded response used instead of the network.
    #[serde(default)]
    pub fixture: Option<PathBuf>,
}

fn default_timeout() -> u64 {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct SignalRecord {
    pub period_start: String,
    pub intensity_gCO2_per_kWh: Option<f64>,
}

pub fn parse_signal_records(text: &str) -> Result<Vec<SignalRecord>> {
    let records: Vec<SignalRecord> = super::parse_json(text)?;
    for (i, r) in records.iter().enumerate() {
        if let Some(v) = r.intensity_gCO2_per_kWh {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::parse(format!("[{i}].intensity_gCO2_per_kWh"), format!("invalid intensity {v}")));
            }
        }
    }
    Ok(records)
}

fn request(cfg: &EndpointConfig, zone: &str) -> Result<String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .build()
        .into();
    let mut req = agent.get(&cfg.url).query("zone", zone);
    if let Some(t) = &cfg.token {
        req = req.header("Authorization", &format!("Bearer {t}"));
    }
    let mut resp = req.call().map_err(|e| match e {
        ureq::Error::StatusCode(code) if code < 500 && code != 429 => {
            Error::parse(cfg.url.clone(), format!("endpoint returned status {code}"))
        }
        e => Error::Retryable(format!("{}: {e}", cfg.url)),
    })?;
    resp.body_mut()
        .read_to_string()
        .map_err(|e| Error::Retryable(format!("{}: {e}", cfg.url)))
}

/// Places each record on the grid: by timestamp when both sides are
/// RFC 3339, otherwise in order.
fn align(records: &[SignalRecord], time: &TimeGrid) -> Vec<Option<f64>> {
    let mut out = vec![None; time.horizon];
    let start = DateTime::parse_from_rfc3339(&time.start_label).ok();
    let stamps: Option<Vec<DateTime<FixedOffset>>> = records
        .iter()
        .map(|r| DateTime::parse_from_rfc3339(&r.period_start).ok())
        .collect();
    match (start, stamps) {
        (Some(s), Some(stamps)) => {
            let step = i64::from(time.step_minutes) * 60;
            for (r, ts) in records.iter().zip(stamps) {
                let dt = (ts - s).num_seconds();
                if dt < 0 || dt % step != 0 {
                    continue;
                }
                if let Some(slot) = out.get_mut((dt / step) as usize) {
                    *slot = r.intensity_gCO2_per_kWh;
                }
            }
        }
        _ => {
            for (slot, r) in out.iter_mut().zip(records) {
                *slot = r.intensity_gCO2_per_kWh;
            }
        }
    }
    out
}

/// Builds a uniform signal over `bus_ids` from zonal records.
pub fn signal_from_records(
    records: &[SignalRecord],
    zone: &str,
    source: &str,
    time: &TimeGrid,
    bus_ids: &[BusId],
) -> Result<SignalSeries> {
    let raw = align(records, time);
    let first = raw
        .iter()
        .flatten()
        .next()
        .copied()
        .ok_or_else(|| Error::parse(source.to_string(), format!("no intensity values for zone {zone}")))?;
    let mut s = SignalSeries::new(MetricKind::External, bus_ids.to_vec(), time.horizon, format!("{source} zone={zone}"));
    let mut held = first;
    for (t, v) in raw.iter().enumerate() {
        let (value, flag) = match v {
            Some(v) => {
                held = *v;
                (*v, SignalFlags::empty())
            }
            None => (held, SignalFlags::GAP_FILLED),
        };
        for b in 0..bus_ids.len() {
            s.values[t][b] = units::g_per_kwh_to_t_per_mwh(value);
            s.flags[t][b] = flag;
        }
    }
    Ok(s)
}

pub fn fetch_external_signal(
    cfg: &EndpointConfig,
    zone: &str,
    time: &TimeGrid,
    bus_ids: &[BusId],
) -> Result<SignalSeries> {
    let (text, source) = match &cfg.fixture {
        Some(p) => (super::read_text(p)?, p.display().to_string()),
        None => (request(cfg, zone)?, cfg.url.clone()),
    };
    signal_from_records(&parse_signal_records(&text)?, zone, &source, time, bus_ids)
}
