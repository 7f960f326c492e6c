use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::diagnostics::DiagnosticRecord;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 8] = [
    "experiment",
    "normalizer",
    "params",
    "arch",
    "seed",
    "metric",
    "layer",
    "value",
];

/// A run that stopped early. `at` is a layer for forward probes and an
/// iteration for training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub normalizer: String,
    pub params: String,
    pub seed: u64,
    pub stage: String,
    pub at: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub records: Vec<DiagnosticRecord>,
    pub divergences: Vec<Divergence>,
    /// Wall-clock seconds. The only field that varies between identical runs.
    pub elapsed_seconds: f64,
}

impl ReportBundle {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config,
            records: Vec::new(),
            divergences: Vec::new(),
            elapsed_seconds: 0.0,
        }
    }

    /// Sorts records and divergences so output does not depend on scheduling.
    pub fn normalize_order(&mut self) {
        self.records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        self.divergences.sort_by(|a, b| {
            (&a.normalizer, &a.params, a.seed, &a.stage).cmp(&(
                &b.normalizer,
                &b.params,
                b.seed,
                &b.stage,
            ))
        });
    }

    /// Values of `metric`, in record order.
    pub fn values(&self, metric: &str) -> Vec<&DiagnosticRecord> {
        self.records.iter().filter(|r| r.metric == metric).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io {
        path: "<csv>".into(),
        source: std::io::Error::other(e),
    }
}

pub fn to_csv(bundle: &ReportBundle) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in &bundle.records {
        w.write_record([
            r.experiment.as_str(),
            &r.normalizer,
            &r.params,
            &r.arch,
            &r.seed.to_string(),
            &r.metric,
            &r.layer.map(|l| l.to_string()).unwrap_or_default(),
            &format!("{:.9}", r.value),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// JSON with the same fixed 9-decimal precision as the CSV.
pub fn to_json(bundle: &ReportBundle) -> Result<String> {
    let mut b = bundle.clone();
    for r in &mut b.records {
        if r.value.is_finite() {
            r.value = format!("{:.9}", r.value).parse().expect("formatted float");
        }
    }
    Ok(serde_json::to_string_pretty(&b)? + "\n")
}

pub fn from_json(text: &str) -> Result<ReportBundle> {
    let b: ReportBundle = serde_json::from_str(text)?;
    if b.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "report schema {} is not {SCHEMA_VERSION}",
            b.schema_version
        )));
    }
    Ok(b)
}

pub fn emit(bundle: &ReportBundle, format: Format, path: &Path) -> Result<()> {
    let text = match format {
        Format::Csv => to_csv(bundle)?,
        Format::Json => to_json(bundle)?,
    };
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ExperimentKind;

    fn record() -> DiagnosticRecord {
        DiagnosticRecord {
            experiment: "rank-sweep".into(),
            normalizer: "gn".into(),
            params: "eps=1e-6;g=4".into(),
            arch: "plain30x64".into(),
            batch: 64,
            seed: 3,
            metric: "stable_rank".into(),
            layer: None,
            value: 1.0 / 3.0,
            diverged: false,
        }
    }

    #[test]
    fn empty_bundle_is_header_only() {
        let b = ReportBundle::new(ExperimentConfig::defaults(ExperimentKind::RankSweep));
        assert_eq!(
            to_csv(&b).unwrap(),
            "experiment,normalizer,params,arch,seed,metric,layer,value\n"
        );
    }

    #[test]
    fn one_record_two_lines() {
        let mut b = ReportBundle::new(ExperimentConfig::defaults(ExperimentKind::RankSweep));
        b.records.push(record());
        let csv = to_csv(&b).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            "rank-sweep,gn,eps=1e-6;g=4,plain30x64,3,stable_rank,,0.333333333"
        );
    }

    #[test]
    fn json_round_trip_idempotent() {
        let mut b = ReportBundle::new(ExperimentConfig::defaults(ExperimentKind::RankSweep));
        b.records.push(record());
        let once = to_json(&b).unwrap();
        let twice = to_json(&from_json(&once).unwrap()).unwrap();
        assert_eq!(once, twice);
    }
}
