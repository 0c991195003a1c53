//! Report bundle: `summary.txt`, one CSV per table and `results.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use teugel_core::table::format_real;
use teugel_core::{Estimate, Table};

use crate::config::OutputConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metric {
    pub value: f64,
    /// Absent for quantities without Monte Carlo error.
    pub std_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub metric: String,
    /// Human-readable form of the tolerance, e.g. `< 1e-10`.
    pub requirement: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ReportBundle {
    pub command: String,
    metrics: BTreeMap<String, Metric>,
    checks: Vec<Check>,
    tables: Vec<(String, Table)>,
    notes: Vec<String>,
}

#[derive(Serialize)]
struct ResultsIndex<'a> {
    command: &'a str,
    passed: bool,
    metrics: &'a BTreeMap<String, Metric>,
    checks: &'a [Check],
}

impl ReportBundle {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_owned(),
            ..Self::default()
        }
    }

    pub fn value(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), Metric { value, std_err: None });
    }

    pub fn estimate(&mut self, name: impl Into<String>, e: Estimate) {
        self.metrics.insert(
            name.into(),
            Metric {
                value: e.value,
                std_err: Some(e.std_err),
            },
        );
    }

    /// Records `value` under `name` and a check on it.
    pub fn check(&mut self, name: impl Into<String>, value: f64, requirement: impl Into<String>, passed: bool) {
        let name = name.into();
        self.value(name.clone(), value);
        self.checks.push(Check {
            metric: name,
            requirement: requirement.into(),
            passed,
        });
    }

    /// A check on a metric that is already recorded.
    pub fn check_existing(&mut self, name: &str, requirement: impl Into<String>, passed: bool) {
        assert!(self.metrics.contains_key(name), "metric `{name}` must be recorded first");
        self.checks.push(Check {
            metric: name.to_owned(),
            requirement: requirement.into(),
            passed,
        });
    }

    pub fn table(&mut self, name: impl Into<String>, table: Table) {
        self.tables.push((name.into(), table));
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.notes.push(line.into());
    }

    pub fn metric(&self, name: &str) -> Option<Metric> {
        self.metrics.get(name).copied()
    }

    pub fn metrics(&self) -> &BTreeMap<String, Metric> {
        &self.metrics
    }

    pub fn checks(&self) -> &[Check] {
        &self.checks
    }

    pub fn tables(&self) -> &[(String, Table)] {
        &self.tables
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// Plain-text summary. Every number in it is a metric of the results index.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "command: {}", self.command).unwrap();
        writeln!(s, "verdict: {}", if self.passed() { "PASS" } else { "FAIL" }).unwrap();
        for note in &self.notes {
            writeln!(s, "note: {note}").unwrap();
        }
        writeln!(s, "\nchecks:").unwrap();
        for c in &self.checks {
            let m = self.metrics[&c.metric];
            writeln!(
                s,
                "  [{}] {} = {} (required {})",
                if c.passed { "pass" } else { "FAIL" },
                c.metric,
                format_real(m.value),
                c.requirement
            )
            .unwrap();
        }
        writeln!(s, "\nmetrics:").unwrap();
        for (name, m) in &self.metrics {
            match m.std_err {
                Some(se) => writeln!(s, "  {name} = {} (se {})", format_real(m.value), format_real(se)),
                None => writeln!(s, "  {name} = {}", format_real(m.value)),
            }
            .unwrap();
        }
        s
    }

    pub fn results_json(&self) -> String {
        let index = ResultsIndex {
            command: &self.command,
            passed: self.passed(),
            metrics: &self.metrics,
            checks: &self.checks,
        };
        serde_json::to_string_pretty(&index).expect("metrics serialize") + "\n"
    }

    /// Writes the requested formats into `output.directory`; returns the files written.
    pub fn write(&self, output: &OutputConfig) -> Result<Vec<PathBuf>, CliError> {
        let dir = &output.directory;
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let mut written = Vec::new();
        if output.wants("txt") {
            written.push(write_text(&dir.join("summary.txt"), &self.summary())?);
        }
        if output.wants("json") {
            written.push(write_text(&dir.join("results.json"), &self.results_json())?);
        }
        if output.wants("csv") {
            for (name, table) in &self.tables {
                let path = dir.join(format!("{name}.csv"));
                emit_csv(table, &path)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf, CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path.to_owned())
}

pub fn emit_csv(table: &Table, path: &Path) -> Result<(), CliError> {
    table
        .write_csv(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
