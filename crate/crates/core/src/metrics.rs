//! Time-behavior measures: per-step wall durations, the average step time
//! (AS_t), overruns, and side-by-side comparison of several runs.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative band around Δt inside which a run still counts as real-time.
///
/// A paced run finishes every step at its deadline or slightly after it
/// (sleep granularity), so its AS_t sits a hair above Δt even when no step
/// overran.
pub const REALTIME_SLACK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "fast")]
    AsFastAsPossible,
    #[serde(rename = "real-time")]
    RealTime,
}

impl RunMode {
    pub fn keyword(self) -> &'static str {
        match self {
            RunMode::AsFastAsPossible => "fast",
            RunMode::RealTime => "real-time",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fast" | "no" | "false" => Ok(RunMode::AsFastAsPossible),
            "real-time" | "realtime" | "yes" | "true" => Ok(RunMode::RealTime),
            other => Err(format!("unknown run mode {other:?} (expected fast or real-time)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step_index: u64,
    /// Seconds from the start of this step to the start of the next one.
    pub wall_duration: f64,
    pub overrun: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub demo: String,
    pub label: String,
    pub mode: RunMode,
    pub step_size: f64,
    pub steps: u64,
    pub total_wall: f64,
    /// AS_t
    pub average_step_time: f64,
    pub min_step_time: f64,
    pub max_step_time: f64,
    pub p95_step_time: f64,
    pub overrun_count: u64,
    /// Process CPU seconds (user + system) spent during the run, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_seconds: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot build a timing report from zero records")]
    Empty,
    #[error("comparison needs at least two reports, got {0}")]
    TooFewReports(usize),
    #[error("{0}")]
    Parse(String),
}

/// Aggregates step records into a report.
pub fn finalize_report(records: &[TimingRecord], step_size: f64, mode: RunMode) -> Result<TimingReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut durations: Vec<f64> = records.iter().map(|r| r.wall_duration).collect();
    durations.sort_by(f64::total_cmp);
    let n = durations.len();
    // Summing in sorted order makes the total independent of record order.
    let total: f64 = durations.iter().sum();
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(TimingReport {
        demo: String::new(),
        label: String::new(),
        mode,
        step_size,
        steps: n as u64,
        total_wall: total,
        average_step_time: total / n as f64,
        min_step_time: durations[0],
        max_step_time: durations[n - 1],
        p95_step_time: durations[rank - 1],
        overrun_count: records.iter().filter(|r| r.overrun).count() as u64,
        cpu_seconds: None,
    })
}

impl TimingReport {
    /// A report known only by its total, as published tables give it. Steps
    /// are assumed uniform, so min, max and p95 equal AS_t.
    pub fn from_total(demo: &str, label: &str, mode: RunMode, steps: u64, step_size: f64, total_wall: f64) -> Self {
        let as_t = total_wall / steps as f64;
        TimingReport {
            demo: demo.to_owned(),
            label: label.to_owned(),
            mode,
            step_size,
            steps,
            total_wall,
            average_step_time: as_t,
            min_step_time: as_t,
            max_step_time: as_t,
            p95_step_time: as_t,
            overrun_count: 0,
            cpu_seconds: None,
        }
    }

    pub fn labeled(mut self, demo: &str, label: &str) -> Self {
        self.demo = demo.to_owned();
        self.label = label.to_owned();
        self
    }

    /// True when AS_t exceeds Δt by more than `slack` (relative).
    pub fn is_infeasible_with(&self, slack: f64) -> bool {
        self.average_step_time > self.step_size * (1.0 + slack)
    }

    pub fn is_realtime_infeasible(&self) -> bool {
        self.is_infeasible_with(REALTIME_SLACK)
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let rows: [(&str, String); 11] = [
            ("demo", self.demo.clone()),
            ("label", self.label.clone()),
            ("mode", self.mode.to_string()),
            ("steps", self.steps.to_string()),
            ("step size (s)", format!("{}", self.step_size)),
            ("total wall (s)", format!("{:.6}", self.total_wall)),
            ("AS_t (s)", format!("{:.6}", self.average_step_time)),
            (
                "min / max / p95 (s)",
                format!(
                    "{:.6} / {:.6} / {:.6}",
                    self.min_step_time, self.max_step_time, self.p95_step_time
                ),
            ),
            ("overruns", self.overrun_count.to_string()),
            (
                "cpu (s)",
                self.cpu_seconds.map_or_else(|| "-".to_owned(), |c| format!("{c:.3}")),
            ),
            (
                "real-time feasible",
                if self.is_realtime_infeasible() {
                    "NO (AS_t > step size)".to_owned()
                } else {
                    "yes".to_owned()
                },
            ),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<20} {v}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        serde_json::from_str(text).map_err(|e| MetricsError::Parse(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub total_wall: f64,
    pub average_step_time: f64,
    pub infeasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub demo: String,
    pub mode: RunMode,
    pub step_size: f64,
    /// One entry per column label; `None` where that run is missing.
    pub cells: Vec<Option<Cell>>,
}

/// Runs laid out as (demo, mode) rows by run-label columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
    reports: Vec<TimingReport>,
    slack: f64,
}

pub fn compare_runs(reports: &[TimingReport]) -> Result<ComparisonTable, MetricsError> {
    compare_runs_with(reports, REALTIME_SLACK)
}

pub fn compare_runs_with(reports: &[TimingReport], slack: f64) -> Result<ComparisonTable, MetricsError> {
    if reports.len() < 2 {
        return Err(MetricsError::TooFewReports(reports.len()));
    }
    let mut columns: Vec<String> = Vec::new();
    for r in reports {
        if !columns.contains(&r.label) {
            columns.push(r.label.clone());
        }
    }
    let mut rows: Vec<ComparisonRow> = Vec::new();
    let mut warnings = Vec::new();
    for r in reports {
        let col = columns.iter().position(|c| *c == r.label).expect("label collected");
        let row = match rows.iter_mut().position(|row| row.demo == r.demo && row.mode == r.mode) {
            Some(i) => &mut rows[i],
            None => {
                rows.push(ComparisonRow {
                    demo: r.demo.clone(),
                    mode: r.mode,
                    step_size: r.step_size,
                    cells: vec![None; columns.len()],
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.cells.resize(columns.len(), None);
        if row.cells[col].is_some() {
            warnings.push(format!(
                "duplicate run for {} / {} / {}; keeping the last one",
                r.demo, r.mode, r.label
            ));
        }
        row.cells[col] = Some(Cell {
            total_wall: r.total_wall,
            average_step_time: r.average_step_time,
            infeasible: r.is_infeasible_with(slack),
        });
    }
    for row in &mut rows {
        row.cells.resize(columns.len(), None);
    }
    for (demo, mode) in rows.iter().map(|r| (&r.demo, r.mode)) {
        let mut counts: Vec<u64> = reports
            .iter()
            .filter(|r| &r.demo == demo && r.mode == mode)
            .map(|r| r.steps)
            .collect();
        counts.sort_unstable();
        counts.dedup();
        if counts.len() > 1 {
            warnings.push(format!(
                "{demo} / {mode}: runs have different step counts {counts:?}"
            ));
        }
    }
    Ok(ComparisonTable {
        columns,
        rows,
        warnings,
        reports: reports.to_vec(),
        slack,
    })
}

impl ComparisonTable {
    /// `(demo, mode, label)` of every flagged cell.
    pub fn flagged(&self) -> Vec<(String, RunMode, String)> {
        let mut out = Vec::new();
        for row in &self.rows {
            for (label, cell) in self.columns.iter().zip(&row.cells) {
                if cell.as_ref().is_some_and(|c| c.infeasible) {
                    out.push((row.demo.clone(), row.mode, label.clone()));
                }
            }
        }
        out
    }

    pub fn cell(&self, demo: &str, mode: RunMode, label: &str) -> Option<&Cell> {
        let col = self.columns.iter().position(|c| c == label)?;
        self.rows
            .iter()
            .find(|r| r.demo == demo && r.mode == mode)?
            .cells[col]
            .as_ref()
    }

    /// Aligned text; each cell shows total wall and AS_t, `!` marks AS_t > Δt.
    pub fn render_text(&self) -> String {
        let mut header = vec!["demo".to_owned(), "mode".to_owned(), "step".to_owned()];
        header.extend(self.columns.iter().cloned());
        let mut grid = vec![header];
        for row in &self.rows {
            let mut line = vec![row.demo.clone(), row.mode.to_string(), format!("{}", row.step_size)];
            for cell in &row.cells {
                line.push(match cell {
                    Some(c) => format!(
                        "{:.4} ({:.4}){}",
                        c.total_wall,
                        c.average_step_time,
                        if c.infeasible { " !" } else { "" }
                    ),
                    None => "-".to_owned(),
                });
            }
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|i| grid.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &grid {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        let _ = writeln!(
            out,
            "cells: total wall s (AS_t s); ! = AS_t exceeds step size by more than {}%",
            self.slack * 100.0
        );
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    /// One CSV line per report.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "total_wall", "as_t", "min", "max", "p95", "overruns", "infeasible"])
            .expect("in-memory write");
        for r in &self.reports {
            let label = if r.demo.is_empty() {
                r.label.clone()
            } else {
                format!("{} / {} / {}", r.demo, r.mode, r.label)
            };
            w.write_record([
                label,
                format!("{}", r.total_wall),
                format!("{}", r.average_step_time),
                format!("{}", r.min_step_time),
                format!("{}", r.max_step_time),
                format!("{}", r.p95_step_time),
                r.overrun_count.to_string(),
                r.is_infeasible_with(self.slack).to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Loads run totals from CSV with header `demo,mode,label,steps,step_size,total_wall`.
pub fn load_totals_csv(text: &str) -> Result<Vec<TimingReport>, MetricsError> {
    #[derive(Deserialize)]
    struct Row {
        demo: String,
        mode: String,
        label: String,
        steps: u64,
        step_size: f64,
        total_wall: f64,
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(|e| MetricsError::Parse(e.to_string()))?;
            let mode = row.mode.parse().map_err(MetricsError::Parse)?;
            Ok(TimingReport::from_total(
                &row.demo,
                &row.label,
                mode,
                row.steps,
                row.step_size,
                row.total_wall,
            ))
        })
        .collect()
}

/// User + system CPU time of this process, in seconds.
pub fn process_cpu_seconds() -> Option<f64> {
    // SAFETY: getrusage writes into the zeroed struct we own.
    unsafe {
        let mut usage: libc::rusage = std::mem::zeroed();
        if libc::getrusage(libc::RUSAGE_SELF, &mut usage) != 0 {
            return None;
        }
        let secs = |tv: libc::timeval| tv.tv_sec as f64 + tv.tv_usec as f64 * 1e-6;
        Some(secs(usage.ru_utime) + secs(usage.ru_stime))
    }
}
