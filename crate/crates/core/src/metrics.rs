//! Time-series sampling and the `metrics.csv` format.

use std::fmt::Write as _;

use thiserror::Error;

use crate::ids::LinkId;
use crate::kernel::flows::UNITS_PER_BYTE;
use crate::kernel::SimTime;

pub const FIXED_COLUMNS: [&str; 8] = [
    "t_seconds",
    "vms_propagating",
    "vms_booting",
    "vms_running",
    "vms_error",
    "jobs_queued",
    "jobs_running",
    "jobs_completed",
];

pub fn link_column(id: &LinkId) -> String {
    format!("link_{id}_mbps")
}

/// One row of `metrics.csv`. VM counts are what the scheduler sees; link
/// rates are averages since the previous written row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFrame {
    pub t: SimTime,
    pub vms_propagating: usize,
    pub vms_booting: usize,
    pub vms_running: usize,
    pub vms_error: usize,
    pub jobs_queued: usize,
    pub jobs_running: usize,
    pub jobs_completed: usize,
    pub link_mbps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricsRecorder {
    links: Vec<LinkId>,
    frames: Vec<MetricsFrame>,
    last_t: SimTime,
    last_work: Vec<u128>,
}

impl MetricsRecorder {
    pub fn new(links: Vec<LinkId>) -> Self {
        let n = links.len();
        MetricsRecorder {
            links,
            frames: Vec::new(),
            last_t: SimTime::ZERO,
            last_work: vec![0; n],
        }
    }

    pub fn links(&self) -> &[LinkId] {
        &self.links
    }

    pub fn frames(&self) -> &[MetricsFrame] {
        &self.frames
    }

    /// Appends a row. `work` is cumulative per-link work from the flow
    /// network, in declaration order.
    pub fn record(&mut self, t: SimTime, vms: [usize; 4], jobs: [usize; 3], work: &[u128]) {
        debug_assert_eq!(work.len(), self.links.len());
        let dt = t.since(self.last_t).as_secs_f64();
        let link_mbps = work
            .iter()
            .zip(&self.last_work)
            .map(|(&now, &before)| {
                if dt > 0.0 {
                    let bits = (now - before) as f64 * 8.0 / UNITS_PER_BYTE as f64;
                    bits / dt / 1e6
                } else {
                    0.0
                }
            })
            .collect();
        self.frames.push(MetricsFrame {
            t,
            vms_propagating: vms[0],
            vms_booting: vms[1],
            vms_running: vms[2],
            vms_error: vms[3],
            jobs_queued: jobs[0],
            jobs_running: jobs[1],
            jobs_completed: jobs[2],
            link_mbps,
        });
        self.last_t = t;
        self.last_work = work.to_vec();
    }

    pub fn header(&self) -> String {
        let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        cols.extend(self.links.iter().map(link_column));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for f in &self.frames {
            let _ = write!(
                out,
                "{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
                f.t.as_secs_f64(),
                f.vms_propagating as f64,
                f.vms_booting as f64,
                f.vms_running as f64,
                f.vms_error as f64,
                f.jobs_queued as f64,
                f.jobs_running as f64,
                f.jobs_completed as f64,
            );
            for v in &f.link_mbps {
                let _ = write!(out, ",{v:.3}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("empty file")]
    Empty,
    #[error(transparent)]
    Format(#[from] csv::Error),
    #[error("line {line}: bad number {text:?}")]
    Number { line: u64, text: String },
}

/// A parsed `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn parse(text: &str) -> Result<Self, CsvError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if columns.is_empty() {
            return Err(CsvError::Empty);
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let row = record
                .iter()
                .map(|s| {
                    s.parse::<f64>().map_err(|_| CsvError::Number {
                        line,
                        text: s.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(MetricsTable { columns, rows })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Integrates a rate column (Mbit/s) over row spacing, in bytes. Each
    /// row's rate covers the interval since the previous row.
    pub fn integrate_bytes(&self, name: &str) -> Option<f64> {
        let i = self.column_index(name)?;
        let mut total = 0.0;
        for w in self.rows.windows(2) {
            total += w[1][i] * 1e6 / 8.0 * (w[1][0] - w[0][0]);
        }
        Some(total)
    }
}
