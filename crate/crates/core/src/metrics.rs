//! Append-only per-round metric stream with a fixed CSV layout.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "round,client_id,split,metric,value";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub client_id: usize,
    pub split: Split,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a row; rounds may not go backwards.
    pub fn push(&mut self, round: usize, client_id: usize, split: Split, metric: &str, value: f64) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if round < last.round {
                return Err(Error::Usage(format!("metrics round {round} after round {}", last.round)));
            }
        }
        self.rows.push(MetricRow { round, client_id, split, metric: metric.to_string(), value });
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Values of one metric for one client, in round order.
    pub fn series(&self, client_id: usize, split: Split, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.client_id == client_id && r.split == split && r.metric == metric)
            .map(|r| (r.round, r.value))
            .collect()
    }

    pub fn select<'a>(&'a self, split: Split, metric: &'a str) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| r.split == split && r.metric == metric)
    }

    /// Highest value of a metric for a client across all rounds.
    pub fn best(&self, client_id: usize, split: Split, metric: &str) -> Option<f64> {
        self.series(client_id, split, metric).into_iter().map(|(_, v)| v).reduce(f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.rows.len() * 32);
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.round, r.client_id, r.split.as_str(), r.metric, r.value);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            _ => return Err(Error::Parse { line: 1, message: format!("expected header `{CSV_HEADER}`") }),
        }
        let mut log = Self::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |m: &str| Error::Parse { line: line_no, message: m.to_string() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(parse_err("expected 5 fields"));
            }
            let round = f[0].parse().map_err(|_| parse_err("bad round"))?;
            let client = f[1].parse().map_err(|_| parse_err("bad client_id"))?;
            let split = f[2].parse().map_err(|_| parse_err("bad split"))?;
            let value = f[4].parse().map_err(|_| parse_err("bad value"))?;
            log.push(round, client, split, f[3], value).map_err(|e| parse_err(&e.to_string()))?;
        }
        Ok(log)
    }
}
