//! Side-by-side table of run summaries.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::{RunSummary, Stat};

pub const METRICS: [&str; 3] = ["average_incremental_accuracy", "apt", "act"];

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub preset: String,
    /// Indexed like [`METRICS`].
    pub metrics: [Option<Stat>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Row index of the best mean per metric; the first row wins ties.
    pub best: [Option<usize>; 3],
}

impl Comparison {
    pub fn from_summaries(summaries: &[RunSummary]) -> Result<Self> {
        if summaries.len() < 2 {
            return Err(Error::Summary("comparison needs at least two summaries".into()));
        }
        let reference = &summaries[0].protocol;
        if reference.is_none() {
            return Err(Error::Summary(format!("summary '{}' has no protocol", summaries[0].name)));
        }
        for s in &summaries[1..] {
            if &s.protocol != reference {
                return Err(Error::Summary(format!(
                    "incompatible protocols: '{}' {:?} vs '{}' {:?}",
                    summaries[0].name, reference, s.name, s.protocol
                )));
            }
        }
        let rows: Vec<ComparisonRow> = summaries
            .iter()
            .map(|s| ComparisonRow {
                label: s.name.clone(),
                preset: s.preset.name().to_string(),
                metrics: [
                    s.aggregate.average_incremental_accuracy,
                    s.aggregate.apt,
                    s.aggregate.act,
                ],
            })
            .collect();
        let best = mark_best(&rows);
        Ok(Self { rows, best })
    }

    pub fn from_paths(paths: &[impl AsRef<Path>]) -> Result<Self> {
        let summaries = paths
            .iter()
            .map(|p| RunSummary::load(p.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_summaries(&summaries)
    }

    /// Fixed-width table; the best mean in each column carries a `*`.
    pub fn to_text(&self) -> String {
        let cell = |row: usize, m: usize| -> String {
            let star = if self.best[m] == Some(row) { "*" } else { " " };
            match self.rows[row].metrics[m] {
                Some(s) => format!("{:.4} ± {:.4}{star}", s.mean, s.std),
                None => format!("{:>15}{star}", "n/a"),
            }
        };
        let width = self.rows.iter().map(|r| r.label.len().max(r.preset.len())).max().unwrap_or(0).max(6);
        let mut s = String::new();
        writeln!(s, "{:<width$}  {:<width$}  {:<16}  {:<16}  {:<16}", "run", "preset", "avg_inc_acc", "apt", "act")
            .expect("string write");
        for (i, r) in self.rows.iter().enumerate() {
            writeln!(s, "{:<width$}  {:<width$}  {:<16}  {:<16}  {:<16}", r.label, r.preset, cell(i, 0), cell(i, 1), cell(i, 2))
                .expect("string write");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,preset");
        for m in METRICS {
            write!(s, ",{m}_mean,{m}_std").expect("string write");
        }
        s.push_str(",best\n");
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec = vec![r.label.clone(), r.preset.clone()];
            for m in &r.metrics {
                match m {
                    Some(st) => rec.extend([st.mean.to_string(), st.std.to_string()]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            let best: Vec<&str> = (0..3).filter(|&m| self.best[m] == Some(i)).map(|m| METRICS[m]).collect();
            rec.push(best.join(";"));
            w.write_record(&rec).expect("in-memory csv write");
        }
        s.push_str(&String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv"));
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let expected = 2 + 2 * METRICS.len() + 1;
        if headers.len() != expected {
            return Err(Error::Summary(format!("expected {expected} columns, found {}", headers.len())));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<Option<f64>> {
                let v = rec.get(i).unwrap_or("");
                if v.is_empty() {
                    return Ok(None);
                }
                v.parse().map(Some).map_err(|e| Error::Summary(format!("column {i}: {e}")))
            };
            let mut metrics = [None; 3];
            for (m, slot) in metrics.iter_mut().enumerate() {
                if let (Some(mean), Some(std)) = (parse(2 + 2 * m)?, parse(3 + 2 * m)?) {
                    *slot = Some(Stat { mean, std, n: 0 });
                }
            }
            rows.push(ComparisonRow {
                label: rec.get(0).unwrap_or("").to_string(),
                preset: rec.get(1).unwrap_or("").to_string(),
                metrics,
            });
        }
        let best = mark_best(&rows);
        Ok(Self { rows, best })
    }
}

fn mark_best(rows: &[ComparisonRow]) -> [Option<usize>; 3] {
    let mut best = [None; 3];
    for (m, slot) in best.iter_mut().enumerate() {
        let mut top: Option<(f64, usize)> = None;
        for (i, r) in rows.iter().enumerate() {
            if let Some(s) = r.metrics[m] {
                if top.is_none_or(|(v, _)| s.mean > v) {
                    top = Some((s.mean, i));
                }
            }
        }
        *slot = top.map(|(_, i)| i);
    }
    best
}
