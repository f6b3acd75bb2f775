//! Accuracy bookkeeping across phases and the stability/plasticity summaries.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::learner::Predictor;
use crate::model::Model;
use crate::stream::LabeledExample;

/// Fraction of `test` that `predictor` labels correctly.
pub fn eval_accuracy(predictor: &impl Predictor, test: &[LabeledExample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut correct = 0usize;
    for ex in test {
        if predictor.predict(&ex.features)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// `acc[t][k]` = accuracy of the phase-`t` model on task `k`'s test set,
/// for `k ≤ t` (both 1-based in the API, 0-based in storage).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    test_counts: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn new(test_counts: Vec<usize>) -> Self {
        Self {
            rows: Vec::new(),
            test_counts,
        }
    }

    /// Builds a matrix from complete rows; row `t` must have `t` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>, test_counts: Vec<usize>) -> Result<Self> {
        let mut m = Self::new(test_counts);
        for r in rows {
            m.push_phase(r)?;
        }
        Ok(m)
    }

    pub fn push_phase(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len() + 1;
        if row.len() != t {
            return Err(Error::Matrix(format!("phase {t} needs {t} entries, got {}", row.len())));
        }
        if t > self.test_counts.len() {
            return Err(Error::Matrix(format!("no test count for task {t}")));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Matrix(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn phases(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn test_counts(&self) -> &[usize] {
        &self.test_counts
    }

    /// Accuracy of the phase-`t` model on task `k` (1-based).
    pub fn get(&self, t: usize, k: usize) -> Option<f64> {
        self.rows.get(t.checked_sub(1)?)?.get(k.checked_sub(1)?).copied()
    }

    fn require_phases(&self, min: usize) -> Result<()> {
        if self.rows.len() < min {
            return Err(Error::Matrix(format!("needs at least {min} phases, has {}", self.rows.len())));
        }
        Ok(())
    }

    /// Writes `t,k,accuracy,test_count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,k,accuracy,test_count\n");
        for (t, row) in self.rows.iter().enumerate() {
            for (k, acc) in row.iter().enumerate() {
                writeln!(s, "{},{},{},{}", t + 1, k + 1, acc, self.test_counts[k]).expect("string write");
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut cells = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
            let parse_usize = |i: usize| field(i).parse::<usize>().map_err(|e| Error::Matrix(e.to_string()));
            let acc: f64 = field(2).parse().map_err(|e: std::num::ParseFloatError| Error::Matrix(e.to_string()))?;
            cells.push((parse_usize(0)?, parse_usize(1)?, acc, parse_usize(3)?));
        }
        let phases = cells.iter().map(|c| c.0).max().unwrap_or(0);
        let mut rows = vec![Vec::new(); phases];
        let mut counts = vec![0; phases];
        for (t, k, acc, n) in cells {
            if t == 0 || k == 0 || k > t {
                return Err(Error::Matrix(format!("entry ({t}, {k}) outside the lower triangle")));
            }
            let row = &mut rows[t - 1];
            if row.len() != k - 1 {
                return Err(Error::Matrix(format!("entries of phase {t} out of order")));
            }
            row.push(acc);
            counts[k - 1] = n;
        }
        Self::from_rows(rows, counts)
    }
}

/// Mean over phases of the test-size-weighted accuracy on every task seen
/// so far.
pub fn average_incremental_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    m.require_phases(1)?;
    let mut total = 0.0;
    for row in m.rows() {
        let n: usize = m.test_counts[..row.len()].iter().sum();
        if n == 0 {
            return Err(Error::Matrix("phase with no test examples".into()));
        }
        let correct: f64 = row.iter().zip(&m.test_counts).map(|(a, &c)| a * c as f64).sum();
        total += correct / n as f64;
    }
    Ok(total / m.phases() as f64)
}

/// Average accuracy on previous tasks (stability).
pub fn apt(m: &AccuracyMatrix) -> Result<f64> {
    m.require_phases(2)?;
    let t_max = m.phases();
    let mut total = 0.0;
    for t in 2..=t_max {
        let row = &m.rows()[t - 1];
        total += row[..t - 1].iter().sum::<f64>() / (t - 1) as f64;
    }
    Ok(total / (t_max - 1) as f64)
}

/// Average accuracy on the current task (plasticity).
pub fn act(m: &AccuracyMatrix) -> Result<f64> {
    m.require_phases(1)?;
    let total: f64 = m.rows().iter().enumerate().map(|(t, row)| row[t]).sum();
    Ok(total / m.phases() as f64)
}

/// Writes one row per example, sorted by id:
/// `id,label,phase,f0,f1,...` with a header line.
pub fn export_embeddings(model: &Model, examples: &[LabeledExample], phase: usize, path: &Path) -> Result<()> {
    let text = embeddings_csv(model, examples, phase)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn embeddings_csv(model: &Model, examples: &[LabeledExample], phase: usize) -> Result<String> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no examples to export".into()));
    }
    let mut sorted: Vec<&LabeledExample> = examples.iter().collect();
    sorted.sort_by_key(|e| e.id);
    let mut s = String::from("id,label,phase");
    for i in 0..model.feature_dim() {
        write!(s, ",f{i}").expect("string write");
    }
    s.push('\n');
    for ex in sorted {
        let f = model.feature_vector(&ex.features)?;
        write!(s, "{},{},{}", ex.id, ex.label, phase).expect("string write");
        for v in f {
            write!(s, ",{v}").expect("string write");
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Always(usize);

    impl Predictor for Always {
        fn predict(&self, _: &[f64]) -> Result<usize> {
            Ok(self.0)
        }
    }

    fn examples(label: usize, n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| LabeledExample {
                id: i as u64,
                features: vec![0.0],
                label,
            })
            .collect()
    }

    #[test]
    fn constant_predictor_accuracy() {
        assert_eq!(eval_accuracy(&Always(0), &examples(0, 5)).unwrap(), 1.0);
        assert_eq!(eval_accuracy(&Always(0), &examples(1, 5)).unwrap(), 0.0);
        assert!(matches!(eval_accuracy(&Always(0), &[]), Err(Error::EmptyTestSet)));
    }

    #[test]
    fn average_incremental_accuracy_cases() {
        let ones = AccuracyMatrix::from_rows(vec![vec![1.0], vec![1.0, 1.0], vec![1.0; 3]], vec![5, 5, 5]).unwrap();
        assert_eq!(average_incremental_accuracy(&ones).unwrap(), 1.0);

        let m = AccuracyMatrix::from_rows(vec![vec![0.8], vec![0.6, 0.7]], vec![10, 10]).unwrap();
        assert!((average_incremental_accuracy(&m).unwrap() - 0.725).abs() < 1e-12);

        let single = AccuracyMatrix::from_rows(vec![vec![0.37]], vec![4]).unwrap();
        assert_eq!(average_incremental_accuracy(&single).unwrap(), 0.37);

        // a 3x larger first task pulls phase 2 toward its accuracy
        let weighted = AccuracyMatrix::from_rows(vec![vec![0.8], vec![0.6, 1.0]], vec![30, 10]).unwrap();
        assert!((average_incremental_accuracy(&weighted).unwrap() - (0.8 + 0.7) / 2.0).abs() < 1e-12);

        assert!(average_incremental_accuracy(&AccuracyMatrix::new(vec![1])).is_err());
    }

    #[test]
    fn apt_and_act_cases() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]], vec![1, 1]).unwrap();
        assert_eq!(apt(&m).unwrap(), 0.8);
        assert!((act(&m).unwrap() - 0.8).abs() < 1e-12);

        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7], vec![0.6, 0.7, 0.5]], vec![1, 1, 1]).unwrap();
        assert!((apt(&m).unwrap() - 0.725).abs() < 1e-12);
        assert!((act(&m).unwrap() - 0.7).abs() < 1e-12);

        let perfect = AccuracyMatrix::from_rows(vec![vec![1.0], vec![1.0, 1.0]], vec![1, 1]).unwrap();
        assert_eq!(apt(&perfect).unwrap(), 1.0);
        assert_eq!(act(&perfect).unwrap(), 1.0);

        let single = AccuracyMatrix::from_rows(vec![vec![0.5]], vec![1]).unwrap();
        assert!(apt(&single).is_err());
    }

    #[test]
    fn matrix_rejects_malformed_rows() {
        let mut m = AccuracyMatrix::new(vec![1, 1]);
        assert!(m.push_phase(vec![0.5, 0.5]).is_err());
        assert!(m.push_phase(vec![1.5]).is_err());
        m.push_phase(vec![0.5]).unwrap();
        assert_eq!(m.get(1, 1), Some(0.5));
        assert_eq!(m.get(2, 1), None);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.1], vec![0.2, 1.0 / 3.0]], vec![7, 9]).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("t,k,accuracy,test_count\n1,1,0.1,7\n"));
        assert_eq!(AccuracyMatrix::from_csv(&csv).unwrap(), m);
    }
}
