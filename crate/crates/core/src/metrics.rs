//! Softmax confidence and the AUROC family.
//!
//! Scores are `f32`; tie detection uses exact `f32` equality and pair
//! counts are accumulated as integers, so the sort-based AUROC agrees
//! bit-for-bit with brute-force pair counting.
//!
//! ```
//! use certood::metrics::{auroc, cauroc};
//!
//! let constant = [0.5_f32; 4];
//! assert_eq!(auroc(&constant, &constant), 0.5);
//! assert_eq!(cauroc(&constant, &constant), 0.0);
//! assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]), 1.0);
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `max_k softmax(z)_k`, evaluated stably in `f64`.
pub fn confidence(logits: &[f32]) -> f32 {
    let m = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let s: f64 = logits.iter().map(|&v| (v as f64 - m).exp()).sum();
    (1.0 / s) as f32
}

/// Confidence of each row of a `[B, K]` logits tensor.
pub fn confidences(logits: &Tensor) -> Vec<f32> {
    (0..logits.batch())
        .map(|b| confidence(logits.row(b)))
        .collect()
}

/// Arg-max class of each row (first index on ties).
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.batch())
        .map(|b| crate::autodiff::first_argmax(logits.row(b)).0)
        .collect()
}

/// Counts `(#{in > out}, #{in == out})` over all pairs in `O(n log n)`.
pub fn pair_counts(in_scores: &[f32], out_scores: &[f32]) -> (u64, u64) {
    let mut out: Vec<f32> = out_scores.to_vec();
    out.sort_by(f32::total_cmp);
    let mut greater = 0u64;
    let mut equal = 0u64;
    for &s in in_scores {
        let below = out.partition_point(|&o| o < s);
        let not_above = out.partition_point(|&o| o <= s);
        greater += below as u64;
        equal += (not_above - below) as u64;
    }
    (greater, equal)
}

/// Probability that an in-sample outranks an out-sample, ties counted half.
/// Returns NaN when either set is empty.
pub fn auroc(in_scores: &[f32], out_scores: &[f32]) -> f64 {
    let (gt, eq) = pair_counts(in_scores, out_scores);
    let pairs = in_scores.len() as f64 * out_scores.len() as f64;
    (2 * gt + eq) as f64 / (2.0 * pairs)
}

/// Conservative AUROC: ties count as failures.
pub fn cauroc(in_scores: &[f32], out_scores: &[f32]) -> f64 {
    let (gt, _) = pair_counts(in_scores, out_scores);
    gt as f64 / (in_scores.len() as f64 * out_scores.len() as f64)
}

/// Guaranteed AUC: out-scores are certified confidence upper bounds.
pub fn gauc(in_scores: &[f32], certified_uppers: &[f32]) -> f64 {
    auroc(in_scores, certified_uppers)
}

/// Adversarial AUC: out-scores are attacked confidences.
pub fn aauc(in_scores: &[f32], attacked: &[f32]) -> f64 {
    auroc(in_scores, attacked)
}

/// Mean accumulated in `f64`.
pub fn mean_confidence(confs: &[f32]) -> f64 {
    confs.iter().map(|&c| c as f64).sum::<f64>() / confs.len() as f64
}

/// Per-sample scores for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub clean_conf: f32,
    pub attacked_conf: Option<f32>,
    pub certified_upper: Option<f32>,
    pub dataset: String,
}

impl EvalRecord {
    /// Checks `clean ≤ attacked ≤ certified` with `slack`.
    pub fn is_consistent(&self, slack: f32) -> bool {
        let clean_ok = self
            .attacked_conf
            .map_or(true, |a| self.clean_conf <= a + slack);
        let upper_ok = match (self.attacked_conf, self.certified_upper) {
            (Some(a), Some(c)) => a <= c + slack,
            (None, Some(c)) => self.clean_conf <= c + slack,
            _ => true,
        };
        clean_ok && upper_ok
    }
}

/// One row of the evaluation CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub dataset: String,
    pub auc: f64,
    pub cauroc: f64,
    pub aauc: Option<f64>,
    pub gauc: Option<f64>,
    pub mean_conf: f64,
    pub epsilon: f32,
}

impl MetricsRow {
    /// Scores one out-distribution against in-distribution confidences.
    pub fn from_records(method: &str, in_confs: &[f32], out: &[EvalRecord], epsilon: f32) -> Self {
        let clean: Vec<f32> = out.iter().map(|r| r.clean_conf).collect();
        let column =
            |f: fn(&EvalRecord) -> Option<f32>| -> Option<Vec<f32>> { out.iter().map(f).collect() };
        MetricsRow {
            method: method.to_string(),
            dataset: out.first().map(|r| r.dataset.clone()).unwrap_or_default(),
            auc: auroc(in_confs, &clean),
            cauroc: cauroc(in_confs, &clean),
            aauc: column(|r| r.attacked_conf).map(|a| aauc(in_confs, &a)),
            gauc: column(|r| r.certified_upper).map(|c| gauc(in_confs, &c)),
            mean_conf: mean_confidence(&clean),
            epsilon,
        }
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "method",
    "dataset",
    "auc",
    "cauroc",
    "aauc",
    "gauc",
    "mean_conf",
    "epsilon",
];

/// Writes the metrics CSV (header plus one row per entry).
pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let res: csv::Result<()> = (|| {
        w.write_record(CSV_HEADER)?;
        for r in rows {
            w.write_record([
                r.method.clone(),
                r.dataset.clone(),
                format!("{:.6}", r.auc),
                format!("{:.6}", r.cauroc),
                fmt(r.aauc),
                fmt(r.gauc),
                format!("{:.6}", r.mean_conf),
                format!("{}", r.epsilon),
            ])?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| Error::Contract(format!("writing metrics CSV: {e}")))
}

pub fn write_metrics_csv_file(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(file, rows)
}

/// Writes per-sample scores: an `index` column followed by `columns`,
/// all of the same length. Values use the shortest exact representation.
pub fn write_scores_csv<W: Write>(out: W, columns: &[(&str, &[f32])]) -> Result<()> {
    let n = columns.first().map_or(0, |c| c.1.len());
    if let Some((name, c)) = columns.iter().find(|c| c.1.len() != n) {
        return Err(Error::Contract(format!(
            "score column {name} has {} rows, expected {n}",
            c.len()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    let res: csv::Result<()> = (|| {
        let header: Vec<&str> = std::iter::once("index")
            .chain(columns.iter().map(|c| c.0))
            .collect();
        w.write_record(&header)?;
        for i in 0..n {
            let row: Vec<String> = std::iter::once(i.to_string())
                .chain(columns.iter().map(|c| c.1[i].to_string()))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| Error::Contract(format!("writing score CSV: {e}")))
}

pub fn write_scores_csv_file(path: &Path, columns: &[(&str, &[f32])]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_scores_csv(file, columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_examples() {
        assert!((confidence(&[0.0; 10]) - 0.1).abs() < 1e-7);
        assert!((confidence(&[2f32.ln(), 0.0]) - 2.0 / 3.0).abs() < 1e-7);
        let z = [0.3, -1.2, 2.5];
        let shifted: Vec<f32> = z.iter().map(|v| v + 7.0).collect();
        assert!((confidence(&z) - confidence(&shifted)).abs() < 1e-6);
    }

    #[test]
    fn separated_and_constant() {
        assert_eq!(auroc(&[0.9, 0.7], &[0.1, 0.3]), 1.0);
        assert_eq!(cauroc(&[0.9, 0.7], &[0.1, 0.3]), 1.0);
        assert_eq!(auroc(&[0.4; 3], &[0.4; 5]), 0.5);
        assert_eq!(cauroc(&[0.4; 3], &[0.4; 5]), 0.0);
    }

    #[test]
    fn saturated_certificates_give_zero_gauc() {
        let ins = [0.5, 0.99, 0.7];
        assert_eq!(gauc(&ins, &[1.0; 4]), 0.0);
        assert_eq!(gauc(&[1.0, 0.5], &[1.0; 2]), 0.25);
    }

    #[test]
    fn mean_confidence_examples() {
        assert_eq!(mean_confidence(&[0.37]), 0.37f32 as f64);
        assert!((mean_confidence(&[0.1; 7]) - 0.1f32 as f64).abs() < 1e-12);
    }

    #[test]
    fn record_consistency() {
        let r = EvalRecord {
            clean_conf: 0.2,
            attacked_conf: Some(0.5),
            certified_upper: Some(0.4),
            dataset: "noise".into(),
        };
        assert!(!r.is_consistent(1e-5));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = vec![MetricsRow {
            method: "good".into(),
            dataset: "uniform".into(),
            auc: 1.0,
            cauroc: 0.5,
            aauc: None,
            gauc: Some(0.25),
            mean_conf: 0.1,
            epsilon: 0.3,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "method,dataset,auc,cauroc,aauc,gauc,mean_conf,epsilon\ngood,uniform,1.000000,0.500000,,0.250000,0.100000,0.3\n"
        );
    }
}
