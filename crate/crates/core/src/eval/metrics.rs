//! Edit distance and character error rate.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Levenshtein distance over Unicode scalar values with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CerRecord {
    pub distance: usize,
    pub ref_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CerReport {
    pub records: Vec<CerRecord>,
    pub total_distance: usize,
    pub total_len: usize,
    /// `total_distance / total_len`.
    pub cer: f64,
}

/// Corpus CER as a ratio of totals. An empty reference adds its distance
/// to the numerator and nothing to the denominator.
pub fn cer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<CerReport> {
    if refs.len() != hyps.len() {
        return Err(Error::Contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let records: Vec<CerRecord> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| CerRecord {
            distance: edit_distance(r.as_ref(), h.as_ref()),
            ref_len: r.as_ref().chars().count(),
        })
        .collect();
    let total_distance = records.iter().map(|r| r.distance).sum();
    let total_len: usize = records.iter().map(|r| r.ref_len).sum();
    if total_len == 0 {
        return Err(Error::Contract(
            "references have no characters; CER is undefined".into(),
        ));
    }
    Ok(CerReport {
        records,
        total_distance,
        total_len,
        cer: total_distance as f64 / total_len as f64,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleReport {
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
}

impl StyleReport {
    pub fn new(n_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() || truth.is_empty() {
            return Err(Error::Contract(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::Contract(format!(
                    "class {} outside 0..{n_classes}",
                    t.max(p)
                )));
            }
            confusion[t][p] += 1;
        }
        let hits: usize = (0..n_classes).map(|i| confusion[i][i]).sum();
        Ok(Self {
            confusion,
            accuracy: hits as f64 / truth.len() as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        assert_eq!(edit_distance("hello", "hello"), 0);
        assert_eq!(edit_distance("hello", "hallo"), 1);
        assert_eq!(cer(&["hello"], &["hallo"]).unwrap().cer, 0.2);
        assert_eq!(edit_distance("ab", ""), 2);
        let r = cer(&["", "abcd"], &["ab", "abcd"]).unwrap();
        assert_eq!((r.total_distance, r.total_len), (2, 4));
        assert!(cer(&[""], &["x"]).is_err());
        assert!(cer(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn aggregate_is_ratio_of_totals() {
        let r = cer(&["a", "abcdefghij"], &["b", "abcdefghij"]).unwrap();
        assert!((r.cer - 1.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn confusion_rows_count_labels() {
        let r = StyleReport::new(3, &[0, 0, 1, 2], &[0, 1, 1, 0]).unwrap();
        assert_eq!(r.confusion[0].iter().sum::<usize>(), 2);
        assert_eq!(r.accuracy, 0.5);
    }
}
