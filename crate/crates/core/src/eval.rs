//! Group-wise evaluation on UnderG (`d = 1`) and OverG (`d = 0`).

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Mode};
use crate::error::{Error, Result};
use crate::losses::decision_rule;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Metrics of one trained model on a balanced validation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub mode: Mode,
    /// Accuracy in CI mode, AUC in CBUC mode.
    pub underg_metric: f64,
    pub overg_metric: f64,
    pub fpr_gap: Option<f64>,
    pub fnr_gap: Option<f64>,
    pub n_underg: usize,
    pub n_overg: usize,
}

impl GroupReport {
    pub const CSV_HEADER: &'static str = "mode,underg_metric,overg_metric,fpr_gap,fnr_gap,n_underg,n_overg";

    /// One CSV row in [`GroupReport::CSV_HEADER`] order; absent gaps are empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.mode,
            self.underg_metric,
            self.overg_metric,
            opt(self.fpr_gap),
            opt(self.fnr_gap),
            self.n_underg,
            self.n_overg
        )
    }
}

/// Row indices of UnderG and OverG. In CI mode `d` must already flag the
/// training set's minority class.
pub fn split_indices(validation: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    if validation.is_empty() {
        return Err(Error::EmptyGroup("validation set is empty".into()));
    }
    if validation.mode == Mode::Ci && validation.minority.is_none() {
        return Err(Error::InvalidConfig(
            "CI evaluation needs the training minority class".into(),
        ));
    }
    let (under, over): (Vec<usize>, Vec<usize>) = (0..validation.len()).partition(|&i| validation.d[i] == 1);
    if under.is_empty() {
        return Err(Error::EmptyGroup("UnderG".into()));
    }
    if over.is_empty() {
        return Err(Error::EmptyGroup("OverG".into()));
    }
    Ok((under, over))
}

pub fn split_groups(validation: &Dataset) -> Result<(Dataset, Dataset)> {
    let (under, over) = split_indices(validation)?;
    Ok((validation.subset(&under), validation.subset(&over)))
}

/// Fraction of thresholded predictions matching the labels.
pub fn accuracy_group(y: &[u8], p: ArrayView1<'_, f64>, threshold: f64) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyGroup("accuracy over an empty group".into()));
    }
    let correct = y
        .iter()
        .zip(p.iter())
        .filter(|(&y, &p)| decision_rule(p, threshold) == y)
        .count();
    Ok(correct as f64 / y.len() as f64)
}

/// Rank-based (Mann-Whitney) AUC; tied scores share their mid-rank, which
/// gives tied positive/negative pairs half credit.
pub fn auc_group(y: &[u8], p: ArrayView1<'_, f64>) -> Result<f64> {
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(
            "AUC needs both classes in the group; use accuracy for single-class groups".into(),
        ));
    }
    if p.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));

    // Doubled ranks stay integral: a tie block over 1-based ranks
    // start..=end has mid-rank (start + end) / 2.
    let mut pos_rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p[order[j + 1]] == p[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u64;
        let positives = order[i..=j].iter().filter(|&&k| y[k] == 1).count() as u64;
        pos_rank_sum2 += rank2 * positives;
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    let u2 = pos_rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg as u64) as f64)
}

/// Signed `FPR(z=0) - FPR(z=1)` and `FNR(z=0) - FNR(z=1)`.
pub fn fairness_gaps(validation: &Dataset, p: ArrayView1<'_, f64>, threshold: f64) -> Result<(f64, f64)> {
    let z = validation.z_or_err()?;
    let mut errors = [[0usize; 2]; 2];
    let mut totals = [[0usize; 2]; 2];
    for i in 0..validation.len() {
        let (y, z) = (validation.y[i] as usize, z[i] as usize);
        totals[y][z] += 1;
        if decision_rule(p[i], threshold) as usize != y {
            errors[y][z] += 1;
        }
    }
    for y in 0..2 {
        for z in 0..2 {
            if totals[y][z] == 0 {
                return Err(Error::EmptyGroup(format!("(y={y}, z={z}) cell")));
            }
        }
    }
    let rate = |y: usize, z: usize| errors[y][z] as f64 / totals[y][z] as f64;
    Ok((rate(0, 0) - rate(0, 1), rate(1, 0) - rate(1, 1)))
}

/// Full report for predictions `p` on `validation`.
pub fn evaluate(validation: &Dataset, p: ArrayView1<'_, f64>, threshold: f64) -> Result<GroupReport> {
    if p.len() != validation.len() {
        return Err(Error::ShapeMismatch {
            what: "prediction count",
            expected: validation.len(),
            actual: p.len(),
        });
    }
    let (under, over) = split_indices(validation)?;
    let metric = |idx: &[usize]| -> Result<f64> {
        let y: Vec<u8> = idx.iter().map(|&i| validation.y[i]).collect();
        let scores: ndarray::Array1<f64> = idx.iter().map(|&i| p[i]).collect();
        match validation.mode {
            Mode::Ci => accuracy_group(&y, scores.view(), threshold),
            Mode::Cbuc => auc_group(&y, scores.view()),
        }
    };
    let gaps = match validation.mode {
        Mode::Cbuc => Some(fairness_gaps(validation, p, threshold)?),
        Mode::Ci => None,
    };
    Ok(GroupReport {
        mode: validation.mode,
        underg_metric: metric(&under)?,
        overg_metric: metric(&over)?,
        fpr_gap: gaps.map(|g| g.0),
        fnr_gap: gaps.map(|g| g.1),
        n_underg: under.len(),
        n_overg: over.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};
    use proptest::prelude::*;

    fn brute_auc(y: &[u8], p: &[f64]) -> f64 {
        let mut twice = 0u64;
        let (mut np, mut nn) = (0u64, 0u64);
        for i in 0..y.len() {
            if y[i] == 1 {
                np += 1;
            } else {
                nn += 1;
            }
        }
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] == 1 && y[j] == 0 {
                    twice += if p[i] > p[j] {
                        2
                    } else if p[i] == p[j] {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        twice as f64 / (2 * np * nn) as f64
    }

    #[test]
    fn split_cbuc_is_even_partition() {
        let ds = Dataset::cbuc(Array2::zeros((4, 1)), vec![0, 0, 1, 1], vec![0, 1, 0, 1]).unwrap();
        let (under, over) = split_indices(&ds).unwrap();
        assert_eq!(under, vec![1, 2]);
        assert_eq!(over, vec![0, 3]);
    }

    #[test]
    fn split_ci_follows_minority() {
        let ds = Dataset::ci(Array2::zeros((4, 1)), vec![0, 1, 0, 1], 1).unwrap();
        let (under, _) = split_groups(&ds).unwrap();
        assert!(under.y.iter().all(|&y| y == 1));
        assert_eq!(under.len(), 2);
        let one_class = Dataset::ci(Array2::zeros((2, 1)), vec![0, 0], 1).unwrap();
        assert!(matches!(split_indices(&one_class), Err(Error::EmptyGroup(_))));
    }

    #[test]
    fn accuracy_values() {
        assert_eq!(accuracy_group(&[1, 1], array![0.9, 0.9].view(), 0.5).unwrap(), 1.0);
        assert_eq!(accuracy_group(&[0, 0], array![0.9, 0.9].view(), 0.5).unwrap(), 0.0);
        let acc = accuracy_group(&[1, 1, 1], array![0.6, 0.4, 0.7].view(), 0.5).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy_group(&[], Array1::zeros(0).view(), 0.5).is_err());
    }

    #[test]
    fn auc_values() {
        assert_eq!(auc_group(&[0, 0, 1, 1], array![0.1, 0.2, 0.8, 0.9].view()).unwrap(), 1.0);
        assert_eq!(auc_group(&[0, 1, 0, 1], Array1::from_elem(4, 0.4).view()).unwrap(), 0.5);
        assert_eq!(auc_group(&[1, 1, 0, 0], array![0.9, 0.4, 0.3, 0.6].view()).unwrap(), 0.75);
        assert!(matches!(auc_group(&[1, 1], array![0.2, 0.3].view()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fairness_gap_values() {
        let ds = Dataset::cbuc(
            Array2::zeros((8, 1)),
            vec![0, 0, 0, 0, 1, 1, 1, 1],
            vec![0, 0, 1, 1, 0, 0, 1, 1],
        )
        .unwrap();
        let p = array![0.6, 0.6, 0.4, 0.4, 0.9, 0.9, 0.9, 0.9];
        let (fpr, fnr) = fairness_gaps(&ds, p.view(), 0.5).unwrap();
        assert_eq!(fpr, 1.0);
        assert_eq!(fnr, 0.0);

        let symmetric = array![0.2, 0.7, 0.7, 0.2, 0.9, 0.3, 0.3, 0.9];
        assert_eq!(fairness_gaps(&ds, symmetric.view(), 0.5).unwrap(), (0.0, 0.0));

        let permuted = array![0.7, 0.2, 0.2, 0.7, 0.3, 0.9, 0.9, 0.3];
        assert_eq!(fairness_gaps(&ds, permuted.view(), 0.5).unwrap(), (0.0, 0.0));

        let missing = Dataset::cbuc(Array2::zeros((3, 1)), vec![0, 0, 1], vec![0, 1, 0]).unwrap();
        assert!(fairness_gaps(&missing, array![0.1, 0.2, 0.3].view(), 0.5).is_err());
    }

    #[test]
    fn report_row_layout() {
        let ds = Dataset::ci(Array2::zeros((4, 1)), vec![0, 1, 0, 1], 1).unwrap();
        let report = evaluate(&ds, array![0.2, 0.7, 0.6, 0.9].view(), 0.5).unwrap();
        assert_eq!(report.csv_row(), "CI,1,0.5,,,2,2");
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            raw in prop::collection::vec((0u8..2, 0u32..20), 2..300)
        ) {
            let y: Vec<u8> = raw.iter().map(|r| r.0).collect();
            prop_assume!(y.contains(&0) && y.contains(&1));
            let p: Vec<f64> = raw.iter().map(|r| r.1 as f64 / 20.0).collect();
            let auc = auc_group(&y, Array1::from(p.clone()).view()).unwrap();
            prop_assert_eq!(auc, brute_auc(&y, &p));
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            raw in prop::collection::vec((0u8..2, -50i32..50), 2..200)
        ) {
            let y: Vec<u8> = raw.iter().map(|r| r.0).collect();
            prop_assume!(y.contains(&0) && y.contains(&1));
            let p: Array1<f64> = raw.iter().map(|r| r.1 as f64 / 10.0).collect();
            let q = p.mapv(|v| (v * 0.7).exp() + 3.0);
            prop_assert_eq!(auc_group(&y, p.view()).unwrap(), auc_group(&y, q.view()).unwrap());
        }

        #[test]
        fn accuracy_complements_under_reflection(
            p in prop::collection::vec(0.01f64..0.99, 1..100),
            class in 0u8..2,
            t in 0.05f64..0.95,
        ) {
            prop_assume!(p.iter().all(|v| (v - t).abs() > 1e-9));
            let y = vec![class; p.len()];
            let p = Array1::from(p);
            let reflected = p.mapv(|v| 1.0 - v);
            let a = accuracy_group(&y, p.view(), t).unwrap();
            let b = accuracy_group(&y, reflected.view(), 1.0 - t).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
