//! Classification metrics. Scores are probabilities in [0, 1]; the decision
//! threshold is 0.5; every reported figure is in percent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut c = Confusion { tp: 0, tn: 0, fp: 0, fn_: 0 };
    for (&s, &l) in scores.iter().zip(labels) {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidArgument(format!("score {s} outside [0, 1]")));
        }
        if l > 1 {
            return Err(Error::InvalidArgument(format!("label {l} outside {{0,1}}")));
        }
        let predicted_pos = s >= threshold;
        match (predicted_pos, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// All figures in percent. AUROC is absent when only one class is present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub bacc: f64,
    pub auroc: Option<f64>,
    pub mcc: f64,
}

impl Metrics {
    /// All-zero placeholder for report rows that have no spread.
    pub fn zero() -> Metrics {
        Metrics {
            accuracy: 0.0,
            macro_f1: 0.0,
            bacc: 0.0,
            auroc: None,
            mcc: 0.0,
        }
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    // 2 tp / (2 tp + fp + fn); zero when the denominator vanishes
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Mann-Whitney AUROC with midranks for tied scores.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied entries share the midrank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

pub fn compute_metrics(scores: &[f64], labels: &[u8]) -> Result<Metrics> {
    let c = confusion(scores, labels, THRESHOLD)?;
    let n = (c.tp + c.tn + c.fp + c.fn_) as f64;
    let accuracy = (c.tp + c.tn) as f64 / n;

    let f1_pos = f1(c.tp, c.fp, c.fn_);
    let f1_neg = f1(c.tn, c.fn_, c.fp);
    let macro_f1 = (f1_pos + f1_neg) / 2.0;

    let tpr = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let tnr = if c.tn + c.fp == 0 {
        0.0
    } else {
        c.tn as f64 / (c.tn + c.fp) as f64
    };
    let bacc = (tpr + tnr) / 2.0;

    let mcc_denom = ((c.tp + c.fp) as f64
        * (c.tp + c.fn_) as f64
        * (c.tn + c.fp) as f64
        * (c.tn + c.fn_) as f64)
        .sqrt();
    let mcc = if mcc_denom == 0.0 {
        0.0
    } else {
        (c.tp as f64 * c.tn as f64 - c.fp as f64 * c.fn_ as f64) / mcc_denom
    };

    Ok(Metrics {
        accuracy: 100.0 * accuracy,
        macro_f1: 100.0 * macro_f1,
        bacc: 100.0 * bacc,
        auroc: auroc(scores, labels).map(|a| 100.0 * a),
        mcc: 100.0 * mcc,
    })
}

/// Mean and standard deviation over a set of runs, entry-wise. AUROC is
/// averaged over the runs where it is defined.
pub fn summarize(runs: &[Metrics]) -> (Metrics, Metrics) {
    let pick = |f: &dyn Fn(&Metrics) -> f64| -> (f64, f64) {
        let vals: Vec<f64> = runs.iter().map(f).collect();
        mean_std(&vals)
    };
    let (acc_m, acc_s) = pick(&|m| m.accuracy);
    let (f1_m, f1_s) = pick(&|m| m.macro_f1);
    let (bacc_m, bacc_s) = pick(&|m| m.bacc);
    let (mcc_m, mcc_s) = pick(&|m| m.mcc);
    let aurocs: Vec<f64> = runs.iter().filter_map(|m| m.auroc).collect();
    let auroc = if aurocs.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&aurocs);
        (Some(m), Some(s))
    };
    (
        Metrics {
            accuracy: acc_m,
            macro_f1: f1_m,
            bacc: bacc_m,
            auroc: auroc.0,
            mcc: mcc_m,
        },
        Metrics {
            accuracy: acc_s,
            macro_f1: f1_s,
            bacc: bacc_s,
            auroc: auroc.1,
            mcc: mcc_s,
        },
    )
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Metrics of uniformly random scorers against the given labels, one entry
/// per repeat.
pub fn random_baseline(labels: &[u8], repeats: usize, seed: u64) -> Result<Vec<Metrics>> {
    if labels.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument("empty labels or zero repeats".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..repeats)
        .map(|_| {
            let scores: Vec<f64> = labels.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
            compute_metrics(&scores, labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_classifier() {
        let m = compute_metrics(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 100.0);
        assert_eq!(m.macro_f1, 100.0);
        assert_eq!(m.bacc, 100.0);
        assert_eq!(m.auroc, Some(100.0));
        assert_eq!(m.mcc, 100.0);
    }

    #[test]
    fn degenerate_all_negative_on_imbalanced_cohort() {
        // 26 positives, 30 negatives, every prediction negative
        let mut labels = vec![1u8; 26];
        labels.extend(vec![0u8; 30]);
        let scores = vec![0.2; 56];
        let m = compute_metrics(&scores, &labels).unwrap();
        // class-0 F1 = 2*30/(2*30+26) = 60/86, class-1 F1 = 0
        assert!((m.macro_f1 - 100.0 * 30.0 / 86.0).abs() < 1e-9);
        assert!((m.macro_f1 - 34.88).abs() < 0.02);
        assert_eq!(m.bacc, 50.0);
        assert_eq!(m.mcc, 0.0);
    }

    #[test]
    fn auroc_midranks_handle_ties() {
        // scores: pos {0.5, 0.5}, neg {0.5, 0.1}
        // pairs: (0.5 vs 0.5) x2 ties -> 0.5 each, (0.5 vs 0.1) x2 wins
        let a = auroc(&[0.5, 0.5, 0.5, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auroc_undefined_for_single_class() {
        assert!(auroc(&[0.1, 0.9], &[1, 1]).is_none());
        let m = compute_metrics(&[0.1, 0.9], &[1, 1]).unwrap();
        assert!(m.auroc.is_none());
    }

    #[test]
    fn brute_force_pairwise_auroc_agrees() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = rng.gen_range(5..30);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            // coarse grid to force ties
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let fast = auroc(&scores, &labels);
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        pairs += 1.0;
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
            }
            match fast {
                None => assert_eq!(pairs, 0.0),
                Some(a) => assert!((a - wins / pairs).abs() < 1e-12),
            }
        }
    }

    #[test]
    fn random_baseline_is_seeded() {
        let labels = [1u8, 0, 1, 0, 1, 0, 0, 1];
        let a = random_baseline(&labels, 20, 3).unwrap();
        let b = random_baseline(&labels, 20, 3).unwrap();
        assert_eq!(a, b);
        let (mean, _) = summarize(&a);
        assert!(mean.bacc > 20.0 && mean.bacc < 80.0);
    }

    #[test]
    fn rejects_out_of_range_inputs() {
        assert!(compute_metrics(&[1.5], &[1]).is_err());
        assert!(compute_metrics(&[0.5], &[2]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[0.5, 0.5], &[1]).is_err());
    }
}
