//! Stratified k-fold splitting, deterministic in (ids, labels, seed).

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Assign each subject to exactly one test fold, preserving the class ratio
/// per fold as closely as possible. Input order does not matter: ids are
/// sorted before the seeded shuffle.
pub fn stratified_kfold(
    subjects: &[(String, u8)],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k = {k}, need at least 2 folds")));
    }
    if subjects.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    let unique: BTreeSet<&String> = subjects.iter().map(|(id, _)| id).collect();
    if unique.len() != subjects.len() {
        return Err(Error::InvalidArgument("duplicate subject ids".into()));
    }
    for (id, l) in subjects {
        if *l > 1 {
            return Err(Error::InvalidArgument(format!("subject {id}: label {l}")));
        }
    }

    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for class in [0u8, 1] {
        let mut ids: Vec<&String> = subjects
            .iter()
            .filter(|(_, l)| *l == class)
            .map(|(id, _)| id)
            .collect();
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class as u64) << 32));
        ids.shuffle(&mut rng);
        for (i, id) in ids.into_iter().enumerate() {
            folds[i % k].push(id.clone());
        }
    }
    for fold in &mut folds {
        fold.sort();
    }
    if folds.iter().any(|f| f.is_empty()) {
        return Err(Error::InvalidArgument(
            "class counts too small: a fold came out empty".into(),
        ));
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subjects(n_pos: usize, n_neg: usize) -> Vec<(String, u8)> {
        let mut out = Vec::new();
        for i in 0..n_pos {
            out.push((format!("p{i:02}"), 1));
        }
        for i in 0..n_neg {
            out.push((format!("n{i:02}"), 0));
        }
        out
    }

    #[test]
    fn partitions_every_subject_once() {
        let subs = subjects(26, 30);
        let folds = stratified_kfold(&subs, 5, 7).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen: Vec<String> = folds.concat();
        seen.sort();
        let mut expected: Vec<String> = subs.iter().map(|(id, _)| id.clone()).collect();
        expected.sort();
        assert_eq!(seen, expected);
    }

    #[test]
    fn folds_preserve_class_ratio() {
        let subs = subjects(26, 30);
        let folds = stratified_kfold(&subs, 5, 7).unwrap();
        for fold in &folds {
            let pos = fold.iter().filter(|id| id.starts_with('p')).count();
            let neg = fold.len() - pos;
            // 26/5 and 30/5 per fold, within rounding
            assert!((5..=6).contains(&pos), "{pos} positives");
            assert!(neg == 6, "{neg} negatives");
        }
    }

    #[test]
    fn independent_of_input_order() {
        let mut subs = subjects(9, 11);
        let a = stratified_kfold(&subs, 4, 3).unwrap();
        subs.reverse();
        let b = stratified_kfold(&subs, 4, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seed_changes_assignment() {
        let subs = subjects(12, 12);
        let a = stratified_kfold(&subs, 4, 1).unwrap();
        let b = stratified_kfold(&subs, 4, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_degenerate_requests() {
        let subs = subjects(3, 3);
        assert!(stratified_kfold(&subs, 1, 0).is_err());
        assert!(stratified_kfold(&subs, 7, 0).is_err());
        let dup = vec![("a".to_string(), 1), ("a".to_string(), 0)];
        assert!(stratified_kfold(&dup, 2, 0).is_err());
    }
}
