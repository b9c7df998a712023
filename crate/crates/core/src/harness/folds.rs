//! Subject-disjoint K-fold splits.
//!
//! Subjects are shuffled within each label, concatenated, and dealt
//! round-robin into the K test sets, so test sets differ in size by at most one and stay close to
//! the corpus class balance. Validation subjects are drawn the same way from
//! the non-test remainder.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Label;
use crate::error::{Error, Result};

pub const DEFAULT_VAL_FRACTION: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl FoldSplit {
    pub fn role_of(&self, subject: &str) -> Option<Split> {
        if self.train.iter().any(|s| s == subject) {
            Some(Split::Train)
        } else if self.val.iter().any(|s| s == subject) {
            Some(Split::Val)
        } else if self.test.iter().any(|s| s == subject) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn shuffled_groups<'a>(subjects: &'a [(String, Label)], rng: &mut ChaCha8Rng) -> (Vec<&'a String>, Vec<&'a String>) {
    let mut patients: Vec<&String> = subjects.iter().filter(|s| s.1 == Label::Patient).map(|s| &s.0).collect();
    let mut controls: Vec<&String> = subjects.iter().filter(|s| s.1 == Label::Control).map(|s| &s.0).collect();
    patients.shuffle(rng);
    controls.shuffle(rng);
    (patients, controls)
}

/// Shuffles each label group and interleaves them, patients first.
fn interleave_by_label(subjects: &[(String, Label)], rng: &mut ChaCha8Rng) -> Vec<String> {
    let (patients, controls) = shuffled_groups(subjects, rng);
    let mut out = Vec::with_capacity(subjects.len());
    let (mut p, mut c) = (patients.into_iter(), controls.into_iter());
    loop {
        match (p.next(), c.next()) {
            (None, None) => break,
            (a, b) => out.extend(a.into_iter().chain(b).cloned()),
        }
    }
    out
}

pub fn make_folds(subjects: &[(String, Label)], k: usize, val_fraction: f64, seed: u64) -> Result<Vec<FoldSplit>> {
    let n = subjects.len();
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!("{k} folds requested for {n} subjects")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let mut unique = HashSet::new();
    if let Some((dup, _)) = subjects.iter().find(|(s, _)| !unique.insert(s.as_str())) {
        return Err(Error::Data(format!("subject `{dup}` listed twice")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (patients, controls) = shuffled_groups(subjects, &mut rng);
    let order: Vec<String> = patients.into_iter().chain(controls).cloned().collect();
    let mut tests: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, s) in order.into_iter().enumerate() {
        tests[i % k].push(s);
    }

    let mut folds = Vec::with_capacity(k);
    for (fold, test) in tests.into_iter().enumerate() {
        let test_set: HashSet<&str> = test.iter().map(String::as_str).collect();
        let rest: Vec<(String, Label)> = subjects.iter().filter(|(s, _)| !test_set.contains(s.as_str())).cloned().collect();
        let mut fold_rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(fold as u64 + 1)));
        let pool = interleave_by_label(&rest, &mut fold_rng);
        let mut n_val = (val_fraction * pool.len() as f64).round() as usize;
        if val_fraction > 0.0 && n_val == 0 && pool.len() >= 2 {
            n_val = 1;
        }
        n_val = n_val.min(pool.len().saturating_sub(1));
        let val = pool[..n_val].to_vec();
        let val_set: HashSet<&str> = val.iter().map(String::as_str).collect();
        // Keep manifest order inside every role for readable listings.
        let train = rest.iter().map(|s| s.0.clone()).filter(|s| !val_set.contains(s.as_str())).collect();
        let mut test = test;
        let position = |s: &String| subjects.iter().position(|x| &x.0 == s).unwrap();
        test.sort_by_key(position);
        let mut val = val;
        val.sort_by_key(position);
        folds.push(FoldSplit { fold, train, val, test });
    }
    check_folds(&folds, subjects)?;
    Ok(folds)
}

/// Pairwise disjointness inside each fold, membership in the subject list,
/// and test sets partitioning all subjects.
pub fn check_folds(folds: &[FoldSplit], subjects: &[(String, Label)]) -> Result<()> {
    let all: HashSet<&str> = subjects.iter().map(|s| s.0.as_str()).collect();
    let mut tested: HashSet<&str> = HashSet::new();
    for f in folds {
        let mut seen: HashSet<&str> = HashSet::new();
        for s in f.train.iter().chain(&f.val).chain(&f.test) {
            if !all.contains(s.as_str()) {
                return Err(Error::Contract(format!("fold {} lists unknown subject `{s}`", f.fold)));
            }
            if !seen.insert(s) {
                return Err(Error::Contract(format!("fold {} assigns `{s}` to two roles", f.fold)));
            }
        }
        for s in &f.test {
            if !tested.insert(s) {
                return Err(Error::Contract(format!("subject `{s}` is tested in two folds")));
            }
        }
    }
    if tested.len() != all.len() {
        return Err(Error::Contract(format!(
            "test sets cover {} of {} subjects",
            tested.len(),
            all.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn subjects(n: usize, patients: usize) -> Vec<(String, Label)> {
        (0..n)
            .map(|i| (format!("s{i:03}"), if i < patients { Label::Patient } else { Label::Control }))
            .collect()
    }

    #[test]
    fn ninety_five_subjects_ten_folds() {
        let folds = make_folds(&subjects(95, 46), 10, DEFAULT_VAL_FRACTION, 7).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert!(sizes.iter().all(|&s| s == 9 || s == 10), "{sizes:?}");
        assert_eq!(sizes.iter().sum::<usize>(), 95);
        for f in &folds {
            assert_eq!(f.val.len(), ((95 - f.test.len()) as f64 / 9.0).round() as usize);
        }
    }

    #[test]
    fn leave_one_subject_out() {
        let s = subjects(6, 3);
        let folds = make_folds(&s, 6, DEFAULT_VAL_FRACTION, 0).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 1 && !f.train.is_empty()));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = subjects(30, 15);
        assert_eq!(make_folds(&s, 5, 0.1, 3).unwrap(), make_folds(&s, 5, 0.1, 3).unwrap());
        assert_ne!(make_folds(&s, 5, 0.1, 3).unwrap(), make_folds(&s, 5, 0.1, 4).unwrap());
    }

    #[test]
    fn test_sets_are_class_balanced() {
        let s = subjects(24, 12);
        let label = |id: &String| s.iter().find(|x| &x.0 == id).unwrap().1;
        for f in make_folds(&s, 4, DEFAULT_VAL_FRACTION, 11).unwrap() {
            let p = f.test.iter().filter(|t| label(t) == Label::Patient).count();
            assert_eq!(p, 3);
        }
    }

    #[test]
    fn too_many_folds() {
        assert!(matches!(make_folds(&subjects(3, 1), 4, 0.1, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn folds_are_disjoint(n in 2usize..60, p in 0usize..60, k in 2usize..12, seed in any::<u64>(), vf in 0.0f64..0.5) {
            prop_assume!(k <= n);
            let s = subjects(n, p.min(n));
            let folds = make_folds(&s, k, vf, seed).unwrap();
            prop_assert!(check_folds(&folds, &s).is_ok());
            prop_assert!(folds.iter().all(|f| !f.train.is_empty()));
        }
    }
}
