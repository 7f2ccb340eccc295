//! Statistical prediction correction.
//!
//! During training every object label accumulates a per-class occurrence
//! count `d[c]`. The weight of an object for class `c` is `d[c] / D` where
//! `D` is the object's total count. At test time each class is scored as the
//! sum over distinct objects of `multiplicity * weight`, and the best scoring
//! class replaces an unreliable classifier prediction.
//!
//! Counts are instance counts: an object appearing twice in one scene adds 2.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpcError {
    #[error("class '{0}' is not in the model's class list")]
    UnknownClass(String),
    #[error("object '{0}' was never seen in training")]
    UnseenObject(String),
    #[error("class index {index} out of range for {len} classes")]
    ClassIndexOutOfRange { index: usize, len: usize },
    #[error("duplicate class name '{0}'")]
    DuplicateClass(String),
    #[error("a model needs at least one class")]
    NoClasses,
    #[error("class lists differ: {left:?} vs {right:?}")]
    ClassMismatch {
        left: Vec<String>,
        right: Vec<String>,
    },
    #[error("object '{label}' has {actual} counts for {expected} classes")]
    CountLength {
        label: String,
        expected: usize,
        actual: usize,
    },
}

/// Per-object, per-class occurrence counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpcModel {
    class_names: Vec<String>,
    counts: BTreeMap<String, Vec<u64>>,
}

impl SpcModel {
    pub fn new<S: Into<String>>(
        class_names: impl IntoIterator<Item = S>,
    ) -> Result<Self, SpcError> {
        let class_names: Vec<String> = class_names.into_iter().map(Into::into).collect();
        if class_names.is_empty() {
            return Err(SpcError::NoClasses);
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(SpcError::DuplicateClass(name.clone()));
            }
        }
        Ok(SpcModel {
            class_names,
            counts: BTreeMap::new(),
        })
    }

    /// Builds a model from explicit counts, e.g. when loading from disk.
    pub fn from_counts(
        class_names: Vec<String>,
        counts: BTreeMap<String, Vec<u64>>,
    ) -> Result<Self, SpcError> {
        let mut model = SpcModel::new(class_names)?;
        let n = model.class_names.len();
        for (label, row) in &counts {
            if row.len() != n {
                return Err(SpcError::CountLength {
                    label: label.clone(),
                    expected: n,
                    actual: row.len(),
                });
            }
        }
        model.counts = counts;
        Ok(model)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Object labels with their count vectors, in label order.
    pub fn objects(&self) -> impl Iterator<Item = (&str, &[u64])> {
        self.counts.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn counts(&self, label: &str) -> Option<&[u64]> {
        self.counts.get(label).map(Vec::as_slice)
    }

    /// Total occurrences of `label` across classes; 0 if never seen.
    pub fn total(&self, label: &str) -> u64 {
        self.counts.get(label).map_or(0, |row| row.iter().sum())
    }

    /// Adds one count per occurrence of each label to `true_class`.
    pub fn train_accumulate<S: AsRef<str>>(
        &mut self,
        objects: &[S],
        true_class: &str,
    ) -> Result<(), SpcError> {
        let c = self
            .class_index(true_class)
            .ok_or_else(|| SpcError::UnknownClass(true_class.to_string()))?;
        let n = self.class_names.len();
        for label in objects {
            let row = self
                .counts
                .entry(label.as_ref().to_string())
                .or_insert_with(|| vec![0; n]);
            row[c] += 1;
        }
        Ok(())
    }

    /// Adds another model's counts into this one. Counts commute, so partial
    /// models trained on disjoint shards merge into the same result.
    pub fn merge(&mut self, other: &SpcModel) -> Result<(), SpcError> {
        if self.class_names != other.class_names {
            return Err(SpcError::ClassMismatch {
                left: self.class_names.clone(),
                right: other.class_names.clone(),
            });
        }
        let n = self.class_names.len();
        for (label, row) in &other.counts {
            let mine = self
                .counts
                .entry(label.clone())
                .or_insert_with(|| vec![0; n]);
            for (m, o) in mine.iter_mut().zip(row) {
                *m += o;
            }
        }
        Ok(())
    }

    /// `d[class] / D` for a trained object.
    pub fn weight(&self, label: &str, class_index: usize) -> Result<f64, SpcError> {
        if class_index >= self.class_names.len() {
            return Err(SpcError::ClassIndexOutOfRange {
                index: class_index,
                len: self.class_names.len(),
            });
        }
        let row = self
            .counts
            .get(label)
            .ok_or_else(|| SpcError::UnseenObject(label.to_string()))?;
        let total: u64 = row.iter().sum();
        if total == 0 {
            return Err(SpcError::UnseenObject(label.to_string()));
        }
        Ok(row[class_index] as f64 / total as f64)
    }

    /// All class weights of an object, or `None` if it has no counts.
    pub fn weights(&self, label: &str) -> Option<Vec<f64>> {
        let row = self.counts.get(label)?;
        let total: u64 = row.iter().sum();
        (total > 0).then(|| row.iter().map(|&d| d as f64 / total as f64).collect())
    }

    /// Weighted score of every class for the objects found in a scene.
    /// Unseen objects contribute nothing.
    pub fn score_classes<S: AsRef<str>>(&self, objects: &[S]) -> ClassScores {
        let mut multiplicity: BTreeMap<&str, u64> = BTreeMap::new();
        for label in objects {
            *multiplicity.entry(label.as_ref()).or_default() += 1;
        }
        let mut scores = vec![0.0; self.class_names.len()];
        for (label, n) in multiplicity {
            let Some(row) = self.counts.get(label) else {
                continue;
            };
            let total: u64 = row.iter().sum();
            if total == 0 {
                continue;
            }
            for (s, &d) in scores.iter_mut().zip(row) {
                *s += n as f64 * (d as f64 / total as f64);
            }
        }
        ClassScores::from_scores(scores)
    }

    /// The winning class for these objects, or `None` if every score is zero.
    pub fn correct<S: AsRef<str>>(&self, objects: &[S]) -> Option<&str> {
        let scores = self.score_classes(objects);
        scores
            .is_informative()
            .then(|| self.class_names[scores.winner].as_str())
    }
}

/// Per-class weighted scores with their argmax (lowest index wins ties).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    pub winner: usize,
    pub winner_is_unique: bool,
}

impl ClassScores {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut winner = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[winner] {
                winner = i;
            }
        }
        let best = scores.get(winner).copied().unwrap_or(0.0);
        let ties = scores.iter().filter(|&&s| s == best).count();
        ClassScores {
            winner_is_unique: best > 0.0 && ties == 1,
            scores,
            winner,
        }
    }

    /// True when at least one class has a positive score.
    pub fn is_informative(&self) -> bool {
        self.scores.iter().any(|&s| s > 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rooms() -> SpcModel {
        SpcModel::new(["bedroom", "kitchen", "bar"]).unwrap()
    }

    #[test]
    fn accumulates_instance_counts() {
        let mut m = rooms();
        m.train_accumulate(&["bed", "bed", "lamp"], "bedroom")
            .unwrap();
        assert_eq!(m.counts("bed"), Some(&[2, 0, 0][..]));
        assert_eq!(m.counts("lamp"), Some(&[1, 0, 0][..]));
        assert_eq!(m.total("bed"), 2);
    }

    #[test]
    fn same_batch_twice_doubles() {
        let mut once = rooms();
        once.train_accumulate(&["oven", "bed", "oven"], "kitchen")
            .unwrap();
        let mut twice = once.clone();
        twice
            .train_accumulate(&["oven", "bed", "oven"], "kitchen")
            .unwrap();
        for (label, row) in once.objects() {
            let doubled: Vec<u64> = row.iter().map(|d| d * 2).collect();
            assert_eq!(twice.counts(label).unwrap(), &doubled[..]);
        }
    }

    #[test]
    fn unknown_class_is_rejected() {
        let mut m = rooms();
        assert_eq!(
            m.train_accumulate(&["bed"], "garage"),
            Err(SpcError::UnknownClass("garage".into()))
        );
        assert!(m.counts("bed").is_none());
    }

    #[test]
    fn weights_from_counts() {
        let mut m = rooms();
        m.train_accumulate(&["bed"], "bedroom").unwrap();
        assert_eq!(m.weight("bed", 0).unwrap(), 1.0);
        assert_eq!(m.weight("bed", 1).unwrap(), 0.0);

        let mut counts = BTreeMap::new();
        counts.insert("stool".to_string(), vec![3, 1, 0]);
        let m = SpcModel::from_counts(rooms().class_names().to_vec(), counts).unwrap();
        assert_eq!(m.weights("stool").unwrap(), vec![0.75, 0.25, 0.0]);
        assert_eq!(
            m.weight("chair", 0),
            Err(SpcError::UnseenObject("chair".into()))
        );
        assert!(m.weight("stool", 3).is_err());
    }

    #[test]
    fn zero_total_object_is_unseen() {
        let mut counts = BTreeMap::new();
        counts.insert("ghost".to_string(), vec![0, 0, 0]);
        let m = SpcModel::from_counts(rooms().class_names().to_vec(), counts).unwrap();
        assert!(m.weight("ghost", 0).is_err());
        assert!(!m.score_classes(&["ghost"]).is_informative());
    }

    #[test]
    fn empty_scene_scores_zero() {
        let m = rooms();
        let s = m.score_classes::<&str>(&[]);
        assert_eq!(s.scores, vec![0.0; 3]);
        assert!(!s.winner_is_unique);
        assert_eq!(m.correct::<&str>(&[]), None);
    }

    #[test]
    fn multiplicity_scales_weights() {
        let mut counts = BTreeMap::new();
        counts.insert("stool".to_string(), vec![3, 1, 0]);
        let m = SpcModel::from_counts(rooms().class_names().to_vec(), counts).unwrap();
        let s = m.score_classes(&["stool", "stool"]);
        // 2 * [0.75, 0.25, 0]
        assert_eq!(s.scores, vec![1.5, 0.5, 0.0]);
        assert_eq!(s.winner, 0);
        assert!(s.winner_is_unique);
        assert_eq!(m.correct(&["stool", "stool"]), Some("bedroom"));
    }

    #[test]
    fn unseen_objects_score_zero() {
        let m = rooms();
        assert_eq!(m.score_classes(&["x", "y"]).scores, vec![0.0; 3]);
        assert_eq!(m.correct(&["x"]), None);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut m = rooms();
        m.train_accumulate(&["glass"], "kitchen").unwrap();
        m.train_accumulate(&["glass"], "bar").unwrap();
        let s = m.score_classes(&["glass"]);
        assert_eq!(s.winner, 1);
        assert!(!s.winner_is_unique);
        assert_eq!(m.correct(&["glass"]), Some("kitchen"));
    }

    #[test]
    fn merge_adds_counts_and_checks_classes() {
        let mut a = rooms();
        a.train_accumulate(&["bed"], "bedroom").unwrap();
        let mut b = rooms();
        b.train_accumulate(&["bed", "oven"], "kitchen").unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.counts("bed"), Some(&[1, 1, 0][..]));
        assert_eq!(a.counts("oven"), Some(&[0, 1, 0][..]));
        let other = SpcModel::new(["x", "y"]).unwrap();
        assert!(a.merge(&other).is_err());
    }

    #[test]
    fn constructor_validation() {
        assert_eq!(
            SpcModel::new(Vec::<String>::new()),
            Err(SpcError::NoClasses)
        );
        assert!(matches!(
            SpcModel::new(["a", "a"]),
            Err(SpcError::DuplicateClass(_))
        ));
        let mut counts = BTreeMap::new();
        counts.insert("x".to_string(), vec![1]);
        assert!(matches!(
            SpcModel::from_counts(vec!["a".into(), "b".into()], counts),
            Err(SpcError::CountLength { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        const CLASSES: [&str; 4] = ["c0", "c1", "c2", "c3"];
        const OBJECTS: [&str; 6] = ["o0", "o1", "o2", "o3", "o4", "o5"];

        fn corpus() -> impl Strategy<Value = Vec<(Vec<&'static str>, &'static str)>> {
            prop::collection::vec(
                (
                    prop::collection::vec(prop::sample::select(&OBJECTS[..]), 0..6),
                    prop::sample::select(&CLASSES[..]),
                ),
                0..40,
            )
        }

        fn scene() -> impl Strategy<Value = Vec<&'static str>> {
            prop::collection::vec(prop::sample::select(&OBJECTS[..]), 0..8)
        }

        fn train(corpus: &[(Vec<&str>, &str)]) -> SpcModel {
            let mut m = SpcModel::new(CLASSES).unwrap();
            for (objs, class) in corpus {
                m.train_accumulate(objs, class).unwrap();
            }
            m
        }

        proptest! {
            #[test]
            fn weights_sum_to_one(c in corpus()) {
                let m = train(&c);
                for (label, _) in m.objects() {
                    let sum: f64 = (0..4).map(|k| m.weight(label, k).unwrap()).sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-12);
                }
            }

            #[test]
            fn scores_are_linear(c in corpus(), a in scene(), b in scene()) {
                let m = train(&c);
                let joined: Vec<&str> = a.iter().chain(&b).copied().collect();
                let sa = m.score_classes(&a);
                let sb = m.score_classes(&b);
                let sj = m.score_classes(&joined);
                for k in 0..4 {
                    prop_assert!((sj.scores[k] - (sa.scores[k] + sb.scores[k])).abs() <= 1e-9);
                }
            }

            #[test]
            fn scores_ignore_order(c in corpus(), s in scene().prop_shuffle()) {
                let m = train(&c);
                let mut sorted = s.clone();
                sorted.sort();
                prop_assert_eq!(m.score_classes(&s), m.score_classes(&sorted));
            }

            #[test]
            fn duplication_scales_scores(c in corpus(), s in scene(), k in 1usize..5) {
                let m = train(&c);
                let base = m.score_classes(&s);
                let rep: Vec<&str> = s.iter().flat_map(|o| std::iter::repeat_n(*o, k)).collect();
                let scaled = m.score_classes(&rep);
                for i in 0..4 {
                    prop_assert!((scaled.scores[i] - k as f64 * base.scores[i]).abs() <= 1e-9);
                }
                prop_assert_eq!(scaled.winner, base.winner);
            }

            #[test]
            fn merge_equals_joint_training(a in corpus(), b in corpus()) {
                let mut merged = train(&a);
                merged.merge(&train(&b)).unwrap();
                let joint: Vec<_> = a.iter().chain(&b).cloned().collect();
                prop_assert_eq!(merged, train(&joint));
            }
        }
    }
}
