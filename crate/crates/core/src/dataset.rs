//! Shared domain types: examples, datasets, group normalisation, seeded
//! sub-seed derivation and stratified splitting.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Demographic group. `S0` is always the minority and sits in the numerator
/// of every fairness ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    S0,
    S1,
}

impl Group {
    pub const BOTH: [Group; 2] = [Group::S0, Group::S1];

    pub fn index(self) -> usize {
        match self {
            Group::S0 => 0,
            Group::S1 => 1,
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::S0 => Group::S1,
            Group::S1 => Group::S0,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::S0 => f.write_str("s0"),
            Group::S1 => f.write_str("s1"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    /// Hard labels are 0 or 1; mixup products carry soft labels in between.
    pub label: f64,
    pub group: Group,
    pub subject_id: String,
    pub weight: f64,
}

impl Example {
    pub fn new(features: Vec<f64>, label: f64, group: Group, subject_id: impl Into<String>) -> Self {
        Example {
            features,
            label,
            group,
            subject_id: subject_id.into(),
            weight: 1.0,
        }
    }

    /// Label rounded to the nearest class (ties go to 1).
    pub fn hard_label(&self) -> u8 {
        u8::from(self.label >= 0.5)
    }

    pub fn is_hard(&self) -> bool {
        self.label == 0.0 || self.label == 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub feature_dim: usize,
    /// Human-readable names indexed by [`Group::index`].
    pub group_names: [String; 2],
    /// Folds and other derived subsets may legitimately miss a group or class.
    pub partition: bool,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, feature_dim: usize, group_names: [String; 2]) -> Self {
        Dataset {
            examples,
            feature_dim,
            group_names,
            partition: false,
        }
    }

    /// Builds a dataset and rejects it if [`validate`] reports anything.
    pub fn checked(examples: Vec<Example>, feature_dim: usize, group_names: [String; 2]) -> Result<Self> {
        let ds = Dataset::new(examples, feature_dim, group_names);
        let violations = validate(&ds);
        if violations.is_empty() {
            Ok(ds)
        } else {
            Err(Error::invalid(violations.join("; ")))
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// A new dataset sharing metadata but holding the given examples,
    /// flagged as a partition of this one.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            feature_dim: self.feature_dim,
            group_names: self.group_names.clone(),
            partition: true,
        }
    }

    pub fn with_examples(&self, examples: Vec<Example>) -> Dataset {
        Dataset {
            examples,
            feature_dim: self.feature_dim,
            group_names: self.group_names.clone(),
            partition: self.partition,
        }
    }

    pub fn labels(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn hard_labels(&self) -> Vec<u8> {
        self.examples.iter().map(Example::hard_label).collect()
    }

    pub fn groups(&self) -> Vec<Group> {
        self.examples.iter().map(|e| e.group).collect()
    }

    /// Counts per (hard label, group): `counts[label][group]`.
    pub fn cell_counts(&self) -> [[usize; 2]; 2] {
        let mut counts = [[0usize; 2]; 2];
        for e in &self.examples {
            counts[e.hard_label() as usize][e.group.index()] += 1;
        }
        counts
    }

    pub fn group_count(&self, group: Group) -> usize {
        self.examples.iter().filter(|e| e.group == group).count()
    }

    /// Content digest covering every field of every example, in order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.feature_dim as u64).to_le_bytes());
        for name in &self.group_names {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        for e in &self.examples {
            h.update((e.subject_id.len() as u64).to_le_bytes());
            h.update(e.subject_id.as_bytes());
            h.update([e.group.index() as u8]);
            h.update(e.label.to_bits().to_le_bytes());
            h.update(e.weight.to_bits().to_le_bytes());
            h.update((e.features.len() as u64).to_le_bytes());
            for x in &e.features {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Indices sorted by content, independent of storage order.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.examples.len()).collect();
        idx.sort_by(|&a, &b| canonical_cmp(&self.examples[a], &self.examples[b]));
        idx
    }
}

fn canonical_cmp(a: &Example, b: &Example) -> Ordering {
    a.subject_id
        .cmp(&b.subject_id)
        .then(a.group.cmp(&b.group))
        .then(a.label.total_cmp(&b.label))
        .then(a.weight.total_cmp(&b.weight))
        .then_with(|| {
            for (x, y) in a.features.iter().zip(&b.features) {
                match x.total_cmp(y) {
                    Ordering::Equal => continue,
                    other => return other,
                }
            }
            a.features.len().cmp(&b.features.len())
        })
}

/// Lists every violated dataset invariant. Never fails.
pub fn validate(dataset: &Dataset) -> Vec<String> {
    let mut out = Vec::new();
    if dataset.feature_dim == 0 {
        out.push("feature_dim must be positive".to_string());
    }
    if dataset.examples.is_empty() {
        out.push("dataset is empty".to_string());
        return out;
    }
    for (i, e) in dataset.examples.iter().enumerate() {
        if e.features.len() != dataset.feature_dim {
            out.push(format!(
                "example {i}: dimension mismatch ({} features, expected {})",
                e.features.len(),
                dataset.feature_dim
            ));
        }
        if e.features.iter().any(|x| !x.is_finite()) {
            out.push(format!("example {i}: non-finite feature"));
        }
        if !(0.0..=1.0).contains(&e.label) {
            out.push(format!("example {i}: label {} outside [0, 1]", e.label));
        }
        if !(e.weight > 0.0 && e.weight.is_finite()) {
            out.push(format!("example {i}: weight {} is not positive", e.weight));
        }
    }
    if !dataset.partition {
        for g in Group::BOTH {
            if dataset.group_count(g) == 0 {
                out.push(format!("group {g} ({}) has no examples", dataset.group_names[g.index()]));
            }
        }
        for class in [0.0, 1.0] {
            if !dataset.examples.iter().any(|e| e.label == class) {
                out.push(format!("no example carries hard label {class}"));
            }
        }
    }
    out
}

/// Maps raw group tokens onto {S0 = minority, S1 = majority}. Equal-sized
/// groups resolve by declaring the lexicographically first name the minority.
pub fn normalize_groups<S: AsRef<str>>(tokens: &[S]) -> Result<(Vec<Group>, [String; 2])> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    if counts.len() != 2 {
        return Err(Error::invalid(format!(
            "expected exactly two group tokens, found {}",
            counts.len()
        )));
    }
    let mut names: Vec<(&str, usize)> = counts.into_iter().collect();
    // BTreeMap iteration is lexicographic, so a stable sort by count keeps
    // the first name first on ties.
    names.sort_by_key(|&(_, n)| n);
    let minority = names[0].0.to_string();
    let majority = names[1].0.to_string();
    let groups = tokens
        .iter()
        .map(|t| if t.as_ref() == minority { Group::S0 } else { Group::S1 })
        .collect();
    Ok((groups, [minority, majority]))
}

/// Per-purpose sub-seeds derived from one experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        SeedStream { root }
    }

    pub fn derive(&self, purpose: &str, index: u64) -> u64 {
        let mut tag: u64 = 0xcbf2_9ce4_8422_2325;
        for b in purpose.bytes() {
            tag ^= u64::from(b);
            tag = tag.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut state = self.root ^ tag;
        let first = splitmix64(&mut state);
        state = first ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        splitmix64(&mut state)
    }
}

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitKind {
    Holdout { train_fraction: f64 },
    KFold { k: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stratify {
    Label,
    LabelGroup,
}

/// Whether folds are assigned per example (segment) or per subject.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitUnit {
    #[default]
    Example,
    Subject,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub seed: u64,
    pub stratify_on: Stratify,
    #[serde(default)]
    pub unit: SplitUnit,
}

impl SplitSpec {
    pub fn kfold(k: usize, seed: u64) -> Self {
        SplitSpec {
            kind: SplitKind::KFold { k },
            seed,
            stratify_on: Stratify::LabelGroup,
            unit: SplitUnit::Example,
        }
    }

    pub fn holdout(train_fraction: f64, seed: u64) -> Self {
        SplitSpec {
            kind: SplitKind::Holdout { train_fraction },
            seed,
            stratify_on: Stratify::LabelGroup,
            unit: SplitUnit::Example,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fold {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

fn stratum_key(e: &Example, on: Stratify) -> (u8, Option<Group>) {
    match on {
        Stratify::Label => (e.hard_label(), None),
        Stratify::LabelGroup => (e.hard_label(), Some(e.group)),
    }
}

fn stratum_name(key: (u8, Option<Group>)) -> String {
    match key.1 {
        None => format!("label={}", key.0),
        Some(g) => format!("label={},group={g}", key.0),
    }
}

/// Stratified split into (train, test) pairs. Strata are shuffled with a
/// generator seeded from `spec.seed` and dealt round-robin across folds.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Vec<Fold>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    // Units are examples or whole subjects; each unit owns a list of examples.
    let units: Vec<Vec<usize>> = match spec.unit {
        SplitUnit::Example => (0..dataset.len()).map(|i| vec![i]).collect(),
        SplitUnit::Subject => {
            let mut order: Vec<&str> = Vec::new();
            let mut members: HashMap<&str, Vec<usize>> = HashMap::new();
            for (i, e) in dataset.examples.iter().enumerate() {
                members
                    .entry(e.subject_id.as_str())
                    .or_insert_with(|| {
                        order.push(e.subject_id.as_str());
                        Vec::new()
                    })
                    .push(i);
            }
            order.iter().map(|s| members.remove(s).unwrap_or_default()).collect()
        }
    };

    let mut strata: BTreeMap<(u8, Option<Group>), Vec<usize>> = BTreeMap::new();
    for (u, members) in units.iter().enumerate() {
        let key = stratum_key(&dataset.examples[members[0]], spec.stratify_on);
        strata.entry(key).or_default().push(u);
    }

    let mut rng = seeded_rng(spec.seed);
    match spec.kind {
        SplitKind::KFold { k } => {
            if k < 2 {
                return Err(Error::invalid(format!("k-fold needs k >= 2, got {k}")));
            }
            for (key, members) in &strata {
                if members.len() < k {
                    return Err(Error::StratumTooSmall {
                        stratum: stratum_name(*key),
                        size: members.len(),
                        k,
                    });
                }
            }
            let mut fold_of_unit = vec![0usize; units.len()];
            let mut next = 0usize;
            for members in strata.values_mut() {
                members.shuffle(&mut rng);
                for &u in members.iter() {
                    fold_of_unit[u] = next;
                    next = (next + 1) % k;
                }
            }
            let mut fold_of_example = vec![0usize; dataset.len()];
            for (u, members) in units.iter().enumerate() {
                for &i in members {
                    fold_of_example[i] = fold_of_unit[u];
                }
            }
            Ok((0..k)
                .map(|f| {
                    let (test_indices, train_indices): (Vec<usize>, Vec<usize>) =
                        (0..dataset.len()).partition(|&i| fold_of_example[i] == f);
                    make_fold(dataset, train_indices, test_indices)
                })
                .collect())
        }
        SplitKind::Holdout { train_fraction } => {
            if !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(Error::invalid(format!(
                    "train fraction must lie in (0, 1), got {train_fraction}"
                )));
            }
            let mut in_train = vec![false; units.len()];
            for members in strata.values_mut() {
                members.shuffle(&mut rng);
                let n_train = (members.len() as f64 * train_fraction).round() as usize;
                for &u in &members[..n_train.min(members.len())] {
                    in_train[u] = true;
                }
            }
            let mut train_mask = vec![false; dataset.len()];
            for (u, members) in units.iter().enumerate() {
                for &i in members {
                    train_mask[i] = in_train[u];
                }
            }
            let (train_indices, test_indices): (Vec<usize>, Vec<usize>) =
                (0..dataset.len()).partition(|&i| train_mask[i]);
            Ok(vec![make_fold(dataset, train_indices, test_indices)])
        }
    }
}

fn make_fold(dataset: &Dataset, train_indices: Vec<usize>, test_indices: Vec<usize>) -> Fold {
    Fold {
        train: dataset.subset(&train_indices),
        test: dataset.subset(&test_indices),
        train_indices,
        test_indices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> [String; 2] {
        ["female".to_string(), "male".to_string()]
    }

    fn toy() -> Dataset {
        Dataset::new(
            vec![
                Example::new(vec![0.0, 1.0], 1.0, Group::S0, "a"),
                Example::new(vec![1.0, 1.0], 0.0, Group::S0, "b"),
                Example::new(vec![2.0, 1.0], 1.0, Group::S1, "c"),
                Example::new(vec![3.0, 1.0], 0.0, Group::S1, "d"),
            ],
            2,
            names(),
        )
    }

    fn sized(n: usize, positives: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| {
                let label = if i < positives { 1.0 } else { 0.0 };
                let group = if i % 2 == 0 { Group::S0 } else { Group::S1 };
                Example::new(vec![i as f64], label, group, format!("subj{i}"))
            })
            .collect();
        Dataset::new(examples, 1, names())
    }

    #[test]
    fn well_formed_dataset_has_no_violations() {
        assert!(validate(&toy()).is_empty());
    }

    #[test]
    fn out_of_range_label_names_the_index() {
        let mut ds = toy();
        ds.examples[2].label = 1.5;
        let v = validate(&ds);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("example 2"), "{v:?}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut ds = toy();
        ds.examples[1].features.push(9.0);
        let v = validate(&ds);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("example 1") && v[0].contains("dimension mismatch"));
    }

    #[test]
    fn missing_group_only_allowed_for_partitions() {
        let mut ds = toy();
        ds.examples.retain(|e| e.group == Group::S1);
        assert!(!validate(&ds).is_empty());
        ds.partition = true;
        assert!(validate(&ds).is_empty());
    }

    #[test]
    fn minority_is_the_smaller_group() {
        let tokens = ["m", "f", "m", "m", "f"];
        let (groups, names) = normalize_groups(&tokens).unwrap();
        assert_eq!(names, ["f".to_string(), "m".to_string()]);
        assert_eq!(groups[1], Group::S0);
        assert_eq!(groups[0], Group::S1);
    }

    #[test]
    fn minority_tie_goes_to_first_name() {
        let (_, names) = normalize_groups(&["zeta", "alpha", "zeta", "alpha"]).unwrap();
        assert_eq!(names[0], "alpha");
    }

    #[test]
    fn three_groups_rejected() {
        assert!(normalize_groups(&["a", "b", "c"]).is_err());
    }

    #[test]
    fn kfold_sizes_and_partition() {
        let ds = sized(100, 50);
        let folds = split(&ds, &SplitSpec::kfold(5, 7)).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = vec![0usize; 100];
        for f in &folds {
            assert_eq!(f.train.len(), 80);
            assert_eq!(f.test.len(), 20);
            for &i in &f.test_indices {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn kfold_is_deterministic() {
        let ds = sized(100, 50);
        let a = split(&ds, &SplitSpec::kfold(5, 7)).unwrap();
        let b = split(&ds, &SplitSpec::kfold(5, 7)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.test_indices, y.test_indices);
        }
        let c = split(&ds, &SplitSpec::kfold(5, 8)).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.test_indices != y.test_indices));
    }

    #[test]
    fn small_stratum_is_rejected() {
        let ds = sized(10, 3);
        let spec = SplitSpec {
            stratify_on: Stratify::Label,
            ..SplitSpec::kfold(5, 1)
        };
        match split(&ds, &spec) {
            Err(Error::StratumTooSmall { stratum, size, k }) => {
                assert_eq!(stratum, "label=1");
                assert_eq!((size, k), (3, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn three_positives_cannot_fill_five_folds() {
        // Every assignment of 3 items to 5 folds leaves some fold empty.
        let mut all_cover = false;
        for a in 0..5 {
            for b in 0..5 {
                for c in 0..5 {
                    let mut hit = [false; 5];
                    hit[a] = true;
                    hit[b] = true;
                    hit[c] = true;
                    all_cover |= hit.iter().all(|&h| h);
                }
            }
        }
        assert!(!all_cover);
    }

    #[test]
    fn strata_balanced_within_one() {
        let ds = sized(103, 41);
        let folds = split(&ds, &SplitSpec::kfold(5, 3)).unwrap();
        for label in [0u8, 1] {
            for g in Group::BOTH {
                let sizes: Vec<usize> = folds
                    .iter()
                    .map(|f| {
                        f.test
                            .examples
                            .iter()
                            .filter(|e| e.hard_label() == label && e.group == g)
                            .count()
                    })
                    .collect();
                let lo = *sizes.iter().min().unwrap();
                let hi = *sizes.iter().max().unwrap();
                assert!(hi - lo <= 1, "{sizes:?}");
            }
        }
    }

    #[test]
    fn holdout_respects_fraction() {
        let ds = sized(100, 40);
        let folds = split(&ds, &SplitSpec::holdout(0.8, 2)).unwrap();
        assert_eq!(folds.len(), 1);
        assert_eq!(folds[0].train.len() + folds[0].test.len(), 100);
        assert_eq!(folds[0].train.len(), 80);
    }

    #[test]
    fn subject_unit_keeps_subjects_together() {
        let mut examples = Vec::new();
        for s in 0..20 {
            for seg in 0..3 {
                let group = if s % 2 == 0 { Group::S0 } else { Group::S1 };
                let label = if s % 4 < 2 { 1.0 } else { 0.0 };
                examples.push(Example::new(vec![seg as f64], label, group, format!("s{s}")));
            }
        }
        let ds = Dataset::new(examples, 1, names());
        let spec = SplitSpec {
            unit: SplitUnit::Subject,
            ..SplitSpec::kfold(5, 4)
        };
        for f in split(&ds, &spec).unwrap() {
            for t in &f.test.examples {
                assert!(f.train.examples.iter().all(|e| e.subject_id != t.subject_id));
            }
        }
    }

    #[test]
    fn seed_stream_separates_purposes() {
        let s = SeedStream::new(42);
        assert_ne!(s.derive("split", 0), s.derive("train", 0));
        assert_ne!(s.derive("train", 0), s.derive("train", 1));
        assert_eq!(s.derive("train", 3), SeedStream::new(42).derive("train", 3));
    }

    #[test]
    fn canonical_order_ignores_storage_order() {
        let ds = toy();
        let mut rev = ds.clone();
        rev.examples.reverse();
        let a: Vec<&Example> = ds.canonical_order().into_iter().map(|i| &ds.examples[i]).collect();
        let b: Vec<&Example> = rev.canonical_order().into_iter().map(|i| &rev.examples[i]).collect();
        assert_eq!(a, b);
    }
}
