//! Pre-processing mitigation: mixup augmentation of the minority group and
//! massaging (pairwise relabelling towards zero discrimination).

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::dataset::{seeded_rng, Dataset, Example, Group};
use crate::error::{Error, Result};

pub const DEFAULT_MIXUP_ALPHA: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    /// Shape of the symmetric Beta distribution for the mixing weight.
    pub alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            alpha: DEFAULT_MIXUP_ALPHA,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixupOutcome {
    pub dataset: Dataset,
    pub lambdas: Vec<f64>,
    /// Parent indices `(i, j)` of each synthetic example, in append order.
    pub parents: Vec<(usize, usize)>,
}

/// `lambda * a + (1 - lambda) * b` for features and label.
pub fn interpolate(a: &Example, b: &Example, lambda: f64, subject_id: String) -> Example {
    let features = a
        .features
        .iter()
        .zip(&b.features)
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Example {
        features,
        label: lambda * a.label + (1.0 - lambda) * b.label,
        group: a.group,
        subject_id,
        weight: 1.0,
    }
}

/// Appends interpolated minority examples until both groups are equally large.
pub fn mixup_balance(dataset: &Dataset, cfg: &MixupConfig, seed: u64) -> Result<MixupOutcome> {
    if !(cfg.alpha > 0.0 && cfg.alpha.is_finite()) {
        return Err(Error::invalid(format!("mixup alpha must be positive, got {}", cfg.alpha)));
    }
    let n0 = dataset.group_count(Group::S0);
    let n1 = dataset.group_count(Group::S1);
    let (minority, deficit) = if n0 <= n1 { (Group::S0, n1 - n0) } else { (Group::S1, n0 - n1) };
    if deficit == 0 {
        return Ok(MixupOutcome {
            dataset: dataset.clone(),
            lambdas: Vec::new(),
            parents: Vec::new(),
        });
    }
    let pool: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.examples[i].group == minority)
        .collect();
    if pool.len() < 2 {
        return Err(Error::invalid(format!(
            "mixup needs at least two minority examples, found {}",
            pool.len()
        )));
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seeded_rng(seed);
    let mut examples = dataset.examples.clone();
    let mut lambdas = Vec::with_capacity(deficit);
    let mut parents = Vec::with_capacity(deficit);
    for k in 0..deficit {
        let pick = index::sample(&mut rng, pool.len(), 2);
        let (i, j) = (pool[pick.index(0)], pool[pick.index(1)]);
        let lambda = beta.sample(&mut rng).clamp(0.0, 1.0);
        examples.push(interpolate(
            &dataset.examples[i],
            &dataset.examples[j],
            lambda,
            format!("mixup-{minority}-{k}"),
        ));
        lambdas.push(lambda);
        parents.push((i, j));
    }
    Ok(MixupOutcome {
        dataset: dataset.with_examples(examples),
        lambdas,
        parents,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discrimination {
    pub disc: f64,
    pub favoured: Group,
}

fn require_hard(dataset: &Dataset) -> Result<()> {
    match dataset.examples.iter().position(|e| !e.is_hard()) {
        Some(i) => Err(Error::invalid(format!("example {i} has a soft label; hard labels required"))),
        None => Ok(()),
    }
}

// (positives, totals) per group.
fn class_counts(dataset: &Dataset) -> ([u64; 2], [u64; 2]) {
    let mut pos = [0u64; 2];
    let mut tot = [0u64; 2];
    for e in &dataset.examples {
        tot[e.group.index()] += 1;
        pos[e.group.index()] += u64::from(e.hard_label());
    }
    (pos, tot)
}

fn favoured_of(pos: [u64; 2], tot: [u64; 2]) -> Group {
    // Compare pos0/tot0 against pos1/tot1 exactly; ties favour the majority.
    if pos[0] * tot[1] > pos[1] * tot[0] {
        Group::S0
    } else {
        Group::S1
    }
}

/// Positive-rate difference between the favoured and the deprived group.
pub fn discrimination(dataset: &Dataset) -> Result<Discrimination> {
    require_hard(dataset)?;
    let (pos, tot) = class_counts(dataset);
    for g in Group::BOTH {
        if tot[g.index()] == 0 {
            return Err(Error::EmptyGroup(g));
        }
    }
    let favoured = favoured_of(pos, tot);
    let (f, d) = (favoured.index(), favoured.other().index());
    Ok(Discrimination {
        disc: pos[f] as f64 / tot[f] as f64 - pos[d] as f64 / tot[d] as f64,
        favoured,
    })
}

/// Number of relabelled pairs, `ceil(disc * P(fav) * P(dep) * |D|)`, evaluated
/// exactly as `ceil((pos_fav * n_dep - pos_dep * n_fav) / |D|)`.
pub fn relabel_pairs(dataset: &Dataset) -> Result<(usize, Group)> {
    let d = discrimination(dataset)?;
    let (pos, tot) = class_counts(dataset);
    let (f, dep) = (d.favoured.index(), d.favoured.other().index());
    let numerator = pos[f] * tot[dep] - pos[dep] * tot[f];
    let n = tot[0] + tot[1];
    Ok((numerator.div_ceil(n) as usize, d.favoured))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MassagingUnit {
    #[default]
    Example,
    /// Relabel whole subjects; counts and ranking use one entry per subject.
    Subject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassagingPlan {
    pub m: usize,
    pub favoured: Group,
    /// Favoured-group positives to relabel 0.
    pub demote: Vec<usize>,
    /// Deprived-group negatives to relabel 1.
    pub promote: Vec<usize>,
}

impl MassagingPlan {
    pub fn audit_json(&self, group_names: &[String; 2]) -> serde_json::Value {
        serde_json::json!({
            "m": self.m,
            "favoured": group_names[self.favoured.index()],
            "demote": self.demote,
            "promote": self.promote,
        })
    }
}

/// Picks the `m` favoured positives with the lowest `p(y=1|x)` and the `m`
/// deprived negatives with the highest. Ties resolve by example index.
pub fn massaging_plan(dataset: &Dataset, probabilities: &[f64]) -> Result<MassagingPlan> {
    massaging_plan_with(dataset, probabilities, MassagingUnit::Example)
}

pub fn massaging_plan_with(dataset: &Dataset, probabilities: &[f64], unit: MassagingUnit) -> Result<MassagingPlan> {
    if probabilities.len() != dataset.len() {
        return Err(Error::LengthMismatch {
            what: "probabilities",
            expected: dataset.len(),
            found: probabilities.len(),
        });
    }
    match unit {
        MassagingUnit::Example => {
            let (m, favoured) = relabel_pairs(dataset)?;
            let units: Vec<Unit> = dataset
                .examples
                .iter()
                .enumerate()
                .map(|(i, e)| Unit {
                    members: vec![i],
                    label: e.hard_label(),
                    group: e.group,
                    prob: probabilities[i],
                })
                .collect();
            select(&units, m, favoured)
        }
        MassagingUnit::Subject => {
            let units = subject_units(dataset, probabilities)?;
            let summary = dataset.with_examples(
                units
                    .iter()
                    .map(|u| Example::new(vec![0.0; dataset.feature_dim], f64::from(u.label), u.group, ""))
                    .collect(),
            );
            let (m, favoured) = relabel_pairs(&summary)?;
            select(&units, m, favoured)
        }
    }
}

struct Unit {
    members: Vec<usize>,
    label: u8,
    group: Group,
    prob: f64,
}

fn subject_units(dataset: &Dataset, probabilities: &[f64]) -> Result<Vec<Unit>> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in dataset.examples.iter().enumerate() {
        by_subject.entry(e.subject_id.as_str()).or_default().push(i);
    }
    let mut units: Vec<Unit> = Vec::with_capacity(by_subject.len());
    for (subject, members) in by_subject {
        let first = &dataset.examples[members[0]];
        if members
            .iter()
            .any(|&i| dataset.examples[i].hard_label() != first.hard_label() || dataset.examples[i].group != first.group)
        {
            return Err(Error::invalid(format!("subject {subject} mixes labels or groups")));
        }
        let prob = members.iter().map(|&i| probabilities[i]).sum::<f64>() / members.len() as f64;
        units.push(Unit {
            label: first.hard_label(),
            group: first.group,
            prob,
            members,
        });
    }
    // Order by first example index so ties resolve like the example path.
    units.sort_by_key(|u| u.members[0]);
    Ok(units)
}

fn select(units: &[Unit], m: usize, favoured: Group) -> Result<MassagingPlan> {
    let mut demote: Vec<usize> = (0..units.len())
        .filter(|&u| units[u].group == favoured && units[u].label == 1)
        .collect();
    let mut promote: Vec<usize> = (0..units.len())
        .filter(|&u| units[u].group != favoured && units[u].label == 0)
        .collect();
    for (side, pool) in [("favoured positive", &demote), ("deprived negative", &promote)] {
        if pool.len() < m {
            return Err(Error::InsufficientCandidates {
                side,
                needed: m,
                available: pool.len(),
            });
        }
    }
    demote.sort_by(|&a, &b| units[a].prob.total_cmp(&units[b].prob).then(a.cmp(&b)));
    promote.sort_by(|&a, &b| units[b].prob.total_cmp(&units[a].prob).then(a.cmp(&b)));
    let expand = |chosen: &[usize]| -> Vec<usize> {
        let mut out: Vec<usize> = chosen.iter().flat_map(|&u| units[u].members.iter().copied()).collect();
        out.sort_unstable();
        out
    };
    Ok(MassagingPlan {
        m,
        favoured,
        demote: expand(&demote[..m]),
        promote: expand(&promote[..m]),
    })
}

/// Flips labels at the plan's indices after checking the plan still fits.
pub fn apply_massaging(dataset: &Dataset, plan: &MassagingPlan) -> Result<Dataset> {
    let mut seen = HashSet::new();
    for (indices, want_label, want_group) in [
        (&plan.demote, 1u8, plan.favoured),
        (&plan.promote, 0u8, plan.favoured.other()),
    ] {
        for &i in indices {
            let e = dataset.examples.get(i).ok_or(Error::StalePlan {
                index: i,
                reason: "index out of range",
            })?;
            if !seen.insert(i) {
                return Err(Error::StalePlan {
                    index: i,
                    reason: "index appears twice",
                });
            }
            if !e.is_hard() || e.hard_label() != want_label {
                return Err(Error::StalePlan {
                    index: i,
                    reason: "label changed since planning",
                });
            }
            if e.group != want_group {
                return Err(Error::StalePlan {
                    index: i,
                    reason: "group does not match plan",
                });
            }
        }
    }
    let mut examples = dataset.examples.clone();
    for &i in &plan.demote {
        examples[i].label = 0.0;
    }
    for &i in &plan.promote {
        examples[i].label = 1.0;
    }
    Ok(dataset.with_examples(examples))
}
