//! Fairness and utility metrics for the downstream tasks.
//!
//! - Equal-opportunity violation (`Δ_EO^Avg`, `Δ_EO^Max`) over per-group
//!   true-positive rates of a classifier.
//! - MaxSkew@M of retrieved group proportions against candidate base rates.
//! - Statistical parity of generated-image group counts.
//! - Recall@K and macro F1 for utility.
//!
//! MaxSkew uses the natural logarithm.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logarithm base recorded in reports for MaxSkew.
pub const MAX_SKEW_LOG_BASE: &str = "e";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifiedSample {
    pub true_class: String,
    pub predicted_class: String,
    pub group: String,
}

/// Candidate id to group, shared by every outcome of one retrieval run.
type Pool = Arc<BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutcome {
    pub query_id: String,
    /// Candidate ids by descending similarity.
    pub ranked_ids: Vec<String>,
    /// Ground-truth candidate, if the query has one.
    pub relevant_id: Option<String>,
    /// Group of every candidate in the pool.
    pub candidate_groups: Arc<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub prompt_id: String,
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

impl GroupCounts {
    pub fn new(prompt_id: impl Into<String>, counts: BTreeMap<String, u64>) -> Self {
        let total = counts.values().sum();
        GroupCounts {
            prompt_id: prompt_id.into(),
            counts,
            total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EoViolations {
    pub delta_avg: f64,
    pub delta_max: f64,
}

/// Per-class true-positive rate of every group, `tpr[class][group]`.
fn true_positive_rates(
    samples: &[ClassifiedSample],
    classes: &BTreeSet<String>,
    groups: &BTreeSet<String>,
) -> Result<Vec<Vec<f64>>> {
    let mut positives: HashMap<(&str, &str), (u64, u64)> = HashMap::new();
    for s in samples {
        if !classes.contains(&s.true_class) {
            return Err(Error::MissingLabels(format!(
                "undeclared class `{}`",
                s.true_class
            )));
        }
        if !groups.contains(&s.group) {
            return Err(Error::MissingLabels(format!("undeclared group `{}`", s.group)));
        }
        let cell = positives
            .entry((s.true_class.as_str(), s.group.as_str()))
            .or_default();
        cell.1 += 1;
        if s.predicted_class == s.true_class {
            cell.0 += 1;
        }
    }
    classes
        .iter()
        .map(|k| {
            groups
                .iter()
                .map(|g| match positives.get(&(k.as_str(), g.as_str())) {
                    Some(&(hit, n)) if n > 0 => Ok(hit as f64 / n as f64),
                    _ => Err(Error::EmptyCell {
                        class: k.clone(),
                        group: g.clone(),
                    }),
                })
                .collect()
        })
        .collect()
}

/// Equal-opportunity violations over unordered distinct group pairs.
///
/// `delta_avg` is the class-mean of the largest pairwise TPR gap;
/// `delta_max` is the largest class-wise mean pairwise gap.
pub fn eo_violations(
    samples: &[ClassifiedSample],
    classes: &BTreeSet<String>,
    groups: &BTreeSet<String>,
) -> Result<EoViolations> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no classes declared".into()));
    }
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "equal opportunity needs at least 2 groups, got {}",
            groups.len()
        )));
    }
    let tpr = true_positive_rates(samples, classes, groups)?;
    let n = groups.len();
    let pairs = (n * (n - 1) / 2) as f64;
    let mut sum_of_max = 0.0;
    let mut max_of_mean = 0.0_f64;
    for rates in &tpr {
        let mut largest = 0.0_f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let gap = (rates[i] - rates[j]).abs();
                largest = largest.max(gap);
                total += gap;
            }
        }
        sum_of_max += largest;
        max_of_mean = max_of_mean.max(total / pairs);
    }
    Ok(EoViolations {
        delta_avg: sum_of_max / tpr.len() as f64,
        delta_max: max_of_mean,
    })
}

/// MaxSkew@M averaged over queries.
///
/// Groups absent from a query's top-M are skipped in that query's max.
pub fn max_skew(outcomes: &[RetrievalOutcome], m: usize, groups: &BTreeSet<String>) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be positive".into()));
    }
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    // outcomes from one retrieval run share a pool; compute its base rates once
    let mut cached: Option<(Pool, BTreeMap<&str, f64>)> = None;
    let mut total = 0.0;
    for out in outcomes {
        let stale = match &cached {
            Some((pool, _)) => !Arc::ptr_eq(pool, &out.candidate_groups),
            None => true,
        };
        if stale {
            let rates = base_rates(&out.candidate_groups, groups)?;
            cached = Some((out.candidate_groups.clone(), rates));
        }
        let base = &cached.as_ref().expect("just set").1;
        if m > out.ranked_ids.len() {
            return Err(Error::MTooLarge {
                m,
                available: out.ranked_ids.len(),
            });
        }
        let mut top: BTreeMap<&str, usize> = BTreeMap::new();
        for id in &out.ranked_ids[..m] {
            let g = out
                .candidate_groups
                .get(id)
                .ok_or_else(|| Error::UnknownId(id.clone()))?;
            *top.entry(g.as_str()).or_default() += 1;
        }
        let skew = top
            .iter()
            .map(|(g, &count)| {
                let gamma = base
                    .get(g)
                    .ok_or_else(|| Error::MissingLabels(format!("undeclared group `{g}`")))?;
                Ok((count as f64 / m as f64 / gamma).ln())
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        total += skew;
    }
    Ok(total / outcomes.len() as f64)
}

fn base_rates<'a>(
    candidate_groups: &BTreeMap<String, String>,
    groups: &'a BTreeSet<String>,
) -> Result<BTreeMap<&'a str, f64>> {
    if candidate_groups.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut counts: BTreeMap<&str, usize> = groups.iter().map(|g| (g.as_str(), 0)).collect();
    for g in candidate_groups.values() {
        match counts.get_mut(g.as_str()) {
            Some(c) => *c += 1,
            None => return Err(Error::MissingLabels(format!("undeclared group `{g}`"))),
        }
    }
    let n = candidate_groups.len() as f64;
    counts
        .into_iter()
        .map(|(g, c)| {
            if c == 0 {
                Err(Error::GroupAbsentFromCandidates(g.to_owned()))
            } else {
                Ok((g, c as f64 / n))
            }
        })
        .collect()
}

/// Euclidean distance of the group distribution from uniform.
pub fn statistical_parity(counts: &GroupCounts, groups: &BTreeSet<String>) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no groups declared".into()));
    }
    for g in counts.counts.keys() {
        if !groups.contains(g) {
            return Err(Error::MissingLabels(format!(
                "prompt `{}` counts undeclared group `{g}`",
                counts.prompt_id
            )));
        }
    }
    let sum: u64 = counts.counts.values().sum();
    if sum != counts.total {
        return Err(Error::InvalidArgument(format!(
            "prompt `{}`: counts sum to {sum}, total is {}",
            counts.prompt_id, counts.total
        )));
    }
    if counts.total == 0 {
        return Err(Error::EmptyGeneration(counts.prompt_id.clone()));
    }
    let uniform = 1.0 / groups.len() as f64;
    let total = counts.total as f64;
    Ok(groups
        .iter()
        .map(|g| {
            let share = counts.counts.get(g).copied().unwrap_or(0) as f64 / total;
            (share - uniform).powi(2)
        })
        .sum::<f64>()
        .sqrt())
}

/// Fraction of judged queries whose relevant id is in the top `k`.
///
/// Queries without a relevant id are excluded; with none left the result is 0.
pub fn recall_at_k(outcomes: &[RetrievalOutcome], k: usize) -> f64 {
    let mut judged = 0usize;
    let mut hits = 0usize;
    for out in outcomes {
        let Some(rel) = &out.relevant_id else { continue };
        judged += 1;
        if out.ranked_ids.iter().take(k).any(|id| id == rel) {
            hits += 1;
        }
    }
    if judged == 0 {
        0.0
    } else {
        hits as f64 / judged as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub macro_f1: f64,
    pub per_class: BTreeMap<String, f64>,
    /// Classes with no true or predicted samples; scored 0.
    pub undefined: Vec<String>,
}

pub fn f1_scores(samples: &[ClassifiedSample], classes: &BTreeSet<String>) -> F1Report {
    let mut tp: HashMap<&str, u64> = HashMap::new();
    let mut fp: HashMap<&str, u64> = HashMap::new();
    let mut fn_: HashMap<&str, u64> = HashMap::new();
    for s in samples {
        if s.predicted_class == s.true_class {
            *tp.entry(&s.true_class).or_default() += 1;
        } else {
            *fp.entry(&s.predicted_class).or_default() += 1;
            *fn_.entry(&s.true_class).or_default() += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let mut undefined = Vec::new();
    for k in classes {
        let get = |m: &HashMap<&str, u64>| m.get(k.as_str()).copied().unwrap_or(0) as f64;
        let (t, p, n) = (get(&tp), get(&fp), get(&fn_));
        let denom = 2.0 * t + p + n;
        let f1 = if denom == 0.0 {
            undefined.push(k.clone());
            0.0
        } else {
            2.0 * t / denom
        };
        per_class.insert(k.clone(), f1);
    }
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    F1Report {
        macro_f1,
        per_class,
        undefined,
    }
}
