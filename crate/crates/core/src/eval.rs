//! Zero-shot classification and text-to-image retrieval over optionally
//! debiased embeddings, a synthetic data generator with planted bias, and the
//! report that ties them to the metrics.
//!
//! Ties are broken deterministically: classification prefers the
//! lexicographically smallest class name, retrieval ranks equal scores by
//! candidate id. Work is spread over samples and queries with rayon; every
//! collection preserves input order so results do not depend on scheduling.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AttributeSubspace, Embedding, GroupPrototype, Labels, Modality};
use crate::linalg::{dot, normalized};
use crate::metrics::{
    self, ClassifiedSample, EoViolations, F1Report, RetrievalOutcome, MAX_SKEW_LOG_BASE,
};
use crate::solver::{cross_utility_loss, orthogonal_deficit, DebiasResult, Degeneracy, ExtremeMode, Solver};

/// Slack allowed when checking measured cross-utility loss against a bound.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum DebiasMode {
    None,
    TextOnly,
    ImageOnly,
    Both,
    FullProjectionBoth,
}

impl DebiasMode {
    pub fn touches(self, modality: Modality) -> bool {
        match self {
            DebiasMode::None => false,
            DebiasMode::TextOnly => modality == Modality::Text,
            DebiasMode::ImageOnly => modality == Modality::Image,
            DebiasMode::Both | DebiasMode::FullProjectionBoth => true,
        }
    }
}

/// An embedding after the workspace's debias mode has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformed {
    pub vector: Vec<f64>,
    /// `None` when the mode leaves this modality untouched.
    pub result: Option<DebiasResult>,
    /// This side's term of the tight cross-utility bound, `√(2ℓ_self)`.
    pub bound_term: f64,
    /// This side's term of the full-projection bound, `√(2(1-o))`.
    pub loose_term: f64,
}

impl Transformed {
    fn identity(e: &Embedding) -> Self {
        Transformed {
            vector: e.vector.clone(),
            result: None,
            bound_term: 0.0,
            loose_term: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    pub image_embeddings: Vec<Embedding>,
    pub text_embeddings: Vec<Embedding>,
    /// Class name to the id of its prompt among `text_embeddings`.
    pub class_prompts: BTreeMap<String, String>,
    pub subspace: AttributeSubspace,
    pub debias_mode: DebiasMode,
    pub solver: Solver,
}

impl Workspace {
    pub fn new(
        image_embeddings: Vec<Embedding>,
        text_embeddings: Vec<Embedding>,
        class_prompts: BTreeMap<String, String>,
        subspace: AttributeSubspace,
        debias_mode: DebiasMode,
        solver: Solver,
    ) -> Result<Self> {
        let d = subspace.dim();
        for e in image_embeddings.iter().chain(&text_embeddings) {
            if e.dim() != d {
                return Err(Error::dim(d, e.dim()));
            }
        }
        let ws = Workspace {
            image_embeddings,
            text_embeddings,
            class_prompts,
            subspace,
            debias_mode,
            solver,
        };
        for id in ws.class_prompts.values() {
            ws.text(id)?;
        }
        Ok(ws)
    }

    fn text(&self, id: &str) -> Result<&Embedding> {
        self.text_embeddings
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::UnknownId(id.to_owned()))
    }

    /// Applies the debias mode to one embedding according to its modality.
    pub fn transform(&self, e: &Embedding) -> Result<Transformed> {
        if !self.debias_mode.touches(e.modality) {
            return Ok(Transformed::identity(e));
        }
        let result = if self.debias_mode == DebiasMode::FullProjectionBoth {
            self.solver
                .debias_extreme(&e.vector, &self.subspace, ExtremeMode::FullProjection)?
        } else {
            self.solver.debias(&e.vector, &self.subspace)?
        };
        let loose_term = match result.degenerate {
            Degeneracy::None => (2.0 * orthogonal_deficit(result.norm_parallel, result.norm_orthogonal)).sqrt(),
            _ => 0.0,
        };
        Ok(Transformed {
            vector: result.u_star.clone(),
            bound_term: result.cross_bound_term,
            loose_term,
            result: Some(result),
        })
    }

    pub fn transform_all(&self, embeddings: &[Embedding]) -> Result<Vec<Transformed>> {
        embeddings.par_iter().map(|e| self.transform(e)).collect()
    }
}

/// Classification output together with the vectors it was computed from.
#[derive(Debug, Clone)]
pub struct Classification {
    pub samples: Vec<ClassifiedSample>,
    pub images: Vec<Transformed>,
    /// Transformed class prompts, in class-name order.
    pub prompts: Vec<(String, Transformed)>,
}

pub fn classify_zero_shot(ws: &Workspace) -> Result<Vec<ClassifiedSample>> {
    Ok(classify_detailed(ws)?.samples)
}

pub fn classify_detailed(ws: &Workspace) -> Result<Classification> {
    if ws.class_prompts.is_empty() {
        return Err(Error::InvalidArgument("no class prompts".into()));
    }
    let prompts: Vec<(String, Transformed)> = ws
        .class_prompts
        .iter()
        .map(|(class, id)| Ok((class.clone(), ws.transform(ws.text(id)?)?)))
        .collect::<Result<_>>()?;
    let images = ws.transform_all(&ws.image_embeddings)?;
    let samples = ws
        .image_embeddings
        .par_iter()
        .zip(&images)
        .map(|(e, t)| {
            let (Some(class), Some(group)) = (e.class(), e.group()) else {
                return Err(Error::MissingLabels(format!(
                    "image `{}` needs class and group labels",
                    e.id
                )));
            };
            let mut best: Option<(&str, f64)> = None;
            for (name, p) in &prompts {
                let s = dot(&t.vector, &p.vector);
                // prompts iterate in name order, so strict > keeps the smallest name on ties
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((name, s));
                }
            }
            Ok(ClassifiedSample {
                true_class: class.to_owned(),
                predicted_class: best.expect("prompts non-empty").0.to_owned(),
                group: group.to_owned(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Classification {
        samples,
        images,
        prompts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalQuery {
    pub embedding: Embedding,
    pub relevant_id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Retrieval {
    pub outcomes: Vec<RetrievalOutcome>,
    pub queries: Vec<Transformed>,
    pub candidates: Vec<Transformed>,
}

/// Ranks every image candidate for each query, keeping the top `depth`.
pub fn retrieve(ws: &Workspace, queries: &[RetrievalQuery], depth: usize) -> Result<Vec<RetrievalOutcome>> {
    Ok(retrieve_detailed(ws, queries, depth)?.outcomes)
}

pub fn retrieve_detailed(ws: &Workspace, queries: &[RetrievalQuery], depth: usize) -> Result<Retrieval> {
    if ws.image_embeddings.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let groups: BTreeMap<String, String> = ws
        .image_embeddings
        .iter()
        .map(|e| match e.group() {
            Some(g) => Ok((e.id.clone(), g.to_owned())),
            None => Err(Error::MissingLabels(format!("candidate `{}` has no group", e.id))),
        })
        .collect::<Result<_>>()?;
    let groups = Arc::new(groups);
    let candidates = ws.transform_all(&ws.image_embeddings)?;
    let transformed: Vec<Transformed> = queries
        .par_iter()
        .map(|q| ws.transform(&q.embedding))
        .collect::<Result<_>>()?;
    let depth = depth.min(candidates.len());

    let outcomes = queries
        .par_iter()
        .zip(&transformed)
        .map(|(q, t)| {
            let mut scored: Vec<(f64, &str)> = candidates
                .iter()
                .zip(&ws.image_embeddings)
                .map(|(c, e)| (dot(&t.vector, &c.vector), e.id.as_str()))
                .collect();
            let order = |a: &(f64, &str), b: &(f64, &str)| -> Ordering {
                b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
            };
            if depth > 0 && depth < scored.len() {
                scored.select_nth_unstable_by(depth - 1, order);
                scored.truncate(depth);
            }
            scored.sort_unstable_by(order);
            scored.truncate(depth);
            RetrievalOutcome {
                query_id: q.embedding.id.clone(),
                ranked_ids: scored.into_iter().map(|(_, id)| id.to_owned()).collect(),
                relevant_id: q.relevant_id.clone(),
                candidate_groups: groups.clone(),
            }
        })
        .collect();
    Ok(Retrieval {
        outcomes,
        queries: transformed,
        candidates,
    })
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Noisy copies of each class prompt used as group-neutral retrieval queries.
pub const NEUTRAL_QUERIES_PER_CLASS: usize = 10;

fn default_prompt_bias() -> f64 {
    1.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub d: usize,
    pub n_groups: usize,
    pub n_classes: usize,
    pub samples_per_cell: usize,
    /// Weight of the group direction in images and captions, in `[0, 1)`.
    pub leakage_strength: f64,
    /// Per-coordinate standard deviation of the additive gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Weight of the stereotyped group direction in each class prompt; class
    /// `k` leans toward group `k mod n_groups`.
    #[serde(default = "default_prompt_bias")]
    pub prompt_bias: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            d: 64,
            n_groups: 2,
            n_classes: 2,
            samples_per_cell: 500,
            leakage_strength: 0.8,
            noise_sigma: 0.05,
            seed: 0,
            prompt_bias: default_prompt_bias(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let needed = self.n_classes + self.n_groups;
        if self.d < needed {
            return Err(Error::DimensionTooSmall { d: self.d, needed });
        }
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_groups < 2 {
            return bad(format!("n_groups {} < 2", self.n_groups));
        }
        if self.n_classes < 1 || self.samples_per_cell < 1 {
            return bad("n_classes and samples_per_cell must be positive".into());
        }
        if !(0.0..1.0).contains(&self.leakage_strength) {
            return bad(format!("leakage_strength {} outside [0, 1)", self.leakage_strength));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !(self.prompt_bias >= 0.0 && self.prompt_bias.is_finite()) {
            return bad(format!("prompt_bias {} must be finite and >= 0", self.prompt_bias));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub images: Vec<Embedding>,
    /// Class prompts, then captions, then neutral queries.
    pub texts: Vec<Embedding>,
    pub prototypes: Vec<GroupPrototype>,
    pub class_prompts: BTreeMap<String, String>,
    /// Caption id to the id of the image it describes.
    pub qrels: BTreeMap<String, String>,
}

impl SynthDataset {
    pub fn groups(&self) -> Vec<String> {
        self.prototypes.iter().map(|p| p.group.clone()).collect()
    }

    /// Captions with their paired image, then unjudged neutral queries.
    pub fn retrieval_queries(&self) -> Vec<RetrievalQuery> {
        queries_from_texts(&self.texts, &self.class_prompts, &self.qrels)
    }
}

/// Every text that is not a class prompt becomes a query; judged when it
/// appears in `qrels`.
pub fn queries_from_texts(
    texts: &[Embedding],
    class_prompts: &BTreeMap<String, String>,
    qrels: &BTreeMap<String, String>,
) -> Vec<RetrievalQuery> {
    let prompt_ids: BTreeSet<&str> = class_prompts.values().map(String::as_str).collect();
    texts
        .iter()
        .filter(|t| !prompt_ids.contains(t.id.as_str()))
        .map(|t| RetrievalQuery {
            embedding: t.clone(),
            relevant_id: qrels.get(&t.id).cloned(),
        })
        .collect()
}

pub fn class_name(k: usize) -> String {
    format!("class-{k}")
}

pub fn group_name(g: usize) -> String {
    format!("group-{g}")
}

/// Content of class `k` lives on axis `k`; group `g` on axis `n_classes + g`.
/// The remaining axes carry only noise.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let d = spec.d;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d)
            .map(|_| spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let planted = |k: usize, g: usize, w: f64| -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        v[spec.n_classes + g] += w;
        v
    };
    let unit = |id: String, v: Vec<f64>, m: Modality, labels: Labels| -> Result<Embedding> {
        Ok(Embedding::new(id, v, m)?.with_labels(labels))
    };

    let mut texts = Vec::new();
    let mut class_prompts = BTreeMap::new();
    for k in 0..spec.n_classes {
        let id = format!("prompt-{}", class_name(k));
        let v = planted(k, k % spec.n_groups, spec.prompt_bias);
        texts.push(unit(id.clone(), v, Modality::Text, Labels::new(Some(&class_name(k)), None))?);
        class_prompts.insert(class_name(k), id);
    }

    let mut images = Vec::new();
    let mut captions = Vec::new();
    let mut qrels = BTreeMap::new();
    let mut idx = 0usize;
    for k in 0..spec.n_classes {
        for g in 0..spec.n_groups {
            let labels = Labels::new(Some(&class_name(k)), Some(&group_name(g)));
            for _ in 0..spec.samples_per_cell {
                let base = planted(k, g, spec.leakage_strength);
                let shared = noise(&mut rng);
                let own = noise(&mut rng);
                let img: Vec<f64> = base.iter().zip(&shared).map(|(b, n)| b + n).collect();
                let cap: Vec<f64> = img.iter().zip(&own).map(|(x, n)| x + n).collect();
                let img_id = format!("img-{idx:06}");
                let cap_id = format!("cap-{idx:06}");
                images.push(unit(img_id.clone(), img, Modality::Image, labels.clone())?);
                captions.push(unit(cap_id.clone(), cap, Modality::Text, labels.clone())?);
                qrels.insert(cap_id, img_id);
                idx += 1;
            }
        }
    }
    texts.extend(captions);

    for k in 0..spec.n_classes {
        for j in 0..NEUTRAL_QUERIES_PER_CLASS {
            let v = planted(k, k % spec.n_groups, spec.prompt_bias);
            let n = noise(&mut rng);
            let v: Vec<f64> = v.iter().zip(&n).map(|(a, b)| a + b).collect();
            let id = format!("neutral-{}-{j:02}", class_name(k));
            texts.push(unit(id, v, Modality::Text, Labels::new(Some(&class_name(k)), None))?);
        }
    }

    let mut content_mean = vec![0.0; d];
    content_mean[..spec.n_classes].fill(1.0);
    let content_mean = normalized(&content_mean, 0.0).expect("n_classes >= 1");
    let prototypes = (0..spec.n_groups)
        .map(|g| {
            let mut v = content_mean.clone();
            v[spec.n_classes + g] += 1.0;
            GroupPrototype::new(group_name(g), normalized(&v, 0.0).expect("non-zero"))
        })
        .collect::<Result<_>>()?;

    Ok(SynthDataset {
        images,
        texts,
        prototypes,
        class_prompts,
        qrels,
    })
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Retrieve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSpec {
    pub tasks: Vec<Task>,
    /// Cut-off for MaxSkew.
    pub m: usize,
    /// Cut-offs for Recall.
    pub ks: Vec<usize>,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        MetricsSpec {
            tasks: vec![Task::Classify, Task::Retrieve],
            m: 50,
            ks: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub debias_mode: DebiasMode,
    pub eps_deg: f64,
    pub tasks: Vec<Task>,
    pub m: usize,
    pub ks: Vec<usize>,
    pub max_skew_log_base: String,
    pub d: usize,
    pub n_images: usize,
    pub n_texts: usize,
    pub n_queries: usize,
    pub subspace_rank: usize,
    pub reference_group: String,
    pub source_groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n_samples: usize,
    pub accuracy: f64,
    pub eo: EoViolations,
    pub f1: F1Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub n_queries: usize,
    pub n_judged: usize,
    pub n_neutral: usize,
    /// Over unjudged queries; absent when there are none.
    pub max_skew: Option<f64>,
    /// Keyed by K, over judged queries.
    pub recall_at_k: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SolverStats {
    pub n_debiased: usize,
    pub n_fair_already: usize,
    pub n_pure_attribute: usize,
    pub mean_alpha_star: f64,
    pub mean_self_utility_loss: f64,
    pub max_cross_bound: f64,
}

/// Cross-utility loss of image/text pairs against the tight and the
/// full-projection bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BoundCheck {
    pub pairs_checked: usize,
    /// Loss within the tight bound for every pair.
    pub theorem1_pass: bool,
    /// Tight bound within the full-projection bound, and loss within it.
    pub prop1_pass: bool,
    /// Largest `loss - tight_bound`; negative when all pairs have room.
    pub max_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ConfigEcho,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_check: Option<BoundCheck>,
}

#[derive(Default)]
struct StatsAcc {
    seen: HashSet<(Modality, String)>,
    stats: SolverStats,
    alpha_sum: f64,
    loss_sum: f64,
}

impl StatsAcc {
    fn add(&mut self, e: &Embedding, t: &Transformed) {
        let Some(r) = &t.result else { return };
        if !self.seen.insert((e.modality, e.id.clone())) {
            return;
        }
        self.stats.n_debiased += 1;
        match r.degenerate {
            Degeneracy::FairAlready => self.stats.n_fair_already += 1,
            Degeneracy::PureAttribute => self.stats.n_pure_attribute += 1,
            Degeneracy::None => {}
        }
        self.alpha_sum += r.alpha_star;
        self.loss_sum += r.self_utility_loss;
    }

    fn finish(mut self, max_cross_bound: f64) -> SolverStats {
        let n = self.stats.n_debiased;
        if n > 0 {
            self.stats.mean_alpha_star = self.alpha_sum / n as f64;
            self.stats.mean_self_utility_loss = self.loss_sum / n as f64;
        }
        self.stats.max_cross_bound = max_cross_bound;
        self.stats
    }
}

struct BoundAcc {
    check: BoundCheck,
    max_tight: f64,
}

impl BoundAcc {
    fn new() -> Self {
        BoundAcc {
            check: BoundCheck {
                pairs_checked: 0,
                theorem1_pass: true,
                prop1_pass: true,
                max_excess: f64::NEG_INFINITY,
            },
            max_tight: 0.0,
        }
    }

    fn add(&mut self, image: (&Embedding, &Transformed), text: (&Embedding, &Transformed)) {
        let loss = cross_utility_loss(&image.1.vector, &text.1.vector, &image.0.vector, &text.0.vector);
        let tight = image.1.bound_term + text.1.bound_term;
        let loose = image.1.loose_term + text.1.loose_term;
        let c = &mut self.check;
        c.pairs_checked += 1;
        c.max_excess = c.max_excess.max(loss - tight);
        c.theorem1_pass &= loss <= tight + BOUND_SLACK;
        c.prop1_pass &= tight <= loose + BOUND_SLACK && loss <= loose + BOUND_SLACK;
        self.max_tight = self.max_tight.max(tight);
    }
}

/// Runs the requested tasks and collects metrics, solver statistics and the
/// cross-utility bound check into one report.
pub fn run_report(ws: &Workspace, queries: &[RetrievalQuery], spec: &MetricsSpec) -> Result<EvalReport> {
    let mut tasks = spec.tasks.clone();
    tasks.sort();
    tasks.dedup();
    let config = ConfigEcho {
        debias_mode: ws.debias_mode,
        eps_deg: ws.solver.eps_deg,
        tasks: tasks.clone(),
        m: spec.m,
        ks: spec.ks.clone(),
        max_skew_log_base: MAX_SKEW_LOG_BASE.to_owned(),
        d: ws.subspace.dim(),
        n_images: ws.image_embeddings.len(),
        n_texts: ws.text_embeddings.len(),
        n_queries: queries.len(),
        subspace_rank: ws.subspace.rank(),
        reference_group: ws.subspace.reference_group().to_owned(),
        source_groups: ws.subspace.source_groups().to_vec(),
    };
    let mut report = EvalReport {
        config,
        classification: None,
        retrieval: None,
        solver: None,
        bound_check: None,
    };
    if tasks.is_empty() {
        return Ok(report);
    }

    let mut stats = StatsAcc::default();
    let mut bounds = BoundAcc::new();

    if tasks.contains(&Task::Classify) {
        let c = classify_detailed(ws)?;
        let classes: BTreeSet<String> = ws.class_prompts.keys().cloned().collect();
        let groups: BTreeSet<String> = c.samples.iter().map(|s| s.group.clone()).collect();
        let correct = c.samples.iter().filter(|s| s.true_class == s.predicted_class).count();
        report.classification = Some(ClassificationReport {
            n_samples: c.samples.len(),
            accuracy: if c.samples.is_empty() {
                0.0
            } else {
                correct as f64 / c.samples.len() as f64
            },
            eo: metrics::eo_violations(&c.samples, &classes, &groups)?,
            f1: metrics::f1_scores(&c.samples, &classes),
        });
        let prompt_index: BTreeMap<&str, usize> = c
            .prompts
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.as_str(), i))
            .collect();
        for (class, t) in &c.prompts {
            stats.add(ws.text(&ws.class_prompts[class])?, t);
        }
        for (e, t) in ws.image_embeddings.iter().zip(&c.images) {
            stats.add(e, t);
            if let Some(&i) = e.class().and_then(|k| prompt_index.get(k)) {
                let (class, pt) = &c.prompts[i];
                bounds.add((e, t), (ws.text(&ws.class_prompts[class])?, pt));
            }
        }
    }

    if tasks.contains(&Task::Retrieve) {
        let depth = spec.ks.iter().copied().chain([spec.m]).max().unwrap_or(0);
        let r = retrieve_detailed(ws, queries, depth)?;
        let (judged, neutral): (Vec<RetrievalOutcome>, Vec<RetrievalOutcome>) =
            r.outcomes.into_iter().partition(|o| o.relevant_id.is_some());
        let groups: BTreeSet<String> = ws
            .image_embeddings
            .iter()
            .filter_map(|e| e.group().map(str::to_owned))
            .collect();
        let max_skew = if neutral.is_empty() {
            None
        } else {
            Some(metrics::max_skew(&neutral, spec.m, &groups)?)
        };
        report.retrieval = Some(RetrievalReport {
            n_queries: queries.len(),
            n_judged: judged.len(),
            n_neutral: neutral.len(),
            max_skew,
            recall_at_k: spec
                .ks
                .iter()
                .map(|&k| (k, metrics::recall_at_k(&judged, k)))
                .collect(),
        });
        let image_index: HashMap<&str, usize> = ws
            .image_embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect();
        for (e, t) in ws.image_embeddings.iter().zip(&r.candidates) {
            stats.add(e, t);
        }
        for (q, t) in queries.iter().zip(&r.queries) {
            stats.add(&q.embedding, t);
            let Some(rel) = &q.relevant_id else { continue };
            let i = *image_index
                .get(rel.as_str())
                .ok_or_else(|| Error::UnknownId(rel.clone()))?;
            bounds.add((&ws.image_embeddings[i], &r.candidates[i]), (&q.embedding, t));
        }
    }

    report.solver = Some(stats.finish(bounds.max_tight));
    if bounds.check.pairs_checked == 0 {
        bounds.check.max_excess = 0.0;
    }
    report.bound_check = Some(bounds.check);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_subspace;

    fn text(id: &str, v: &[f64]) -> Embedding {
        Embedding::new(id, v.to_vec(), Modality::Text).unwrap()
    }

    fn image(id: &str, v: &[f64], class: &str, group: &str) -> Embedding {
        Embedding::new(id, v.to_vec(), Modality::Image)
            .unwrap()
            .with_labels(Labels::new(Some(class), Some(group)))
    }

    fn subspace_on_last_axis(d: usize) -> AttributeSubspace {
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        a[0] = 1.0;
        b[0] = 1.0;
        a[d - 1] = 1.0;
        b[d - 1] = -1.0;
        let protos = vec![
            GroupPrototype::new("m", normalized(&a, 0.0).unwrap()).unwrap(),
            GroupPrototype::new("f", normalized(&b, 0.0).unwrap()).unwrap(),
        ];
        build_subspace(&protos, "m", 1e-10).unwrap()
    }

    fn workspace(images: Vec<Embedding>, texts: Vec<Embedding>, mode: DebiasMode) -> Workspace {
        let prompts = texts
            .iter()
            .map(|t| (t.id.trim_start_matches("p-").to_owned(), t.id.clone()))
            .collect();
        Workspace::new(images, texts, prompts, subspace_on_last_axis(3), mode, Solver::default()).unwrap()
    }

    #[test]
    fn image_equal_to_prompt_is_predicted() {
        let ws = workspace(
            vec![image("i", &[0.0, 1.0, 0.0], "b", "m")],
            vec![text("p-a", &[1.0, 0.0, 0.0]), text("p-b", &[0.0, 1.0, 0.0])],
            DebiasMode::None,
        );
        assert_eq!(classify_zero_shot(&ws).unwrap()[0].predicted_class, "b");
    }

    #[test]
    fn classification_tie_goes_to_smallest_name() {
        let ws = workspace(
            vec![image("i", &[1.0, 1.0, 0.0], "b", "m")],
            vec![text("p-b", &[0.0, 1.0, 0.0]), text("p-a", &[1.0, 0.0, 0.0])],
            DebiasMode::None,
        );
        assert_eq!(classify_zero_shot(&ws).unwrap()[0].predicted_class, "a");
    }

    #[test]
    fn missing_labels_rejected() {
        let unlabeled = Embedding::new("i", vec![1.0, 0.0, 0.0], Modality::Image).unwrap();
        let ws = workspace(vec![unlabeled], vec![text("p-a", &[1.0, 0.0, 0.0])], DebiasMode::None);
        assert!(matches!(classify_zero_shot(&ws), Err(Error::MissingLabels(_))));
    }

    #[test]
    fn retrieval_ranks_identical_first_and_ties_by_id() {
        let ws = workspace(
            vec![
                image("c", &[1.0, 1.0, 0.0], "a", "m"),
                image("b", &[1.0, -1.0, 0.0], "a", "f"),
                image("a", &[0.0, 1.0, 0.0], "a", "m"),
            ],
            vec![],
            DebiasMode::None,
        );
        let q = |v: &[f64]| RetrievalQuery {
            embedding: text("q", v),
            relevant_id: None,
        };
        let out = retrieve(&ws, &[q(&[0.0, 1.0, 0.0]), q(&[1.0, 0.0, 0.0])], 3).unwrap();
        assert_eq!(out[0].ranked_ids[0], "a");
        assert_eq!(out[1].ranked_ids[..2], ["b".to_owned(), "c".to_owned()]);
        assert_eq!(retrieve(&ws, &[q(&[1.0, 0.0, 0.0])], 1).unwrap()[0].ranked_ids, ["b"]);
    }

    #[test]
    fn empty_candidates_rejected() {
        let ws = workspace(vec![], vec![], DebiasMode::None);
        assert!(matches!(retrieve(&ws, &[], 5), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn modes_touch_the_right_modalities() {
        let ws = workspace(vec![], vec![], DebiasMode::TextOnly);
        let img = image("i", &[1.0, 0.0, 1.0], "a", "m");
        let txt = text("t", &[1.0, 0.0, 1.0]);
        assert_eq!(ws.transform(&img).unwrap().vector, img.vector);
        assert!(ws.transform(&txt).unwrap().result.is_some());
        let ws = Workspace {
            debias_mode: DebiasMode::FullProjectionBoth,
            ..ws
        };
        let t = ws.transform(&img).unwrap();
        assert!(t.vector[2].abs() < 1e-15);
        assert_eq!(t.result.unwrap().alpha_star, 0.0);
    }

    #[test]
    fn synthetic_is_deterministic_and_validated() {
        let spec = SynthSpec {
            samples_per_cell: 3,
            ..SynthSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        assert_eq!(a.images.len(), 12);
        assert_eq!(a.texts.len(), 2 + 12 + 2 * NEUTRAL_QUERIES_PER_CLASS);
        assert_eq!(a.qrels.len(), 12);
        let other = generate_synthetic(&SynthSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(a.images, other.images);
        let small = SynthSpec { d: 3, ..spec };
        assert!(matches!(
            generate_synthetic(&small),
            Err(Error::DimensionTooSmall { d: 3, needed: 4 })
        ));
    }

    #[test]
    fn empty_task_list_echoes_config_only() {
        let ws = workspace(vec![], vec![text("p-a", &[1.0, 0.0, 0.0])], DebiasMode::Both);
        let spec = MetricsSpec {
            tasks: vec![],
            ..MetricsSpec::default()
        };
        let r = run_report(&ws, &[], &spec).unwrap();
        assert!(r.classification.is_none() && r.retrieval.is_none());
        assert!(r.solver.is_none() && r.bound_check.is_none());
        assert_eq!(r.config.max_skew_log_base, "e");
    }
}
