//! Cosine ranking and retrieval metrics: average precision, MAP,
//! Recall@K, precision-recall and precision-scope curves.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;

use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::numeric::{dot, FeatureMatrix};

/// Default top-K grid of the precision-scope curve.
pub const DEFAULT_SCOPE_GRID: [usize; 10] = [1, 5, 10, 20, 50, 100, 200, 500, 1000, 2000];

/// Cutoffs reported by Recall@K.
pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];

/// `u.v / (|u||v|)`. A zero vector has similarity 0 to everything.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(
            "cosine_similarity",
            (1, u.len()),
            (1, v.len()),
        ));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        warn!("cosine similarity with a zero vector, using 0");
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub query_id: usize,
    /// Gallery ids, most similar first.
    pub ids: Vec<usize>,
    /// Cosine similarities, non-increasing.
    pub scores: Vec<f64>,
}

/// Ranks gallery rows (ids = row indices) by cosine similarity to `query`.
pub fn rank_retrieve(query: &[f64], gallery: &FeatureMatrix) -> Result<RankedResult> {
    let ids: Vec<usize> = (0..gallery.rows()).collect();
    rank_with_ids(0, query, gallery, &ids)
}

/// Ranks gallery rows labelled by `ids`. Ties go to the smaller id.
pub fn rank_with_ids(
    query_id: usize,
    query: &[f64],
    gallery: &FeatureMatrix,
    ids: &[usize],
) -> Result<RankedResult> {
    if gallery.rows() == 0 {
        return Err(Error::Domain("retrieval against an empty gallery".into()));
    }
    if ids.len() != gallery.rows() {
        return Err(Error::Validation(format!(
            "{} ids for {} gallery rows",
            ids.len(),
            gallery.rows()
        )));
    }
    let mut scored = gallery
        .row_iter()
        .zip(ids)
        .map(|(row, &id)| cosine_similarity(query, row).map(|s| (id, s)))
        .collect::<Result<Vec<_>>>()?;
    sort_ranked(&mut scored);
    Ok(RankedResult {
        query_id,
        ids: scored.iter().map(|&(id, _)| id).collect(),
        scores: scored.iter().map(|&(_, s)| s).collect(),
    })
}

fn sort_ranked(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// `(1/R) sum_k (R_k / k) rel_k` over the whole list, where `R_k` counts
/// the relevant items in the top `k`. `Ok(None)` when `R = 0`.
pub fn average_precision(relevance: &[bool], relevant_total: usize) -> Result<Option<f64>> {
    let hits = relevance.iter().filter(|&&r| r).count();
    if hits > relevant_total {
        return Err(Error::Domain(format!(
            "{hits} relevant items returned but only {relevant_total} exist"
        )));
    }
    if relevant_total == 0 {
        warn!("query without relevant items excluded from MAP");
        return Ok(None);
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            found += 1;
            sum += found as f64 / (k + 1) as f64;
        }
    }
    Ok(Some(sum / relevant_total as f64))
}

/// Rows that can act as queries or gallery entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Items {
    pub features: FeatureMatrix,
    pub labels: Option<Vec<usize>>,
    /// Instance each row belongs to; an image and a text row of the same
    /// instance form a pair.
    pub instances: Vec<usize>,
    pub modalities: Vec<Modality>,
}

impl Items {
    pub fn new(
        features: FeatureMatrix,
        labels: Option<Vec<usize>>,
        instances: Vec<usize>,
        modality: Modality,
    ) -> Result<Self> {
        let n = features.rows();
        if instances.len() != n || labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::Validation(format!(
                "retrieval items: {n} rows but {} instance ids",
                instances.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            instances,
            modalities: vec![modality; n],
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Both sets together, `self` first.
    pub fn union(&self, other: &Items) -> Result<Items> {
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Items {
            features: FeatureMatrix::vstack(&[&self.features, &other.features])?,
            labels,
            instances: self
                .instances
                .iter()
                .chain(&other.instances)
                .copied()
                .collect(),
            modalities: self
                .modalities
                .iter()
                .chain(&other.modalities)
                .copied()
                .collect(),
        })
    }
}

/// What makes a gallery row relevant to a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relevance {
    /// Same category label.
    Label,
    /// Same instance in the other modality.
    Pairing,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Drop the query's own counterpart (same instance, other modality)
    /// from the gallery.
    pub exclude_own_pair: bool,
    /// Evaluate queries on one thread. Results are identical either way.
    pub deterministic: bool,
}

/// One evaluated query. Ids in `ranked` are gallery row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub ranked: RankedResult,
    /// Relevance flags in rank order.
    pub relevant: Vec<bool>,
    pub relevant_total: usize,
}

impl QueryOutcome {
    pub fn average_precision(&self) -> Result<Option<f64>> {
        average_precision(&self.relevant, self.relevant_total)
    }

    /// Ids of the relevant gallery rows.
    pub fn groundtruth(&self) -> Vec<usize> {
        self.ranked
            .ids
            .iter()
            .zip(&self.relevant)
            .filter(|(_, &r)| r)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// Ranks the gallery for every query. The query row itself (same
/// instance and modality) is never part of its own gallery.
pub fn evaluate_queries(
    queries: &Items,
    gallery: &Items,
    relevance: Relevance,
    opts: &EvalOptions,
) -> Result<Vec<QueryOutcome>> {
    if gallery.is_empty() {
        return Err(Error::Domain("retrieval against an empty gallery".into()));
    }
    if queries.features.cols() != gallery.features.cols() {
        return Err(Error::shape(
            "evaluate_queries",
            queries.features.shape(),
            gallery.features.shape(),
        ));
    }
    if relevance == Relevance::Label && (queries.labels.is_none() || gallery.labels.is_none()) {
        return Err(Error::Config(
            "label relevance needs labels on both sides".into(),
        ));
    }
    let gallery_norms: Vec<f64> = gallery
        .features
        .row_iter()
        .map(|r| dot(r, r).sqrt())
        .collect();
    if gallery_norms.contains(&0.0) {
        warn!("gallery contains zero vectors; their similarity is 0");
    }

    let one = |q: usize| -> Result<QueryOutcome> {
        let query = queries.features.row(q);
        let qn = dot(query, query).sqrt();
        if qn == 0.0 {
            warn!("query {q} is a zero vector; all similarities are 0");
        }
        let qi = queries.instances[q];
        let qm = queries.modalities[q];
        let mut scored = Vec::with_capacity(gallery.len());
        let mut relevant_total = 0usize;
        let mut is_relevant = vec![false; gallery.len()];
        for g in 0..gallery.len() {
            let same_instance = gallery.instances[g] == qi;
            let same_modality = gallery.modalities[g] == qm;
            if same_instance && (same_modality || opts.exclude_own_pair) {
                continue;
            }
            let rel = match relevance {
                Relevance::Label => {
                    queries.labels.as_ref().expect("checked")[q]
                        == gallery.labels.as_ref().expect("checked")[g]
                }
                Relevance::Pairing => same_instance,
            };
            is_relevant[g] = rel;
            relevant_total += rel as usize;
            let denom = qn * gallery_norms[g];
            let score = if denom == 0.0 {
                0.0
            } else {
                (dot(query, gallery.features.row(g)) / denom).clamp(-1.0, 1.0)
            };
            scored.push((g, score));
        }
        if scored.is_empty() {
            return Err(Error::Domain(format!("query {q} has an empty gallery")));
        }
        sort_ranked(&mut scored);
        Ok(QueryOutcome {
            relevant: scored.iter().map(|&(g, _)| is_relevant[g]).collect(),
            ranked: RankedResult {
                query_id: q,
                ids: scored.iter().map(|&(g, _)| g).collect(),
                scores: scored.iter().map(|&(_, s)| s).collect(),
            },
            relevant_total,
        })
    };

    if opts.deterministic {
        (0..queries.len()).map(one).collect()
    } else {
        (0..queries.len()).into_par_iter().map(one).collect()
    }
}

/// Mean AP over queries that have at least one relevant item.
pub fn mean_average_precision(outcomes: &[QueryOutcome]) -> Result<f64> {
    let mut sum = 0.0;
    let mut counted = 0usize;
    for o in outcomes {
        if let Some(ap) = o.average_precision()? {
            sum += ap;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Evaluation(
            "no query has a relevant item in the gallery".into(),
        ));
    }
    Ok(sum / counted as f64)
}

/// MAP with label-equality relevance.
pub fn map_score(queries: &Items, gallery: &Items, opts: &EvalOptions) -> Result<f64> {
    mean_average_precision(&evaluate_queries(queries, gallery, Relevance::Label, opts)?)
}

/// Fraction of queries with any groundtruth id in the top `k`. `k` is
/// clamped to the list length.
pub fn recall_at_k(ranked: &[RankedResult], groundtruth: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain("recall cutoff must be >= 1".into()));
    }
    if ranked.len() != groundtruth.len() {
        return Err(Error::Validation(format!(
            "{} ranked lists for {} groundtruth sets",
            ranked.len(),
            groundtruth.len()
        )));
    }
    if ranked.is_empty() {
        return Err(Error::Evaluation("recall over zero queries".into()));
    }
    let mut clamped = false;
    let hits = ranked
        .iter()
        .zip(groundtruth)
        .filter(|(r, gt)| {
            if k > r.ids.len() {
                clamped = true;
            }
            r.ids.iter().take(k).any(|id| gt.contains(id))
        })
        .count();
    if clamped {
        warn!("recall cutoff {k} exceeds the gallery size; clamped");
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Recall@K from evaluated queries, using their relevance flags.
pub fn recall_from_outcomes(outcomes: &[QueryOutcome], k: usize) -> Result<f64> {
    let ranked: Vec<RankedResult> = outcomes.iter().map(|o| o.ranked.clone()).collect();
    let truth: Vec<Vec<usize>> = outcomes.iter().map(QueryOutcome::groundtruth).collect();
    recall_at_k(&ranked, &truth, k)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub x: f64,
    pub precision: f64,
}

/// Query-averaged curves. The precision-recall curve has a point at every
/// rank cutoff where mean recall increases; the scope curve has precision
/// at each top-K of `scope_grid` (clamped to the gallery size).
pub fn curves(
    outcomes: &[QueryOutcome],
    scope_grid: &[usize],
) -> Result<(Vec<CurvePoint>, Vec<CurvePoint>)> {
    let used: Vec<&QueryOutcome> = outcomes.iter().filter(|o| o.relevant_total > 0).collect();
    if used.is_empty() {
        return Err(Error::Evaluation(
            "curves need a query with relevant items".into(),
        ));
    }
    let depth = used.iter().map(|o| o.relevant.len()).max().unwrap_or(0);
    let n = used.len() as f64;
    let mut hits: Vec<usize> = vec![0; used.len()];
    let mut pr = Vec::new();
    let mut scope_at = Vec::with_capacity(depth);
    for k in 1..=depth {
        let mut precision = 0.0;
        let mut recall = 0.0;
        for (h, o) in hits.iter_mut().zip(&used) {
            let len = o.relevant.len();
            if k <= len && o.relevant[k - 1] {
                *h += 1;
            }
            precision += *h as f64 / k.min(len) as f64;
            recall += *h as f64 / o.relevant_total as f64;
        }
        let point = CurvePoint {
            x: recall / n,
            precision: precision / n,
        };
        if pr.last().is_none_or(|p: &CurvePoint| point.x > p.x) {
            pr.push(point);
        }
        scope_at.push(point.precision);
    }
    let mut scope: Vec<CurvePoint> = Vec::new();
    for &k in scope_grid {
        let k = k.clamp(1, depth);
        if scope.last().is_some_and(|p| p.x >= k as f64) {
            continue;
        }
        scope.push(CurvePoint {
            x: k as f64,
            precision: scope_at[k - 1],
        });
    }
    Ok((pr, scope))
}

/// `%.9g`-style formatting.
pub fn format_significant(value: f64, digits: usize) -> String {
    if value == 0.0 || !value.is_finite() {
        return format!("{value}");
    }
    let sci = format!("{:.*e}", digits - 1, value);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -5 || exp >= digits as i32 {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    let fixed = format!("{value:.decimals$}");
    if fixed.contains('.') {
        fixed
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    } else {
        fixed
    }
}

/// Header `x,precision` and one point per line, 9 significant digits.
pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("x,precision\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{}",
            format_significant(p.x, 9),
            format_significant(p.precision, 9)
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTask {
    /// Image queries against texts and text queries against images.
    BiModal,
    /// Queries of both modalities against the union of both.
    AllModal,
    /// Image queries against texts, scored by the paired text.
    Annotation,
    /// Text queries against images, scored by the paired image.
    Retrieval,
}

impl EvalTask {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalTask::BiModal => "bi-modal",
            EvalTask::AllModal => "all-modal",
            EvalTask::Annotation => "annotation",
            EvalTask::Retrieval => "retrieval",
        }
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi-modal" => Ok(EvalTask::BiModal),
            "all-modal" => Ok(EvalTask::AllModal),
            "annotation" => Ok(EvalTask::Annotation),
            "retrieval" => Ok(EvalTask::Retrieval),
            other => Err(Error::Usage(format!(
                "unknown task {other:?} (expected bi-modal, all-modal, annotation or retrieval)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedCurve {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub task: EvalTask,
    pub map_i2t: Option<f64>,
    pub map_t2i: Option<f64>,
    pub map_average: Option<f64>,
    pub recall_at: BTreeMap<usize, f64>,
    pub pr_curves: Vec<NamedCurve>,
    pub scope_curves: Vec<NamedCurve>,
}

impl MetricsReport {
    /// `metric = value` lines, 6 decimal places.
    pub fn to_text(&self) -> String {
        let mut out = format!("task = {}\n", self.task);
        for (name, value) in [
            ("map_i2t", self.map_i2t),
            ("map_t2i", self.map_t2i),
            ("map_average", self.map_average),
        ] {
            if let Some(v) = value {
                let _ = writeln!(out, "{name} = {v:.6}");
            }
        }
        for (k, v) in &self.recall_at {
            let _ = writeln!(out, "recall_at_{k} = {v:.6}");
        }
        out
    }

    /// Parses the numeric lines of [`MetricsReport::to_text`].
    pub fn parse_values(text: &str) -> Result<BTreeMap<String, f64>> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let key = key.trim();
            if key == "task" {
                continue;
            }
            let v: f64 = value.trim().parse().map_err(|_| {
                Error::Validation(format!(
                    "metrics line {}: bad number {:?}",
                    i + 1,
                    value.trim()
                ))
            })?;
            values.insert(key.to_string(), v);
        }
        Ok(values)
    }
}

/// Common representations of an evaluation split.
#[derive(Clone, Debug)]
pub struct EvalInputs {
    pub image: Items,
    pub text: Items,
}

/// Runs `task` and collects MAP, Recall@K and curves.
pub fn evaluate(
    inputs: &EvalInputs,
    task: EvalTask,
    opts: &EvalOptions,
    scope_grid: &[usize],
) -> Result<MetricsReport> {
    let labelled = inputs.image.labels.is_some() && inputs.text.labels.is_some();
    let mut report = MetricsReport {
        task,
        map_i2t: None,
        map_t2i: None,
        map_average: None,
        recall_at: BTreeMap::new(),
        pr_curves: Vec::new(),
        scope_curves: Vec::new(),
    };
    let mut add_curves = |name: &str, outcomes: &[QueryOutcome]| -> Result<()> {
        let (pr, scope) = curves(outcomes, scope_grid)?;
        report.pr_curves.push(NamedCurve {
            name: name.to_string(),
            points: pr,
        });
        report.scope_curves.push(NamedCurve {
            name: name.to_string(),
            points: scope,
        });
        Ok(())
    };
    match task {
        EvalTask::BiModal | EvalTask::AllModal => {
            if !labelled {
                return Err(Error::Config(format!(
                    "task {task} needs category labels; use annotation or retrieval"
                )));
            }
            let (gallery_i2t, gallery_t2i) = if task == EvalTask::AllModal {
                let all = inputs.image.union(&inputs.text)?;
                (all.clone(), all)
            } else {
                (inputs.text.clone(), inputs.image.clone())
            };
            let i2t = evaluate_queries(&inputs.image, &gallery_i2t, Relevance::Label, opts)?;
            let t2i = evaluate_queries(&inputs.text, &gallery_t2i, Relevance::Label, opts)?;
            let mi = mean_average_precision(&i2t)?;
            let mt = mean_average_precision(&t2i)?;
            report.map_i2t = Some(mi);
            report.map_t2i = Some(mt);
            report.map_average = Some((mi + mt) / 2.0);
            add_curves("i2t", &i2t)?;
            add_curves("t2i", &t2i)?;
        }
        EvalTask::Annotation | EvalTask::Retrieval => {
            let (queries, gallery, name) = if task == EvalTask::Annotation {
                (&inputs.image, &inputs.text, "i2t")
            } else {
                (&inputs.text, &inputs.image, "t2i")
            };
            let outcomes = evaluate_queries(queries, gallery, Relevance::Pairing, opts)?;
            if outcomes.iter().all(|o| o.relevant_total == 0) {
                return Err(Error::Config(format!(
                    "task {task} needs paired instances in the evaluation split"
                )));
            }
            for k in RECALL_CUTOFFS {
                report
                    .recall_at
                    .insert(k, recall_from_outcomes(&outcomes, k)?);
            }
            add_curves(name, &outcomes)?;
            if labelled {
                let labelled_outcomes = evaluate_queries(queries, gallery, Relevance::Label, opts)?;
                let m = mean_average_precision(&labelled_outcomes)?;
                if task == EvalTask::Annotation {
                    report.map_i2t = Some(m);
                } else {
                    report.map_t2i = Some(m);
                }
            }
        }
    }
    Ok(report)
}
