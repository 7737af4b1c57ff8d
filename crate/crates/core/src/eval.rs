//! Relevance judgments, rank-quality metrics and the cross-validation harness.
//!
//! Ratings are binary. For a ranked list with ratings `r(1..N)`:
//!
//! * `P@n = |{j ≤ n : r(j) = 1}| / n`, keeping the denominator `n` even when
//!   fewer than `n` items were ranked;
//! * `AP = Σ_n P@n·r(n) / R` where `R` is the number of relevant items for the
//!   query, and MAP is the unweighted mean of AP over queries with `R ≥ 1`;
//! * `NDCG@n = DCG@n / IDCG@n` with `DCG@n = Σ_{j ≤ n} (2^{r(j)} − 1) / ln(1 + j)`
//!   and `IDCG` the DCG of the same ratings sorted descending.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::Query;
use crate::rank::{rank_tweets, train_spd, Candidate, FeatureMask, LabeledExample, RankError, SpdParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("tie possible, require odd panel (got {0} annotators)")]
    EvenPanel(usize),
    #[error("no judgments to vote on")]
    NoVotes,
    #[error("judgment line {line}: {message}")]
    JudgmentFormat { line: usize, message: String },
    #[error("duplicate judgment for query `{query_id}`, tweet `{tweet_id}`, annotator `{annotator}`")]
    DuplicateJudgment {
        query_id: String,
        tweet_id: String,
        annotator: String,
    },
    #[error("cutoff n must be at least 1")]
    ZeroCutoff,
    #[error("average precision undefined: the query has no relevant items")]
    NoRelevant,
    #[error("NDCG undefined: every rating is zero")]
    UndefinedGain,
    #[error("invalid cross-validation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: String,
    pub tweet_id: String,
    pub annotator: String,
    pub label: u8,
}

pub fn parse_judgments<R: Read>(reader: R) -> Result<Vec<Judgment>, EvalError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, row) in rdr.deserialize::<Judgment>().enumerate() {
        let line = i + 2;
        let j = row.map_err(|e| EvalError::JudgmentFormat {
            line,
            message: e.to_string(),
        })?;
        if j.label > 1 {
            return Err(EvalError::JudgmentFormat {
                line,
                message: format!("label must be 0 or 1, got {}", j.label),
            });
        }
        if !seen.insert((j.query_id.clone(), j.tweet_id.clone(), j.annotator.clone())) {
            return Err(EvalError::DuplicateJudgment {
                query_id: j.query_id,
                tweet_id: j.tweet_id,
                annotator: j.annotator,
            });
        }
        out.push(j);
    }
    Ok(out)
}

pub fn load_judgments(path: impl AsRef<Path>) -> Result<Vec<Judgment>, EvalError> {
    parse_judgments(std::fs::File::open(path)?)
}

/// CSV with header `query_id,tweet_id,annotator,label`.
pub fn write_judgments<W: Write>(out: W, judgments: &[Judgment]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for j in judgments {
        w.serialize(j)?;
    }
    w.flush()?;
    Ok(())
}

/// Majority label of one (query, tweet) panel; the panel size must be odd.
pub fn majority_vote(judgments: &[Judgment]) -> Result<u8, EvalError> {
    if judgments.is_empty() {
        return Err(EvalError::NoVotes);
    }
    if judgments.len().is_multiple_of(2) {
        return Err(EvalError::EvenPanel(judgments.len()));
    }
    let ones = judgments.iter().filter(|j| j.label == 1).count();
    Ok(u8::from(2 * ones > judgments.len()))
}

/// Majority labels keyed by `(query_id, tweet_id)`.
pub fn resolve_judgments(judgments: &[Judgment]) -> Result<BTreeMap<(String, String), u8>, EvalError> {
    let mut panels: BTreeMap<(String, String), Vec<Judgment>> = BTreeMap::new();
    for j in judgments {
        panels
            .entry((j.query_id.clone(), j.tweet_id.clone()))
            .or_default()
            .push(j.clone());
    }
    panels
        .into_iter()
        .map(|(k, v)| majority_vote(&v).map(|l| (k, l)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub query_id: String,
    pub items: Vec<String>,
    pub ratings: Vec<u8>,
    /// Relevant items known for the query, ranked or not.
    pub total_relevant: usize,
}

impl RankedList {
    /// A list whose `total_relevant` is the number of relevant ratings.
    pub fn from_ratings(query_id: impl Into<String>, ratings: Vec<u8>) -> Self {
        let total_relevant = ratings.iter().filter(|&&r| r > 0).count();
        RankedList {
            query_id: query_id.into(),
            items: (0..ratings.len()).map(|i| i.to_string()).collect(),
            ratings,
            total_relevant,
        }
    }
}

pub fn precision_at_n(list: &RankedList, n: usize) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    let hits = list.ratings.iter().take(n).filter(|&&r| r > 0).count();
    Ok(hits as f64 / n as f64)
}

pub fn average_precision(list: &RankedList) -> Result<f64, EvalError> {
    if list.total_relevant == 0 {
        return Err(EvalError::NoRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in list.ratings.iter().enumerate() {
        if r > 0 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / list.total_relevant as f64)
}

/// Mean AP over lists with at least one relevant item; `None` if there are none.
pub fn mean_average_precision(lists: &[RankedList]) -> Option<f64> {
    let mut aps = Vec::with_capacity(lists.len());
    for list in lists {
        match average_precision(list) {
            Ok(ap) => aps.push(ap),
            Err(_) => log::warn!("query `{}` has no relevant items; skipped in MAP", list.query_id),
        }
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

fn dcg(ratings: impl Iterator<Item = u8>) -> f64 {
    ratings
        .enumerate()
        .map(|(i, r)| (2f64.powi(i32::from(r)) - 1.0) / ((i + 2) as f64).ln())
        .sum()
}

pub fn ndcg_at_n(list: &RankedList, n: usize) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    if list.ratings.iter().all(|&r| r == 0) {
        return Err(EvalError::UndefinedGain);
    }
    let mut ideal = list.ratings.clone();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let actual = dcg(list.ratings.iter().copied().take(n));
    let best = dcg(ideal.into_iter().take(n));
    Ok(actual / best)
}

pub const CUTOFFS: [usize; 4] = [1, 3, 5, 10];

pub const METRIC_NAMES: [&str; 9] = [
    "P@1", "P@3", "P@5", "P@10", "MAP", "NDCG@1", "NDCG@3", "NDCG@5", "NDCG@10",
];

/// Metric values in [`METRIC_NAMES`] order; `None` marks an absent metric.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics(pub [Option<f64>; 9]);

impl Metrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|m| *m == name).and_then(|i| self.0[i])
    }

    pub fn map(&self) -> Option<f64> {
        self.0[4]
    }

    /// Averages over the ranked lists that contain a relevant item.
    pub fn of_lists(lists: &[RankedList]) -> Metrics {
        let judged: Vec<&RankedList> = lists.iter().filter(|l| l.total_relevant > 0).collect();
        if judged.is_empty() {
            return Metrics::default();
        }
        let mean = |f: &dyn Fn(&RankedList) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = judged.iter().filter_map(|l| f(l)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let mut out = [None; 9];
        for (i, &n) in CUTOFFS.iter().enumerate() {
            out[i] = mean(&|l| precision_at_n(l, n).ok());
            out[5 + i] = mean(&|l| ndcg_at_n(l, n).ok());
        }
        out[4] = mean(&|l| average_precision(l).ok());
        Metrics(out)
    }

    fn mean_of(rows: &[Metrics]) -> Metrics {
        let mut out = [None; 9];
        for (i, slot) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.0[i]).collect();
            *slot = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        }
        Metrics(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvParams {
    pub folds: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub spd: SpdParams,
}

impl Default for CvParams {
    fn default() -> Self {
        CvParams {
            folds: 10,
            train_fraction: 0.8,
            seed: 0,
            spd: SpdParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// `folds` independent random splits of the distinct tweet ids, each putting
/// `round(train_fraction·N)` tweets on the training side.
pub fn fold_splits(examples: &[LabeledExample], folds: usize, train_fraction: f64, seed: u64) -> Vec<FoldSplit> {
    let ids: Vec<String> = examples
        .iter()
        .map(|e| e.tweet_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    (0..folds)
        .map(|fold| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(fold as u64));
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut rng);
            let test = shuffled.split_off(n_train.min(shuffled.len()));
            FoldSplit {
                train: shuffled.into_iter().collect(),
                test: test.into_iter().collect(),
            }
        })
        .collect()
}

/// Ranks each query's test examples with `model` and pairs them with labels.
pub fn ranked_lists(model: &crate::rank::RankingModel, test: &[&LabeledExample]) -> Vec<RankedList> {
    let mut by_query: BTreeMap<&str, Vec<&LabeledExample>> = BTreeMap::new();
    for ex in test {
        by_query.entry(ex.query_id.as_str()).or_default().push(ex);
    }
    by_query
        .into_iter()
        .map(|(qid, exs)| {
            let labels: BTreeMap<&str, u8> = exs.iter().map(|e| (e.tweet_id.as_str(), e.label)).collect();
            let candidates: Vec<Candidate> = exs
                .iter()
                .map(|e| Candidate {
                    tweet_id: e.tweet_id.clone(),
                    timestamp: e.timestamp,
                    features: e.features,
                })
                .collect();
            let query = Query::new(qid, [] as [&str; 0]);
            let items = rank_tweets(model, &query, &candidates);
            let ratings: Vec<u8> = items.iter().map(|id| labels[id.as_str()]).collect();
            let total_relevant = ratings.iter().filter(|&&r| r > 0).count();
            RankedList {
                query_id: qid.to_string(),
                items,
                ratings,
                total_relevant,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskResult {
    pub mask: FeatureMask,
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub results: Vec<MaskResult>,
}

pub fn mask_label(mask: FeatureMask) -> String {
    if mask == FeatureMask::FULL {
        "full".into()
    } else {
        mask.to_string().replace(',', "+")
    }
}

fn fmt_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl CvReport {
    pub fn get(&self, mask: FeatureMask) -> Option<&MaskResult> {
        self.results.iter().find(|r| r.mask == mask)
    }

    /// `mask,metric,value` rows of the fold means; absent metrics are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mask,metric,value\n");
        for r in &self.results {
            for (name, v) in METRIC_NAMES.iter().zip(r.mean.0) {
                let _ = writeln!(out, "{},{},{}", mask_label(r.mask), name, fmt_value(v));
            }
        }
        out
    }

    /// Masks as rows, metrics as percentage columns.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<24}", "mask");
        for name in METRIC_NAMES {
            let _ = write!(out, "{name:>9}");
        }
        out.push('\n');
        for r in &self.results {
            let _ = write!(out, "{:<24}", mask_label(r.mask));
            for v in r.mean.0 {
                match v {
                    Some(x) => {
                        let _ = write!(out, "{:>9.2}", 100.0 * x);
                    }
                    None => {
                        let _ = write!(out, "{:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Repeated random train/test splits by tweet; every mask is trained on the
/// training side and scored per query on the test side.
///
/// A fold whose test side holds a single label, or whose training side has no
/// usable pair, contributes absent metrics rather than zeros.
pub fn cross_validate(
    examples: &[LabeledExample],
    masks: &[FeatureMask],
    params: &CvParams,
) -> Result<CvReport, EvalError> {
    if params.folds < 2 {
        return Err(EvalError::InvalidParams(format!("folds must be at least 2, got {}", params.folds)));
    }
    if !(params.train_fraction > 0.0 && params.train_fraction < 1.0) {
        return Err(EvalError::InvalidParams(format!(
            "train_fraction must lie in (0, 1), got {}",
            params.train_fraction
        )));
    }
    let labels: BTreeSet<u8> = examples.iter().map(|e| e.label).collect();
    if labels.len() < 2 {
        return Err(EvalError::InvalidParams("examples must contain both labels".into()));
    }
    let splits = fold_splits(examples, params.folds, params.train_fraction, params.seed);
    let mut results: Vec<MaskResult> = masks
        .iter()
        .map(|&mask| MaskResult {
            mask,
            folds: Vec::with_capacity(params.folds),
            mean: Metrics::default(),
        })
        .collect();
    for (fold, split) in splits.iter().enumerate() {
        let train: Vec<LabeledExample> = examples
            .iter()
            .filter(|e| split.train.contains(&e.tweet_id))
            .cloned()
            .collect();
        let test: Vec<&LabeledExample> = examples.iter().filter(|e| split.test.contains(&e.tweet_id)).collect();
        let test_labels: BTreeSet<u8> = test.iter().map(|e| e.label).collect();
        let spd = SpdParams {
            seed: params.spd.seed.wrapping_add(fold as u64),
            ..params.spd
        };
        for result in &mut results {
            let metrics = if test_labels.len() < 2 {
                log::warn!("fold {fold}: single-label test set, metrics absent");
                Metrics::default()
            } else {
                match train_spd(&train, result.mask, spd) {
                    Ok(model) => Metrics::of_lists(&ranked_lists(&model, &test)),
                    Err(RankError::DegenerateLabels) => {
                        log::warn!("fold {fold}: no training pairs, metrics absent");
                        Metrics::default()
                    }
                    Err(e) => return Err(EvalError::InvalidParams(e.to_string())),
                }
            };
            result.folds.push(metrics);
        }
    }
    for r in &mut results {
        r.mean = Metrics::mean_of(&r.folds);
    }
    Ok(CvReport { results })
}
