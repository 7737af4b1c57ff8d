//! Binary tweet features, the linear ranking function and its pairwise
//! hinge-loss trainer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::Query;
use crate::corpus::GazetteerSet;
use crate::index::TokenizedTweet;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("degenerate labels: no query has both a relevant and a non-relevant example")]
    DegenerateLabels,
    #[error("invalid training parameters: {0}")]
    InvalidParams(String),
    #[error("model file line {line}: {message}")]
    ModelFormat { line: usize, message: String },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
}

pub const N_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Feature {
    MedicalCondition = 0,
    Location = 1,
    Hashtag = 2,
    ComplementaryContext = 3,
    Url = 4,
}

impl Feature {
    pub const ALL: [Feature; N_FEATURES] = [
        Feature::MedicalCondition,
        Feature::Location,
        Feature::Hashtag,
        Feature::ComplementaryContext,
        Feature::Url,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::MedicalCondition => "F_MC",
            Feature::Location => "F_L",
            Feature::Hashtag => "F_HASHTAG",
            Feature::ComplementaryContext => "F_CC",
            Feature::Url => "F_URL",
        }
    }

    fn short(self) -> &'static str {
        match self {
            Feature::MedicalCondition => "mc",
            Feature::Location => "l",
            Feature::Hashtag => "hashtag",
            Feature::ComplementaryContext => "cc",
            Feature::Url => "url",
        }
    }
}

impl FromStr for Feature {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Feature::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s) || f.short().eq_ignore_ascii_case(s))
            .ok_or_else(|| RankError::UnknownFeature(s.to_string()))
    }
}

/// `[F_MC, F_L, F_HASHTAG, F_CC, F_URL]`, each 0.0 or 1.0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub fn get(&self, f: Feature) -> f64 {
        self.0[f.index()]
    }

    pub fn from_flags(flags: [bool; N_FEATURES]) -> Self {
        FeatureVector(flags.map(|b| if b { 1.0 } else { 0.0 }))
    }
}

/// Subset of active features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureMask(u8);

impl FeatureMask {
    pub const FULL: FeatureMask = FeatureMask(0b1_1111);
    /// Medical conditions only.
    pub const MC: FeatureMask = FeatureMask(0b0_0001);
    /// Medical conditions and locations.
    pub const MC_L: FeatureMask = FeatureMask(0b0_0011);

    pub fn new(features: impl IntoIterator<Item = Feature>) -> Self {
        FeatureMask(features.into_iter().fold(0, |m, f| m | (1 << f.index())))
    }

    pub fn contains(self, f: Feature) -> bool {
        self.0 & (1 << f.index()) != 0
    }

    pub fn features(self) -> impl Iterator<Item = Feature> {
        Feature::ALL.into_iter().filter(move |&f| self.contains(f))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    fn apply(self, v: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        let mut out = *v;
        for f in Feature::ALL {
            if !self.contains(f) {
                out[f.index()] = 0.0;
            }
        }
        out
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.features().map(Feature::short).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for FeatureMask {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "all" => return Ok(FeatureMask::FULL),
            "" => return Ok(FeatureMask(0)),
            _ => {}
        }
        s.split(',')
            .map(str::parse::<Feature>)
            .collect::<Result<Vec<_>, _>>()
            .map(FeatureMask::new)
    }
}

/// Features of a tweet for a query. The five features are document-side; the
/// query parameter keeps the signature of a general query-document map.
pub fn extract_features(_query: &Query, tweet: &TokenizedTweet, gazetteers: &GazetteerSet) -> FeatureVector {
    let any_in = |g: &crate::corpus::Gazetteer| tweet.tokens.iter().any(|t| g.contains(t));
    FeatureVector::from_flags([
        any_in(&gazetteers.medical_conditions),
        any_in(&gazetteers.locations),
        !tweet.hashtags.is_empty(),
        any_in(&gazetteers.complementary),
        tweet.has_url,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub query_id: String,
    pub tweet_id: String,
    pub timestamp: DateTime<Utc>,
    pub features: FeatureVector,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpdParams {
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SpdParams {
    fn default() -> Self {
        SpdParams {
            lambda: 1e-3,
            steps: 100_000,
            seed: 0,
        }
    }
}

/// Linear scoring function `f(q, d) = w · φ(q, d)` restricted to `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingModel {
    pub weights: [f64; N_FEATURES],
    pub mask: FeatureMask,
    pub context_id: String,
    pub params: SpdParams,
}

impl RankingModel {
    pub fn new(weights: [f64; N_FEATURES], mask: FeatureMask) -> Self {
        RankingModel {
            weights: mask.apply(&weights),
            mask,
            context_id: String::new(),
            params: SpdParams::default(),
        }
    }

    pub fn score(&self, features: &FeatureVector) -> f64 {
        self.mask
            .features()
            .map(|f| self.weights[f.index()] * features.0[f.index()])
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Header lines (`mask`, `lambda`, `steps`, `seed`, `context`) followed by
    /// one `feature_name weight` line per feature.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("mask {}\n", self.mask));
        out.push_str(&format!("lambda {:?}\n", self.params.lambda));
        out.push_str(&format!("steps {}\n", self.params.steps));
        out.push_str(&format!("seed {}\n", self.params.seed));
        out.push_str(&format!("context {}\n", self.context_id));
        for f in Feature::ALL {
            out.push_str(&format!("{} {:?}\n", f.name(), self.weights[f.index()]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, RankError> {
        let mut model = RankingModel::new([0.0; N_FEATURES], FeatureMask::FULL);
        let mut mask = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| RankError::ModelFormat { line: line_no, message };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(' ').unwrap_or((line, ""));
            let num = |v: &str| v.trim().parse::<f64>().map_err(|e| err(e.to_string()));
            match key {
                "mask" => mask = Some(value.parse::<FeatureMask>().map_err(|e| err(e.to_string()))?),
                "lambda" => model.params.lambda = num(value)?,
                "steps" => model.params.steps = value.trim().parse().map_err(|e| err(format!("{e}")))?,
                "seed" => model.params.seed = value.trim().parse().map_err(|e| err(format!("{e}")))?,
                "context" => model.context_id = value.to_string(),
                name => {
                    let f = name.parse::<Feature>().map_err(|_| err(format!("unknown key `{name}`")))?;
                    model.weights[f.index()] = num(value)?;
                }
            }
        }
        model.mask = mask.ok_or(RankError::ModelFormat {
            line: 0,
            message: "missing `mask` header".into(),
        })?;
        if model.weights.iter().enumerate().any(|(i, w)| *w != 0.0 && !model.mask.contains(Feature::ALL[i])) {
            return Err(RankError::ModelFormat {
                line: 0,
                message: "masked-out feature has a nonzero weight".into(),
            });
        }
        Ok(model)
    }
}

/// Per-query indices of relevant and non-relevant examples, restricted to
/// queries that have both.
fn pair_pools(examples: &[LabeledExample]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut by_query: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let entry = by_query.entry(ex.query_id.as_str()).or_default();
        if ex.label > 0 {
            entry.0.push(i);
        } else {
            entry.1.push(i);
        }
    }
    by_query
        .into_values()
        .filter(|(p, n)| !p.is_empty() && !n.is_empty())
        .collect()
}

fn diff(a: &FeatureVector, b: &FeatureVector, mask: FeatureMask) -> [f64; N_FEATURES] {
    let mut d = [0.0; N_FEATURES];
    for f in mask.features() {
        d[f.index()] = a.0[f.index()] - b.0[f.index()];
    }
    d
}

fn dot(a: &[f64; N_FEATURES], b: &[f64; N_FEATURES]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stochastic pairwise descent on the Ranking-SVM objective
/// `λ/2·‖w‖² + E[max(0, 1 − w·(φ_p − φ_n))]`.
///
/// Each step draws a query uniformly among those with both labels, then one
/// relevant and one non-relevant example of it. With `η_t = 1/(λt)` the update
/// is `w ← (1 − η_t λ)·w + η_t·(φ_p − φ_n)` when the margin is below 1, and
/// just the shrinkage otherwise.
pub fn train_spd(
    examples: &[LabeledExample],
    mask: FeatureMask,
    params: SpdParams,
) -> Result<RankingModel, RankError> {
    if !(params.lambda > 0.0 && params.lambda.is_finite()) {
        return Err(RankError::InvalidParams(format!("lambda must be positive, got {}", params.lambda)));
    }
    if params.steps == 0 {
        return Err(RankError::InvalidParams("steps must be at least 1".into()));
    }
    let pools = pair_pools(examples);
    if pools.is_empty() {
        return Err(RankError::DegenerateLabels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut w = [0.0; N_FEATURES];
    for t in 1..=params.steps {
        let (pos, neg) = &pools[rng.random_range(0..pools.len())];
        let p = &examples[pos[rng.random_range(0..pos.len())]];
        let n = &examples[neg[rng.random_range(0..neg.len())]];
        let d = diff(&p.features, &n.features, mask);
        let eta = 1.0 / (params.lambda * t as f64);
        let margin = dot(&w, &d);
        let shrink = 1.0 - eta * params.lambda;
        for (wi, di) in w.iter_mut().zip(&d) {
            *wi *= shrink;
            if margin < 1.0 {
                *wi += eta * di;
            }
        }
    }
    Ok(RankingModel {
        weights: mask.apply(&w),
        mask,
        context_id: String::new(),
        params,
    })
}

/// `λ/2·‖w‖²` plus the mean hinge loss over every (relevant, non-relevant)
/// pair within each query.
pub fn pairwise_objective(model: &RankingModel, examples: &[LabeledExample], lambda: f64) -> f64 {
    let mut loss = 0.0;
    let mut pairs = 0usize;
    for (pos, neg) in pair_pools(examples) {
        for &p in &pos {
            for &n in &neg {
                let margin = model.score(&examples[p].features) - model.score(&examples[n].features);
                loss += (1.0 - margin).max(0.0);
                pairs += 1;
            }
        }
    }
    let reg = 0.5 * lambda * model.weights.iter().map(|w| w * w).sum::<f64>();
    reg + if pairs == 0 { 0.0 } else { loss / pairs as f64 }
}

/// Fraction of within-query (relevant, non-relevant) pairs scored strictly in
/// the right order. `None` when no such pair exists.
pub fn pairwise_accuracy(model: &RankingModel, examples: &[LabeledExample]) -> Option<f64> {
    let mut good = 0usize;
    let mut total = 0usize;
    for (pos, neg) in pair_pools(examples) {
        for &p in &pos {
            for &n in &neg {
                total += 1;
                if model.score(&examples[p].features) > model.score(&examples[n].features) {
                    good += 1;
                }
            }
        }
    }
    (total > 0).then(|| good as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub tweet_id: String,
    pub timestamp: DateTime<Utc>,
    pub features: FeatureVector,
}

/// Candidate ids by descending score, then newest first, then ascending id.
pub fn rank_tweets(model: &RankingModel, _query: &Query, candidates: &[Candidate]) -> Vec<String> {
    let mut scored: Vec<(f64, &Candidate)> = candidates.iter().map(|c| (model.score(&c.features), c)).collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| b.1.timestamp.cmp(&a.1.timestamp))
            .then_with(|| a.1.tweet_id.cmp(&b.1.tweet_id))
    });
    scored.into_iter().map(|(_, c)| c.tweet_id.clone()).collect()
}
