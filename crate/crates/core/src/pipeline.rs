//! End-to-end runs driven by a TOML configuration.
//!
//! Stages run in dependency order (`expand` before `rank` and `eval`) and each
//! artifact is written to a temporary file and renamed into place. A run ends
//! with `manifest.json`, which records the configuration hash, the seed and a
//! SHA-256 of every artifact. If a stage fails, the artifacts it already wrote
//! are removed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::context::{
    build_queries, cooccurring_hashtags, expand_context, expansion_report, ExpansionLimits, Query, TermClass,
    UserContext, DEFAULT_MAX_QUERIES,
};
use crate::corpus::{self, EntityClass, GazetteerSet, SyntheticSpec, Tweet};
use crate::detect::{self, DetectorParams, Method, SdMode, ThresholdPreset};
use crate::eval::{self, mask_label, CvParams, METRIC_NAMES};
use crate::index::{InvertedIndex, TokenizedTweet};
use crate::rank::{self, extract_features, Candidate, Feature, FeatureMask, LabeledExample, SpdParams};
use crate::topics::{fit_lda, LdaParams, TopicModel};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Index(#[from] crate::index::IndexError),
    #[error(transparent)]
    Detect(#[from] detect::DetectError),
    #[error(transparent)]
    Topics(#[from] crate::topics::TopicError),
    #[error(transparent)]
    Context(#[from] crate::context::ContextError),
    #[error(transparent)]
    Rank(#[from] rank::RankError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl PipelineError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Detect,
    Expand,
    Rank,
    Eval,
    All,
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detect" => Ok(Stage::Detect),
            "expand" => Ok(Stage::Expand),
            "rank" => Ok(Stage::Rank),
            "eval" => Ok(Stage::Eval),
            "all" => Ok(Stage::All),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Detect => "detect",
            Stage::Expand => "expand",
            Stage::Rank => "rank",
            Stage::Eval => "eval",
            Stage::All => "all",
        }
    }

    fn runs_detect(self) -> bool {
        matches!(self, Stage::Detect | Stage::All)
    }

    fn runs_expand(self) -> bool {
        !matches!(self, Stage::Detect)
    }

    fn needs_judgments(self) -> bool {
        matches!(self, Stage::Rank | Stage::Eval | Stage::All)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgments: Option<PathBuf>,
    /// Optional `date,cases` CSV plotted and correlated against tweet counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cases: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazetteerSection {
    pub medical_condition: PathBuf,
    pub location: PathBuf,
    pub complementary_context: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSection {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub medical_conditions: Vec<String>,
    #[serde(default)]
    pub locations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    /// Tracked terms; the context medical conditions when empty.
    pub terms: Vec<String>,
    pub methods: Vec<Method>,
    pub window: usize,
    pub buffer: usize,
    pub omega: f64,
    pub preset: ThresholdPreset,
    pub sd_mode: SdMode,
    /// Per-method threshold overrides.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub thresholds: BTreeMap<Method, f64>,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection {
            terms: Vec::new(),
            methods: Method::ALL.to_vec(),
            window: detect::DEFAULT_WINDOW,
            buffer: detect::DEFAULT_BUFFER,
            omega: detect::DEFAULT_OMEGA,
            preset: ThresholdPreset::ControlLimit,
            sd_mode: SdMode::Sample,
            thresholds: BTreeMap::new(),
            start: None,
            end: None,
        }
    }
}

impl DetectSection {
    pub fn params(&self, method: Method) -> DetectorParams {
        DetectorParams {
            method,
            window: self.window,
            buffer: self.buffer,
            threshold: self
                .thresholds
                .get(&method)
                .copied()
                .unwrap_or_else(|| self.preset.threshold(method)),
            omega: self.omega,
            sd_mode: self.sd_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaSection {
    pub k: usize,
    /// `50/k` when unset.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub stop_fraction: f64,
    /// Also fit and dump one model per 7-day slice of the context interval.
    pub weekly: bool,
}

impl Default for LdaSection {
    fn default() -> Self {
        let p = LdaParams::new(4);
        LdaSection {
            k: p.k,
            alpha: None,
            beta: p.beta,
            iterations: p.iterations,
            stop_fraction: p.stop_fraction,
            weekly: false,
        }
    }
}

impl LdaSection {
    fn params(&self, seed: u64) -> LdaParams {
        LdaParams {
            k: self.k,
            alpha: self.alpha.unwrap_or(50.0 / self.k.max(1) as f64),
            beta: self.beta,
            iterations: self.iterations,
            seed,
            stop_fraction: self.stop_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpandSection {
    pub terms_per_topic: usize,
    pub per_class: usize,
    pub max_subset: usize,
    pub max_queries: usize,
    /// Tweets retrieved per query, newest first.
    pub per_query_limit: usize,
}

impl Default for ExpandSection {
    fn default() -> Self {
        let limits = ExpansionLimits::default();
        ExpandSection {
            terms_per_topic: limits.terms_per_topic,
            per_class: limits.per_class,
            max_subset: 2,
            max_queries: DEFAULT_MAX_QUERIES,
            per_query_limit: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSection {
    pub lambda: f64,
    pub steps: usize,
    /// Feature masks, e.g. `"mc"`, `"mc,l"`, `"full"`.
    pub masks: Vec<String>,
    pub top: usize,
}

impl Default for RankSection {
    fn default() -> Self {
        let spd = SpdParams::default();
        RankSection {
            lambda: spd.lambda,
            steps: spd.steps,
            masks: vec!["mc".into(), "mc,l".into(), "full".into()],
            top: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub folds: usize,
    pub train_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            folds: 10,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub corpus: CorpusSection,
    pub gazetteers: GazetteerSection,
    pub context: ContextSection,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub lda: LdaSection,
    #[serde(default)]
    pub expand: ExpandSection,
    #[serde(default)]
    pub rank: RankSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            config.rebase(dir);
        }
        Ok(config)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.out);
        fix(&mut self.corpus.path);
        if let Some(p) = self.corpus.judgments.as_mut() {
            fix(p);
        }
        if let Some(p) = self.corpus.cases.as_mut() {
            fix(p);
        }
        fix(&mut self.gazetteers.medical_condition);
        fix(&mut self.gazetteers.location);
        fix(&mut self.gazetteers.complementary_context);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn masks(&self) -> Result<Vec<FeatureMask>, PipelineError> {
        self.rank
            .masks
            .iter()
            .map(|m| {
                m.parse::<FeatureMask>()
                    .map_err(|e| PipelineError::Config(format!("rank.masks: {e}")))
            })
            .collect()
    }

    pub fn user_context(&self) -> Result<UserContext, PipelineError> {
        UserContext::new(
            self.context.start,
            self.context.end,
            &self.context.medical_conditions,
            &self.context.locations,
        )
        .map_err(|e| PipelineError::Config(format!("context: {e}")))
    }

    /// Field-level checks run before any artifact is written.
    pub fn validate(&self, stage: Stage) -> Result<(), PipelineError> {
        let cfg = |m: String| Err(PipelineError::Config(m));
        let exists = |field: &str, p: &Path| -> Result<(), PipelineError> {
            if p.is_file() {
                Ok(())
            } else {
                Err(PipelineError::Config(format!("{field}: file not found: {}", p.display())))
            }
        };
        exists("corpus.path", &self.corpus.path)?;
        if stage.runs_expand() {
            exists("gazetteers.medical_condition", &self.gazetteers.medical_condition)?;
            exists("gazetteers.location", &self.gazetteers.location)?;
            exists("gazetteers.complementary_context", &self.gazetteers.complementary_context)?;
        }
        if let Some(p) = &self.corpus.cases {
            exists("corpus.cases", p)?;
        }
        match &self.corpus.judgments {
            Some(p) => exists("corpus.judgments", p)?,
            None if stage.needs_judgments() => {
                return cfg(format!("corpus.judgments is required for stage `{}`", stage.name()))
            }
            None => {}
        }
        self.user_context()?;
        for m in &self.detect.methods {
            self.detect
                .params(*m)
                .validate()
                .map_err(|e| PipelineError::Config(format!("detect: {e}")))?;
        }
        if self.detect.methods.is_empty() {
            return cfg("detect.methods must not be empty".into());
        }
        if self.lda.k == 0 || self.lda.iterations == 0 {
            return cfg("lda.k and lda.iterations must be at least 1".into());
        }
        if self.rank.lambda.is_nan() || self.rank.lambda <= 0.0 || self.rank.steps == 0 {
            return cfg("rank.lambda must be positive and rank.steps at least 1".into());
        }
        if self.masks()?.is_empty() {
            return cfg("rank.masks must not be empty".into());
        }
        if self.eval.folds < 2 || !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return cfg("eval.folds must be ≥ 2 and eval.train_fraction in (0, 1)".into());
        }
        Ok(())
    }

    /// SHA-256 of the configuration as written, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub stage: String,
    pub artifacts: Vec<ArtifactRecord>,
}

struct ArtifactWriter {
    root: PathBuf,
    written: Vec<(PathBuf, ArtifactRecord)>,
}

impl ArtifactWriter {
    fn write(&mut self, rel: &str, contents: &[u8]) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        }
        write_atomic(&path, contents)?;
        self.written.push((
            path,
            ArtifactRecord {
                path: rel.to_string(),
                sha256: hex::encode(Sha256::digest(contents)),
                bytes: contents.len(),
            },
        ));
        Ok(())
    }

    fn rollback(&self) {
        for (path, _) in &self.written {
            let _ = fs::remove_file(path);
        }
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io_err(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(io_err(format!("renaming into {}", path.display())))
}

fn load_gazetteers(config: &PipelineConfig) -> Result<GazetteerSet, PipelineError> {
    let g = &config.gazetteers;
    Ok(GazetteerSet::new(
        corpus::load_gazetteer(&g.medical_condition, EntityClass::MedicalCondition)?,
        corpus::load_gazetteer(&g.location, EntityClass::Location)?,
        corpus::load_gazetteer(&g.complementary_context, EntityClass::ComplementaryContext)?,
    )?)
}

/// Reads a `date,cases` CSV.
pub fn load_cases(path: &Path) -> Result<BTreeMap<NaiveDate, u64>, PipelineError> {
    #[derive(Deserialize)]
    struct Row {
        date: NaiveDate,
        cases: u64,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(eval::EvalError::from)?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(eval::EvalError::from)?;
        out.insert(row.date, row.cases);
    }
    Ok(out)
}

fn run_detect_stage(
    config: &PipelineConfig,
    index: &InvertedIndex,
    out: &mut ArtifactWriter,
) -> Result<(), PipelineError> {
    let Some((first, last)) = index.date_range() else {
        return Err(PipelineError::Config("corpus is empty".into()));
    };
    let start = config.detect.start.unwrap_or(first);
    let end = config.detect.end.unwrap_or(last);
    let terms: Vec<String> = if config.detect.terms.is_empty() {
        config.context.medical_conditions.iter().map(|t| t.to_lowercase()).collect()
    } else {
        config.detect.terms.iter().map(|t| t.to_lowercase()).collect()
    };
    let cases = config.corpus.cases.as_deref().map(load_cases).transpose()?;

    let mut summary = String::from("term,method,first_alarm_date,n_alarm_days\n");
    let mut correlations = String::from("term,pearson_r,days\n");
    for term in &terms {
        let series = detect::aggregate_daily_counts(index, term, start, end)?;
        let dates: Vec<NaiveDate> = (0..series.len()).map(|i| series.date_of(i)).collect();
        for &method in &config.detect.methods {
            let report = detect::run_detector(&series, &config.detect.params(method))?;
            summary.push_str(&report.summary_line());
            summary.push('\n');
            out.write(&format!("detect/{term}_{method}.csv"), report.to_csv().as_bytes())?;

            let mut plot = String::from("date,cases,tweets,statistic,alarm\n");
            for e in &report.entries {
                let c = cases
                    .as_ref()
                    .and_then(|m| m.get(&e.date))
                    .map(u64::to_string)
                    .unwrap_or_default();
                let stat = e.statistic.map(|s| s.to_string()).unwrap_or_default();
                let _ = writeln!(plot, "{},{},{},{},{}", e.date, c, e.count, stat, u8::from(e.alarm));
            }
            out.write(&format!("detect/plot_{term}_{method}.csv"), plot.as_bytes())?;
        }
        if let Some(cases) = &cases {
            let (a, b): (Vec<f64>, Vec<f64>) = dates
                .iter()
                .zip(&series.counts)
                .filter_map(|(d, &n)| cases.get(d).map(|&c| (c as f64, n as f64)))
                .unzip();
            let r = detect::pearson_correlation(&a, &b)
                .map(|r| format!("{r:.6}"))
                .unwrap_or_default();
            let _ = writeln!(correlations, "{term},{r},{}", a.len());
        }
    }
    out.write("detect/alarms.csv", summary.as_bytes())?;
    if cases.is_some() {
        out.write("detect/correlation.csv", correlations.as_bytes())?;
    }
    Ok(())
}

/// Everything derived from the user context that ranking needs.
pub struct Expansion {
    pub context: UserContext,
    pub model: TopicModel,
    pub cotags: Vec<(String, usize)>,
    pub queries: Vec<Query>,
}

fn context_docs(index: &InvertedIndex, ctx: &UserContext, start: NaiveDate, end: NaiveDate) -> Vec<TokenizedTweet> {
    index
        .docs_between(start.max(ctx.start), end.min(ctx.end))
        .map(|(_, d)| d.tokens.clone())
        .collect()
}

fn run_expand_stage(
    config: &PipelineConfig,
    index: &InvertedIndex,
    gazetteers: &GazetteerSet,
    out: &mut ArtifactWriter,
) -> Result<Expansion, PipelineError> {
    let ctx = config.user_context()?;
    let docs = context_docs(index, &ctx, ctx.start, ctx.end);
    let model = fit_lda(&docs, &config.lda.params(config.seed))?;
    out.write("expand/topics.txt", model.dump(20).as_bytes())?;
    if config.lda.weekly {
        let mut week = ctx.start;
        while week <= ctx.end {
            let week_end = (week + Duration::days(6)).min(ctx.end);
            let docs = context_docs(index, &ctx, week, week_end);
            if !docs.is_empty() {
                let m = fit_lda(&docs, &config.lda.params(config.seed))?;
                out.write(&format!("expand/topics_week_{week}.txt"), m.dump(20).as_bytes())?;
            }
            week += Duration::days(7);
        }
    }

    let cotags = cooccurring_hashtags(index, &ctx);
    let mut cotag_csv = String::from("hashtag,count,class\n");
    for (tag, count) in &cotags {
        let class = gazetteers.class_of(tag).map_or("-", EntityClass::short_name);
        let _ = writeln!(cotag_csv, "{tag},{count},{class}");
    }
    out.write("expand/cotags.csv", cotag_csv.as_bytes())?;

    let limits = ExpansionLimits {
        terms_per_topic: config.expand.terms_per_topic,
        per_class: config.expand.per_class,
    };
    let expansion = expand_context(&ctx, Some(&model), &cotags, gazetteers, limits);
    debug_assert!(expansion.iter().all(|t| t.class != TermClass::Discarded));
    out.write("expand/expansion.txt", expansion_report(&expansion).as_bytes())?;

    let queries = build_queries(&ctx, &expansion, config.expand.max_subset, config.expand.max_queries)?;
    let mut q_text = String::from("query_id\tterms\n");
    for q in &queries {
        let terms: Vec<&str> = q.terms.iter().map(String::as_str).collect();
        let _ = writeln!(q_text, "{}\t{}", q.id, terms.join(" "));
    }
    out.write("expand/queries.tsv", q_text.as_bytes())?;
    Ok(Expansion {
        context: ctx,
        model,
        cotags,
        queries,
    })
}

/// Tweets retrieved for `query` inside the context interval, newest first.
pub fn retrieve_in_context(index: &InvertedIndex, ctx: &UserContext, query: &Query, limit: usize) -> Vec<String> {
    index
        .retrieve(query, usize::MAX)
        .into_iter()
        .filter(|id| index.doc(id).is_some_and(|d| ctx.contains_day(d.day())))
        .take(limit)
        .collect()
}

/// Labeled (query, tweet) examples for every retrieved tweet with a judgment.
///
/// A tweet's label is the majority vote recorded for the query itself, or
/// failing that for the query's base medical condition.
pub fn build_training_set(
    index: &InvertedIndex,
    ctx: &UserContext,
    queries: &[Query],
    labels: &BTreeMap<(String, String), u8>,
    gazetteers: &GazetteerSet,
    per_query_limit: usize,
) -> Vec<LabeledExample> {
    let mut out = Vec::new();
    for q in queries {
        for id in retrieve_in_context(index, ctx, q, per_query_limit) {
            let label = labels
                .get(&(q.id.clone(), id.clone()))
                .or_else(|| labels.get(&(q.base.clone(), id.clone())));
            let (Some(&label), Some(doc)) = (label, index.doc(&id)) else {
                continue;
            };
            out.push(LabeledExample {
                query_id: q.id.clone(),
                tweet_id: id,
                timestamp: doc.timestamp,
                features: extract_features(q, &doc.tokens, gazetteers),
                label,
            });
        }
    }
    out
}

fn training_set_csv(examples: &[LabeledExample]) -> String {
    let mut out = String::from("query_id,tweet_id,timestamp");
    for f in Feature::ALL {
        out.push(',');
        out.push_str(f.name());
    }
    out.push_str(",label\n");
    for e in examples {
        let _ = write!(out, "{},{},{}", e.query_id, e.tweet_id, e.timestamp.to_rfc3339());
        for v in e.features.0 {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", e.label);
    }
    out
}

fn spd_params(config: &PipelineConfig) -> SpdParams {
    SpdParams {
        lambda: config.rank.lambda,
        steps: config.rank.steps,
        seed: config.seed,
    }
}

fn run_rank_stage(
    config: &PipelineConfig,
    index: &InvertedIndex,
    gazetteers: &GazetteerSet,
    expansion: &Expansion,
    examples: &[LabeledExample],
    out: &mut ArtifactWriter,
) -> Result<(), PipelineError> {
    out.write("rank/training_set.csv", training_set_csv(examples).as_bytes())?;
    let masks = config.masks()?;
    let mut models = Vec::new();
    for &mask in &masks {
        let mut model = rank::train_spd(examples, mask, spd_params(config))?;
        model.context_id = expansion.context.id();
        out.write(&format!("rank/model_{}.txt", mask_label(mask)), model.to_text().as_bytes())?;
        models.push(model);
    }
    let best = models
        .iter()
        .find(|m| m.mask == FeatureMask::FULL)
        .unwrap_or(&models[models.len() - 1]);
    let mut rankings = String::from("query_id,rank,tweet_id,score\n");
    for q in &expansion.queries {
        let candidates: Vec<Candidate> = retrieve_in_context(index, &expansion.context, q, config.expand.per_query_limit)
            .into_iter()
            .filter_map(|id| {
                let doc = index.doc(&id)?;
                Some(Candidate {
                    features: extract_features(q, &doc.tokens, gazetteers),
                    timestamp: doc.timestamp,
                    tweet_id: id,
                })
            })
            .collect();
        let scores: BTreeMap<&str, f64> = candidates
            .iter()
            .map(|c| (c.tweet_id.as_str(), best.score(&c.features)))
            .collect();
        for (rank, id) in rank::rank_tweets(best, q, &candidates).iter().take(config.rank.top).enumerate() {
            let _ = writeln!(rankings, "{},{},{},{:.6}", q.id, rank + 1, id, scores[id.as_str()]);
        }
    }
    out.write("rank/rankings.csv", rankings.as_bytes())?;
    Ok(())
}

fn run_eval_stage(
    config: &PipelineConfig,
    examples: &[LabeledExample],
    out: &mut ArtifactWriter,
) -> Result<(), PipelineError> {
    let params = CvParams {
        folds: config.eval.folds,
        train_fraction: config.eval.train_fraction,
        seed: config.seed,
        spd: spd_params(config),
    };
    let report = eval::cross_validate(examples, &config.masks()?, &params)?;
    out.write("eval/metrics.csv", report.to_csv().as_bytes())?;
    out.write("eval/metrics.txt", report.to_table().as_bytes())?;
    let mut folds = String::from("mask,fold,metric,value\n");
    for r in &report.results {
        for (i, m) in r.folds.iter().enumerate() {
            for (name, v) in METRIC_NAMES.iter().zip(m.0) {
                let v = v.map(|x| format!("{x:.6}")).unwrap_or_default();
                let _ = writeln!(folds, "{},{i},{name},{v}", mask_label(r.mask));
            }
        }
    }
    out.write("eval/folds.csv", folds.as_bytes())?;
    Ok(())
}

fn run_stages(config: &PipelineConfig, stage: Stage, out: &mut ArtifactWriter) -> Result<(), PipelineError> {
    let tweets: Vec<Tweet> = corpus::load_corpus(&config.corpus.path)?;
    let index = InvertedIndex::build(&tweets)?;
    log::info!("indexed {} messages from {}", index.len(), config.corpus.path.display());
    if stage.runs_detect() {
        run_detect_stage(config, &index, out)?;
        log::info!("detect: done");
    }
    if !stage.runs_expand() {
        return Ok(());
    }
    let gazetteers = load_gazetteers(config)?;
    let expansion = run_expand_stage(config, &index, &gazetteers, out)?;
    log::info!("expand: {} queries", expansion.queries.len());
    if !stage.needs_judgments() {
        return Ok(());
    }
    let judgments = eval::load_judgments(config.corpus.judgments.as_ref().expect("validated"))?;
    let labels = eval::resolve_judgments(&judgments)?;
    let examples = build_training_set(
        &index,
        &expansion.context,
        &expansion.queries,
        &labels,
        &gazetteers,
        config.expand.per_query_limit,
    );
    log::info!("training set: {} labeled examples", examples.len());
    if matches!(stage, Stage::Rank | Stage::All) {
        run_rank_stage(config, &index, &gazetteers, &expansion, &examples, out)?;
    }
    if matches!(stage, Stage::Eval | Stage::All) {
        run_eval_stage(config, &examples, out)?;
    }
    Ok(())
}

/// Validates `config`, runs `stage` and its prerequisites, and writes the
/// manifest. On failure every artifact written by this run is removed.
pub fn run_pipeline(config: &PipelineConfig, stage: Stage) -> Result<Manifest, PipelineError> {
    config.validate(stage)?;
    let mut out = ArtifactWriter {
        root: config.out.clone(),
        written: Vec::new(),
    };
    let result = run_stages(config, stage, &mut out).and_then(|()| {
        let mut artifacts: Vec<ArtifactRecord> = out.written.iter().map(|(_, r)| r.clone()).collect();
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            config_sha256: config.hash(),
            seed: config.seed,
            stage: stage.name().into(),
            artifacts,
        };
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        out.write("manifest.json", json.as_bytes())?;
        Ok(manifest)
    });
    if result.is_err() {
        out.rollback();
    }
    result
}

/// Writes a self-contained synthetic run directory: corpus, judgments, case
/// counts, gazetteers and a `config.toml` pointing at them.
pub fn write_fixture(dir: &Path, spec: &SyntheticSpec) -> Result<Vec<PathBuf>, PipelineError> {
    let gazetteers = GazetteerSet::builtin();
    let (tweets, judgments) = corpus::generate_synthetic_corpus(spec, &gazetteers)?;
    fs::create_dir_all(dir.join("gazetteers")).map_err(io_err(format!("creating {}", dir.display())))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), PipelineError> {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
        Ok(())
    };

    let mut buf = Vec::new();
    corpus::write_corpus(&mut buf, &tweets).map_err(io_err("serializing corpus"))?;
    put("corpus.jsonl", buf)?;
    let mut buf = Vec::new();
    eval::write_judgments(&mut buf, &judgments)?;
    put("judgments.csv", buf)?;
    let mut cases = String::from("date,cases\n");
    for (i, c) in spec.case_counts().iter().enumerate() {
        let _ = writeln!(cases, "{},{c}", spec.date_of(i as u32 + 1));
    }
    put("cases.csv", cases.into_bytes())?;
    let files = [
        ("gazetteers/medical_conditions.txt", &gazetteers.medical_conditions),
        ("gazetteers/locations.txt", &gazetteers.locations),
        ("gazetteers/complementary_context.txt", &gazetteers.complementary),
    ];
    for (name, g) in files {
        put(name, g.to_file_string().into_bytes())?;
    }

    let context_start = NaiveDate::from_ymd_opt(2011, 5, 23).unwrap();
    let context_end = NaiveDate::from_ymd_opt(2011, 6, 19).unwrap();
    let config = PipelineConfig {
        seed: spec.seed,
        out: default_out(),
        corpus: CorpusSection {
            path: "corpus.jsonl".into(),
            judgments: Some("judgments.csv".into()),
            cases: Some("cases.csv".into()),
        },
        gazetteers: GazetteerSection {
            medical_condition: files[0].0.into(),
            location: files[1].0.into(),
            complementary_context: files[2].0.into(),
        },
        context: ContextSection {
            start: context_start.max(spec.start),
            end: context_end.min(spec.date_of(spec.days)),
            medical_conditions: vec![spec.term.clone()],
            locations: vec!["lower_saxony".into()],
        },
        detect: DetectSection {
            terms: vec![spec.term.clone()],
            start: Some(spec.start),
            end: Some(spec.date_of(spec.days)),
            ..Default::default()
        },
        lda: LdaSection {
            iterations: 300,
            weekly: true,
            ..Default::default()
        },
        expand: ExpandSection::default(),
        rank: RankSection {
            steps: 20_000,
            ..Default::default()
        },
        eval: EvalSection::default(),
    };
    put("config.toml", config.to_toml().into_bytes())?;
    Ok(written)
}
