//! Tweet corpora, entity gazetteers and the synthetic outbreak generator.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::Judgment;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate tweet id `{0}`")]
    DuplicateId(String),
    #[error("term `{term}` appears in both the {first} and {second} gazetteers")]
    OverlappingGazetteers {
        term: String,
        first: EntityClass,
        second: EntityClass,
    },
    #[error("expected a {expected} gazetteer, got {found}")]
    WrongClass {
        expected: EntityClass,
        found: EntityClass,
    },
    #[error("invalid synthetic corpus configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One short message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tweet {
    pub id: String,
    #[serde(rename = "ts")]
    pub timestamp: DateTime<Utc>,
    pub user: String,
    pub text: String,
}

impl Tweet {
    pub fn day(&self) -> NaiveDate {
        self.timestamp.date_naive()
    }
}

/// Parses line-delimited JSON records, rejecting duplicate ids.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Tweet>, CorpusError> {
    let mut tweets = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let tweet: Tweet = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if tweet.id.is_empty() {
            return Err(CorpusError::Malformed {
                line: line_no,
                message: "empty `id`".into(),
            });
        }
        if tweet.text.is_empty() {
            return Err(CorpusError::Malformed {
                line: line_no,
                message: "empty `text`".into(),
            });
        }
        if !seen.insert(tweet.id.clone()) {
            return Err(CorpusError::DuplicateId(tweet.id));
        }
        tweets.push(tweet);
    }
    Ok(tweets)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Tweet>, CorpusError> {
    let file = File::open(path)?;
    parse_corpus(BufReader::new(file))
}

pub fn write_corpus<W: Write>(mut out: W, tweets: &[Tweet]) -> io::Result<()> {
    for tweet in tweets {
        serde_json::to_writer(&mut out, tweet)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityClass {
    MedicalCondition,
    Location,
    ComplementaryContext,
}

impl EntityClass {
    pub const ALL: [EntityClass; 3] = [
        EntityClass::MedicalCondition,
        EntityClass::Location,
        EntityClass::ComplementaryContext,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            EntityClass::MedicalCondition => "MC",
            EntityClass::Location => "L",
            EntityClass::ComplementaryContext => "CC",
        }
    }
}

impl fmt::Display for EntityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityClass::MedicalCondition => "medical condition",
            EntityClass::Location => "location",
            EntityClass::ComplementaryContext => "complementary context",
        })
    }
}

/// A dictionary of lowercase terms belonging to one entity class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gazetteer {
    pub class: EntityClass,
    pub terms: BTreeSet<String>,
}

impl Gazetteer {
    pub fn new<I, S>(class: EntityClass, terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let terms = terms
            .into_iter()
            .map(|t| t.as_ref().trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        Gazetteer { class, terms }
    }

    /// One term per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, class: EntityClass) -> Self {
        Gazetteer::new(
            class,
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn contains(&self, term: &str) -> bool {
        self.terms.contains(term)
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("# {} terms\n", self.class);
        for t in &self.terms {
            s.push_str(t);
            s.push('\n');
        }
        s
    }
}

pub fn load_gazetteer(path: impl AsRef<Path>, class: EntityClass) -> Result<Gazetteer, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    Ok(Gazetteer::parse(&text, class))
}

/// The three pairwise-disjoint gazetteers used by one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GazetteerSet {
    pub medical_conditions: Gazetteer,
    pub locations: Gazetteer,
    pub complementary: Gazetteer,
}

impl GazetteerSet {
    pub fn new(mc: Gazetteer, l: Gazetteer, cc: Gazetteer) -> Result<Self, CorpusError> {
        for (g, expected) in [&mc, &l, &cc].into_iter().zip(EntityClass::ALL) {
            if g.class != expected {
                return Err(CorpusError::WrongClass {
                    expected,
                    found: g.class,
                });
            }
        }
        let pairs = [(&mc, &l), (&mc, &cc), (&l, &cc)];
        for (a, b) in pairs {
            if let Some(term) = a.terms.intersection(&b.terms).next() {
                return Err(CorpusError::OverlappingGazetteers {
                    term: term.clone(),
                    first: a.class,
                    second: b.class,
                });
            }
        }
        Ok(GazetteerSet {
            medical_conditions: mc,
            locations: l,
            complementary: cc,
        })
    }

    pub fn get(&self, class: EntityClass) -> &Gazetteer {
        match class {
            EntityClass::MedicalCondition => &self.medical_conditions,
            EntityClass::Location => &self.locations,
            EntityClass::ComplementaryContext => &self.complementary,
        }
    }

    /// Membership lookup with priority MC > L > CC.
    pub fn class_of(&self, term: &str) -> Option<EntityClass> {
        EntityClass::ALL
            .into_iter()
            .find(|&c| self.get(c).contains(term))
    }

    /// Terms drawn from the outbreak tables used by the bundled fixture.
    pub fn builtin() -> Self {
        let mc = Gazetteer::new(
            EntityClass::MedicalCondition,
            [
                "ehec", "hus", "bacteria", "diarrhea", "fever", "pathogen", "headache", "pain",
                "germ", "cough", "intestinal_infection", "bellyache", "sniff",
            ],
        );
        let l = Gazetteer::new(
            EntityClass::Location,
            [
                "hamburg", "berlin", "bremen", "cuxhaven", "lower_saxony", "germany", "spain",
                "luebeck", "bavaria", "northern_germany", "muenster",
            ],
        );
        let cc = Gazetteer::new(
            EntityClass::ComplementaryContext,
            [
                "cucumbers", "tomatoes", "salad", "sprouts", "vegetables", "farmers", "rki",
                "merkel", "edeka", "fdp", "women",
            ],
        );
        GazetteerSet::new(mc, l, cc).expect("builtin gazetteers are disjoint")
    }
}

/// Parameters of the synthetic outbreak corpus.
///
/// Day `d` (1-based) falls on `start + (d - 1)`. Every day carries
/// Poisson(`baseline_rate`) background mentions of `term` and
/// Poisson(`chatter_rate`) unrelated messages. From `spike_day` on, an outbreak
/// curve ramps linearly to `spike_height` over `ramp_days` days and then halves
/// every `half_life_days`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub days: u32,
    pub baseline_rate: f64,
    pub spike_day: u32,
    pub spike_height: f64,
    pub relevance_plant_rate: f64,
    pub start: NaiveDate,
    pub term: String,
    pub ramp_days: u32,
    pub half_life_days: f64,
    pub chatter_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 2011,
            days: 60,
            baseline_rate: 0.1,
            spike_day: 21,
            spike_height: 40.0,
            relevance_plant_rate: 0.4,
            start: NaiveDate::from_ymd_opt(2011, 4, 30).unwrap(),
            term: "ehec".into(),
            ramp_days: 8,
            half_life_days: 7.0,
            chatter_rate: 2.0,
        }
    }
}

/// Detectors need `window + buffer = 20` warm-up days plus a few scored days.
pub const MIN_SYNTHETIC_DAYS: u32 = 25;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: String| Err(CorpusError::Config(m));
        if self.days < MIN_SYNTHETIC_DAYS {
            return fail(format!(
                "days = {} but at least {MIN_SYNTHETIC_DAYS} are required for detector warm-up",
                self.days
            ));
        }
        if !(0.0..=1.0).contains(&self.relevance_plant_rate) {
            return fail(format!(
                "relevance_plant_rate = {} is outside [0, 1]",
                self.relevance_plant_rate
            ));
        }
        if self.spike_day < 1 || self.spike_day > self.days {
            return fail(format!("spike_day = {} is outside [1, {}]", self.spike_day, self.days));
        }
        if !(self.baseline_rate >= 0.0 && self.chatter_rate >= 0.0 && self.spike_height >= 0.0) {
            return fail("rates and spike height must be non-negative".into());
        }
        if self.ramp_days == 0 || self.half_life_days.is_nan() || self.half_life_days <= 0.0 {
            return fail("ramp_days and half_life_days must be positive".into());
        }
        Ok(())
    }

    pub fn date_of(&self, day: u32) -> NaiveDate {
        self.start + Duration::days(i64::from(day) - 1)
    }

    /// Deterministic outbreak volume on 1-based `day`.
    pub fn outbreak_volume(&self, day: u32) -> u64 {
        if day < self.spike_day {
            return 0;
        }
        let k = day - self.spike_day;
        let v = if k < self.ramp_days {
            self.spike_height * f64::from(k + 1) / f64::from(self.ramp_days)
        } else {
            let since_peak = f64::from(k + 1 - self.ramp_days);
            self.spike_height * 0.5f64.powf(since_peak / self.half_life_days)
        };
        v.round() as u64
    }

    /// Daily reported cases trailing the outbreak curve by two days.
    pub fn case_counts(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xCA5E);
        let noise = Poisson::new(0.5).unwrap();
        (1..=self.days)
            .map(|d| {
                let lagged = if d > 2 { self.outbreak_volume(d - 2) } else { 0 };
                (lagged as f64 * 0.6).round() as u64 + noise.sample(&mut rng) as u64
            })
            .collect()
    }
}

const FILLER: &[&str] = &[
    "today", "news", "people", "really", "think", "world", "morning", "coffee", "weekend",
    "football", "match", "weather", "sunny", "rain", "train", "late", "office", "music",
    "concert", "dinner", "friends", "city", "read", "report", "update", "video", "watch",
    "new", "good", "week", "time", "home", "work", "school", "traffic", "party", "book",
    "game", "photo", "night",
];

const ANNOTATORS: [&str; 3] = ["a1", "a2", "a3"];

fn sample_count(rate: f64, rng: &mut ChaCha8Rng) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).unwrap().sample(rng) as u64
}

fn pick<'a>(terms: &'a [&'a str], rng: &mut ChaCha8Rng) -> &'a str {
    terms.choose(rng).copied().unwrap_or("")
}

struct TextMaker<'a> {
    term: &'a str,
    other_mc: Vec<&'a str>,
    locations: Vec<&'a str>,
    complementary: Vec<&'a str>,
    filler: Vec<&'a str>,
}

impl TextMaker<'_> {
    fn fillers(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        (0..n).map(|_| pick(&self.filler, rng).to_string()).collect()
    }

    fn mention(&self, rng: &mut ChaCha8Rng) -> String {
        if rng.random_bool(0.5) {
            self.term.to_uppercase()
        } else {
            self.term.to_string()
        }
    }

    fn url(rng: &mut ChaCha8Rng) -> String {
        format!("https://t.co/{:08x}", rng.random::<u32>())
    }

    fn relevant(&self, rng: &mut ChaCha8Rng) -> String {
        let mut words = self.fillers(rng.random_range(1..=3), rng);
        words.push(self.mention(rng));
        let cc = pick(&self.complementary, rng);
        words.push(cc.to_string());
        let loc = (!self.locations.is_empty() && rng.random_bool(0.8))
            .then(|| pick(&self.locations, rng));
        if let Some(l) = loc {
            words.push(l.to_string());
        }
        words.shuffle(rng);
        let tag = match (rng.random_range(0..3), loc) {
            (0, _) => self.term,
            (1, Some(l)) => l,
            _ => cc,
        };
        words.push(format!("#{tag}"));
        words.push(Self::url(rng));
        words.join(" ")
    }

    fn irrelevant_mention(&self, rng: &mut ChaCha8Rng) -> String {
        let mut words = self.fillers(rng.random_range(2..=5), rng);
        words.push(self.mention(rng));
        if !self.other_mc.is_empty() && rng.random_bool(0.3) {
            words.push(pick(&self.other_mc, rng).to_string());
        }
        if !self.locations.is_empty() && rng.random_bool(0.2) {
            words.push(pick(&self.locations, rng).to_string());
        }
        if !self.complementary.is_empty() && rng.random_bool(0.1) {
            words.push(pick(&self.complementary, rng).to_string());
        }
        words.shuffle(rng);
        if rng.random_bool(0.15) {
            words.push(format!("#{}", self.term));
        }
        if rng.random_bool(0.15) {
            words.push(Self::url(rng));
        }
        words.join(" ")
    }

    fn chatter(&self, rng: &mut ChaCha8Rng) -> String {
        let mut words = self.fillers(rng.random_range(3..=7), rng);
        if rng.random_bool(0.2) {
            words.push(format!("#{}", pick(&self.filler, rng)));
        }
        if rng.random_bool(0.1) {
            words.push(Self::url(rng));
        }
        words.join(" ")
    }
}

/// Generates a seeded corpus with an outbreak of `spec.term` and one
/// three-annotator judgment panel per tweet, keyed by the query id `spec.term`.
///
/// Outbreak messages are relevant with probability `relevance_plant_rate`;
/// relevant ones always carry a complementary-context term, a hashtag and a
/// URL. In each panel at most one annotator dissents, so the majority label is
/// the planted one.
pub fn generate_synthetic_corpus(
    spec: &SyntheticSpec,
    gazetteers: &GazetteerSet,
) -> Result<(Vec<Tweet>, Vec<Judgment>), CorpusError> {
    spec.validate()?;
    if gazetteers.medical_conditions.is_empty() || gazetteers.locations.is_empty() {
        return Err(CorpusError::Config(
            "medical-condition and location gazetteers must be nonempty".into(),
        ));
    }
    if !gazetteers.medical_conditions.contains(&spec.term) {
        return Err(CorpusError::Config(format!(
            "tracked term `{}` is not in the medical-condition gazetteer",
            spec.term
        )));
    }
    let as_vec = |g: &'_ Gazetteer| -> Vec<String> { g.terms.iter().cloned().collect() };
    let other_mc: Vec<String> = as_vec(&gazetteers.medical_conditions)
        .into_iter()
        .filter(|t| *t != spec.term)
        .collect();
    let locations = as_vec(&gazetteers.locations);
    let mut complementary = as_vec(&gazetteers.complementary);
    if complementary.is_empty() {
        complementary.push("report".into());
    }
    let filler: Vec<&str> = FILLER
        .iter()
        .copied()
        .filter(|w| gazetteers.class_of(w).is_none())
        .collect();
    let maker = TextMaker {
        term: &spec.term,
        other_mc: other_mc.iter().map(String::as_str).collect(),
        locations: locations.iter().map(String::as_str).collect(),
        complementary: complementary.iter().map(String::as_str).collect(),
        filler,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ids = HashSet::new();
    let mut rows: Vec<(Tweet, u8)> = Vec::new();
    for day in 1..=spec.days {
        let midnight = spec.date_of(day).and_hms_opt(0, 0, 0).unwrap().and_utc();
        let background = sample_count(spec.baseline_rate, &mut rng);
        let outbreak = spec.outbreak_volume(day);
        let chatter = sample_count(spec.chatter_rate, &mut rng);
        let kinds = std::iter::repeat_n(0u8, background as usize)
            .chain(std::iter::repeat_n(1, outbreak as usize))
            .chain(std::iter::repeat_n(2, chatter as usize));
        for kind in kinds {
            let (text, label) = match kind {
                1 if rng.random_bool(spec.relevance_plant_rate) => (maker.relevant(&mut rng), 1),
                0 | 1 => (maker.irrelevant_mention(&mut rng), 0),
                _ => (maker.chatter(&mut rng), 0),
            };
            let id = loop {
                let candidate = format!("{:016x}", rng.random::<u64>());
                if ids.insert(candidate.clone()) {
                    break candidate;
                }
            };
            let timestamp = midnight + Duration::seconds(rng.random_range(0..86_400));
            let user = format!("user{:04}", rng.random_range(0..2_000));
            rows.push((Tweet { id, timestamp, user, text }, label));
        }
    }
    rows.sort_by(|a, b| (a.0.timestamp, &a.0.id).cmp(&(b.0.timestamp, &b.0.id)));

    let mut judgments = Vec::with_capacity(rows.len() * ANNOTATORS.len());
    for (tweet, label) in &rows {
        let dissenter = rng
            .random_bool(0.2)
            .then(|| rng.random_range(0..ANNOTATORS.len()));
        for (i, annotator) in ANNOTATORS.iter().enumerate() {
            let vote = if dissenter == Some(i) { 1 - label } else { *label };
            judgments.push(Judgment {
                query_id: spec.term.clone(),
                tweet_id: tweet.id.clone(),
                annotator: (*annotator).to_string(),
                label: vote,
            });
        }
    }
    Ok((rows.into_iter().map(|(t, _)| t).collect(), judgments))
}

impl FromStr for EntityClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mc" | "medical_condition" => Ok(EntityClass::MedicalCondition),
            "l" | "location" => Ok(EntityClass::Location),
            "cc" | "complementary_context" => Ok(EntityClass::ComplementaryContext),
            other => Err(format!("unknown entity class `{other}`")),
        }
    }
}
