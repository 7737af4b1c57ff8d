//! User context, query expansion and query construction.
//!
//! A [`UserContext`] names a time interval, the medical conditions of interest
//! and optional locations. Expansion collects candidate terms from two sources,
//! the top words of each LDA topic and the hashtags co-occurring with a medical
//! condition, keeps those a gazetteer can classify, and [`build_queries`] turns
//! every small subset of them into a conjunctive query anchored on one medical
//! condition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntityClass, GazetteerSet};
use crate::index::InvertedIndex;
use crate::topics::TopicModel;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("context interval is inverted: {start} > {end}")]
    InvertedInterval { start: NaiveDate, end: NaiveDate },
    #[error("context needs at least one medical condition")]
    NoMedicalCondition,
    #[error("{count} queries exceed the cap of {cap}; lower max_subset or the per-class caps")]
    TooManyQueries { count: u128, cap: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserContext {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub medical_conditions: BTreeSet<String>,
    pub locations: BTreeSet<String>,
}

impl UserContext {
    pub fn new<I, J, S, T>(start: NaiveDate, end: NaiveDate, mc: I, locations: J) -> Result<Self, ContextError>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        if start > end {
            return Err(ContextError::InvertedInterval { start, end });
        }
        let norm = |s: &str| s.trim().to_lowercase();
        let medical_conditions: BTreeSet<String> = mc.into_iter().map(|s| norm(s.as_ref())).collect();
        if medical_conditions.is_empty() {
            return Err(ContextError::NoMedicalCondition);
        }
        Ok(UserContext {
            start,
            end,
            medical_conditions,
            locations: locations.into_iter().map(|s| norm(s.as_ref())).collect(),
        })
    }

    pub fn contains_day(&self, day: NaiveDate) -> bool {
        (self.start..=self.end).contains(&day)
    }

    /// Stable identifier, e.g. `2011-05-23..2011-06-19|ehec|lower_saxony`.
    pub fn id(&self) -> String {
        let join = |s: &BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(",");
        format!(
            "{}..{}|{}|{}",
            self.start,
            self.end,
            join(&self.medical_conditions),
            join(&self.locations)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TermClass {
    Entity(EntityClass),
    Discarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TermSource {
    Lda,
    Hashtag,
}

impl fmt::Display for TermSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TermSource::Lda => "lda",
            TermSource::Hashtag => "hashtag",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedTerm {
    pub term: String,
    pub class: TermClass,
    pub source: TermSource,
    /// LDA probability or co-occurrence count.
    pub weight: f64,
}

/// Conjunctive query: every term must occur in a matching tweet.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Query {
    pub id: String,
    pub terms: BTreeSet<String>,
    pub base: String,
}

impl Query {
    /// `base` followed by the remaining terms, sorted, joined with `+`.
    pub fn new<I, S>(base: &str, extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let base = base.to_lowercase();
        let mut terms: BTreeSet<String> = extra.into_iter().map(|s| s.as_ref().to_lowercase()).collect();
        terms.remove(&base);
        let mut id = base.clone();
        for t in &terms {
            id.push('+');
            id.push_str(t);
        }
        terms.insert(base.clone());
        Query { id, terms, base }
    }
}

/// Counts, per hashtag, the distinct in-interval tweets that mention a
/// context medical condition (as hashtag or plain token) together with it.
/// Sorted by count descending, then hashtag.
pub fn cooccurring_hashtags(index: &InvertedIndex, context: &UserContext) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for mc in &context.medical_conditions {
        for id in index.postings(mc) {
            let Some(doc) = index.doc(id) else { continue };
            if !context.contains_day(doc.day()) || !seen.insert(id.as_str()) {
                continue;
            }
            let present: Vec<&String> = context
                .medical_conditions
                .iter()
                .filter(|m| doc.tokens.contains(m))
                .collect();
            for tag in &doc.tokens.hashtags {
                if present.iter().any(|m| *m != tag) {
                    *counts.entry(tag.as_str()).or_default() += 1;
                }
            }
        }
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn classify_term(term: &str, source: TermSource, weight: f64, gazetteers: &GazetteerSet) -> ClassifiedTerm {
    let class = gazetteers
        .class_of(term)
        .map_or(TermClass::Discarded, TermClass::Entity);
    ClassifiedTerm {
        term: term.to_string(),
        class,
        source,
        weight,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionLimits {
    /// Top LDA terms read from each topic.
    pub terms_per_topic: usize,
    /// Maximum terms kept per entity class.
    pub per_class: usize,
}

impl Default for ExpansionLimits {
    fn default() -> Self {
        ExpansionLimits {
            terms_per_topic: 5,
            per_class: 5,
        }
    }
}

/// Classified expansion terms grouped by class (MC, L, CC), heaviest first.
///
/// A term found by both sources keeps its hashtag entry. Context medical
/// conditions are not repeated in the expansion.
pub fn expand_context(
    context: &UserContext,
    model: Option<&TopicModel>,
    cotags: &[(String, usize)],
    gazetteers: &GazetteerSet,
    limits: ExpansionLimits,
) -> Vec<ClassifiedTerm> {
    let mut pool: BTreeMap<String, ClassifiedTerm> = BTreeMap::new();
    if let Some(model) = model {
        for z in 0..model.n_topics {
            for (term, p) in model.top_terms(z, limits.terms_per_topic).expect("topic in range") {
                let candidate = classify_term(&term, TermSource::Lda, p, gazetteers);
                match pool.get(&term) {
                    Some(existing) if existing.weight >= p => {}
                    _ => {
                        pool.insert(term, candidate);
                    }
                }
            }
        }
    }
    for (tag, count) in cotags {
        pool.insert(tag.clone(), classify_term(tag, TermSource::Hashtag, *count as f64, gazetteers));
    }

    let mut by_class: BTreeMap<EntityClass, Vec<ClassifiedTerm>> = BTreeMap::new();
    for (term, ct) in pool {
        if context.medical_conditions.contains(&term) {
            continue;
        }
        if let TermClass::Entity(class) = ct.class {
            by_class.entry(class).or_default().push(ct);
        }
    }
    let mut out = Vec::new();
    for (_, mut terms) in by_class {
        terms.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.term.cmp(&b.term)));
        terms.truncate(limits.per_class);
        out.extend(terms);
    }
    out
}

/// Text report of an expansion, one `class source weight term` row per term.
pub fn expansion_report(expansion: &[ClassifiedTerm]) -> String {
    let mut out = String::from("class\tsource\tweight\tterm\n");
    for ct in expansion {
        let class = match ct.class {
            TermClass::Entity(c) => c.short_name(),
            TermClass::Discarded => "-",
        };
        out.push_str(&format!("{class}\t{}\t{:.6}\t{}\n", ct.source, ct.weight, ct.term));
    }
    out
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Upper bound on the number of queries [`build_queries`] can emit.
pub fn query_count_bound(n_bases: usize, n_candidates: usize, max_subset: usize) -> u128 {
    let per_base: u128 = (0..=max_subset.min(n_candidates))
        .map(|i| binomial(n_candidates as u128, i as u128))
        .fold(0u128, u128::saturating_add);
    per_base.saturating_mul(n_bases as u128)
}

fn for_each_subset(items: &[String], size: usize, f: &mut impl FnMut(&[&String])) {
    fn rec<'a>(items: &'a [String], size: usize, start: usize, acc: &mut Vec<&'a String>, f: &mut impl FnMut(&[&String])) {
        if acc.len() == size {
            f(acc);
            return;
        }
        for i in start..items.len() {
            if items.len() - i < size - acc.len() {
                break;
            }
            acc.push(&items[i]);
            rec(items, size, i + 1, acc, f);
            acc.pop();
        }
    }
    rec(items, size, 0, &mut Vec::with_capacity(size), f);
}

pub const DEFAULT_MAX_QUERIES: usize = 10_000;

/// Every `{mc} ∪ S` for `mc` in the context and `S` a subset of at most
/// `max_subset` candidate terms (context locations plus expansion terms).
///
/// Queries are grouped by base, then by subset size, then lexicographically,
/// and deduplicated by term set.
pub fn build_queries(
    context: &UserContext,
    expansion: &[ClassifiedTerm],
    max_subset: usize,
    max_queries: usize,
) -> Result<Vec<Query>, ContextError> {
    let candidates: Vec<String> = context
        .locations
        .iter()
        .cloned()
        .chain(
            expansion
                .iter()
                .filter(|ct| ct.class != TermClass::Discarded)
                .map(|ct| ct.term.clone()),
        )
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let bound = query_count_bound(context.medical_conditions.len(), candidates.len(), max_subset);
    if bound > max_queries as u128 {
        return Err(ContextError::TooManyQueries {
            count: bound,
            cap: max_queries,
        });
    }
    let mut seen: BTreeSet<BTreeSet<String>> = BTreeSet::new();
    let mut out = Vec::new();
    for mc in &context.medical_conditions {
        for size in 0..=max_subset.min(candidates.len()) {
            for_each_subset(&candidates, size, &mut |subset| {
                let q = Query::new(mc, subset.iter().map(|s| s.as_str()));
                if seen.insert(q.terms.clone()) {
                    out.push(q);
                }
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Gazetteer, Tweet};
    use proptest::prelude::*;

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2011, 5, d).unwrap()
    }

    fn ctx(mc: &[&str], l: &[&str]) -> UserContext {
        UserContext::new(day(1), day(31), mc, l).unwrap()
    }

    fn index(texts: &[(u32, &str)]) -> InvertedIndex {
        let tweets: Vec<Tweet> = texts
            .iter()
            .enumerate()
            .map(|(i, (d, text))| Tweet {
                id: format!("t{i}"),
                timestamp: day(*d).and_hms_opt(9, 0, 0).unwrap().and_utc(),
                user: "u".into(),
                text: (*text).into(),
            })
            .collect();
        InvertedIndex::build(&tweets).unwrap()
    }

    fn gaz() -> GazetteerSet {
        GazetteerSet::new(
            Gazetteer::new(EntityClass::MedicalCondition, ["ehec", "hus"]),
            Gazetteer::new(EntityClass::Location, ["berlin", "spain", "hamburg"]),
            Gazetteer::new(EntityClass::ComplementaryContext, ["cucumbers", "rki"]),
        )
        .unwrap()
    }

    #[test]
    fn context_validation() {
        assert!(matches!(
            UserContext::new(day(5), day(1), ["ehec"], [] as [&str; 0]),
            Err(ContextError::InvertedInterval { .. })
        ));
        assert_eq!(
            UserContext::new(day(1), day(5), [] as [&str; 0], ["berlin"]),
            Err(ContextError::NoMedicalCondition)
        );
        let c = UserContext::new(day(1), day(5), ["EHEC "], ["Lower_Saxony"]).unwrap();
        assert_eq!(c.id(), "2011-05-01..2011-05-05|ehec|lower_saxony");
    }

    #[test]
    fn no_hashtags_no_cotags() {
        let idx = index(&[(2, "ehec in berlin"), (3, "nothing here")]);
        assert!(cooccurring_hashtags(&idx, &ctx(&["ehec"], &[])).is_empty());
    }

    #[test]
    fn counts_cotags_per_tweet() {
        let idx = index(&[
            (2, "#ehec #cucumbers"),
            (3, "#ehec #cucumbers #rki"),
            (4, "#flu #rki"),
        ]);
        assert_eq!(
            cooccurring_hashtags(&idx, &ctx(&["ehec"], &[])),
            [("cucumbers".to_string(), 2), ("rki".to_string(), 1)]
        );
    }

    #[test]
    fn plain_token_mention_counts() {
        let idx = index(&[(2, "EHEC cases rising #hamburg #hamburg"), (3, "#hamburg port")]);
        assert_eq!(
            cooccurring_hashtags(&idx, &ctx(&["ehec"], &[])),
            [("hamburg".to_string(), 1)]
        );
    }

    #[test]
    fn cotags_respect_interval() {
        let idx = index(&[(2, "#ehec #salad"), (20, "#ehec #salad")]);
        let c = UserContext::new(day(10), day(25), ["ehec"], [] as [&str; 0]).unwrap();
        assert_eq!(cooccurring_hashtags(&idx, &c), [("salad".to_string(), 1)]);
    }

    #[test]
    fn classification() {
        let g = gaz();
        let c = |t| classify_term(t, TermSource::Lda, 1.0, &g).class;
        assert_eq!(c("ehec"), TermClass::Entity(EntityClass::MedicalCondition));
        assert_eq!(c("berlin"), TermClass::Entity(EntityClass::Location));
        assert_eq!(c("cucumbers"), TermClass::Entity(EntityClass::ComplementaryContext));
        assert_eq!(c("zzzz"), TermClass::Discarded);
    }

    fn model_with(terms: &[(&str, f64)]) -> TopicModel {
        let total: f64 = terms.iter().map(|t| t.1).sum();
        TopicModel {
            n_topics: 1,
            vocabulary: terms.iter().map(|t| t.0.to_string()).collect(),
            topic_word: vec![terms.iter().map(|t| t.1 / total).collect()],
            doc_topic: vec![],
            doc_ids: vec![],
            alpha: 1.0,
            beta: 0.01,
            seed: 0,
            stop_tokens: vec![],
            warnings: vec![],
        }
    }

    #[test]
    fn empty_expansion() {
        assert!(expand_context(&ctx(&["ehec"], &[]), None, &[], &gaz(), ExpansionLimits::default()).is_empty());
    }

    #[test]
    fn expansion_spans_classes() {
        let model = model_with(&[("cucumbers", 3.0), ("spain", 2.0), ("people", 1.0)]);
        let cotags = vec![("hus".to_string(), 4)];
        let out = expand_context(&ctx(&["ehec"], &[]), Some(&model), &cotags, &gaz(), ExpansionLimits::default());
        let got: Vec<(&str, TermClass)> = out.iter().map(|c| (c.term.as_str(), c.class)).collect();
        assert_eq!(
            got,
            [
                ("hus", TermClass::Entity(EntityClass::MedicalCondition)),
                ("spain", TermClass::Entity(EntityClass::Location)),
                ("cucumbers", TermClass::Entity(EntityClass::ComplementaryContext)),
            ]
        );
    }

    #[test]
    fn duplicate_term_keeps_hashtag_source() {
        let model = model_with(&[("cucumbers", 1.0), ("ehec", 1.0)]);
        let cotags = vec![("cucumbers".to_string(), 2)];
        let out = expand_context(&ctx(&["ehec"], &[]), Some(&model), &cotags, &gaz(), ExpansionLimits::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].source, TermSource::Hashtag);
        assert_eq!(out[0].weight, 2.0);
    }

    #[test]
    fn per_class_cap() {
        let cotags: Vec<(String, usize)> = ["berlin", "spain", "hamburg"]
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), 10 - i))
            .collect();
        let limits = ExpansionLimits { per_class: 2, ..Default::default() };
        let out = expand_context(&ctx(&["ehec"], &[]), None, &cotags, &gaz(), limits);
        assert_eq!(out.iter().map(|c| c.term.as_str()).collect::<Vec<_>>(), ["berlin", "spain"]);
    }

    fn terms(q: &Query) -> Vec<&str> {
        q.terms.iter().map(String::as_str).collect()
    }

    #[test]
    fn base_query_only() {
        let qs = build_queries(&ctx(&["ehec"], &[]), &[], 2, 100).unwrap();
        assert_eq!(qs.len(), 1);
        assert_eq!(terms(&qs[0]), ["ehec"]);
        assert_eq!(qs[0].id, "ehec");
    }

    #[test]
    fn pairwise_queries() {
        let g = gaz();
        let expansion: Vec<ClassifiedTerm> = ["hus", "cucumbers"]
            .iter()
            .map(|t| classify_term(t, TermSource::Hashtag, 1.0, &g))
            .collect();
        let qs = build_queries(&ctx(&["ehec"], &["hamburg"]), &expansion, 1, 100).unwrap();
        let got: BTreeSet<Vec<&str>> = qs.iter().map(terms).collect();
        let want: BTreeSet<Vec<&str>> = [
            vec!["ehec"],
            vec!["ehec", "hamburg"],
            vec!["ehec", "hus"],
            vec!["cucumbers", "ehec"],
        ]
        .into_iter()
        .collect();
        assert_eq!(got, want);
        assert_eq!(qs.len(), 4);
        let zero = build_queries(&ctx(&["ehec"], &["hamburg"]), &expansion, 0, 100).unwrap();
        assert_eq!(zero.len(), 1);
    }

    #[test]
    fn query_cap_enforced() {
        let g = gaz();
        let expansion: Vec<ClassifiedTerm> = ["hus", "cucumbers", "rki", "spain"]
            .iter()
            .map(|t| classify_term(t, TermSource::Hashtag, 1.0, &g))
            .collect();
        let err = build_queries(&ctx(&["ehec"], &[]), &expansion, 4, 10).unwrap_err();
        assert_eq!(err, ContextError::TooManyQueries { count: 16, cap: 10 });
    }

    #[test]
    fn discarded_terms_never_queried() {
        let g = gaz();
        let expansion = vec![classify_term("zzzz", TermSource::Lda, 1.0, &g)];
        let qs = build_queries(&ctx(&["ehec"], &[]), &expansion, 2, 100).unwrap();
        assert!(qs.iter().all(|q| !q.terms.contains("zzzz")));
    }

    proptest! {
        #[test]
        fn queries_contain_base_and_respect_bound(
            mcs in prop::collection::btree_set("[a-c]{1,2}", 1..3),
            cands in prop::collection::btree_set("[d-g]{1,2}", 0..6),
            max_subset in 0usize..4,
        ) {
            let c = UserContext::new(day(1), day(2), &mcs, &cands).unwrap();
            let qs = build_queries(&c, &[], max_subset, usize::MAX).unwrap();
            prop_assert!(qs.len() as u128 <= query_count_bound(mcs.len(), cands.len(), max_subset));
            let mut sets = BTreeSet::new();
            for q in &qs {
                prop_assert!(q.terms.contains(&q.base));
                prop_assert!(c.medical_conditions.contains(&q.base));
                prop_assert!(q.terms.len() <= max_subset + 1);
                prop_assert!(sets.insert(q.terms.clone()));
            }
        }
    }
}
