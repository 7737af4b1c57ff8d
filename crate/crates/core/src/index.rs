//! Tokenization and a conjunctive inverted index over tweets.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, NaiveDate, Utc};
use thiserror::Error;

use crate::context::Query;
use crate::corpus::Tweet;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("duplicate tweet id `{0}`")]
    DuplicateId(String),
}

/// Lowercased tokens of one message.
///
/// Hashtag bodies appear both in `tokens` and in `hashtags`; URLs are removed
/// from `tokens` and only recorded through `has_url`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenizedTweet {
    pub tweet_id: String,
    pub tokens: Vec<String>,
    pub hashtags: BTreeSet<String>,
    pub has_url: bool,
}

impl TokenizedTweet {
    pub fn new(tweet_id: impl Into<String>, text: &str) -> Self {
        TokenizedTweet {
            tweet_id: tweet_id.into(),
            ..tokenize(text)
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.iter().any(|t| t == token)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn url_start(chunk: &str) -> Option<usize> {
    let lower = chunk.to_ascii_lowercase();
    ["http://", "https://"]
        .iter()
        .filter_map(|scheme| lower.find(scheme))
        .min()
}

fn push_words(text: &str, out: &mut TokenizedTweet) {
    let mut word = String::new();
    let mut tagged = false;
    let mut prev = ' ';
    let flush = |word: &mut String, tagged: bool, out: &mut TokenizedTweet| {
        if word.chars().any(char::is_alphanumeric) {
            let token = word.to_lowercase();
            if tagged {
                out.hashtags.insert(token.clone());
            }
            out.tokens.push(token);
        }
        word.clear();
    };
    for c in text.chars() {
        if is_word_char(c) {
            if word.is_empty() {
                tagged = prev == '#';
            }
            word.push(c);
        } else {
            flush(&mut word, tagged, out);
        }
        prev = c;
    }
    flush(&mut word, tagged, out);
}

/// Splits `text` into lowercase word tokens.
///
/// Words are maximal runs of alphanumerics and `_`. A word directly preceded
/// by `#` is also a hashtag. Anything from an `http://` or `https://` prefix to
/// the next whitespace is a URL and yields no tokens.
pub fn tokenize(text: &str) -> TokenizedTweet {
    let mut out = TokenizedTweet::default();
    for chunk in text.split_whitespace() {
        match url_start(chunk) {
            Some(at) => {
                out.has_url = true;
                push_words(&chunk[..at], &mut out);
            }
            None => push_words(chunk, &mut out),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedTweet {
    pub timestamp: DateTime<Utc>,
    pub tokens: TokenizedTweet,
}

impl IndexedTweet {
    pub fn day(&self) -> NaiveDate {
        self.timestamp.date_naive()
    }
}

/// Postings and per-day lists, both holding tweet ids in ascending order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<String>>,
    by_date: BTreeMap<NaiveDate, Vec<String>>,
    docs: BTreeMap<String, IndexedTweet>,
}

impl InvertedIndex {
    pub fn build(tweets: &[Tweet]) -> Result<Self, IndexError> {
        let mut index = InvertedIndex::default();
        for tweet in tweets {
            if index.docs.contains_key(&tweet.id) {
                return Err(IndexError::DuplicateId(tweet.id.clone()));
            }
            let tokens = TokenizedTweet::new(tweet.id.clone(), &tweet.text);
            let distinct: BTreeSet<&String> = tokens.tokens.iter().collect();
            for token in distinct {
                index
                    .postings
                    .entry(token.clone())
                    .or_default()
                    .push(tweet.id.clone());
            }
            index
                .by_date
                .entry(tweet.day())
                .or_default()
                .push(tweet.id.clone());
            index.docs.insert(
                tweet.id.clone(),
                IndexedTweet {
                    timestamp: tweet.timestamp,
                    tokens,
                },
            );
        }
        for ids in index.postings.values_mut().chain(index.by_date.values_mut()) {
            ids.sort_unstable();
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn postings(&self, token: &str) -> &[String] {
        self.postings.get(token).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn by_date(&self) -> &BTreeMap<NaiveDate, Vec<String>> {
        &self.by_date
    }

    pub fn doc(&self, id: &str) -> Option<&IndexedTweet> {
        self.docs.get(id)
    }

    /// Documents in ascending id order.
    pub fn docs(&self) -> impl Iterator<Item = (&str, &IndexedTweet)> {
        self.docs.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Documents whose UTC day lies in `[start, end]`, in ascending id order.
    pub fn docs_between(
        &self,
        start: NaiveDate,
        end: NaiveDate,
    ) -> impl Iterator<Item = (&str, &IndexedTweet)> {
        self.docs().filter(move |(_, d)| (start..=end).contains(&d.day()))
    }

    pub fn date_range(&self) -> Option<(NaiveDate, NaiveDate)> {
        let first = self.by_date.keys().next()?;
        let last = self.by_date.keys().next_back()?;
        Some((*first, *last))
    }

    /// Ids of tweets containing every query term, newest first, at most `limit`.
    pub fn retrieve(&self, query: &Query, limit: usize) -> Vec<String> {
        self.retrieve_terms(query.terms.iter().map(String::as_str), limit)
    }

    pub fn retrieve_terms<'a>(&self, terms: impl IntoIterator<Item = &'a str>, limit: usize) -> Vec<String> {
        let mut lists: Vec<&[String]> = terms.into_iter().map(|t| self.postings(t)).collect();
        if lists.is_empty() {
            return Vec::new();
        }
        lists.sort_by_key(|l| l.len());
        let mut hits: Vec<&String> = lists[0]
            .iter()
            .filter(|id| lists[1..].iter().all(|l| l.binary_search(id).is_ok()))
            .collect();
        hits.sort_by(|a, b| {
            let ta = self.docs[a.as_str()].timestamp;
            let tb = self.docs[b.as_str()].timestamp;
            tb.cmp(&ta).then_with(|| a.cmp(b))
        });
        hits.into_iter().take(limit).cloned().collect()
    }

    /// One `token<TAB>id1,id2,...` line per posting list, sorted by token.
    pub fn dump_postings(&self) -> String {
        let mut out = String::new();
        for (token, ids) in &self.postings {
            out.push_str(token);
            out.push('\t');
            out.push_str(&ids.join(","));
            out.push('\n');
        }
        out
    }
}
