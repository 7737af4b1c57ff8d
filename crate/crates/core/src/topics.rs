//! Latent Dirichlet allocation fitted by collapsed Gibbs sampling.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::index::TokenizedTweet;

#[derive(Debug, Error, PartialEq)]
pub enum TopicError {
    #[error("cannot fit a topic model on an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary is empty after stop-token removal")]
    EmptyVocabulary,
    #[error("invalid LDA parameters: {0}")]
    InvalidParams(String),
    #[error("topic {topic} out of range for a {n_topics}-topic model")]
    TopicOutOfRange { topic: usize, n_topics: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdaParams {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Fraction of the vocabulary, most frequent first, dropped before fitting.
    pub stop_fraction: f64,
}

impl LdaParams {
    /// `alpha = 50/k`, `beta = 0.01`, 1000 sweeps, top 0.5% of tokens stopped.
    pub fn new(k: usize) -> Self {
        LdaParams {
            k,
            alpha: 50.0 / k.max(1) as f64,
            beta: 0.01,
            iterations: 1000,
            seed: 0,
            stop_fraction: 0.005,
        }
    }

    fn validate(&self) -> Result<(), TopicError> {
        let bad = |m: String| Err(TopicError::InvalidParams(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad(format!("alpha and beta must be positive, got {} and {}", self.alpha, self.beta));
        }
        if !(0.0..1.0).contains(&self.stop_fraction) {
            return bad(format!("stop_fraction must lie in [0, 1), got {}", self.stop_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    pub n_topics: usize,
    pub vocabulary: Vec<String>,
    /// `n_topics` rows over `vocabulary`.
    pub topic_word: Vec<Vec<f64>>,
    /// One row per input document, in input order.
    pub doc_topic: Vec<Vec<f64>>,
    pub doc_ids: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub stop_tokens: Vec<String>,
    pub warnings: Vec<String>,
}

/// A stable per-document stream seed, independent of document order.
fn doc_seed(seed: u64, doc_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(doc_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// The `floor(fraction·|V|)` most frequent tokens, ties broken lexicographically.
fn stop_tokens(freq: &BTreeMap<&str, usize>, fraction: f64) -> Vec<String> {
    let n_stop = (fraction * freq.len() as f64).floor() as usize;
    let mut by_freq: Vec<(&str, usize)> = freq.iter().map(|(t, c)| (*t, *c)).collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    by_freq.into_iter().take(n_stop).map(|(t, _)| t.to_string()).collect()
}

pub fn fit_lda(docs: &[TokenizedTweet], params: &LdaParams) -> Result<TopicModel, TopicError> {
    params.validate()?;
    if docs.is_empty() {
        return Err(TopicError::EmptyCorpus);
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        for t in &doc.tokens {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let stopped = stop_tokens(&freq, params.stop_fraction);
    for s in &stopped {
        freq.remove(s.as_str());
    }
    if freq.is_empty() {
        return Err(TopicError::EmptyVocabulary);
    }
    let vocabulary: Vec<String> = freq.keys().map(|t| t.to_string()).collect();
    let word_id: HashMap<&str, usize> = vocabulary
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let k = params.k;
    let v = vocabulary.len();
    let mut warnings = Vec::new();
    if k > v {
        let msg = format!("{k} topics requested for a vocabulary of {v} terms");
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let words: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| d.tokens.iter().filter_map(|t| word_id.get(t.as_str()).copied()).collect())
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = docs
        .iter()
        .map(|d| ChaCha8Rng::seed_from_u64(doc_seed(params.seed, &d.tweet_id)))
        .collect();

    let mut doc_topic_counts = vec![vec![0u32; k]; docs.len()];
    let mut topic_word_counts = vec![0u32; k * v];
    let mut topic_counts = vec![0u32; k];
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(docs.len());
    for (d, ws) in words.iter().enumerate() {
        let zs: Vec<usize> = ws.iter().map(|_| rngs[d].random_range(0..k)).collect();
        for (&w, &z) in ws.iter().zip(&zs) {
            doc_topic_counts[d][z] += 1;
            topic_word_counts[z * v + w] += 1;
            topic_counts[z] += 1;
        }
        assignments.push(zs);
    }

    let (alpha, beta) = (params.alpha, params.beta);
    let v_beta = v as f64 * beta;
    let mut weights = vec![0.0f64; k];
    for _ in 0..params.iterations {
        for (d, ws) in words.iter().enumerate() {
            let rng = &mut rngs[d];
            for (i, &w) in ws.iter().enumerate() {
                let old = assignments[d][i];
                doc_topic_counts[d][old] -= 1;
                topic_word_counts[old * v + w] -= 1;
                topic_counts[old] -= 1;

                let mut total = 0.0;
                for (z, weight) in weights.iter_mut().enumerate() {
                    *weight = (f64::from(doc_topic_counts[d][z]) + alpha)
                        * (f64::from(topic_word_counts[z * v + w]) + beta)
                        / (f64::from(topic_counts[z]) + v_beta);
                    total += *weight;
                }
                let mut u = rng.random::<f64>() * total;
                let mut new = k - 1;
                for (z, weight) in weights.iter().enumerate() {
                    if u < *weight {
                        new = z;
                        break;
                    }
                    u -= weight;
                }

                assignments[d][i] = new;
                doc_topic_counts[d][new] += 1;
                topic_word_counts[new * v + w] += 1;
                topic_counts[new] += 1;
            }
        }
    }

    let topic_word = (0..k)
        .map(|z| {
            let denom = f64::from(topic_counts[z]) + v_beta;
            (0..v)
                .map(|w| (f64::from(topic_word_counts[z * v + w]) + beta) / denom)
                .collect()
        })
        .collect();
    let k_alpha = k as f64 * alpha;
    let doc_topic = doc_topic_counts
        .iter()
        .zip(&words)
        .map(|(row, ws)| {
            let denom = ws.len() as f64 + k_alpha;
            row.iter().map(|&c| (f64::from(c) + alpha) / denom).collect()
        })
        .collect();

    Ok(TopicModel {
        n_topics: k,
        vocabulary,
        topic_word,
        doc_topic,
        doc_ids: docs.iter().map(|d| d.tweet_id.clone()).collect(),
        alpha,
        beta,
        seed: params.seed,
        stop_tokens: stopped,
        warnings,
    })
}

impl TopicModel {
    /// The `n` most probable terms of `topic`, descending, ties lexicographic.
    pub fn top_terms(&self, topic: usize, n: usize) -> Result<Vec<(String, f64)>, TopicError> {
        let row = self.topic_word.get(topic).ok_or(TopicError::TopicOutOfRange {
            topic,
            n_topics: self.n_topics,
        })?;
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .total_cmp(&row[a])
                .then_with(|| self.vocabulary[a].cmp(&self.vocabulary[b]))
        });
        Ok(order
            .into_iter()
            .take(n)
            .map(|i| (self.vocabulary[i].clone(), row[i]))
            .collect())
    }

    /// One block per topic with its top `n` `term probability` lines.
    pub fn dump(&self, n: usize) -> String {
        let mut out = String::new();
        for z in 0..self.n_topics {
            out.push_str(&format!("topic {z}\n"));
            for (term, p) in self.top_terms(z, n).expect("topic in range") {
                out.push_str(&format!("{term} {p:.6}\n"));
            }
            out.push('\n');
        }
        out
    }
}
