//! Independent reference implementations and data builders shared by the
//! integration tests. Everything here is recomputed from scratch, day by day
//! or list by list, without sharing code with the library.

#![allow(dead_code)]

use std::path::PathBuf;

use chrono::{TimeZone, Utc};
use epiwatch::detect::{DetectorParams, Method, SdMode};
use epiwatch::rank::{FeatureVector, LabeledExample};
use epiwatch::TokenizedTweet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/ehec")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sd(xs: &[f64], mode: SdMode) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    let d = match mode {
        SdMode::Sample => xs.len() as f64 - 1.0,
        SdMode::Population => xs.len() as f64,
    };
    (ss / d).sqrt()
}

fn degenerate(x: f64, mu: f64) -> f64 {
    if x > mu {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Two-pass baseline statistics recomputed for every scored day.
pub fn naive_detector(counts: &[u64], p: &DetectorParams) -> Vec<Option<f64>> {
    let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let (w, b) = (p.window, p.buffer);
    let first = w + b;
    let mut out = vec![None; xs.len()];
    let c2_at = |t: usize| -> f64 {
        let base = &xs[t - b - w..t - b];
        let (mu, s) = (mean(base), sd(base, p.sd_mode));
        if s == 0.0 {
            degenerate(xs[t], mu)
        } else {
            (xs[t] - mu) / s
        }
    };
    for t in first..xs.len() {
        let base = &xs[t - b - w..t - b];
        let (mu, s) = (mean(base), sd(base, p.sd_mode));
        let value = match p.method {
            Method::C1 | Method::C2 => c2_at(t),
            Method::C3 => (t.saturating_sub(2).max(first)..=t)
                .map(|u| (c2_at(u) - 1.0).max(0.0))
                .sum(),
            Method::FStat => {
                if s == 0.0 {
                    degenerate(xs[t], mu)
                } else {
                    let tail = &xs[t - b..=t];
                    tail.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / tail.len() as f64 / (s * s)
                }
            }
            Method::Ewma => {
                if s == 0.0 {
                    degenerate(xs[t], mu)
                } else {
                    let mut z = mean(&xs[..w]);
                    for &x in &xs[first..=t] {
                        z = p.omega * x + (1.0 - p.omega) * z;
                    }
                    (z - mu) / (s * (p.omega / (2.0 - p.omega)).sqrt())
                }
            }
        };
        out[t] = Some(value);
    }
    out
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Relevant items among the first `n` positions, over `n`.
pub fn oracle_precision(ratings: &[u8], n: usize) -> f64 {
    let mut hits = 0.0;
    for i in 0..n {
        if i < ratings.len() && ratings[i] > 0 {
            hits += 1.0;
        }
    }
    hits / n as f64
}

/// Sum of precision at each relevant rank, over the number of relevant items.
pub fn oracle_ap(ratings: &[u8]) -> Option<f64> {
    let relevant = ratings.iter().filter(|&&r| r > 0).count();
    if relevant == 0 {
        return None;
    }
    let sum: f64 = (1..=ratings.len())
        .filter(|&k| ratings[k - 1] > 0)
        .map(|k| oracle_precision(ratings, k))
        .sum();
    Some(sum / relevant as f64)
}

/// NDCG with base-2 logarithms; the ideal list is the ratings sorted descending.
pub fn oracle_ndcg(ratings: &[u8], n: usize) -> Option<f64> {
    let dcg = |rs: &[u8]| -> f64 {
        let mut total = 0.0;
        for j in 1..=n.min(rs.len()) {
            total += (2f64.powi(rs[j - 1] as i32) - 1.0) / (1.0 + j as f64).log2();
        }
        total
    };
    let mut ideal = ratings.to_vec();
    ideal.sort();
    ideal.reverse();
    let z = dcg(&ideal);
    (z > 0.0).then(|| dcg(ratings) / z)
}

/// Documents alternating between two disjoint vocabularies.
pub fn two_cluster_docs(n: usize, len: usize, seed: u64) -> (Vec<TokenizedTweet>, Vec<Vec<String>>) {
    let clusters: Vec<Vec<String>> = ["flu", "sport"]
        .iter()
        .map(|p| (0..12).map(|i| format!("{p}{i}")).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = (0..n)
        .map(|i| {
            let vocab = &clusters[i % 2];
            let text: Vec<&str> = (0..len).map(|_| vocab[rng.random_range(0..vocab.len())].as_str()).collect();
            TokenizedTweet::new(format!("d{i:04}"), &text.join(" "))
        })
        .collect();
    (docs, clusters)
}

/// Mean over topics of the largest share of its top-10 terms from one cluster.
pub fn topic_purity(model: &epiwatch::TopicModel, clusters: &[Vec<String>]) -> f64 {
    let mut total = 0.0;
    for z in 0..model.n_topics {
        let top = model.top_terms(z, 10).unwrap();
        let best = clusters
            .iter()
            .map(|c| top.iter().filter(|(t, _)| c.contains(t)).count())
            .max()
            .unwrap_or(0);
        total += best as f64 / top.len() as f64;
    }
    total / model.n_topics as f64
}

/// Random binary feature vectors labeled by a fixed positive linear rule,
/// grouped into queries of 20.
pub fn separable_examples(n: usize, seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rule = [0.0, 0.5, 1.0, 2.0, 1.5];
    (0..n)
        .map(|i| {
            let mut flags = [false; 5];
            flags[0] = true;
            for f in flags.iter_mut().skip(1) {
                *f = rng.random_bool(0.5);
            }
            let features = FeatureVector::from_flags(flags);
            let score: f64 = features.0.iter().zip(rule).map(|(x, w)| x * w).sum();
            LabeledExample {
                query_id: format!("q{}", i / 20),
                tweet_id: format!("t{i}"),
                timestamp: Utc.timestamp_opt(1_300_000_000 + i as i64, 0).unwrap(),
                features,
                label: u8::from(score >= 2.5),
            }
        })
        .collect()
}
