//! Knowledge-regurgitation metrics.
//!
//! Every metric works on a (gold knowledge, response) token pair. Corpus-level
//! aggregates and the KP-n histogram feed the [`MetricsReport`].

mod report;

use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use report::{build_report, CorpusMetrics, ExampleMetrics, MetricsReport};

/// PLCS strictly above this marks a degenerated sample.
pub const POD_THRESHOLD: f64 = 0.7;
pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Copy)]
pub struct KnowledgeResponsePair<'a, T = String> {
    pub knowledge: &'a [T],
    pub response: &'a [T],
}

impl<'a, T> KnowledgeResponsePair<'a, T> {
    pub fn new(knowledge: &'a [T], response: &'a [T]) -> Self {
        KnowledgeResponsePair {
            knowledge,
            response,
        }
    }
}

/// Length of the longest common (not necessarily contiguous) subsequence.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    if b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `lcs(k, y) / |y|`.
pub fn plcs<T: PartialEq>(pair: &KnowledgeResponsePair<'_, T>) -> Result<f64> {
    if pair.response.is_empty() {
        return Err(Error::UndefinedMetric("PLCS of an empty response".into()));
    }
    Ok(lcs_length(pair.knowledge, pair.response) as f64 / pair.response.len() as f64)
}

fn ngram_set<T: Eq + Hash>(seq: &[T], n: usize) -> HashSet<&[T]> {
    if seq.len() < n {
        return HashSet::new();
    }
    seq.windows(n).collect()
}

fn check_order(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Parameter("n-gram order must be at least 1".into()));
    }
    Ok(())
}

/// Whether the knowledge and response n-gram sets intersect. Pairs shorter
/// than `n` on either side never share a gram.
pub fn shares_ngram<T: Eq + Hash>(pair: &KnowledgeResponsePair<'_, T>, n: usize) -> bool {
    if pair.knowledge.len() < n || pair.response.len() < n {
        return false;
    }
    let k = ngram_set(pair.knowledge, n);
    pair.response.windows(n).any(|g| k.contains(g))
}

/// Fraction of pairs whose knowledge and response share at least one n-gram.
pub fn dup_n<T: Eq + Hash>(pairs: &[KnowledgeResponsePair<'_, T>], n: usize) -> Result<f64> {
    check_order(n)?;
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("Dup-n of an empty corpus".into()));
    }
    let hits = pairs.iter().filter(|p| shares_ngram(p, n)).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Fraction of response n-grams (counted with multiplicity) found in the
/// knowledge n-gram set.
pub fn kp_n<T: Eq + Hash>(pair: &KnowledgeResponsePair<'_, T>, n: usize) -> Result<f64> {
    check_order(n)?;
    if pair.response.len() < n {
        return Err(Error::UndefinedMetric(format!(
            "KP-{n} of a response with {} tokens",
            pair.response.len()
        )));
    }
    let k = ngram_set(pair.knowledge, n);
    let total = pair.response.len() - n + 1;
    let hits = pair.response.windows(n).filter(|g| k.contains(g)).count();
    Ok(hits as f64 / total as f64)
}

fn eligible_kp<T: Eq + Hash>(pairs: &[KnowledgeResponsePair<'_, T>], n: usize) -> Result<Vec<f64>> {
    check_order(n)?;
    let values: Vec<f64> = pairs
        .iter()
        .filter(|p| p.response.len() >= n)
        .map(|p| kp_n(p, n))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "no response long enough for KP-{n}"
        )));
    }
    Ok(values)
}

/// Mean KP-n over pairs with at least `n` response tokens.
pub fn mkp_n<T: Eq + Hash>(pairs: &[KnowledgeResponsePair<'_, T>], n: usize) -> Result<f64> {
    let v = eligible_kp(pairs, n)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Proportion of degenerated samples (PLCS > 0.7). An empty response is never
/// degenerated.
pub fn pod<T: PartialEq>(pairs: &[KnowledgeResponsePair<'_, T>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("PoD of an empty corpus".into()));
    }
    let hits = pairs
        .iter()
        .filter(|p| plcs(p).map(|v| v > POD_THRESHOLD).unwrap_or(false))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpHistogram {
    pub n: usize,
    pub bin_edges: Vec<f64>,
    pub masses: Vec<f64>,
}

impl KpHistogram {
    /// Bins values in [0, 1] into ten uniform bins, the last one closed.
    pub fn from_values(n: usize, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::UndefinedMetric("histogram of no values".into()));
        }
        let mut counts = [0usize; HISTOGRAM_BINS];
        for &v in values {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("KP value {v} outside [0, 1]")));
            }
            let bin = ((v * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
            counts[bin] += 1;
        }
        Ok(KpHistogram {
            n,
            bin_edges: (0..=HISTOGRAM_BINS)
                .map(|i| i as f64 / HISTOGRAM_BINS as f64)
                .collect(),
            masses: counts
                .iter()
                .map(|&c| c as f64 / values.len() as f64)
                .collect(),
        })
    }
}

pub fn kp_histogram<T: Eq + Hash>(
    pairs: &[KnowledgeResponsePair<'_, T>],
    n: usize,
) -> Result<KpHistogram> {
    KpHistogram::from_values(n, &eligible_kp(pairs, n)?)
}

/// Knowledge-utilization divergence: `100 * mean_bins |h - g|`.
pub fn kud(human: &KpHistogram, generated: &KpHistogram) -> Result<f64> {
    if human.masses.len() != generated.masses.len() || human.bin_edges != generated.bin_edges {
        return Err(Error::Shape(format!(
            "histograms with {} and {} bins",
            human.masses.len(),
            generated.masses.len()
        )));
    }
    let mae = human
        .masses
        .iter()
        .zip(&generated.masses)
        .map(|(h, g)| (h - g).abs())
        .sum::<f64>()
        / human.masses.len() as f64;
    Ok(100.0 * mae)
}
