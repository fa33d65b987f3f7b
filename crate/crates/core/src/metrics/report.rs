use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{
    dup_n, kp_histogram, kp_n, kud, lcs_length, mkp_n, pod, KnowledgeResponsePair, KpHistogram,
};
use crate::corpus::{Corpus, GenerationRecord};
use crate::error::{Error, Result};

/// Aggregates for one side (references or generations) against gold knowledge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    pub dup_16: f64,
    pub dup_32: f64,
    pub plcs_mean: f64,
    pub mkp_1: Option<f64>,
    pub mkp_2: Option<f64>,
    pub pod: f64,
    pub kp1_histogram: Option<KpHistogram>,
    pub kp2_histogram: Option<KpHistogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub id: String,
    pub plcs: f64,
    pub kp_1: Option<f64>,
    pub reference_plcs: f64,
    pub reference_kp_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_examples: usize,
    pub generated: CorpusMetrics,
    pub reference: CorpusMetrics,
    /// KP-1 histogram divergence of generations from references.
    pub kud: Option<f64>,
    pub per_example: Vec<ExampleMetrics>,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("id,plcs,kp_1,reference_plcs,reference_kp_1\n");
        for e in &self.per_example {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.id,
                e.plcs,
                opt(e.kp_1),
                e.reference_plcs,
                opt(e.reference_kp_1)
            ));
        }
        out
    }
}

fn plcs_or_zero(p: &KnowledgeResponsePair<'_>) -> f64 {
    if p.response.is_empty() {
        0.0
    } else {
        lcs_length(p.knowledge, p.response) as f64 / p.response.len() as f64
    }
}

fn side(pairs: &[KnowledgeResponsePair<'_>]) -> Result<CorpusMetrics> {
    Ok(CorpusMetrics {
        dup_16: dup_n(pairs, 16)?,
        dup_32: dup_n(pairs, 32)?,
        plcs_mean: pairs.iter().map(plcs_or_zero).sum::<f64>() / pairs.len() as f64,
        mkp_1: mkp_n(pairs, 1).ok(),
        mkp_2: mkp_n(pairs, 2).ok(),
        pod: pod(pairs)?,
        kp1_histogram: kp_histogram(pairs, 1).ok(),
        kp2_histogram: kp_histogram(pairs, 2).ok(),
    })
}

/// Scores generations against the gold knowledge of `references`, using the
/// reference responses as the human KP-1 distribution.
///
/// Every reference id must have exactly one generation and vice versa.
pub fn build_report(
    references: &Corpus,
    generations: &[GenerationRecord],
) -> Result<MetricsReport> {
    if references.is_empty() {
        return Err(Error::UndefinedMetric("report over an empty corpus".into()));
    }
    let mut by_id: HashMap<&str, &GenerationRecord> = HashMap::with_capacity(generations.len());
    for g in generations {
        if by_id.insert(g.example_id.as_str(), g).is_some() {
            return Err(Error::Alignment(format!(
                "duplicate generation for `{}`",
                g.example_id
            )));
        }
    }
    if generations.len() != references.len() {
        return Err(Error::Alignment(format!(
            "{} generations for {} references",
            generations.len(),
            references.len()
        )));
    }
    let mut gen_pairs = Vec::with_capacity(references.len());
    let mut ref_pairs = Vec::with_capacity(references.len());
    for ex in references.examples() {
        let g = by_id
            .get(ex.id.as_str())
            .ok_or_else(|| Error::Alignment(format!("no generation for `{}`", ex.id)))?;
        gen_pairs.push(KnowledgeResponsePair::new(
            ex.gold_knowledge(),
            &g.generated[..],
        ));
        ref_pairs.push(KnowledgeResponsePair::new(
            ex.gold_knowledge(),
            &ex.response[..],
        ));
    }

    let generated = side(&gen_pairs)?;
    let reference = side(&ref_pairs)?;
    let kud = match (&reference.kp1_histogram, &generated.kp1_histogram) {
        (Some(h), Some(g)) => Some(kud(h, g)?),
        _ => None,
    };
    let per_example = references
        .examples()
        .iter()
        .zip(gen_pairs.iter().zip(&ref_pairs))
        .map(|(ex, (g, r))| ExampleMetrics {
            id: ex.id.clone(),
            plcs: plcs_or_zero(g),
            kp_1: kp_n(g, 1).ok(),
            reference_plcs: plcs_or_zero(r),
            reference_kp_1: kp_n(r, 1).ok(),
        })
        .collect();
    Ok(MetricsReport {
        n_examples: references.len(),
        generated,
        reference,
        kud,
        per_example,
        notes: vec![
            "dup_n: pairs with fewer than n tokens on either side contribute 0".into(),
            "kp_n: responses shorter than n are excluded from means and histograms".into(),
            "plcs: an empty generation scores 0 and is never degenerated".into(),
            "kud: 100 * mean absolute difference over 10 uniform KP-1 bins".into(),
        ],
    })
}
