//! Hard-negative mining from the frozen degenerator.
//!
//! Candidates come from group beam search with a Hamming diversity penalty,
//! are scored by LCS against the gold knowledge and the top `m` are kept.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_atomic, DialogueExample, TokenId, Vocabulary};
use crate::decoding::{advance, expand, rank, start, Hypothesis, Live, StepScorer};
use crate::error::{Error, Result};
use crate::metrics::lcs_length;
use crate::model::{build_source, Seq2Seq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupBeamConfig {
    pub beam_size: usize,
    pub num_groups: usize,
    pub diversity_penalty: f64,
    pub max_target_len: usize,
}

impl Default for GroupBeamConfig {
    fn default() -> Self {
        GroupBeamConfig {
            beam_size: 32,
            num_groups: 8,
            diversity_penalty: 0.5,
            max_target_len: 48,
        }
    }
}

impl GroupBeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_groups == 0 || self.beam_size < self.num_groups {
            return Err(Error::Config(format!(
                "need beam_size >= num_groups >= 1, got {} and {}",
                self.beam_size, self.num_groups
            )));
        }
        if !self.beam_size.is_multiple_of(self.num_groups) {
            return Err(Error::Config(format!(
                "num_groups ({}) must divide beam_size ({})",
                self.num_groups, self.beam_size
            )));
        }
        if self.diversity_penalty.is_nan() || self.diversity_penalty < 0.0 {
            return Err(Error::Config(
                "diversity_penalty must be non-negative".into(),
            ));
        }
        if self.max_target_len == 0 {
            return Err(Error::Config("max_target_len must be positive".into()));
        }
        Ok(())
    }
}

/// Group beam search. Groups of `beam_size / num_groups` beams advance in
/// lockstep; at each step a group's ranking is penalized by
/// `diversity_penalty` times the number of times earlier groups chose the
/// same token at that step. Each group contributes its best
/// `beam_size / num_groups` hypotheses, scored by true log-probability.
pub fn group_beam_search<S: StepScorer>(
    state: S,
    cfg: &GroupBeamConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let width = cfg.beam_size / cfg.num_groups;
    let root = start(state)?;
    let mut groups: Vec<Vec<Live<S>>> = vec![vec![root]; cfg.num_groups];
    let mut done: Vec<Vec<Hypothesis>> = vec![Vec::new(); cfg.num_groups];
    while groups.iter().any(|g| !g.is_empty()) {
        let mut counts: HashMap<TokenId, usize> = HashMap::new();
        for (beams, finished) in groups.iter_mut().zip(&mut done) {
            if beams.is_empty() {
                continue;
            }
            let penalty = |tok| match counts.get(&tok) {
                Some(&n) if n > 0 => cfg.diversity_penalty * n as f64,
                _ => 0.0,
            };
            let chosen = expand(beams, width, penalty);
            for &(_, tok, _, _) in &chosen {
                *counts.entry(tok).or_default() += 1;
            }
            *beams = advance(beams, &chosen, finished, cfg.max_target_len)?;
        }
    }
    let mut out = Vec::with_capacity(cfg.beam_size);
    for mut finished in done {
        finished.sort_by(|a, b| rank((&a.tokens, a.log_score), (&b.tokens, b.log_score)));
        finished.truncate(width);
        out.extend(finished);
    }
    Ok(out)
}

/// LCS length between a candidate and the knowledge.
pub fn oracle_score(candidate: &[TokenId], knowledge: &[TokenId]) -> usize {
    lcs_length(candidate, knowledge)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    /// Response tokens without the trailing EOS.
    pub tokens: Vec<TokenId>,
    pub oracle: usize,
    pub log_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardNegativePool {
    pub example_id: String,
    /// Unique candidates in ranked order.
    pub candidates: Vec<ScoredCandidate>,
    /// The first `m` of `candidates`.
    pub retained: Vec<ScoredCandidate>,
    /// How many fewer than `m` unique candidates were found.
    pub shortfall: usize,
}

/// Deduplicates and ranks by oracle score, then log score, then token order,
/// keeping the top `m`.
pub fn select_top(
    example_id: &str,
    hyps: &[Hypothesis],
    knowledge: &[TokenId],
    m: usize,
) -> HardNegativePool {
    let mut unique: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
    for h in hyps {
        let entry = unique.entry(h.body().to_vec()).or_insert(f64::NEG_INFINITY);
        *entry = entry.max(h.log_score);
    }
    let mut candidates: Vec<ScoredCandidate> = unique
        .into_iter()
        .map(|(tokens, log_score)| ScoredCandidate {
            oracle: oracle_score(&tokens, knowledge),
            tokens,
            log_score,
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.oracle
            .cmp(&a.oracle)
            .then_with(|| b.log_score.total_cmp(&a.log_score))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let retained: Vec<_> = candidates.iter().take(m).cloned().collect();
    HardNegativePool {
        example_id: example_id.to_string(),
        shortfall: m - retained.len(),
        candidates,
        retained,
    }
}

pub fn mine_hard_negatives(
    degenerator: &Seq2Seq,
    vocab: &Vocabulary,
    example: &DialogueExample,
    cfg: &GroupBeamConfig,
    m: usize,
) -> Result<HardNegativePool> {
    if m > cfg.beam_size {
        return Err(Error::Config(format!(
            "m ({m}) exceeds beam_size ({})",
            cfg.beam_size
        )));
    }
    let source = build_source(example, vocab, degenerator.config().max_source_len)?;
    let encoding = degenerator.encode_source(&source)?;
    let cfg = GroupBeamConfig {
        max_target_len: cfg.max_target_len.min(degenerator.config().max_target_len),
        ..cfg.clone()
    };
    let hyps = group_beam_search(degenerator.start_decoder(&encoding), &cfg)?;
    let knowledge = vocab.encode(example.gold_knowledge());
    let pool = select_top(&example.id, &hyps, &knowledge, m);
    if pool.shortfall > 0 {
        log::debug!(
            "{}: only {} unique negatives",
            example.id,
            pool.retained.len()
        );
    }
    Ok(pool)
}

/// Mines every example; `parallel` spreads examples over the rayon pool.
/// Results are identical either way.
pub fn mine_corpus(
    degenerator: &Seq2Seq,
    vocab: &Vocabulary,
    examples: &[DialogueExample],
    cfg: &GroupBeamConfig,
    m: usize,
    parallel: bool,
) -> Result<Vec<HardNegativePool>> {
    let mine = |ex: &DialogueExample| mine_hard_negatives(degenerator, vocab, ex, cfg, m);
    if parallel {
        examples.par_iter().map(mine).collect()
    } else {
        examples.iter().map(mine).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    id: String,
    negatives: Vec<ScoredCandidate>,
    degenerator_hash: String,
}

/// Retained negatives per example id, tied to one degenerator.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NegativeCache {
    pub degenerator_hash: String,
    pub pools: BTreeMap<String, Vec<ScoredCandidate>>,
}

impl NegativeCache {
    pub fn from_pools(degenerator_hash: &str, pools: &[HardNegativePool]) -> Self {
        NegativeCache {
            degenerator_hash: degenerator_hash.to_string(),
            pools: pools
                .iter()
                .map(|p| (p.example_id.clone(), p.retained.clone()))
                .collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, negatives) in &self.pools {
            let line = CacheLine {
                id: id.clone(),
                negatives: negatives.clone(),
                degenerator_hash: self.degenerator_hash.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("cache line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Parses a cache, failing with a stale-cache error if any line was
    /// mined by a different degenerator.
    pub fn parse(text: &str, expected_hash: &str) -> Result<Self> {
        let mut pools = BTreeMap::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let parsed: CacheLine = serde_json::from_str(line).map_err(|e| Error::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            if parsed.degenerator_hash != expected_hash {
                return Err(Error::StaleCache(format!(
                    "line {} was mined by degenerator {}, expected {expected_hash}",
                    i + 1,
                    parsed.degenerator_hash
                )));
            }
            pools.insert(parsed.id, parsed.negatives);
        }
        Ok(NegativeCache {
            degenerator_hash: expected_hash.to_string(),
            pools,
        })
    }

    pub fn load(path: &Path, expected_hash: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, expected_hash)
    }

    pub fn get(&self, id: &str) -> Option<&[ScoredCandidate]> {
        self.pools.get(id).map(Vec::as_slice)
    }
}
