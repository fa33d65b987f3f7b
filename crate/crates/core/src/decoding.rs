//! Beam search, greedy decoding and nucleus sampling.
//!
//! Search runs over any [`StepScorer`]: a cloneable decoder state that
//! consumes one token and returns next-token log-probabilities. The model's
//! [`IncrementalDecoder`] is one; tests use small hand-written tables.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{GenerationRecord, TokenId, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{IncrementalDecoder, Seq2Seq, SourceEncoding};

pub trait StepScorer: Clone {
    /// Consumes `token` and returns log-probabilities for the next token.
    fn push(&mut self, token: TokenId) -> Result<Vec<f64>>;
}

impl StepScorer for IncrementalDecoder<'_> {
    fn push(&mut self, token: TokenId) -> Result<Vec<f64>> {
        IncrementalDecoder::push(self, token).map(|logits| crate::model::log_softmax(&logits))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Beam,
    Greedy,
    Nucleus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub nucleus_p: f64,
    /// Generated tokens including EOS; capped further by the model.
    pub max_target_len: usize,
    pub seed: u64,
    /// Rank finished hypotheses by mean rather than summed log-probability.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_size: 3,
            nucleus_p: 0.9,
            max_target_len: 48,
            seed: 0,
            length_normalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn beam(beam_size: usize) -> Self {
        DecodeConfig {
            beam_size,
            ..Default::default()
        }
    }

    pub fn greedy() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            ..Default::default()
        }
    }

    pub fn nucleus(p: f64, seed: u64) -> Self {
        DecodeConfig {
            strategy: Strategy::Nucleus,
            nucleus_p: p,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::Config(format!(
                "nucleus_p must lie in (0, 1], got {}",
                self.nucleus_p
            )));
        }
        if self.max_target_len == 0 {
            return Err(Error::Config("max_target_len must be positive".into()));
        }
        Ok(())
    }

    /// Short label such as `beam-3`, `greedy` or `nucleus-0.9`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Beam => format!("beam-{}", self.beam_size),
            Strategy::Greedy => "greedy".into(),
            Strategy::Nucleus => format!("nucleus-{}", self.nucleus_p),
        }
    }
}

/// A decoded token sequence. `tokens` ends with EOS unless `truncated`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_score: f64,
    pub truncated: bool,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn body(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    fn rank_score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.log_score / self.tokens.len() as f64
        } else {
            self.log_score
        }
    }
}

#[derive(Clone)]
pub(crate) struct Live<S> {
    pub tokens: Vec<TokenId>,
    pub log_score: f64,
    pub state: S,
    pub next: Vec<f64>,
}

/// Higher score first, then the lexicographically smaller sequence.
pub(crate) fn rank(a: (&[TokenId], f64), b: (&[TokenId], f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

pub(crate) fn start<S: StepScorer>(mut state: S) -> Result<Live<S>> {
    let next = state.push(BOS)?;
    Ok(Live {
        tokens: Vec::new(),
        log_score: 0.0,
        state,
        next,
    })
}

/// One expansion step: the best `width` continuations of `beams`, with an
/// optional per-token penalty applied to the ranking only.
pub(crate) fn expand<S: StepScorer>(
    beams: &[Live<S>],
    width: usize,
    penalty: impl Fn(TokenId) -> f64,
) -> Vec<(usize, TokenId, f64, f64)> {
    let mut cands: Vec<(usize, TokenId, f64, f64)> = Vec::new();
    for (i, b) in beams.iter().enumerate() {
        for (tok, &lp) in b.next.iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let score = b.log_score + lp;
            cands.push((i, tok as TokenId, score, score - penalty(tok as TokenId)));
        }
    }
    cands.sort_by(|a, b| {
        b.3.total_cmp(&a.3)
            .then_with(|| beams[a.0].tokens.cmp(&beams[b.0].tokens))
            .then_with(|| a.1.cmp(&b.1))
    });
    cands.truncate(width);
    cands
}

/// Advances selected candidates; finished ones go to `done`.
pub(crate) fn advance<S: StepScorer>(
    beams: &[Live<S>],
    chosen: &[(usize, TokenId, f64, f64)],
    done: &mut Vec<Hypothesis>,
    max_len: usize,
) -> Result<Vec<Live<S>>> {
    let mut next = Vec::new();
    for &(i, tok, score, _) in chosen {
        let mut tokens = beams[i].tokens.clone();
        tokens.push(tok);
        if tok == EOS {
            done.push(Hypothesis {
                tokens,
                log_score: score,
                truncated: false,
            });
        } else if tokens.len() >= max_len {
            done.push(Hypothesis {
                tokens,
                log_score: score,
                truncated: true,
            });
        } else {
            let mut state = beams[i].state.clone();
            let lp = state.push(tok)?;
            next.push(Live {
                tokens,
                log_score: score,
                state,
                next: lp,
            });
        }
    }
    Ok(next)
}

/// Every hypothesis that finished or hit the length limit, best first.
pub fn beam_search_all<S: StepScorer>(
    state: S,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 || max_len == 0 {
        return Err(Error::Config(
            "beam size and length limit must be positive".into(),
        ));
    }
    let mut beams = vec![start(state)?];
    let mut done = Vec::new();
    while !beams.is_empty() {
        let chosen = expand(&beams, beam_size, |_| 0.0);
        beams = advance(&beams, &chosen, &mut done, max_len)?;
    }
    done.sort_by(|a, b| rank((&a.tokens, a.log_score), (&b.tokens, b.log_score)));
    Ok(done)
}

fn best(mut hyps: Vec<Hypothesis>, normalize: bool) -> Hypothesis {
    let finished = hyps.iter().any(|h| !h.truncated);
    hyps.retain(|h| h.truncated != finished);
    hyps.into_iter()
        .min_by(|a, b| {
            rank(
                (&a.tokens, a.rank_score(normalize)),
                (&b.tokens, b.rank_score(normalize)),
            )
        })
        .expect("search yields at least one hypothesis")
}

/// Highest-scoring completed hypothesis, or the best partial one flagged
/// as truncated when none reaches EOS.
pub fn beam_search<S: StepScorer>(
    state: S,
    beam_size: usize,
    max_len: usize,
    normalize: bool,
) -> Result<Hypothesis> {
    Ok(best(beam_search_all(state, beam_size, max_len)?, normalize))
}

/// Draws a token from the smallest most-probable set with mass at least `p`,
/// renormalized. Kept tokens are visited in id order, so `p = 1` is plain
/// ancestral sampling.
pub fn nucleus_sample<R: Rng + ?Sized>(probs: &[f64], p: f64, rng: &mut R) -> TokenId {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = vec![false; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        keep[i] = true;
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    let mut u = rng.random::<f64>() * mass;
    let mut last = 0;
    for (i, &pi) in probs.iter().enumerate() {
        if keep[i] && pi > 0.0 {
            last = i;
            u -= pi;
            if u < 0.0 {
                return i as TokenId;
            }
        }
    }
    last as TokenId
}

pub fn nucleus_decode<S: StepScorer, R: Rng + ?Sized>(
    state: S,
    p: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Hypothesis> {
    let mut live = start(state)?;
    loop {
        let probs: Vec<f64> = live.next.iter().map(|lp| lp.exp()).collect();
        let tok = nucleus_sample(&probs, p, rng);
        live.log_score += live.next[tok as usize];
        live.tokens.push(tok);
        if tok == EOS || live.tokens.len() >= max_len {
            return Ok(Hypothesis {
                truncated: tok != EOS,
                tokens: live.tokens,
                log_score: live.log_score,
            });
        }
        live.next = live.state.push(tok)?;
    }
}

/// Runs the configured strategy over any scorer.
pub fn decode_with<S: StepScorer>(state: S, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Beam => beam_search(
            state,
            cfg.beam_size,
            cfg.max_target_len,
            cfg.length_normalize,
        ),
        Strategy::Greedy => beam_search(state, 1, cfg.max_target_len, cfg.length_normalize),
        Strategy::Nucleus => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            nucleus_decode(state, cfg.nucleus_p, cfg.max_target_len, &mut rng)
        }
    }
}

/// Decodes one source with the model. Nucleus sampling is reseeded per
/// example from `cfg.seed` and `example_id` so results do not depend on
/// evaluation order.
pub fn decode(
    model: &Seq2Seq,
    encoding: &SourceEncoding,
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
    example_id: &str,
) -> Result<GenerationRecord> {
    let mut cfg = cfg.clone();
    cfg.max_target_len = cfg.max_target_len.min(model.config().max_target_len);
    if cfg.strategy == Strategy::Nucleus {
        cfg.seed = example_seed(cfg.seed, example_id);
    }
    let hyp = decode_with(model.start_decoder(encoding), &cfg)?;
    Ok(GenerationRecord {
        example_id: example_id.to_string(),
        generated: vocab.decode(hyp.body()),
        decoder: cfg.label(),
        params: serde_json::json!({
            "beam_size": cfg.beam_size,
            "nucleus_p": cfg.nucleus_p,
            "max_target_len": cfg.max_target_len,
            "seed": cfg.seed,
            "length_normalize": cfg.length_normalize,
        }),
        log_score: hyp.log_score,
        truncated: hyp.truncated,
    })
}

fn example_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    id.bytes().fold(0xcbf2_9ce4_8422_2325 ^ seed, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}
