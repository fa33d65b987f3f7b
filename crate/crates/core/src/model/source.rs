use crate::corpus::{DialogueExample, TokenId, Vocabulary, BOS, EOS, SEP};
use crate::error::{Error, Result};

/// Flattened model input for one example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceInput {
    pub ids: Vec<TokenId>,
    /// True exactly on the gold-knowledge positions.
    pub knowledge_token_mask: Vec<bool>,
}

impl SourceInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unique ids of the gold-knowledge tokens, ascending.
    pub fn knowledge_ids(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = self
            .ids
            .iter()
            .zip(&self.knowledge_token_mask)
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Emits `BOS u1 SEP u2 SEP … SEP k EOS`.
///
/// Context is cut from the oldest end when the result exceeds
/// `max_source_len`: whole turns first, then the oldest surviving turn from
/// its left. The knowledge sentence is never cut.
pub fn build_source(
    example: &DialogueExample,
    vocab: &Vocabulary,
    max_source_len: usize,
) -> Result<SourceInput> {
    let knowledge = vocab.encode(example.gold_knowledge());
    if knowledge.len() + 2 > max_source_len {
        return Err(Error::Config(format!(
            "gold knowledge of `{}` has {} tokens, max_source_len is {max_source_len}",
            example.id,
            knowledge.len()
        )));
    }
    let budget = max_source_len - knowledge.len() - 2;
    let mut turns: Vec<Vec<TokenId>> = example.context.iter().map(|t| vocab.encode(t)).collect();
    // every kept turn costs its tokens plus one SEP
    let cost = |turns: &[Vec<TokenId>]| turns.iter().map(|t| t.len() + 1).sum::<usize>();
    while !turns.is_empty() && cost(&turns) > budget {
        let over = cost(&turns) - budget;
        if turns[0].len() <= over {
            turns.remove(0);
        } else {
            turns[0].drain(..over);
        }
    }

    let mut ids = vec![BOS];
    for t in &turns {
        ids.extend_from_slice(t);
        ids.push(SEP);
    }
    let offset = ids.len();
    ids.extend_from_slice(&knowledge);
    ids.push(EOS);
    let mut mask = vec![false; ids.len()];
    mask[offset..offset + knowledge.len()].fill(true);
    Ok(SourceInput {
        ids,
        knowledge_token_mask: mask,
    })
}

/// Decoder input `BOS y1 … y_{T-1}` for a target `y1 … yT` (which ends in EOS).
pub fn decoder_input(target: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(target.len());
    v.push(BOS);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

/// Response ids followed by EOS.
pub fn decoder_target(response: &[TokenId]) -> Vec<TokenId> {
    let mut v = response.to_vec();
    v.push(EOS);
    v
}
