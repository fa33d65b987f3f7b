use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Corpus;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const UNK: TokenId = 4;

/// Surfaces for the reserved ids. None of them can be produced by the
/// tokenizer because `<` and `>` are always split off as punctuation.
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// A surface form paired with its vocabulary id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub id: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from the reserved symbols followed by `words` in
    /// the given order. Duplicates and reserved surfaces are skipped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut surfaces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.into();
            if w.is_empty() || index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), surfaces.len() as TokenId);
            surfaces.push(w);
        }
        Vocabulary { surfaces, index }
    }

    /// Collects every surface in the given corpora, ordered by descending
    /// frequency with lexicographic tie-break.
    pub fn from_corpora(corpora: &[&Corpus]) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for corpus in corpora {
            for ex in corpus.examples() {
                for seq in ex.all_sequences() {
                    for t in seq {
                        *counts.entry(t.as_str()).or_default() += 1;
                    }
                }
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Vocabulary::new(words.into_iter().map(|(w, _)| w.to_string()))
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    /// Id of `surface`, or [`UNK`] when unknown.
    pub fn id(&self, surface: &str) -> TokenId {
        self.index.get(surface).copied().unwrap_or(UNK)
    }

    pub fn get(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id as usize).map(String::as_str)
    }

    pub fn token(&self, id: TokenId) -> Option<Token> {
        self.surface(id).map(|s| Token {
            surface: s.to_string(),
            id,
        })
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to surfaces, dropping PAD/BOS/EOS/SEP.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS | SEP))
            .filter_map(|&id| self.surface(id).map(str::to_string))
            .collect()
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    /// Hex SHA-256 over the newline-joined surfaces.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.surfaces {
            h.update(s.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(surfaces: Vec<String>) -> Result<Self, Self::Error> {
        if surfaces.len() < RESERVED.len()
            || surfaces.iter().zip(RESERVED.iter()).any(|(a, b)| a != b)
        {
            return Err("vocabulary must start with the reserved symbols".into());
        }
        let n = surfaces.len();
        let v = Vocabulary::new(surfaces.into_iter().skip(RESERVED.len()));
        if v.len() != n {
            return Err("vocabulary surfaces must be unique and non-empty".into());
        }
        Ok(v)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.surfaces
    }
}
