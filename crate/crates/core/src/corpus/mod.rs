//! Dialogue examples, corpora and their on-disk formats.

mod io;
mod synth;
mod tokenize;
mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_corpus, load_generations, read_generations, save_corpus, save_generations, write_atomic,
};
pub use synth::{generate_synthetic, generate_synthetic_split, SynthParams};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{Token, TokenId, Vocabulary, BOS, EOS, PAD, RESERVED, SEP, UNK};

pub type TokenSeq = Vec<String>;

/// One dialogue turn to respond to: history, knowledge pool, the gold
/// knowledge sentence and the reference response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueExample {
    pub id: String,
    /// Context turns, oldest first.
    pub context: Vec<TokenSeq>,
    pub knowledge_pool: Vec<TokenSeq>,
    pub gold_knowledge_index: usize,
    pub response: TokenSeq,
}

impl DialogueExample {
    pub fn gold_knowledge(&self) -> &[String] {
        &self.knowledge_pool[self.gold_knowledge_index]
    }

    pub(crate) fn all_sequences(&self) -> impl Iterator<Item = &TokenSeq> {
        self.context
            .iter()
            .chain(self.knowledge_pool.iter())
            .chain(std::iter::once(&self.response))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            id: self.id.clone(),
            message,
        };
        if self.gold_knowledge_index >= self.knowledge_pool.len() {
            return Err(fail(format!(
                "gold_knowledge_index {} out of range for a pool of {}",
                self.gold_knowledge_index,
                self.knowledge_pool.len()
            )));
        }
        if self.response.is_empty() {
            return Err(fail("response is empty".into()));
        }
        if self.gold_knowledge().is_empty() {
            return Err(fail("gold knowledge is empty".into()));
        }
        if let Some(t) = self
            .all_sequences()
            .flatten()
            .find(|t| RESERVED.contains(&t.as_str()))
        {
            return Err(fail(format!("reserved token `{t}` in text")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test_seen" | "test" => Ok(Split::TestSeen),
            "test_unseen" => Ok(Split::TestUnseen),
            other => Err(Error::Parameter(format!("unknown split `{other}`"))),
        }
    }
}

/// An ordered, validated collection of examples with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    split: Split,
    examples: Vec<DialogueExample>,
}

impl Corpus {
    pub fn new(split: Split, examples: Vec<DialogueExample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            ex.validate()?;
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Corpus { split, examples })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn examples(&self) -> &[DialogueExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DialogueExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// A new corpus holding the first `n` examples.
    pub fn truncated(&self, n: usize) -> Corpus {
        Corpus {
            split: self.split,
            examples: self.examples.iter().take(n).cloned().collect(),
        }
    }
}

/// One decoded response.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub example_id: String,
    pub generated: TokenSeq,
    pub decoder: String,
    pub params: serde_json::Value,
    pub log_score: f64,
    /// No hypothesis reached EOS within the length limit.
    pub truncated: bool,
}
