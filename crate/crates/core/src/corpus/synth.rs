//! Synthetic knowledge-grounded dialogues with a tunable copy shortcut.
//!
//! A seeded toy language is built first: filler words (openers, chit-chat),
//! content words linked by a sparse successor graph, and one synonym per
//! content word. Knowledge sentences are walks on the successor graph.
//! Responses either paste a contiguous span of the gold sentence verbatim
//! (the shortcut) or paraphrase it by substituting synonyms and swapping a
//! pair of neighbouring tokens.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, DialogueExample, Split, TokenSeq};
use crate::error::{Error, Result};

const POOL_SIZE: usize = 4;
const MIN_SENT_LEN: usize = 8;
const MAX_SENT_LEN: usize = 12;
const SUCCESSORS: usize = 3;
const MIN_SPAN_FRACTION: f64 = 0.6;
const SYNONYM_RATE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub n_examples: usize,
    pub vocab_size: usize,
    pub shortcut_rate: f64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shortcut_rate) || !self.shortcut_rate.is_finite() {
            return Err(Error::Parameter(format!(
                "shortcut_rate must lie in [0, 1], got {}",
                self.shortcut_rate
            )));
        }
        if self.vocab_size < 50 {
            return Err(Error::Parameter(format!(
                "vocab_size must be at least 50, got {}",
                self.vocab_size
            )));
        }
        if self.n_examples == 0 {
            return Err(Error::Parameter("n_examples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Generates a training-split corpus.
pub fn generate_synthetic(
    seed: u64,
    n_examples: usize,
    vocab_size: usize,
    shortcut_rate: f64,
) -> Result<Corpus> {
    generate_synthetic_split(
        &SynthParams {
            seed,
            n_examples,
            vocab_size,
            shortcut_rate,
        },
        Split::Train,
    )
}

/// Generates one split. All splits drawn with the same seed share one toy
/// language; each split samples examples from its own stream.
pub fn generate_synthetic_split(params: &SynthParams, split: Split) -> Result<Corpus> {
    params.validate()?;
    let lang = Language::new(params.seed, params.vocab_size);
    let stream = match split {
        Split::Train => 1,
        Split::Valid => 2,
        Split::TestSeen => 3,
        Split::TestUnseen => 4,
    };
    let mut rng =
        ChaCha8Rng::seed_from_u64(params.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream);
    let examples = (0..params.n_examples)
        .map(|i| {
            lang.example(
                &mut rng,
                format!("{}-{i:05}", split.as_str()),
                params.shortcut_rate,
            )
        })
        .collect();
    Corpus::new(split, examples)
}

fn word(index: usize) -> String {
    const ONSETS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let n = ONSETS.len() * VOWELS.len();
    let syl = |k: usize| {
        let mut s = String::new();
        s.push(ONSETS[k / VOWELS.len()] as char);
        s.push(VOWELS[k % VOWELS.len()] as char);
        s
    };
    let mut w = syl(index % n);
    w.push_str(&syl((index / n + 3 * index) % n));
    if index >= n * n {
        w.push_str(&syl(index / (n * n) % n));
    }
    w
}

struct Language {
    fillers: Vec<String>,
    content: Vec<String>,
    synonyms: Vec<String>,
    successors: Vec<[usize; SUCCESSORS]>,
    openers: Vec<Vec<usize>>,
}

impl Language {
    fn new(seed: u64, vocab_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words: Vec<String> = (0..vocab_size).map(word).collect();
        words.shuffle(&mut rng);
        let n_fill = (vocab_size / 8).max(8);
        let n_content = (vocab_size - n_fill) / 2;
        let fillers = words[..vocab_size - 2 * n_content].to_vec();
        let content = words[fillers.len()..fillers.len() + n_content].to_vec();
        let synonyms = words[fillers.len() + n_content..].to_vec();
        let successors = (0..n_content)
            .map(|i| {
                let mut s = [0; SUCCESSORS];
                for slot in s.iter_mut() {
                    *slot = loop {
                        let j = rng.random_range(0..n_content);
                        if j != i {
                            break j;
                        }
                    };
                }
                s
            })
            .collect();
        let openers = (0..6)
            .map(|k| {
                let len = 1 + k % 2;
                (0..len)
                    .map(|_| rng.random_range(0..fillers.len()))
                    .collect()
            })
            .collect();
        Language {
            fillers,
            content,
            synonyms,
            successors,
            openers,
        }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.random_range(MIN_SENT_LEN..=MAX_SENT_LEN);
        let mut out = vec![rng.random_range(0..self.content.len())];
        while out.len() < len {
            let last = *out.last().unwrap();
            let fresh: Vec<usize> = self.successors[last]
                .iter()
                .copied()
                .filter(|c| !out.contains(c))
                .collect();
            let next = match fresh.choose(rng) {
                Some(&c) => c,
                None => loop {
                    let c = rng.random_range(0..self.content.len());
                    if !out.contains(&c) {
                        break c;
                    }
                },
            };
            out.push(next);
        }
        out
    }

    fn fillers(&self, rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> TokenSeq {
        let n = rng.random_range(lo..=hi);
        (0..n)
            .map(|_| self.fillers.choose(rng).unwrap().clone())
            .collect()
    }

    fn example(&self, rng: &mut ChaCha8Rng, id: String, shortcut_rate: f64) -> DialogueExample {
        let pool: Vec<Vec<usize>> = (0..POOL_SIZE).map(|_| self.sentence(rng)).collect();
        let gold = rng.random_range(0..POOL_SIZE);
        let other = (gold + 1 + rng.random_range(0..POOL_SIZE - 1)) % POOL_SIZE;

        let mut turn1 = self.fillers(rng, 3, 5);
        turn1.push(self.content[*pool[other].choose(rng).unwrap()].clone());
        turn1.push(".".into());
        let mut turn2 = self.fillers(rng, 2, 4);
        turn2.push(self.content[pool[gold][0]].clone());
        turn2.push("?".into());

        let k = &pool[gold];
        let min_len = (MIN_SPAN_FRACTION * k.len() as f64).ceil() as usize;
        let len = rng.random_range(min_len..=k.len());
        let start = rng.random_range(0..=k.len() - len);
        let span = &k[start..start + len];

        let mut response: TokenSeq = self
            .openers
            .choose(rng)
            .unwrap()
            .iter()
            .map(|&f| self.fillers[f].clone())
            .collect();
        if rng.random_bool(shortcut_rate) {
            response.extend(span.iter().map(|&c| self.content[c].clone()));
        } else {
            let mut para: TokenSeq = span
                .iter()
                .map(|&c| {
                    if rng.random_bool(SYNONYM_RATE) {
                        self.synonyms[c].clone()
                    } else {
                        self.content[c].clone()
                    }
                })
                .collect();
            let i = rng.random_range(0..para.len() - 1);
            para.swap(i, i + 1);
            response.extend(para);
        }
        response.push(".".into());

        DialogueExample {
            id,
            context: vec![turn1, turn2],
            knowledge_pool: pool
                .iter()
                .map(|s| {
                    let mut t: TokenSeq = s.iter().map(|&c| self.content[c].clone()).collect();
                    t.push(".".into());
                    t
                })
                .collect(),
            gold_knowledge_index: gold,
            response,
        }
    }
}
