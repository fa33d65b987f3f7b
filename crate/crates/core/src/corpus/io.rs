use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{detokenize, tokenize, Corpus, DialogueExample, GenerationRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ExampleLine {
    id: String,
    context: Vec<String>,
    knowledge_pool: Vec<String>,
    gold_knowledge_index: i64,
    response: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenerationLine {
    id: String,
    generated: String,
    decoder: String,
    params: serde_json::Value,
    log_score: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    truncated: bool,
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Parameter(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_example(line: &str, line_no: usize) -> Result<DialogueExample> {
    let raw: ExampleLine = serde_json::from_str(line).map_err(|e| Error::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    let gold = usize::try_from(raw.gold_knowledge_index).map_err(|_| Error::Validation {
        id: raw.id.clone(),
        message: format!("negative gold_knowledge_index {}", raw.gold_knowledge_index),
    })?;
    let ex = DialogueExample {
        id: raw.id,
        context: raw.context.iter().map(|s| tokenize(s)).collect(),
        knowledge_pool: raw.knowledge_pool.iter().map(|s| tokenize(s)).collect(),
        gold_knowledge_index: gold,
        response: tokenize(&raw.response),
    };
    ex.validate()?;
    Ok(ex)
}

/// Reads a JSONL corpus in file order. Blank lines are skipped.
pub fn load_corpus(path: &Path, split: Split) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        examples.push(parse_example(line, i + 1)?);
    }
    Corpus::new(split, examples)
}

pub fn corpus_to_jsonl(corpus: &Corpus) -> String {
    let mut out = String::new();
    for ex in corpus.examples() {
        let line = ExampleLine {
            id: ex.id.clone(),
            context: ex.context.iter().map(|t| detokenize(t)).collect(),
            knowledge_pool: ex.knowledge_pool.iter().map(|t| detokenize(t)).collect(),
            gold_knowledge_index: ex.gold_knowledge_index as i64,
            response: detokenize(&ex.response),
        };
        out.push_str(&serde_json::to_string(&line).expect("example serializes"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_atomic(path, corpus_to_jsonl(corpus).as_bytes())
}

pub fn save_generations(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let line = GenerationLine {
            id: r.example_id.clone(),
            generated: detokenize(&r.generated),
            decoder: r.decoder.clone(),
            params: r.params.clone(),
            log_score: r.log_score,
            truncated: r.truncated,
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_generations(text: &str) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: GenerationLine = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(GenerationRecord {
            example_id: raw.id,
            generated: tokenize(&raw.generated),
            decoder: raw.decoder,
            params: raw.params,
            log_score: raw.log_score,
            truncated: raw.truncated,
        });
    }
    Ok(out)
}

pub fn load_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_generations(&text)
}
