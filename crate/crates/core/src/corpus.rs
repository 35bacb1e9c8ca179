//! Preference samples, JSONL ingestion, tokenization and N-gram bags.
//!
//! Diversity statistics are computed over prompt text only. Grams are
//! extracted per document and bags are merged, so no gram ever spans two
//! prompts.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("sample {id}: {reason}")]
    Validation { id: String, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// One prompt with a ranked list of responses, most preferred first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub id: String,
    pub prompt: String,
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
}

impl PreferenceSample {
    pub fn new(
        id: impl Into<String>,
        prompt: impl Into<String>,
        responses: Vec<String>,
    ) -> Result<Self, CorpusError> {
        let sample = Self {
            id: id.into(),
            prompt: prompt.into(),
            responses,
            rewards: None,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn with_rewards(mut self, rewards: Vec<f64>) -> Result<Self, CorpusError> {
        self.rewards = Some(rewards);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: String| {
            Err(CorpusError::Validation {
                id: self.id.clone(),
                reason,
            })
        };
        if self.responses.is_empty() {
            return fail("responses must not be empty".into());
        }
        if let Some(rewards) = &self.rewards {
            if rewards.len() != self.responses.len() {
                return fail(format!(
                    "{} rewards for {} responses",
                    rewards.len(),
                    self.responses.len()
                ));
            }
            if rewards.iter().any(|r| !r.is_finite()) {
                return fail("rewards must be finite".into());
            }
        }
        Ok(())
    }

    /// Number of ranked responses.
    pub fn ranking_len(&self) -> usize {
        self.responses.len()
    }
}

#[derive(Deserialize)]
struct RawSample {
    id: Option<String>,
    prompt: String,
    responses: Vec<String>,
    rewards: Option<Vec<f64>>,
}

/// Reads one sample per line. Blank lines are skipped; a sample without an
/// `id` gets `line-<k>` where `k` is its 1-based line number.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<PreferenceSample>, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    read_jsonl(BufReader::new(file)).map_err(|e| match e {
        CorpusError::Io { source, .. } => io_err(source),
        other => other,
    })
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<PreferenceSample>, CorpusError> {
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(&line).map_err(|source| CorpusError::Json {
            line: line_no,
            source,
        })?;
        let sample = PreferenceSample {
            id: raw.id.unwrap_or_else(|| format!("line-{line_no}")),
            prompt: raw.prompt,
            responses: raw.responses,
            rewards: raw.rewards,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_jsonl<'a>(
    mut writer: impl Write,
    samples: impl IntoIterator<Item = &'a PreferenceSample>,
) -> std::io::Result<()> {
    for sample in samples {
        serde_json::to_writer(&mut writer, sample)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_jsonl<'a>(
    path: impl AsRef<Path>,
    samples: impl IntoIterator<Item = &'a PreferenceSample>,
) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_jsonl(BufWriter::new(file), samples).map_err(io_err)
}

/// An ordered list of non-empty, whitespace-free tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(CorpusError::InvalidArgument(format!(
                "token {bad:?} is empty or contains whitespace"
            )));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by single spaces.
    pub fn join(&self) -> String {
        self.tokens.join(" ")
    }
}

pub trait Tokenizer: Sync {
    fn tokenize(&self, text: &str) -> TokenSequence;
}

/// Lowercases the text and splits it on every run of non-alphanumeric
/// characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> TokenSequence {
        let lowered = text.to_lowercase();
        let tokens = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect();
        TokenSequence { tokens }
    }
}

pub fn tokenize(text: &str) -> TokenSequence {
    WordTokenizer.tokenize(text)
}

/// A contiguous run of `n` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Gram(Box<[String]>);

impl Gram {
    pub fn new(tokens: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self(tokens.into_iter().map(Into::into).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for Gram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

/// Multiset of N-grams with total and distinct counts.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramBag {
    n: usize,
    counts: HashMap<Gram, u64>,
    total: u64,
}

impl NGramBag {
    pub fn new(n: usize) -> Result<Self, CorpusError> {
        if n < 1 {
            return Err(CorpusError::InvalidArgument(
                "n-gram order must be at least 1".into(),
            ));
        }
        Ok(Self {
            n,
            counts: HashMap::new(),
            total: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// |G|, every gram occurrence.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// |Filter(G)|, distinct grams.
    pub fn unique(&self) -> u64 {
        self.counts.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn count(&self, gram: &Gram) -> u64 {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn contains(&self, gram: &Gram) -> bool {
        self.counts.contains_key(gram)
    }

    /// Distinct grams, in unspecified order.
    pub fn distinct(&self) -> impl Iterator<Item = &Gram> {
        self.counts.keys()
    }

    pub fn insert(&mut self, gram: Gram, times: u64) {
        assert_eq!(gram.0.len(), self.n, "gram length must equal bag order");
        if times == 0 {
            return;
        }
        *self.counts.entry(gram).or_insert(0) += times;
        self.total += times;
    }

    /// Adds every contiguous window of one document.
    pub fn add_document(&mut self, tokens: &TokenSequence) {
        for window in tokens.tokens().windows(self.n) {
            self.insert(Gram(window.to_vec().into_boxed_slice()), 1);
        }
    }

    pub fn merge(&mut self, other: &NGramBag) -> Result<(), CorpusError> {
        self.check_order(other)?;
        for (gram, &c) in &other.counts {
            *self.counts.entry(gram.clone()).or_insert(0) += c;
        }
        self.total += other.total;
        Ok(())
    }

    fn merge_owned(mut self, other: NGramBag) -> NGramBag {
        debug_assert_eq!(self.n, other.n);
        if self.counts.len() < other.counts.len() {
            return other.merge_owned(self);
        }
        for (gram, c) in other.counts {
            *self.counts.entry(gram).or_insert(0) += c;
        }
        self.total += other.total;
        self
    }

    pub(crate) fn check_order(&self, other: &NGramBag) -> Result<(), CorpusError> {
        if self.n != other.n {
            return Err(CorpusError::InvalidArgument(format!(
                "cannot combine {}-gram and {}-gram bags",
                self.n, other.n
            )));
        }
        Ok(())
    }
}

pub fn extract_ngrams(tokens: &TokenSequence, n: usize) -> Result<NGramBag, CorpusError> {
    let mut bag = NGramBag::new(n)?;
    bag.add_document(tokens);
    Ok(bag)
}

/// `|Filter(G)| / |G|`.
pub fn unique_rate(bag: &NGramBag) -> Result<f64, CorpusError> {
    if bag.is_empty() {
        return Err(CorpusError::Degenerate(
            "unique rate is undefined for an empty n-gram bag".into(),
        ));
    }
    Ok(bag.unique() as f64 / bag.total() as f64)
}

/// Merged gram bag over the prompts of `samples`, one document per prompt.
pub fn prompt_bag(samples: &[PreferenceSample], n: usize) -> Result<NGramBag, CorpusError> {
    prompt_bag_with(samples, n, &WordTokenizer)
}

pub fn prompt_bag_with(
    samples: &[PreferenceSample],
    n: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<NGramBag, CorpusError> {
    let empty = NGramBag::new(n)?;
    Ok(samples
        .par_iter()
        .fold(
            || empty.clone(),
            |mut bag, sample| {
                bag.add_document(&tokenizer.tokenize(&sample.prompt));
                bag
            },
        )
        .reduce(|| empty.clone(), NGramBag::merge_owned))
}
