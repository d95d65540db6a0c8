//! Corpus ingestion, vocabulary, pretrained vectors and padded batches.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::layers::{EmbeddingTable, PAD_INDEX};

pub const UNK_INDEX: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// SNLI's marker for pairs without annotator consensus.
const NO_CONSENSUS: &str = "-";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: usize,
}

/// Label inventory of a corpus, in canonical class order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelScheme {
    /// entailment, contradiction, neutral
    Snli,
    /// entails, neutral
    SciTail,
}

impl LabelScheme {
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            LabelScheme::Snli => &["entailment", "contradiction", "neutral"],
            LabelScheme::SciTail => &["entails", "neutral"],
        }
    }

    pub fn num_classes(self) -> usize {
        self.labels().len()
    }

    pub fn index(self, label: &str) -> Option<usize> {
        let label = label.trim().to_lowercase();
        self.labels().iter().position(|l| *l == label)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelScheme::Snli => "snli",
            LabelScheme::SciTail => "scitail",
        }
    }
}

impl FromStr for LabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "snli" => Ok(LabelScheme::Snli),
            "scitail" => Ok(LabelScheme::SciTail),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?} (expected snli or scitail)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl CorpusFormat {
    /// `.tsv`/`.txt` files are tab-separated; everything else is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => CorpusFormat::Tsv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(Error::Config(format!(
                "unknown corpus format {other:?} (expected jsonl or tsv)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub examples: Vec<Example>,
    /// Records dropped for lacking a consensus label.
    pub skipped: usize,
}

#[derive(Deserialize)]
struct JsonRecord {
    sentence1: String,
    sentence2: String,
    gold_label: String,
}

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if c.is_alphanumeric() {
            current.push(c);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

pub fn load_examples(
    path: &Path,
    format: CorpusFormat,
    scheme: LabelScheme,
) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_examples(&text, path, format, scheme)
}

pub fn parse_examples(
    text: &str,
    path: &Path,
    format: CorpusFormat,
    scheme: LabelScheme,
) -> Result<LoadedCorpus> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut corpus = LoadedCorpus::default();
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (premise, hypothesis, label) = match format {
            CorpusFormat::Jsonl => {
                let rec: JsonRecord =
                    serde_json::from_str(raw).map_err(|e| parse_err(line, e.to_string()))?;
                (rec.sentence1, rec.sentence2, rec.gold_label)
            }
            CorpusFormat::Tsv => {
                let cols: Vec<&str> = raw.trim_end_matches('\r').split('\t').collect();
                if cols.len() != 3 {
                    return Err(parse_err(
                        line,
                        format!("expected 3 tab-separated columns, found {}", cols.len()),
                    ));
                }
                (
                    cols[0].to_string(),
                    cols[1].to_string(),
                    cols[2].to_string(),
                )
            }
        };
        let label = label.trim().to_string();
        if label == NO_CONSENSUS {
            corpus.skipped += 1;
            continue;
        }
        let Some(index) = scheme.index(&label) else {
            return Err(Error::UnknownLabel { label, line, seen });
        };
        if !seen.contains(&label) {
            seen.push(label);
        }
        let premise = tokenize(&premise);
        let hypothesis = tokenize(&hypothesis);
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(parse_err(line, "empty premise or hypothesis".into()));
        }
        corpus.examples.push(Example {
            premise,
            hypothesis,
            label: index,
        });
    }
    Ok(corpus)
}

/// Token-to-index map with reserved `PAD = 0` and `UNK = 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    frozen: bool,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            index: HashMap::new(),
            tokens: Vec::new(),
            frozen: false,
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }

    /// Tokens occurring at least `min_count` times, in first-appearance order.
    pub fn build(examples: &[Example], min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for ex in examples {
            for tok in ex.premise.iter().chain(&ex.hypothesis) {
                let c = counts.entry(tok).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        let mut vocab = Self::new();
        for tok in order {
            if counts[tok] >= min_count {
                vocab.insert(tok);
            }
        }
        vocab.freeze();
        vocab
    }

    /// Rebuilds a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_INDEX] != PAD_TOKEN || tokens[UNK_INDEX] != UNK_TOKEN {
            return Err(Error::Contract(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        let mut vocab = Vocabulary {
            index: HashMap::new(),
            tokens: Vec::new(),
            frozen: false,
        };
        for t in &tokens {
            if vocab.index.contains_key(t) {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
            vocab.insert(t);
        }
        vocab.freeze();
        Ok(vocab)
    }

    /// Adds `token` if absent. Returns its index. No-op on a frozen vocabulary.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        if self.frozen {
            return UNK_INDEX;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
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

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.get(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub label: usize,
}

pub fn encode_examples(examples: &[Example], vocab: &Vocabulary) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|ex| EncodedExample {
            premise: vocab.encode(&ex.premise),
            hypothesis: vocab.encode(&ex.hypothesis),
            label: ex.label,
        })
        .collect()
}

/// Index matrix `[size, len]` (row-major) with its validity mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedSequences {
    pub indices: Vec<usize>,
    pub mask: Vec<bool>,
    pub len: usize,
}

impl PaddedSequences {
    pub fn new(seqs: &[&[usize]]) -> Result<Self> {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if len == 0 || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Input("empty token sequence in batch".into()));
        }
        let mut indices = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            indices.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            indices.extend(std::iter::repeat_n(PAD_INDEX, len - s.len()));
            mask.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Ok(PaddedSequences { indices, mask, len })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.len..(i + 1) * self.len]
    }

    /// Unpadded indices of row `i`.
    pub fn valid(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .zip(&self.mask[i * self.len..(i + 1) * self.len])
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }
}

/// Premise/hypothesis pairs padded to the batch's own maximum lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub premise: PaddedSequences,
    pub hypothesis: PaddedSequences,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&EncodedExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let p: Vec<&[usize]> = examples.iter().map(|e| e.premise.as_slice()).collect();
        let h: Vec<&[usize]> = examples.iter().map(|e| e.hypothesis.as_slice()).collect();
        Ok(Batch {
            size: examples.len(),
            premise: PaddedSequences::new(&p)?,
            hypothesis: PaddedSequences::new(&h)?,
            labels: examples.iter().map(|e| e.label).collect(),
        })
    }

    pub fn single(example: &EncodedExample) -> Result<Self> {
        Self::from_examples(&[example])
    }
}

/// Groups examples into padded batches, shuffled first when a seed is given.
/// The final partial batch is kept.
pub fn batchify(
    examples: &[EncodedExample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<&EncodedExample> = examples.iter().collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(Batch::from_examples).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Coverage {
    pub found: usize,
    pub missing: usize,
}

/// Reads `token v1 .. v_dim` lines. Rows of vocabulary tokens present in the
/// file are copied verbatim; all others keep their random initialization.
pub fn load_pretrained(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingTable, Coverage)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pretrained(&text, path, vocab, dim, seed)
}

pub fn parse_pretrained(
    text: &str,
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingTable, Coverage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = EmbeddingTable::random(vocab.len(), dim, &mut rng);
    let mut filled: HashSet<usize> = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut fields = raw.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("bad vector component: {e}"),
            })?;
        if values.len() != dim {
            return Err(Error::Config(format!(
                "{}:{line}: vector has {} components, embedding_dim is {dim}",
                path.display(),
                values.len()
            )));
        }
        if !vocab.contains(token) {
            continue;
        }
        let idx = vocab.get(token);
        if idx == PAD_INDEX || idx == UNK_INDEX || !filled.insert(idx) {
            continue;
        }
        table.table.data_mut()[idx * dim..(idx + 1) * dim].copy_from_slice(&values);
    }
    let regular = vocab.len().saturating_sub(2);
    let coverage = Coverage {
        found: filled.len(),
        missing: regular - filled.len(),
    };
    Ok((table, coverage))
}
