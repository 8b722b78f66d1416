//! JSONL corpora, the word vocabulary, and the synthetic class corpus.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PAD_ID, UNK_ID};
use crate::rng::RngState;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Int(i64),
    Str(String),
}

impl Label {
    pub fn name(&self) -> String {
        match self {
            Label::Int(i) => i.to_string(),
            Label::Str(s) => s.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub label: Label,
}

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Reads one JSON record per non-blank line.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("corpus {}", path.display())));
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    for r in records {
        serde_json::to_writer(&mut tmp, r)?;
        tmp.write_all(b"\n")?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Frequency-ranked vocabulary of at most `cap` entries including PAD and
    /// UNK. Equal counts rank by first occurrence.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Result<Self> {
        if cap < 3 {
            return Err(Error::invalid(format!("vocab cap must be >= 3, got {cap}")));
        }
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut seen = 0usize;
        for text in texts {
            for tok in tokenize(text) {
                let e = counts.entry(tok).or_insert((0, seen));
                e.0 += 1;
                seen += 1;
            }
        }
        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(ranked.into_iter().map(|(t, _)| t).take(cap - 2))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
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

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Token ids of `text`, truncated to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        tokenize(text).iter().take(max_len).map(|t| self.id(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            label_names: self.label_names.clone(),
        }
    }

    /// Encodes records with a fixed vocabulary and label set.
    pub fn from_records(records: &[Record], vocab: &Vocab, label_names: &[String], max_len: usize) -> Result<Self> {
        let lookup: HashMap<&str, usize> = label_names.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            let name = r.label.name();
            labels.push(
                *lookup
                    .get(name.as_str())
                    .ok_or_else(|| Error::invalid(format!("unknown label `{name}`")))?,
            );
        }
        Ok(Self {
            sequences: records.iter().map(|r| vocab.encode(&r.text, max_len)).collect(),
            labels,
            label_names: label_names.to_vec(),
        })
    }
}

/// Distinct label names, numerically ordered when all are integers.
pub fn label_names(records: &[Record]) -> Vec<String> {
    let mut names: Vec<String> = records.iter().map(|r| r.label.name()).collect();
    names.sort();
    names.dedup();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().unwrap_or_default());
    }
    names
}

/// Reads a corpus and builds its vocabulary and label set.
pub fn load_dataset(path: &Path, vocab_size: usize, max_len: usize) -> Result<(Dataset, Vocab)> {
    let records = read_records(path)?;
    dataset_from_records(&records, vocab_size, max_len)
}

pub fn dataset_from_records(records: &[Record], vocab_size: usize, max_len: usize) -> Result<(Dataset, Vocab)> {
    let vocab = Vocab::build(records.iter().map(|r| r.text.as_str()), vocab_size)?;
    let names = label_names(records);
    Ok((Dataset::from_records(records, &vocab, &names, max_len)?, vocab))
}

/// Synthetic corpus where class `c` puts 80% of its unigram mass on its own
/// block of words and 20% uniformly on all words. Words are `w0 .. w{V-1}`
/// with `V = vocab_size - 2`, so every word fits a vocabulary of
/// `vocab_size` including PAD and UNK.
pub fn synth_generate(
    num_classes: usize,
    vocab_size: usize,
    seq_len: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<Record>> {
    if num_classes < 2 || vocab_size < 4 * num_classes || seq_len == 0 || per_class == 0 {
        return Err(Error::invalid(format!(
            "synth: need num_classes >= 2, vocab_size >= 4*num_classes, positive seq_len and per_class; \
             got {num_classes}, {vocab_size}, {seq_len}, {per_class}"
        )));
    }
    let words = vocab_size - 2;
    let block = words / num_classes;
    let mut rng = RngState::new(seed);
    let mut out = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        for _ in 0..per_class {
            let toks: Vec<String> = (0..seq_len)
                .map(|_| {
                    let w = if rng.bernoulli(0.8) {
                        c * block + rng.below(block)
                    } else {
                        rng.below(words)
                    };
                    format!("w{w}")
                })
                .collect();
            out.push(Record {
                text: toks.join(" "),
                label: Label::Int(c as i64),
            });
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// Deterministic shuffled split into `(train, test)` index lists, each sorted.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    RngState::new(seed).split(4).shuffle(&mut idx);
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

const _: () = assert!(PAD_ID == 0 && UNK_ID == 1);
