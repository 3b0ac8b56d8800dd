//! Corpus ingestion: raw reviews, the closed label space, tokenization,
//! encoding into model targets, splitting and batching.

mod embeddings;
mod jsonl;
mod semeval;
pub mod synth;
mod vocab;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embeddings::{load_embeddings, parse_embeddings, LoadedEmbeddings};
pub use jsonl::{parse_jsonl, parse_jsonl_str, write_jsonl};
pub use semeval::{parse_semeval_xml, parse_semeval_xml_str};
pub use vocab::{build_vocab, Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opinion {
    pub category: String,
    pub polarity: String,
}

/// One annotated text unit (a review, or a sentence for sentence-level corpora).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReview {
    pub id: String,
    pub text: String,
    pub opinions: Vec<Opinion>,
}

impl RawReview {
    /// Validates `ENTITY#ATTRIBUTE` categories and collapses repeated
    /// categories onto the last polarity given for them.
    pub fn new(id: impl Into<String>, text: impl Into<String>, opinions: Vec<Opinion>) -> Result<Self> {
        let id = id.into();
        let mut merged: Vec<Opinion> = Vec::with_capacity(opinions.len());
        for op in opinions {
            if op.category.matches('#').count() != 1 {
                return Err(Error::Data(format!(
                    "review {id}: category `{}` is not of the form ENTITY#ATTRIBUTE",
                    op.category
                )));
            }
            match merged.iter_mut().find(|o| o.category == op.category) {
                Some(existing) => existing.polarity = op.polarity,
                None => merged.push(op),
            }
        }
        Ok(Self {
            id,
            text: text.into(),
            opinions: merged,
        })
    }
}

/// Ordered aspect categories and polarities; positions are the target indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    aspects: Vec<String>,
    polarities: Vec<String>,
}

impl LabelSpace {
    pub fn new(aspects: Vec<String>, polarities: Vec<String>) -> Result<Self> {
        for (what, list) in [("aspect", &aspects), ("polarity", &polarities)] {
            if list.is_empty() {
                return Err(Error::Data(format!("label space has no {what} entries")));
            }
            for (i, item) in list.iter().enumerate() {
                if list[..i].contains(item) {
                    return Err(Error::Data(format!("duplicate {what} `{item}` in label space")));
                }
            }
        }
        Ok(Self { aspects, polarities })
    }

    /// Every category and polarity seen in `reviews`, each sorted.
    pub fn from_reviews(reviews: &[RawReview]) -> Result<Self> {
        let mut aspects = BTreeSet::new();
        let mut polarities = BTreeSet::new();
        for op in reviews.iter().flat_map(|r| &r.opinions) {
            aspects.insert(op.category.clone());
            polarities.insert(op.polarity.clone());
        }
        Self::new(aspects.into_iter().collect(), polarities.into_iter().collect())
    }

    pub fn aspects(&self) -> &[String] {
        &self.aspects
    }

    pub fn polarities(&self) -> &[String] {
        &self.polarities
    }

    pub fn n_aspects(&self) -> usize {
        self.aspects.len()
    }

    pub fn n_polarities(&self) -> usize {
        self.polarities.len()
    }

    pub fn aspect_index(&self, name: &str) -> Option<usize> {
        self.aspects.iter().position(|a| a == name)
    }

    pub fn polarity_index(&self, name: &str) -> Option<usize> {
        self.polarities.iter().position(|p| p == name)
    }

    /// Parses the two-section label file:
    ///
    /// ```text
    /// [aspects]
    /// FOOD#QUALITY
    /// [polarities]
    /// positive
    /// ```
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut aspects = Vec::new();
        let mut polarities = Vec::new();
        let mut section: Option<&mut Vec<String>> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[aspects]" => section = Some(&mut aspects),
                "[polarities]" => section = Some(&mut polarities),
                _ => match section.as_deref_mut() {
                    Some(list) => list.push(line.to_string()),
                    None => {
                        return Err(Error::ParseLine {
                            path: origin.to_path_buf(),
                            line: lineno + 1,
                            message: "entry before any [aspects]/[polarities] header".into(),
                        })
                    }
                },
            }
        }
        Self::new(aspects, polarities).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::from("[aspects]\n");
        for a in &self.aspects {
            out.push_str(a);
            out.push('\n');
        }
        out.push_str("[polarities]\n");
        for p in &self.polarities {
            out.push_str(p);
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for LabelSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "aspects [{}] x polarities [{}]", self.aspects.join(", "), self.polarities.join(", "))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// Lowercase, split on whitespace, each punctuation mark its own token.
    #[default]
    WhitespacePunct,
    /// One token per non-whitespace character, for unsegmented scripts.
    Char,
}

impl FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace_punct" => Ok(Self::WhitespacePunct),
            "char" => Ok(Self::Char),
            other => Err(Error::invalid(format!("unknown tokenizer mode `{other}`"))),
        }
    }
}

pub fn tokenize(text: &str, mode: TokenizerMode) -> Result<Vec<String>> {
    let tokens: Vec<String> = match mode {
        TokenizerMode::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        TokenizerMode::WhitespacePunct => {
            let mut out = Vec::new();
            for word in text.split_whitespace() {
                let mut current = String::new();
                for ch in word.chars() {
                    if ch.is_alphanumeric() {
                        current.extend(ch.to_lowercase());
                    } else {
                        if !current.is_empty() {
                            out.push(std::mem::take(&mut current));
                        }
                        out.push(ch.to_string());
                    }
                }
                if !current.is_empty() {
                    out.push(current);
                }
            }
            out
        }
    };
    if tokens.is_empty() {
        return Err(Error::Data("cannot tokenize an empty text".into()));
    }
    Ok(tokens)
}

/// A text encoded against a vocabulary and a label space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub mask: Vec<bool>,
    /// Multi-hot aspect targets, length N.
    pub y_a: Vec<u8>,
    /// One-hot polarity row for mentioned aspects, zero row otherwise; N x M.
    pub y_s: Vec<Vec<u8>>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Gold polarity index of aspect `j`, if the text mentions it.
    pub fn gold_polarity(&self, j: usize) -> Option<usize> {
        if self.y_a.get(j) != Some(&1) {
            return None;
        }
        self.y_s[j].iter().position(|&v| v == 1)
    }
}

pub fn encode(raw: &RawReview, vocab: &Vocabulary, labels: &LabelSpace, mode: TokenizerMode) -> Result<Example> {
    let tokens = tokenize(&raw.text, mode).map_err(|e| Error::Data(format!("review {}: {e}", raw.id)))?;
    let token_ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    let n = labels.n_aspects();
    let m = labels.n_polarities();
    let mut y_a = vec![0u8; n];
    let mut y_s = vec![vec![0u8; m]; n];
    for op in &raw.opinions {
        let j = labels
            .aspect_index(&op.category)
            .ok_or_else(|| Error::Data(format!("review {}: unknown aspect category `{}`", raw.id, op.category)))?;
        let k = labels
            .polarity_index(&op.polarity)
            .ok_or_else(|| Error::Data(format!("review {}: unknown polarity `{}`", raw.id, op.polarity)))?;
        y_a[j] = 1;
        y_s[j].fill(0);
        y_s[j][k] = 1;
    }
    Ok(Example {
        id: raw.id.clone(),
        mask: vec![true; token_ids.len()],
        token_ids,
        y_a,
        y_s,
    })
}

/// Vocabulary over the tokenized texts of `reviews`.
pub fn vocab_from_reviews(reviews: &[RawReview], mode: TokenizerMode, min_count: usize) -> Result<Vocabulary> {
    let tokens = reviews
        .iter()
        .map(|r| tokenize(&r.text, mode).map_err(|e| Error::Data(format!("review {}: {e}", r.id))))
        .collect::<Result<Vec<_>>>()?;
    Ok(build_vocab(tokens.iter().map(Vec::as_slice), min_count))
}

pub fn encode_all(reviews: &[RawReview], vocab: &Vocabulary, labels: &LabelSpace, mode: TokenizerMode) -> Result<Vec<Example>> {
    reviews.iter().map(|r| encode(r, vocab, labels, mode)).collect()
}

/// Seeded shuffle followed by a prefix cut: the first `ceil(ratio * n)`
/// items train, the rest validate. Both sides are kept non-empty.
pub fn split_train_val<T>(mut items: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::Data(format!("need at least 2 examples to split, got {}", items.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let n = items.len();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((ratio * n as f64) - 1e-9).ceil() as usize;
    let cut = cut.clamp(1, n - 1);
    let val = items.split_off(cut);
    Ok((items, val))
}

/// A padded group of examples. Padding uses token id 0 and mask `false`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the batch members in the input slice.
    pub indices: Vec<usize>,
    pub token_ids: Vec<Vec<usize>>,
    pub masks: Vec<Vec<bool>>,
    pub y_a: Vec<Vec<u8>>,
    pub y_s: Vec<Vec<Vec<u8>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn width(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }
}

pub fn make_batches(examples: &[Example], batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let width = chunk.iter().map(|&i| examples[i].len()).max().unwrap_or(0);
            let mut batch = Batch {
                indices: chunk.to_vec(),
                token_ids: Vec::with_capacity(chunk.len()),
                masks: Vec::with_capacity(chunk.len()),
                y_a: Vec::with_capacity(chunk.len()),
                y_s: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let ex = &examples[i];
                let mut ids = ex.token_ids.clone();
                let mut mask = ex.mask.clone();
                ids.resize(width, PAD_ID);
                mask.resize(width, false);
                batch.token_ids.push(ids);
                batch.masks.push(mask);
                batch.y_a.push(ex.y_a.clone());
                batch.y_s.push(ex.y_s.clone());
            }
            batch
        })
        .collect())
}

/// Corpus file formats understood by [`load_reviews`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Xml,
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xml" => Ok(Self::Xml),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(Error::invalid(format!("unknown corpus format `{other}` (expected xml or jsonl)"))),
        }
    }
}

pub fn load_reviews(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<RawReview>> {
    match format {
        CorpusFormat::Xml => parse_semeval_xml(path),
        CorpusFormat::Jsonl => parse_jsonl(path),
    }
}
