//! Tokenization, vocabulary, sentence-pair datasets and the
//! `[CLS] A [SEP] B [SEP]` encoding.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercases, splits on Unicode whitespace and emits every ASCII
/// punctuation character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Rebuilds a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn build(corpus: &LabeledDataset, min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        if corpus.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for ex in corpus.examples() {
            for t in tokenize(&ex.text_a).into_iter().chain(tokenize(&ex.text_b)) {
                *freq.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Positions of the two texts inside `[CLS] A [SEP] B [SEP]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SpanLayout {
    pub m: usize,
    pub n: usize,
}

impl SpanLayout {
    pub fn len(&self) -> usize {
        self.m + self.n + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn pos_a(&self, i: usize) -> usize {
        1 + i
    }

    #[inline]
    pub fn pos_b(&self, j: usize) -> usize {
        self.m + 2 + j
    }

    pub fn sep1(&self) -> usize {
        self.m + 1
    }

    pub fn sep2(&self) -> usize {
        self.m + self.n + 2
    }

    pub fn a_span(&self) -> Range<usize> {
        1..self.m + 1
    }

    pub fn b_span(&self) -> Range<usize> {
        self.m + 2..self.m + self.n + 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    pub ids: Vec<usize>,
    pub layout: SpanLayout,
    pub lemmas_a: Vec<String>,
    pub lemmas_b: Vec<String>,
    pub label: Option<usize>,
}

impl TokenizedPair {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode_pair(vocab: &Vocab, text_a: &str, text_b: &str, max_a: usize, max_b: usize) -> Result<TokenizedPair> {
    if max_a == 0 || max_b == 0 {
        return Err(Error::Config("max_a and max_b must be at least 1".into()));
    }
    let mut a = tokenize(text_a);
    let mut b = tokenize(text_b);
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("both texts must contain at least one token".into()));
    }
    a.truncate(max_a);
    b.truncate(max_b);
    let layout = SpanLayout { m: a.len(), n: b.len() };
    let mut ids = Vec::with_capacity(layout.len());
    ids.push(CLS);
    ids.extend(a.iter().map(|t| vocab.id(t)));
    ids.push(SEP);
    ids.extend(b.iter().map(|t| vocab.id(t)));
    ids.push(SEP);
    Ok(TokenizedPair {
        ids,
        layout,
        lemmas_a: a,
        lemmas_b: b,
        label: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub label: usize,
    pub text_a: String,
    pub text_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    n_classes: usize,
    examples: Vec<Example>,
}

impl LabeledDataset {
    pub fn new(n_classes: usize, examples: Vec<Example>) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config("at least two classes required".into()));
        }
        if let Some(ex) = examples.iter().find(|e| e.label >= n_classes) {
            return Err(Error::Data(format!("label {} outside {n_classes} classes", ex.label)));
        }
        Ok(LabeledDataset { n_classes, examples })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn parse(text: &str, source: &str, n_classes: usize) -> Result<Self> {
        let mut examples = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_owned(),
                line: idx + 1,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let label: usize = fields[0]
                .trim()
                .parse()
                .map_err(|_| err(format!("bad label {:?}", fields[0])))?;
            if label >= n_classes {
                return Err(err(format!("label {label} outside {n_classes} classes")));
            }
            examples.push(Example {
                label,
                text_a: fields[1].to_owned(),
                text_b: fields[2].to_owned(),
            });
        }
        Self::new(n_classes, examples)
    }

    pub fn load(path: impl AsRef<Path>, n_classes: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), n_classes)
    }

    pub fn to_tsv(&self) -> String {
        self.examples
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.label, e.text_a, e.text_b))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Encodes every example, carrying its label.
    pub fn encode(&self, vocab: &Vocab, max_a: usize, max_b: usize) -> Result<Vec<TokenizedPair>> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mut p = encode_pair(vocab, &e.text_a, &e.text_b, max_a, max_b)
                    .map_err(|err| Error::Data(format!("example {i}: {err}")))?;
                p.label = Some(e.label);
                Ok(p)
            })
            .collect()
    }
}
