//! Directional lexical relations between lemmas and the relation vector
//! derived from them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Synonym = 0,
    Antonym = 1,
    /// `(a, b, Hypernym)`: a is-a b.
    Hypernym = 2,
    Hyponym = 3,
}

impl RelationKind {
    /// Canonical encoding order.
    pub const ALL: [RelationKind; 4] = [
        RelationKind::Synonym,
        RelationKind::Antonym,
        RelationKind::Hypernym,
        RelationKind::Hyponym,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Relation that must hold on the reversed pair.
    pub fn mirror(self) -> RelationKind {
        match self {
            RelationKind::Hypernym => RelationKind::Hyponym,
            RelationKind::Hyponym => RelationKind::Hypernym,
            k => k,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::Synonym => "synonym",
            RelationKind::Antonym => "antonym",
            RelationKind::Hypernym => "hypernym",
            RelationKind::Hyponym => "hyponym",
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "synonym" => Ok(RelationKind::Synonym),
            "antonym" => Ok(RelationKind::Antonym),
            "hypernym" => Ok(RelationKind::Hypernym),
            "hyponym" => Ok(RelationKind::Hyponym),
            other => Err(format!("unknown relation {other:?}")),
        }
    }
}

/// Multi-hot vector over [`RelationKind::ALL`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RelationVector(u8);

impl RelationVector {
    pub const ZERO: RelationVector = RelationVector(0);

    pub fn from_kinds(kinds: impl IntoIterator<Item = RelationKind>) -> Self {
        RelationVector(kinds.into_iter().fold(0, |acc, k| acc | (1 << k.index())))
    }

    pub fn contains(self, kind: RelationKind) -> bool {
        self.0 & (1 << kind.index()) != 0
    }

    pub fn with(self, kind: RelationKind) -> Self {
        RelationVector(self.0 | (1 << kind.index()))
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn to_array(self) -> [u8; 4] {
        RelationKind::ALL.map(|k| u8::from(self.contains(k)))
    }

    pub fn kinds(self) -> impl Iterator<Item = RelationKind> {
        RelationKind::ALL.into_iter().filter(move |&k| self.contains(k))
    }
}

/// 1 if the vector marks any relation, else 0.
pub fn indicator(k: RelationVector) -> u8 {
    u8::from(!k.is_zero())
}

/// Lowercase, NFC-normalized, surrounding whitespace removed.
pub fn normalize_lemma(s: &str) -> String {
    s.trim().to_lowercase().nfc().collect()
}

/// Lemma-pair relations, closed under the symmetric (synonym, antonym) and
/// inverse (hypernym/hyponym) rules. Immutable after loading.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LexicalKB {
    rels: BTreeMap<String, BTreeMap<String, RelationVector>>,
}

impl LexicalKB {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.rels.is_empty()
    }

    /// Inserts `(a, b, kind)` and its mirror entry.
    pub fn insert(&mut self, a: &str, b: &str, kind: RelationKind) -> Result<()> {
        let (a, b) = (normalize_lemma(a), normalize_lemma(b));
        if a.is_empty() || b.is_empty() {
            return Err(Error::Data("empty lemma".into()));
        }
        if a == b {
            return Err(Error::Data(format!("self-pair ({a}, {a})")));
        }
        self.put(&a, &b, kind);
        self.put(&b, &a, kind.mirror());
        Ok(())
    }

    fn put(&mut self, a: &str, b: &str, kind: RelationKind) {
        let v = self
            .rels
            .entry(a.to_owned())
            .or_default()
            .entry(b.to_owned())
            .or_default();
        *v = v.with(kind);
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut kb = LexicalKB::empty();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
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
            let kind: RelationKind = fields[2].parse().map_err(err)?;
            kb.insert(fields[0], fields[1], kind)
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(kb)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Relation vector of the ordered pair; zero when absent. Inputs are
    /// normalized first.
    pub fn relation_vector(&self, a: &str, b: &str) -> RelationVector {
        let (a, b) = (normalize_lemma(a), normalize_lemma(b));
        self.lookup(&a, &b)
    }

    /// Lookup of already-normalized lemmas.
    pub fn lookup(&self, a: &str, b: &str) -> RelationVector {
        self.rels
            .get(a)
            .and_then(|m| m.get(b))
            .copied()
            .unwrap_or(RelationVector::ZERO)
    }

    /// Lemmas `b` with `kind` on `(a, b)`, in lexicographic order.
    pub fn related(&self, a: &str, kind: RelationKind) -> Vec<&str> {
        self.rels
            .get(a)
            .map(|m| {
                m.iter()
                    .filter(|(_, v)| v.contains(kind))
                    .map(|(b, _)| b.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Every stored ordered pair with its relations.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, RelationVector)> {
        self.rels
            .iter()
            .flat_map(|(a, m)| m.iter().map(move |(b, v)| (a.as_str(), b.as_str(), *v)))
    }

    /// Number of distinct relation facts of `kind`: unordered pairs for the
    /// symmetric kinds, directed edges for hypernym/hyponym.
    pub fn pair_count(&self, kind: RelationKind) -> usize {
        let directed = self.entries().filter(|(_, _, v)| v.contains(kind)).count();
        match kind {
            RelationKind::Synonym | RelationKind::Antonym => directed / 2,
            _ => directed,
        }
    }

    pub fn counts(&self) -> KbCounts {
        KbCounts {
            lemmas: self.rels.len(),
            synonym: self.pair_count(RelationKind::Synonym),
            antonym: self.pair_count(RelationKind::Antonym),
            hypernym: self.pair_count(RelationKind::Hypernym),
            hyponym: self.pair_count(RelationKind::Hyponym),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KbCounts {
    pub lemmas: usize,
    pub synonym: usize,
    pub antonym: usize,
    pub hypernym: usize,
    pub hyponym: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb(text: &str) -> LexicalKB {
        LexicalKB::parse(text, "test").unwrap()
    }

    #[test]
    fn antonym_symmetry_closure() {
        let k = kb("hot\tcold\tantonym\n");
        assert!(k.lookup("hot", "cold").contains(RelationKind::Antonym));
        assert!(k.lookup("cold", "hot").contains(RelationKind::Antonym));
        assert_eq!(k.relation_vector("hot", "cold").to_array(), [0, 1, 0, 0]);
    }

    #[test]
    fn hypernym_inverse_closure() {
        let k = kb("dog\tanimal\thypernym");
        assert_eq!(k.relation_vector("dog", "animal").to_array(), [0, 0, 1, 0]);
        assert_eq!(k.relation_vector("animal", "dog").to_array(), [0, 0, 0, 1]);
    }

    #[test]
    fn self_pair_rejected_with_line() {
        let e = LexicalKB::parse("# c\ncar\tcar\tsynonym\n", "f.tsv").unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        // case folding makes these the same lemma too
        assert!(LexicalKB::parse("Car\tcar\tsynonym", "f").is_err());
    }

    #[test]
    fn malformed_and_unknown_relation() {
        assert!(matches!(
            LexicalKB::parse("a\tb\n", "f"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            LexicalKB::parse("a\tb\tmeronym\n", "f"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn absent_pair_is_zero() {
        let k = kb("hot\tcold\tantonym");
        let v = k.relation_vector("wheat", "corn");
        assert_eq!(v.to_array(), [0, 0, 0, 0]);
        assert_eq!(indicator(v), 0);
    }

    #[test]
    fn indicator_cases() {
        use RelationKind::*;
        assert_eq!(indicator(RelationVector::from_kinds([Antonym])), 1);
        assert_eq!(indicator(RelationVector::ZERO), 0);
        assert_eq!(indicator(RelationVector::from_kinds([Synonym, Hypernym])), 1);
    }

    #[test]
    fn comments_case_and_crlf() {
        let k = kb("# header\r\n\r\nHOT\tCold\tAntonym\r\n");
        assert!(k.lookup("hot", "cold").contains(RelationKind::Antonym));
    }

    #[test]
    fn nfc_normalization() {
        // "café" precomposed vs decomposed
        let k = kb("cafe\u{301}\tbar\tsynonym");
        assert!(!k.relation_vector("caf\u{e9}", "bar").is_zero());
    }

    #[test]
    fn multi_hot_and_counts() {
        let k = kb("a\tb\tsynonym\nb\ta\thypernym\nc\td\tantonym\n");
        assert_eq!(k.relation_vector("a", "b").to_array(), [1, 0, 0, 1]);
        let c = k.counts();
        assert_eq!((c.synonym, c.antonym, c.hypernym, c.hyponym), (1, 1, 1, 1));
        assert_eq!(k.related("a", RelationKind::Synonym), vec!["b"]);
    }
}
