//! KB-driven lexical transforms (SwapAnt, SwapSyn) on the second text of a
//! pair, and a synthetic sentence-pair generator.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexkb::{normalize_lemma, LexicalKB, RelationKind};
use crate::numcore::Rng;
use crate::textio::{Example, LabeledDataset};

/// One replaced token of `text_b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Swap {
    /// Token index within `text_b`.
    pub position: usize,
    pub old: String,
    pub new: String,
    pub kind: RelationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformedPair {
    pub original: Example,
    pub transformed: Example,
    pub swaps: Vec<Swap>,
}

/// Byte spans of the tokens produced by [`crate::textio::tokenize`], paired
/// with the lowercased token text.
fn token_spans(text: &str) -> Vec<(Range<usize>, String)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let close = |out: &mut Vec<_>, s: Option<usize>, end: usize| {
        if let Some(s) = s {
            out.push((s..end, text[s..end].to_lowercase()));
        }
    };
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            close(&mut out, start.take(), i);
        } else if ch.is_ascii_punctuation() {
            close(&mut out, start.take(), i);
            out.push((i..i + 1, ch.to_string()));
        } else if start.is_none() {
            start = Some(i);
        }
    }
    close(&mut out, start, text.len());
    out
}

fn substitute(ex: &Example, kb: &LexicalKB, kind: RelationKind, rng: &mut Rng) -> Option<(String, Vec<Swap>)> {
    let mut text = String::with_capacity(ex.text_b.len());
    let mut last = 0;
    let mut swaps = Vec::new();
    for (position, (span, token)) in token_spans(&ex.text_b).into_iter().enumerate() {
        let candidates = kb.related(&normalize_lemma(&token), kind);
        let Some(&new) = rng.choose(&candidates) else {
            continue;
        };
        text.push_str(&ex.text_b[last..span.start]);
        text.push_str(new);
        last = span.end;
        swaps.push(Swap {
            position,
            old: token,
            new: new.to_owned(),
            kind,
        });
    }
    if swaps.is_empty() {
        return None;
    }
    text.push_str(&ex.text_b[last..]);
    Some((text, swaps))
}

/// Replaces every antonym-bearing token of `text_b` and flips a paraphrase
/// label to 0. Pairs not labeled 1 and pairs without candidates are skipped.
pub fn swap_antonyms(ex: &Example, kb: &LexicalKB, rng: &mut Rng) -> Option<TransformedPair> {
    if ex.label != 1 {
        return None;
    }
    let (text_b, swaps) = substitute(ex, kb, RelationKind::Antonym, rng)?;
    Some(TransformedPair {
        original: ex.clone(),
        transformed: Example {
            label: 0,
            text_a: ex.text_a.clone(),
            text_b,
        },
        swaps,
    })
}

/// Replaces every synonym-bearing token of `text_b`, keeping the label.
pub fn swap_synonyms(ex: &Example, kb: &LexicalKB, rng: &mut Rng) -> Option<TransformedPair> {
    let (text_b, swaps) = substitute(ex, kb, RelationKind::Synonym, rng)?;
    Some(TransformedPair {
        original: ex.clone(),
        transformed: Example {
            label: ex.label,
            text_a: ex.text_a.clone(),
            text_b,
        },
        swaps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    SwapAnt,
    SwapSyn,
}

/// Result of transforming a whole dataset.
#[derive(Debug, Clone)]
pub struct TransformedDataset {
    pub dataset: LabeledDataset,
    pub pairs: Vec<TransformedPair>,
    pub skipped: usize,
}

impl TransformedDataset {
    /// One JSON object per emitted pair.
    pub fn swaps_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&serde_json::to_string(p)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Applies `kind` to every example with one rng, in order; skipped pairs
/// are dropped from the output.
pub fn transform_dataset(data: &LabeledDataset, kb: &LexicalKB, kind: TransformKind, seed: u64) -> Result<TransformedDataset> {
    let mut rng = Rng::new(seed);
    let f = match kind {
        TransformKind::SwapAnt => swap_antonyms,
        TransformKind::SwapSyn => swap_synonyms,
    };
    let pairs: Vec<TransformedPair> = data.examples().iter().filter_map(|ex| f(ex, kb, &mut rng)).collect();
    let skipped = data.len() - pairs.len();
    let dataset = LabeledDataset::new(data.n_classes(), pairs.iter().map(|p| p.transformed.clone()).collect())?;
    Ok(TransformedDataset { dataset, pairs, skipped })
}

pub const SLOT: &str = "{}";

/// Sentence templates with exactly one `{}` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateBank {
    templates: Vec<String>,
}

impl TemplateBank {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Data("template bank is empty".into()));
        }
        if let Some(t) = templates.iter().find(|t| t.matches(SLOT).count() != 1) {
            return Err(Error::Data(format!("template {t:?} must contain exactly one {SLOT} slot")));
        }
        Ok(TemplateBank { templates })
    }

    /// One template per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_owned)
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn builtin() -> Self {
        Self::parse(include_str!("../data/templates.txt")).expect("bundled templates are valid")
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    fn fill(&self, idx: usize, word: &str) -> String {
        self.templates[idx].replacen(SLOT, word, 1)
    }
}

/// The bundled adjective lexicon.
pub fn builtin_lexicon() -> LexicalKB {
    LexicalKB::parse(include_str!("../data/lexicon.tsv"), "lexicon.tsv").expect("bundled lexicon is valid")
}

/// Lemma pairs usable as synthetic examples.
struct PairPools {
    positive: Vec<(String, String)>,
    negative: Vec<(String, String)>,
}

fn pair_pools(kb: &LexicalKB) -> PairPools {
    let lemmas: BTreeSet<&str> = kb.entries().map(|(a, _, _)| a).collect();
    let mut positive = Vec::new();
    let mut swapped = Vec::new();
    let mut direct = Vec::new();
    for &x in &lemmas {
        for y in kb.related(x, RelationKind::Synonym) {
            positive.push((x.to_owned(), y.to_owned()));
            for z in kb.related(y, RelationKind::Antonym) {
                if z != x && kb.lookup(x, z).is_zero() {
                    swapped.push((x.to_owned(), z.to_owned()));
                }
            }
        }
        for z in kb.related(x, RelationKind::Antonym) {
            direct.push((x.to_owned(), z.to_owned()));
        }
    }
    swapped.sort();
    swapped.dedup();
    let negative = if swapped.is_empty() { direct } else { swapped };
    PairPools { positive, negative }
}

/// Balanced synthetic pairs over one shared template per example. Label-1
/// pairs put a synonym of the slot word into `text_b`; label-0 pairs apply
/// SwapAnt to such a paraphrase, or substitute a direct antonym when no
/// synonym of the KB has an antonym.
pub fn gen_synthetic(kb: &LexicalKB, n_pairs: usize, bank: &TemplateBank, rng: &mut Rng) -> Result<LabeledDataset> {
    let pools = pair_pools(kb);
    if pools.positive.is_empty() || pools.negative.is_empty() {
        return Err(Error::Data(
            "knowledge base needs at least one synonym and one antonym pair".into(),
        ));
    }
    let mut examples = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let label = usize::from(i % 2 == 0);
        let pool = if label == 1 { &pools.positive } else { &pools.negative };
        let (x, w) = &pool[rng.below(pool.len())];
        let t = rng.below(bank.templates.len());
        examples.push(Example {
            label,
            text_a: bank.fill(t, x),
            text_b: bank.fill(t, w),
        });
    }
    rng.shuffle(&mut examples);
    LabeledDataset::new(2, examples)
}

/// Fractions of the lexical components assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSplits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    /// Lemmas whose pairs make up each split.
    pub lemmas: [Vec<String>; 3],
}

/// Connected components of the relation graph, each sorted, ordered by
/// their first lemma.
fn components(kb: &LexicalKB) -> Vec<Vec<String>> {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (a, b, _) in kb.entries() {
        adj.entry(a).or_default().push(b);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &start in adj.keys() {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = vec![start];
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if seen.insert(w) {
                    comp.push(w);
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp.into_iter().map(str::to_owned).collect());
    }
    out
}

fn restrict(kb: &LexicalKB, keep: &BTreeSet<&str>) -> LexicalKB {
    let mut sub = LexicalKB::empty();
    for (a, b, v) in kb.entries() {
        if keep.contains(a) && keep.contains(b) {
            for kind in v.kinds() {
                sub.insert(a, b, kind).expect("entries of a valid KB");
            }
        }
    }
    sub
}

/// Train/val/test sets over disjoint groups of related lemmas, so no
/// lemma of one split occurs in another. `n_pairs` is divided by the
/// split fractions.
pub fn gen_synthetic_splits(
    kb: &LexicalKB,
    n_pairs: usize,
    bank: &TemplateBank,
    spec: SplitSpec,
    seed: u64,
) -> Result<SynthSplits> {
    let fracs = [spec.train, spec.val, spec.test];
    if fracs.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::Config("split fractions must be positive".into()));
    }
    let total: f64 = fracs.iter().sum();
    let mut comps = components(kb);
    if comps.len() < 3 {
        return Err(Error::Data("knowledge base needs at least three unrelated lemma groups".into()));
    }
    Rng::stream(seed, 0).shuffle(&mut comps);

    let sizes = |count: usize| -> [usize; 3] {
        let val = ((count as f64 * fracs[1] / total).round() as usize).max(1);
        let test = ((count as f64 * fracs[2] / total).round() as usize).max(1);
        [count.saturating_sub(val + test), val, test]
    };
    let comp_sizes = sizes(comps.len());
    if comp_sizes[0] == 0 {
        return Err(Error::Data("too few lemma groups for the requested splits".into()));
    }
    let pair_sizes = sizes(n_pairs);

    let mut start = 0;
    let mut sets = Vec::with_capacity(3);
    let mut lemmas: [Vec<String>; 3] = Default::default();
    for (k, &count) in comp_sizes.iter().enumerate() {
        let group = &comps[start..start + count];
        start += count;
        let keep: BTreeSet<&str> = group.iter().flatten().map(String::as_str).collect();
        let sub = restrict(kb, &keep);
        let mut rng = Rng::stream(seed, k as u64 + 1);
        let data = gen_synthetic(&sub, pair_sizes[k], bank, &mut rng)
            .map_err(|e| Error::Data(format!("split {k}: {e}")))?;
        sets.push(data);
        lemmas[k] = keep.into_iter().map(str::to_owned).collect();
    }
    let test = sets.pop().expect("three splits");
    let val = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    Ok(SynthSplits { train, val, test, lemmas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textio::tokenize;

    fn ex(label: usize, a: &str, b: &str) -> Example {
        Example {
            label,
            text_a: a.into(),
            text_b: b.into(),
        }
    }

    fn kb(rows: &[(&str, &str, RelationKind)]) -> LexicalKB {
        let mut kb = LexicalKB::empty();
        for &(a, b, k) in rows {
            kb.insert(a, b, k).unwrap();
        }
        kb
    }

    #[test]
    fn spans_agree_with_tokenizer() {
        for text in ["The soup, is HOT!", "  a--b  c ", "naïve café's", "x"] {
            let spans: Vec<String> = token_spans(text).into_iter().map(|(_, t)| t).collect();
            assert_eq!(spans, tokenize(text));
        }
    }

    #[test]
    fn swap_ant_single_candidate() {
        let kb = kb(&[("hot", "cold", RelationKind::Antonym)]);
        let out = swap_antonyms(&ex(1, "the soup is hot", "the soup is hot"), &kb, &mut Rng::new(0)).unwrap();
        assert_eq!(out.transformed, ex(0, "the soup is hot", "the soup is cold"));
        assert_eq!(
            out.swaps,
            vec![Swap {
                position: 3,
                old: "hot".into(),
                new: "cold".into(),
                kind: RelationKind::Antonym
            }]
        );
    }

    #[test]
    fn swap_ant_skips() {
        let kb = kb(&[("hot", "cold", RelationKind::Antonym)]);
        assert!(swap_antonyms(&ex(1, "a", "the soup is warm"), &kb, &mut Rng::new(0)).is_none());
        assert!(swap_antonyms(&ex(0, "a", "the soup is hot"), &kb, &mut Rng::new(0)).is_none());
    }

    #[test]
    fn swap_choice_is_seeded() {
        let kb = kb(&[
            ("hot", "cold", RelationKind::Antonym),
            ("hot", "cool", RelationKind::Antonym),
            ("hot", "chilly", RelationKind::Antonym),
        ]);
        let e = ex(1, "a", "hot hot hot hot");
        let runs: Vec<_> = (0..3)
            .map(|_| swap_antonyms(&e, &kb, &mut Rng::new(11)).unwrap())
            .collect();
        assert!(runs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn swap_syn_keeps_label_and_other_bytes() {
        let kb = kb(&[("car", "automobile", RelationKind::Synonym)]);
        let out = swap_synonyms(&ex(1, "buy a car", "Buy  a Car!"), &kb, &mut Rng::new(0)).unwrap();
        assert_eq!(out.transformed.text_b, "Buy  a automobile!");
        assert_eq!(out.transformed.label, 1);
        assert!(swap_synonyms(&ex(1, "x", "buy a bike"), &kb, &mut Rng::new(0)).is_none());
    }

    #[test]
    fn swap_syn_two_cycle_restores() {
        let kb = kb(&[("car", "automobile", RelationKind::Synonym)]);
        let once = swap_synonyms(&ex(1, "buy a car", "buy a car"), &kb, &mut Rng::new(0)).unwrap();
        let twice = swap_synonyms(&once.transformed, &kb, &mut Rng::new(0)).unwrap();
        assert_eq!(twice.transformed.text_b, "buy a car");
    }

    #[test]
    fn minimal_synthetic_pair() {
        let kb = kb(&[
            ("hot", "cold", RelationKind::Antonym),
            ("car", "automobile", RelationKind::Synonym),
        ]);
        let bank = TemplateBank::new(vec!["it is {}".into()]).unwrap();
        let d = gen_synthetic(&kb, 2, &bank, &mut Rng::new(0)).unwrap();
        let mut labels: Vec<usize> = d.examples().iter().map(|e| e.label).collect();
        labels.sort();
        assert_eq!(labels, vec![0, 1]);
        let neg = d.examples().iter().find(|e| e.label == 0).unwrap();
        assert!(["it is hot", "it is cold"].contains(&neg.text_a.as_str()));
    }

    #[test]
    fn synthetic_needs_both_relations() {
        let kb = kb(&[("car", "automobile", RelationKind::Synonym)]);
        let bank = TemplateBank::new(vec!["{}".into()]).unwrap();
        assert!(gen_synthetic(&kb, 4, &bank, &mut Rng::new(0)).is_err());
        assert!(TemplateBank::new(vec!["no slot".into()]).is_err());
        assert!(TemplateBank::new(vec![]).is_err());
    }

    #[test]
    fn builtin_lexicon_is_large_enough() {
        let c = builtin_lexicon().counts();
        assert!(c.antonym >= 50 && c.synonym >= 50, "{c:?}");
        assert!(!TemplateBank::builtin().templates().is_empty());
    }

    #[test]
    fn negatives_are_swapped_paraphrases() {
        let kb = builtin_lexicon();
        let pools = pair_pools(&kb);
        for (x, z) in &pools.negative {
            assert!(kb.lookup(x, z).is_zero());
            let via = kb
                .related(x, RelationKind::Synonym)
                .into_iter()
                .any(|y| kb.lookup(y, z).contains(RelationKind::Antonym));
            assert!(via, "{x} {z}");
        }
    }

    #[test]
    fn splits_are_lexically_disjoint_and_balanced() {
        let kb = builtin_lexicon();
        let s = gen_synthetic_splits(&kb, 301, &TemplateBank::builtin(), SplitSpec::default(), 5).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 301);
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!(s.lemmas[i].iter().all(|l| !s.lemmas[j].contains(l)));
        }
        for d in [&s.train, &s.val, &s.test] {
            let ones = d.examples().iter().filter(|e| e.label == 1).count();
            assert!(ones.abs_diff(d.len() - ones) <= 1);
        }
        let again = gen_synthetic_splits(&kb, 301, &TemplateBank::builtin(), SplitSpec::default(), 5).unwrap();
        assert_eq!(s.train, again.train);
        assert_eq!(s.test, again.test);
    }
}
