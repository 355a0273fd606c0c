//! Sequence-level evaluation metrics.
//!
//! All per-sample metrics take token ids with specials already removed (see
//! [`strip_specials`]); [`evaluate`] does the stripping itself.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::vocab::{strip_specials, Category, TokenSequence, Vocabulary};
use crate::{Error, Result};

/// Edit distance with unit insert/delete/substitute costs, two-row DP.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - lev(a, b) / max(|a|, |b|)`; two empty sequences are fully similar.
pub fn normalized_similarity<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityMode {
    /// Levenshtein over token ids.
    #[default]
    Token,
    /// Levenshtein over characters of the detokenized text.
    Char,
}

pub const EM_SIMILARITY_THRESHOLD: f64 = 0.95;

pub fn exact_match(pred: &[usize], gt: &[usize]) -> bool {
    pred == gt
}

/// Token-level similarity in `[0, 1]`.
pub fn similarity(pred: &[usize], gt: &[usize]) -> f64 {
    normalized_similarity(pred, gt)
}

pub fn similarity_with(pred: &[usize], gt: &[usize], v: &Vocabulary, mode: SimilarityMode) -> Result<f64> {
    match mode {
        SimilarityMode::Token => Ok(similarity(pred, gt)),
        SimilarityMode::Char => {
            let p: Vec<char> = v.decode_ids(pred)?.chars().collect();
            let g: Vec<char> = v.decode_ids(gt)?.chars().collect();
            Ok(normalized_similarity(&p, &g))
        }
    }
}

pub fn row_accuracy(pred: &[usize], gt: &[usize], v: &Vocabulary) -> Result<bool> {
    if !v.has_row_separator() {
        return Err(Error::NoRowSeparator);
    }
    let rows = |s: &[usize]| s.iter().filter(|&&id| v.is_row_separator(id)).count();
    Ok(rows(pred) == rows(gt))
}

/// Compares the total number of alignment tokens, regardless of kind or order.
pub fn column_accuracy(pred: &[usize], gt: &[usize], v: &Vocabulary) -> bool {
    let cols = |s: &[usize]| s.iter().filter(|&&id| v.category(id) == Category::Alignment).count();
    cols(pred) == cols(gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CharClass {
    /// `[0-9A-Za-z]`
    Alnum,
    /// Printable characters that are not alphanumeric.
    NonLatexSymbol,
}

impl CharClass {
    fn contains(self, c: char) -> bool {
        match self {
            CharClass::Alnum => c.is_ascii_alphanumeric(),
            CharClass::NonLatexSymbol => !c.is_alphanumeric() && !c.is_whitespace() && !c.is_control(),
        }
    }
}

fn char_multiset(ids: &[usize], v: &Vocabulary, class: CharClass) -> BTreeMap<char, usize> {
    let mut m = BTreeMap::new();
    for &id in ids {
        if v.category(id) != Category::Content {
            continue;
        }
        if let Some(tok) = v.token(id) {
            for c in tok.text.chars().filter(|&c| class.contains(c)) {
                *m.entry(c).or_insert(0) += 1;
            }
        }
    }
    m
}

/// Multiset equality of the characters of `class` inside content tokens.
pub fn multiset_char_accuracy(pred: &[usize], gt: &[usize], v: &Vocabulary, class: CharClass) -> bool {
    char_multiset(pred, v, class) == char_multiset(gt, v, class)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    LatexCommand,
    LatexSymbol,
}

fn token_multiset(ids: &[usize], v: &Vocabulary, category: Category) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &id in ids.iter().filter(|&&id| v.category(id) == category) {
        *m.entry(id).or_insert(0) += 1;
    }
    m
}

pub fn multiset_token_accuracy(pred: &[usize], gt: &[usize], v: &Vocabulary, class: TokenClass) -> bool {
    let category = match class {
        TokenClass::LatexCommand => Category::LatexCommand,
        TokenClass::LatexSymbol => Category::LatexSymbol,
    };
    token_multiset(pred, v, category) == token_multiset(gt, v, category)
}

/// Per-sample verdicts, one per metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleFlags {
    pub exact_match: bool,
    pub em_at_95: bool,
    pub row_acc: bool,
    pub col_acc: bool,
    pub alnum_acc: bool,
    pub latex_token_acc: bool,
    pub latex_symbol_acc: bool,
    pub non_latex_symbol_acc: bool,
}

impl SampleFlags {
    pub const NAMES: [&'static str; 8] = [
        "exact_match",
        "em_at_95",
        "row_acc",
        "col_acc",
        "alnum_acc",
        "latex_token_acc",
        "latex_symbol_acc",
        "non_latex_symbol_acc",
    ];

    pub fn as_array(&self) -> [bool; 8] {
        [
            self.exact_match,
            self.em_at_95,
            self.row_acc,
            self.col_acc,
            self.alnum_acc,
            self.latex_token_acc,
            self.latex_symbol_acc,
            self.non_latex_symbol_acc,
        ]
    }
}

/// Scores one prediction against its ground truth. Inputs may still carry
/// specials; they are stripped here.
pub fn score_sample(pred: &[usize], gt: &[usize], v: &Vocabulary, mode: SimilarityMode) -> Result<SampleFlags> {
    let p = strip_specials(pred);
    let g = strip_specials(gt);
    Ok(SampleFlags {
        exact_match: exact_match(&p, &g),
        em_at_95: similarity_with(&p, &g, v, mode)? >= EM_SIMILARITY_THRESHOLD,
        row_acc: row_accuracy(&p, &g, v)?,
        col_acc: column_accuracy(&p, &g, v),
        alnum_acc: multiset_char_accuracy(&p, &g, v, CharClass::Alnum),
        latex_token_acc: multiset_token_accuracy(&p, &g, v, TokenClass::LatexCommand),
        latex_symbol_acc: multiset_token_accuracy(&p, &g, v, TokenClass::LatexSymbol),
        non_latex_symbol_acc: multiset_char_accuracy(&p, &g, v, CharClass::NonLatexSymbol),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub exact_match: f64,
    pub em_at_95: f64,
    pub row_acc: f64,
    pub col_acc: f64,
    pub alnum_acc: f64,
    pub latex_token_acc: f64,
    pub latex_symbol_acc: f64,
    pub non_latex_symbol_acc: f64,
    pub per_sample: Vec<SampleFlags>,
    pub n: usize,
}

impl MetricReport {
    pub fn from_samples(per_sample: Vec<SampleFlags>) -> Result<Self> {
        let n = per_sample.len();
        if n == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let mut counts = [0usize; 8];
        for s in &per_sample {
            for (c, flag) in counts.iter_mut().zip(s.as_array()) {
                *c += usize::from(flag);
            }
        }
        let f = |i: usize| counts[i] as f64 / n as f64;
        Ok(Self {
            exact_match: f(0),
            em_at_95: f(1),
            row_acc: f(2),
            col_acc: f(3),
            alnum_acc: f(4),
            latex_token_acc: f(5),
            latex_symbol_acc: f(6),
            non_latex_symbol_acc: f(7),
            per_sample,
            n,
        })
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.exact_match,
            self.em_at_95,
            self.row_acc,
            self.col_acc,
            self.alnum_acc,
            self.latex_token_acc,
            self.latex_symbol_acc,
            self.non_latex_symbol_acc,
        ]
    }
}

pub fn evaluate<'a, I>(pairs: I, v: &Vocabulary, mode: SimilarityMode) -> Result<MetricReport>
where
    I: IntoIterator<Item = (&'a TokenSequence, &'a TokenSequence)>,
{
    let mut samples = Vec::new();
    for (pred, gt) in pairs {
        v.validate(pred)?;
        v.validate(gt)?;
        samples.push(score_sample(&pred.ids, &gt.ids, v, mode)?);
    }
    MetricReport::from_samples(samples)
}
