//! Token vocabulary, tokenization and the rare-token replacement rule.
//!
//! Labels are pre-tokenized LaTeX: tokens are separated by whitespace and no
//! LaTeX lexing happens here.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::{Error, Result};

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

pub const SPECIAL_TEXTS: [&str; 4] = ["<sos>", "<eos>", "<pad>", "<unk>"];

/// Placeholder for special mathematical characters and rare tokens.
pub const LATEX_TOKEN: &str = "LATEX_TOKEN";
/// The LaTeX row separator, `\\`.
pub const ROW_SEPARATOR: &str = "\\\\";
pub const CELL: &str = "CELL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Structure,
    Alignment,
    LatexCommand,
    LatexSymbol,
    Content,
    Special,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Structure => "structure",
            Category::Alignment => "alignment",
            Category::LatexCommand => "latex-command",
            Category::LatexSymbol => "latex-symbol",
            Category::Content => "content",
            Category::Special => "special",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "structure" => Category::Structure,
            "alignment" => Category::Alignment,
            "latex-command" => Category::LatexCommand,
            "latex-symbol" => Category::LatexSymbol,
            "content" => Category::Content,
            "special" => Category::Special,
            other => return Err(Error::Format(alloc::format!("unknown category `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Structure only; cell contents are `CELL` markers.
    Tsr,
    /// Structure and content.
    Tcr,
}

impl Task {
    pub fn default_max_seq_len(self) -> usize {
        match self {
            Task::Tsr => 250,
            Task::Tcr => 500,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Tsr => "tsr",
            Task::Tcr => "tcr",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsr" => Ok(Task::Tsr),
            "tcr" => Ok(Task::Tcr),
            other => Err(Error::Format(alloc::format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub category: Category,
}

/// Deterministic category for a bare token.
pub fn classify_token(text: &str) -> Category {
    if SPECIAL_TEXTS.contains(&text) {
        Category::Special
    } else if text == "&" || text == ROW_SEPARATOR {
        Category::Structure
    } else if text.starts_with('\\') {
        Category::LatexCommand
    } else if matches!(text, "c" | "r" | "l") {
        Category::Alignment
    } else if text == LATEX_TOKEN {
        Category::LatexSymbol
    } else {
        Category::Content
    }
}

/// Encoded label or prediction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Per-token log-probabilities, same length as `ids` when present.
    pub logprobs: Option<Vec<f64>>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids, logprobs: None }
    }

    /// Mean per-token log-probability, or 0 when none were recorded.
    pub fn mean_logprob(&self) -> f64 {
        match &self.logprobs {
            Some(lp) if !lp.is_empty() => lp.iter().sum::<f64>() / lp.len() as f64,
            _ => 0.0,
        }
    }
}

/// Drops SOS/PAD, stops at the first EOS.
pub fn strip_specials(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .copied()
        .take_while(|&id| id != EOS)
        .filter(|&id| id != SOS && id != PAD)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    frequencies: Vec<u64>,
    row_separator: Vec<bool>,
    index: BTreeMap<String, usize>,
    /// Rare tokens folded into `LATEX_TOKEN`, with their raw frequency.
    replaced: BTreeMap<String, u64>,
    task: Task,
    max_seq_len: usize,
}

/// One line of a vocabulary listing.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabEntry {
    pub text: String,
    pub category: Category,
    pub frequency: u64,
    pub row_separator: bool,
}

impl Vocabulary {
    /// Builds a vocabulary from raw labels, folding tokens seen fewer than
    /// `min_count` times into `LATEX_TOKEN`.
    pub fn build<I, S>(corpus: I, task: Task, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut n_labels = 0usize;
        for label in corpus {
            n_labels += 1;
            for tok in label.as_ref().split_whitespace() {
                if SPECIAL_TEXTS.contains(&tok) {
                    return Err(Error::ReservedToken(tok.to_string()));
                }
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        if n_labels == 0 {
            return Err(Error::EmptyCorpus);
        }

        let mut kept: Vec<(String, u64)> = Vec::new();
        let mut replaced = BTreeMap::new();
        let mut latex_freq = counts.get(LATEX_TOKEN).copied().unwrap_or(0);
        for (text, &n) in &counts {
            if text == LATEX_TOKEN {
                continue;
            }
            if n >= min_count {
                kept.push((text.clone(), n));
            } else {
                replaced.insert(text.clone(), n);
                latex_freq += n;
            }
        }
        if task == Task::Tcr || !replaced.is_empty() || counts.contains_key(LATEX_TOKEN) {
            kept.push((LATEX_TOKEN.to_string(), latex_freq));
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let entries = SPECIAL_TEXTS
            .iter()
            .map(|t| (t.to_string(), 0))
            .chain(kept)
            .map(|(text, frequency)| VocabEntry {
                category: classify_token(&text),
                row_separator: text == ROW_SEPARATOR,
                text,
                frequency,
            })
            .collect();
        let mut vocab = Self::from_entries(entries, task, task.default_max_seq_len())?;
        vocab.replaced = replaced;
        Ok(vocab)
    }

    /// Assembles a vocabulary from explicit entries (e.g. a vocabulary file).
    /// The first four entries must be the specials in order.
    pub fn from_entries(entries: Vec<VocabEntry>, task: Task, max_seq_len: usize) -> Result<Self> {
        if max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        if entries.len() < SPECIAL_TEXTS.len() {
            return Err(Error::Format("vocabulary is missing special tokens".into()));
        }
        for (i, s) in SPECIAL_TEXTS.iter().enumerate() {
            if entries[i].text != *s || entries[i].category != Category::Special {
                return Err(Error::Format(alloc::format!("entry {i} must be special token {s}")));
            }
        }
        let mut index = BTreeMap::new();
        let mut tokens = Vec::with_capacity(entries.len());
        let mut frequencies = Vec::with_capacity(entries.len());
        let mut row_separator = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            if e.text.is_empty() || e.text.chars().any(char::is_whitespace) {
                return Err(Error::Format(alloc::format!("invalid token text {:?}", e.text)));
            }
            if i >= SPECIAL_TEXTS.len() && e.category == Category::Special {
                return Err(Error::ReservedToken(e.text));
            }
            if index.insert(e.text.clone(), i).is_some() {
                return Err(Error::Format(alloc::format!("duplicate token `{}`", e.text)));
            }
            tokens.push(Token { text: e.text, category: e.category });
            frequencies.push(e.frequency);
            row_separator.push(e.row_separator);
        }
        Ok(Self {
            tokens,
            frequencies,
            row_separator,
            index,
            replaced: BTreeMap::new(),
            task,
            max_seq_len,
        })
    }

    /// Registers tokens that should encode as `LATEX_TOKEN`.
    pub fn with_replaced(mut self, replaced: BTreeMap<String, u64>) -> Result<Self> {
        if !replaced.is_empty() && !self.index.contains_key(LATEX_TOKEN) {
            return Err(Error::Format("replaced tokens require LATEX_TOKEN".into()));
        }
        if let Some(t) = replaced.keys().find(|t| self.index.contains_key(t.as_str())) {
            return Err(Error::Format(alloc::format!("replaced token `{t}` is also a vocabulary token")));
        }
        self.replaced = replaced;
        Ok(self)
    }

    pub fn with_max_seq_len(mut self, max_seq_len: usize) -> Self {
        self.max_seq_len = max_seq_len.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&Token> {
        self.tokens.get(id)
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.frequencies.get(id).copied().unwrap_or(0)
    }

    pub fn replaced(&self) -> &BTreeMap<String, u64> {
        &self.replaced
    }

    pub fn id(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }

    pub fn category(&self, id: usize) -> Category {
        self.tokens.get(id).map_or(Category::Special, |t| t.category)
    }

    pub fn is_row_separator(&self, id: usize) -> bool {
        self.row_separator.get(id).copied().unwrap_or(false)
    }

    pub fn has_row_separator(&self) -> bool {
        self.row_separator.iter().any(|&r| r)
    }

    pub fn entries(&self) -> impl Iterator<Item = VocabEntry> + '_ {
        self.tokens.iter().enumerate().map(|(i, t)| VocabEntry {
            text: t.text.clone(),
            category: t.category,
            frequency: self.frequencies[i],
            row_separator: self.row_separator[i],
        })
    }

    fn lookup(&self, tok: &str) -> usize {
        if let Some(id) = self.id(tok) {
            id
        } else if self.replaced.contains_key(tok) {
            self.id(LATEX_TOKEN).unwrap_or(UNK)
        } else {
            UNK
        }
    }

    /// Encodes a label as `SOS tokens... EOS`, keeping at most `max_seq_len`
    /// body tokens.
    pub fn encode(&self, label: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.max_seq_len.min(label.len() + 2));
        ids.push(SOS);
        ids.extend(label.split_whitespace().take(self.max_seq_len).map(|t| self.lookup(t)));
        ids.push(EOS);
        TokenSequence::new(ids)
    }

    /// Body token ids only (no SOS/EOS, no truncation).
    pub fn encode_body(&self, label: &str) -> Vec<usize> {
        label.split_whitespace().map(|t| self.lookup(t)).collect()
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        self.decode_ids(&seq.ids)
    }

    pub fn decode_ids(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .tokens
                .get(id)
                .ok_or(Error::InvalidId { id, size: self.tokens.len() })?;
            match id {
                EOS => break,
                SOS | PAD => continue,
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(&tok.text);
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self, seq: &TokenSequence) -> Result<()> {
        if let Some(&id) = seq.ids.iter().find(|&&id| id >= self.tokens.len()) {
            return Err(Error::InvalidId { id, size: self.tokens.len() });
        }
        Ok(())
    }
}
