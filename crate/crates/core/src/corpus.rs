//! Parallel corpora, vocabularies and corpus statistics.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::bpe::WordMode;
use crate::error::{Error, Result};
use crate::model::{BOS, EOS, PAD, UNK};
use crate::train::EncodedPair;

pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Line-aligned source/target sentences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<(String, String)>,
}

impl ParallelCorpus {
    /// Pairs whose source or target is blank are dropped together.
    pub fn from_lines<S: AsRef<str>, T: AsRef<str>>(src: &[S], tgt: &[T]) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Invalid(format!(
                "parallel sides differ in length: {} vs {} lines",
                src.len(),
                tgt.len()
            )));
        }
        let pairs = src
            .iter()
            .zip(tgt)
            .map(|(s, t)| (s.as_ref().trim(), t.as_ref().trim()))
            .filter(|(s, t)| !s.is_empty() && !t.is_empty())
            .map(|(s, t)| (s.to_string(), t.to_string()))
            .collect();
        Ok(ParallelCorpus { pairs })
    }

    pub fn load(src: &Path, tgt: &Path) -> Result<Self> {
        let s = read_lines(src)?;
        let t = read_lines(tgt)?;
        ParallelCorpus::from_lines(&s, &t)
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(s, _)| s.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(_, t)| t.as_str())
    }

    /// Maps both sides (already subword-segmented, space separated) to ids.
    pub fn encode(&self, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Vec<EncodedPair> {
        self.pairs.iter().map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t))).collect()
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Symbol table: `<pad> <unk> <s> </s>` first, then corpus symbols by
/// descending frequency with lexicographic ties.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().filter(|(s, _)| !SPECIALS.contains(s)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Vocab::from_symbols(
            SPECIALS.iter().copied().chain(ranked.into_iter().map(|(s, _)| s)).map(str::to_string).collect(),
        )
        .expect("symbols are unique by construction")
    }

    /// Vocabulary with exactly these symbols in id order; the first four must be the specials.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < SPECIALS.len() || symbols.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Format("vocabulary must start with <pad> <unk> <s> </s>".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary symbol {s:?}")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        Ok(Vocab { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Id of `symbol`, `<unk>` when absent.
    pub fn id(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined symbols, skipping `<pad>`, `<s>` and `</s>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.symbol(i).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One symbol per line in id order.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        for s in &self.symbols {
            writeln!(w, "{s}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        Vocab::from_symbols(r.lines().collect::<std::io::Result<Vec<_>>>()?)
    }
}

/// Size and length figures for one side of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SideStats {
    pub vocab: usize,
    pub avg_len: f64,
}

/// Examples, vocabulary sizes and average sentence lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub examples: usize,
    pub source: SideStats,
    pub target: SideStats,
}

fn side_stats<'a>(lines: impl Iterator<Item = &'a str>, mode: WordMode) -> SideStats {
    let mut types = BTreeSet::new();
    let (mut total, mut n) = (0usize, 0usize);
    for line in lines {
        n += 1;
        match mode {
            WordMode::Whitespace => {
                for t in line.split_whitespace() {
                    total += 1;
                    types.insert(t.to_string());
                }
            }
            WordMode::RawSentence => {
                for c in line.chars().filter(|c| !c.is_whitespace()) {
                    total += 1;
                    types.insert(c.to_string());
                }
            }
        }
    }
    SideStats { vocab: types.len(), avg_len: if n == 0 { 0.0 } else { total as f64 / n as f64 } }
}

/// Whitespace tokens per sentence, or non-space characters for raw-sentence sides.
pub fn corpus_stats(corpus: &ParallelCorpus, src_mode: WordMode, tgt_mode: WordMode) -> CorpusStats {
    CorpusStats {
        examples: corpus.len(),
        source: side_stats(corpus.sources(), src_mode),
        target: side_stats(corpus.targets(), tgt_mode),
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>10} {:>8} {:>12}", "side", "#examples", "#vocab", "Avg. length")?;
        for (name, s) in [("source", &self.source), ("target", &self.target)] {
            writeln!(f, "{:<8} {:>10} {:>8} {:>12.2}", name, self.examples, s.vocab, s.avg_len)?;
        }
        Ok(())
    }
}
