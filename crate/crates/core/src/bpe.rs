//! Byte-pair-encoding subword segmentation.
//!
//! Words start as character sequences whose last character carries an
//! end-of-word marker (`"low"` -> `l o w</w>`). Learning repeatedly merges the
//! most frequent adjacent pair; equal counts go to the lexicographically
//! smallest `(left, right)`. Segmented output marks every non-final piece of a
//! word with a trailing `@@`.
//!
//! In [`WordMode::RawSentence`] a whole line is one word: runs of whitespace
//! become `▁` so the line can be restored after segmentation.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const CONTINUATION: &str = "@@";
pub const SPACE_SYMBOL: char = '\u{2581}';

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordMode {
    #[default]
    Whitespace,
    RawSentence,
}

impl FromStr for WordMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(WordMode::Whitespace),
            "raw_sentence" | "raw" => Ok(WordMode::RawSentence),
            other => Err(Error::Config(format!("unknown word mode `{other}` (expected whitespace or raw_sentence)"))),
        }
    }
}

impl fmt::Display for WordMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WordMode::Whitespace => "whitespace",
            WordMode::RawSentence => "raw_sentence",
        })
    }
}

/// Splits a line into the units BPE treats as words.
pub fn words(line: &str, mode: WordMode) -> Vec<String> {
    match mode {
        WordMode::Whitespace => line.split_whitespace().map(str::to_string).collect(),
        WordMode::RawSentence => {
            let joined = line.split_whitespace().collect::<Vec<_>>().join(&SPACE_SYMBOL.to_string());
            if joined.is_empty() {
                Vec::new()
            } else {
                vec![joined]
            }
        }
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    num_ops: usize,
    mode: WordMode,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>, mode: WordMode) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate merge `{} {}`", m.0, m.1)));
            }
        }
        Ok(BpeModel { num_ops: merges.len(), merges, ranks, mode })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn num_ops(&self) -> usize {
        self.num_ops
    }

    pub fn mode(&self) -> WordMode {
        self.mode
    }

    /// One merge per line, `left right`, in learned order.
    pub fn write_merges<W: Write>(&self, w: &mut W) -> Result<()> {
        for (l, r) in &self.merges {
            writeln!(w, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn read_merges<R: BufRead>(r: R, mode: WordMode) -> Result<Self> {
        let mut merges = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (l, rt) = line
                .split_once(' ')
                .filter(|(l, r)| !l.is_empty() && !r.is_empty() && !r.contains(' '))
                .ok_or_else(|| Error::Format(format!("merge file line {}: expected `left right`", n + 1)))?;
            merges.push((l.to_string(), rt.to_string()));
        }
        BpeModel::from_merges(merges, mode)
    }

    /// Subword pieces of one word, final piece without a marker.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = initial_symbols(word);
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            let Some((l, r)) = best else { break };
            syms = merge_pair(&syms, &l, &r);
        }
        let n = syms.len();
        syms.into_iter()
            .enumerate()
            .map(|(i, s)| {
                if i + 1 == n {
                    s.strip_suffix(END_OF_WORD).map(str::to_string).unwrap_or(s)
                } else {
                    s + CONTINUATION
                }
            })
            .collect()
    }

    /// Segments a line; every word but the last piece carries `@@`.
    pub fn apply(&self, line: &str) -> Vec<String> {
        self.apply_cached(line, &mut HashMap::new())
    }

    pub fn apply_cached(&self, line: &str, cache: &mut HashMap<String, Vec<String>>) -> Vec<String> {
        let mut out = Vec::new();
        for w in words(line, self.mode) {
            let pieces = cache.entry(w).or_insert_with_key(|w| self.segment_word(w));
            out.extend(pieces.iter().cloned());
        }
        out
    }

    pub fn apply_lines<'a>(&self, lines: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut cache = HashMap::new();
        lines.into_iter().map(|l| self.apply_cached(l, &mut cache).join(" ")).collect()
    }
}

fn merge_pair(syms: &[String], l: &str, r: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
            out.push(format!("{l}{r}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `num_ops` merges, stopping early once no pair occurs twice.
pub fn learn_bpe<S: AsRef<str>>(lines: &[S], num_ops: usize, mode: WordMode) -> BpeModel {
    let mut freq: HashMap<String, u64> = HashMap::new();
    for line in lines {
        for w in words(line.as_ref(), mode) {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    let mut vocab: Vec<(Vec<String>, u64)> = freq.into_iter().map(|(w, c)| (initial_symbols(&w), c)).collect();
    vocab.sort();

    type Pair = (String, String);
    let mut counts: HashMap<Pair, u64> = HashMap::new();
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in vocab.iter().enumerate() {
        for p in syms.windows(2) {
            let pair = (p[0].clone(), p[1].clone());
            *counts.entry(pair.clone()).or_insert(0) += c;
            where_.entry(pair).or_default().insert(wi);
        }
    }
    // Max-heap on count, min on the pair; stale entries are skipped on pop.
    let mut heap: BinaryHeap<(u64, Reverse<Pair>)> = counts.iter().map(|(p, &c)| (c, Reverse(p.clone()))).collect();

    let mut merges = Vec::new();
    while merges.len() < num_ops {
        let Some((c, Reverse(pair))) = heap.pop() else { break };
        if counts.get(&pair).copied().unwrap_or(0) != c {
            continue;
        }
        if c < 2 {
            break;
        }
        let affected: Vec<usize> = {
            let mut v: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
            v.sort_unstable();
            v
        };
        let mut touched: HashSet<Pair> = HashSet::new();
        for wi in affected {
            let (syms, wc) = &vocab[wi];
            let wc = *wc;
            for p in syms.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                if let Some(e) = counts.get_mut(&key) {
                    *e -= wc;
                }
                touched.insert(key);
            }
            let merged = merge_pair(syms, &pair.0, &pair.1);
            for p in merged.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                *counts.entry(key.clone()).or_insert(0) += wc;
                where_.entry(key.clone()).or_default().insert(wi);
                touched.insert(key);
            }
            vocab[wi].0 = merged;
        }
        counts.remove(&pair);
        for key in touched {
            match counts.get(&key) {
                Some(&n) if n > 0 => heap.push((n, Reverse(key))),
                _ => {
                    counts.remove(&key);
                }
            }
        }
        merges.push(pair);
    }
    BpeModel { ranks: merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect(), merges, num_ops, mode }
}

/// Joins pieces with spaces, then removes every `"@@ "` and a trailing `"@@"`.
pub fn undo_bpe<S: AsRef<str>>(pieces: &[S]) -> String {
    let joined = pieces.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
    undo_bpe_line(&joined)
}

pub fn undo_bpe_line(line: &str) -> String {
    let s = line.replace("@@ ", "");
    s.strip_suffix(CONTINUATION).map(str::to_string).unwrap_or(s)
}

/// [`undo_bpe_line`] followed by restoring spaces for raw-sentence segmentation.
pub fn undo_bpe_line_mode(line: &str, mode: WordMode) -> String {
    let s = undo_bpe_line(line);
    match mode {
        WordMode::Whitespace => s,
        WordMode::RawSentence => s.replace(SPACE_SYMBOL, " "),
    }
}
