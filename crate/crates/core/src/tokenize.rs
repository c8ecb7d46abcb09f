//! Scoring tokenizers: mteval-v13a and a Chinese-character variant.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;

use crate::error::{Error, Result};

struct Rules {
    symbols: Regex,
    period_after_non_digit: Regex,
    period_before_non_digit: Regex,
    dash_after_digit: Regex,
    spaces: Regex,
}

static RULES: LazyLock<Rules> = LazyLock::new(|| Rules {
    symbols: Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(),
    period_after_non_digit: Regex::new(r"([^0-9])([\.,])").unwrap(),
    period_before_non_digit: Regex::new(r"([\.,])([^0-9])").unwrap(),
    dash_after_digit: Regex::new(r"([0-9])(-)").unwrap(),
    // Python's `\s` also covers the ASCII separators 0x1C..0x1F.
    spaces: Regex::new(r"[\s\x1C-\x1F]+").unwrap(),
});

fn is_space(c: char) -> bool {
    c.is_whitespace() || ('\u{1C}'..='\u{1F}').contains(&c)
}

/// The 13a rules on an already entity-normalized line, returned space-joined.
fn post_tokenize(line: &str) -> String {
    let r = &*RULES;
    let s = r.symbols.replace_all(line, " $1 ");
    let s = r.period_after_non_digit.replace_all(&s, "$1 $2 ");
    let s = r.period_before_non_digit.replace_all(&s, " $1 $2");
    let s = r.dash_after_digit.replace_all(&s, "$1 $2 ");
    let s = r.spaces.replace_all(&s, " ");
    s.trim_matches(is_space).to_string()
}

fn normalize(line: &str) -> String {
    line.replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ")
        .replace("&quot;", "\"")
        .replace("&amp;", "&")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
}

/// mteval-v13a tokenization, space-joined.
pub fn tokenize_13a_line(line: &str) -> String {
    post_tokenize(&format!(" {} ", normalize(line)))
}

pub fn tokenize_13a(line: &str) -> Vec<String> {
    tokenize_13a_line(line).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// CJK ideographs, CJK punctuation and full-width forms.
pub fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{4E00}'..='\u{9FFF}'
        | '\u{3400}'..='\u{4DBF}'
        | '\u{F900}'..='\u{FAFF}'
        | '\u{3000}'..='\u{303F}'
        | '\u{FF00}'..='\u{FFEF}')
}

/// Every CJK character becomes its own token; the rest follows the 13a rules.
pub fn tokenize_zh_line(line: &str) -> String {
    let mut spaced = String::with_capacity(line.len() * 2);
    for c in line.trim_matches(is_space).chars() {
        if is_cjk(c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    tokenize_13a_line(&spaced)
}

pub fn tokenize_zh(line: &str) -> Vec<String> {
    tokenize_zh_line(line).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Tokenizer {
    #[default]
    Mteval13a,
    Zh,
}

impl Tokenizer {
    pub fn tokenize_line(self, line: &str) -> String {
        match self {
            Tokenizer::Mteval13a => tokenize_13a_line(line),
            Tokenizer::Zh => tokenize_zh_line(line),
        }
    }

    pub fn tokenize(self, line: &str) -> Vec<String> {
        match self {
            Tokenizer::Mteval13a => tokenize_13a(line),
            Tokenizer::Zh => tokenize_zh(line),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tokenizer::Mteval13a => "13a",
            Tokenizer::Zh => "zh",
        }
    }
}

impl FromStr for Tokenizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "13a" => Ok(Tokenizer::Mteval13a),
            "zh" => Ok(Tokenizer::Zh),
            other => Err(Error::Config(format!("unknown tokenizer `{other}` (expected 13a or zh)"))),
        }
    }
}

impl fmt::Display for Tokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
