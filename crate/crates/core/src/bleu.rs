//! Corpus BLEU with exponential smoothing and a single reference.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tokenize::Tokenizer;

pub const MAX_ORDER: usize = 4;

/// Fields of the signature string other than the tokenizer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignatureInfo {
    /// `src-tgt`, omitted from the signature when `None`.
    pub lang: Option<String>,
    pub version: String,
}

impl Default for SignatureInfo {
    fn default() -> Self {
        SignatureInfo { lang: None, version: env!("CARGO_PKG_VERSION").to_string() }
    }
}

/// `BLEU+case.mixed +lang.<pair> +numrefs.1 +smooth.exp +tok.<t> +version.<v>`
pub fn signature(tok: Tokenizer, info: &SignatureInfo) -> String {
    let mut fields = vec!["case.mixed".to_string()];
    if let Some(lang) = &info.lang {
        fields.push(format!("lang.{lang}"));
    }
    fields.push("numrefs.1".into());
    fields.push("smooth.exp".into());
    fields.push(format!("tok.{}", tok.name()));
    fields.push(format!("version.{}", info.version));
    format!("BLEU+{}", fields.join(" +"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuResult {
    /// In `[0, 100]`.
    pub score: f64,
    /// Smoothed precisions in percent, n = 1..=4.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub signature: String,
}

impl BleuResult {
    /// `<score> <signature>` on one line, precisions and brevity details on the next.
    pub fn report(&self) -> String {
        let prec: Vec<String> = self.precisions.iter().map(|p| format!("{p:.1}")).collect();
        let ratio = if self.ref_len == 0 { 0.0 } else { self.hyp_len as f64 / self.ref_len as f64 };
        format!(
            "{:.2} {}\n{} (BP = {:.3} ratio = {:.3} hyp_len = {} ref_len = {})",
            self.score,
            self.signature,
            prec.join("/"),
            self.brevity_penalty,
            ratio,
            self.hyp_len,
            self.ref_len
        )
    }
}

impl fmt::Display for BleuResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.report())
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of one hypothesis/reference pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn from_tokens(hyp: &[String], reference: &[String]) -> Self {
        let mut s = BleuStats { hyp_len: hyp.len(), ref_len: reference.len(), ..Default::default() };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = h.values().sum();
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn merge(mut self, other: &BleuStats) -> Self {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
        self
    }

    /// Exponentially smoothed BLEU from accumulated counts.
    ///
    /// Each order with zero matches doubles a divisor `k` and uses precision
    /// `1 / (k * total)`. An order with no n-grams at all gives score 0.
    #[allow(clippy::needless_range_loop)]
    pub fn finish(&self, signature: String) -> BleuResult {
        let mut fractions = [0.0; MAX_ORDER];
        let mut divisor = 1.0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                break;
            }
            fractions[n] = if self.matches[n] == 0 {
                divisor *= 2.0;
                1.0 / (divisor * self.totals[n] as f64)
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
        }
        let brevity_penalty = if self.hyp_len >= self.ref_len {
            1.0
        } else if self.hyp_len == 0 {
            0.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        let score = if fractions.contains(&0.0) {
            0.0
        } else {
            let log_sum: f64 = fractions.iter().map(|p| p.ln()).sum();
            100.0 * brevity_penalty * (log_sum / MAX_ORDER as f64).exp()
        };
        BleuResult {
            score,
            precisions: fractions.map(|f| 100.0 * f),
            matches: self.matches,
            totals: self.totals,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
            signature,
        }
    }
}

/// Corpus-level BLEU of `hyps` against one reference each.
///
/// Trailing whitespace is stripped before tokenization.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[R],
    tok: Tokenizer,
    info: &SignatureInfo,
) -> Result<BleuResult> {
    if hyps.is_empty() {
        return Err(Error::Invalid("cannot score an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    let stats = hyps.iter().zip(refs).fold(BleuStats::default(), |acc, (h, r)| {
        let h = tok.tokenize(h.as_ref().trim_end());
        let r = tok.tokenize(r.as_ref().trim_end());
        acc.merge(&BleuStats::from_tokens(&h, &r))
    });
    Ok(stats.finish(signature(tok, info)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_100() {
        let s = corpus_bleu(
            &["the cat sat on the mat ."],
            &["the cat sat on the mat ."],
            Tokenizer::Mteval13a,
            &SignatureInfo::default(),
        )
        .unwrap();
        assert_eq!(s.score, 100.0);
        assert_eq!(s.brevity_penalty, 1.0);
    }

    #[test]
    fn short_hypothesis() {
        let s = corpus_bleu(&["a b c d"], &["a b c d e"], Tokenizer::Mteval13a, &SignatureInfo::default()).unwrap();
        assert_eq!(s.precisions, [100.0; 4]);
        assert!((s.brevity_penalty - (-0.25f64).exp()).abs() < 1e-15);
        assert!((s.score - 77.8800783).abs() < 1e-6);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let s = corpus_bleu(&[""], &["a b"], Tokenizer::Mteval13a, &SignatureInfo::default()).unwrap();
        assert_eq!(s.score, 0.0);
        assert!(corpus_bleu::<&str, &str>(&[], &[], Tokenizer::Zh, &SignatureInfo::default()).is_err());
    }

    #[test]
    fn pinned_signatures() {
        let info = |lang: &str| SignatureInfo { lang: Some(lang.into()), version: "1.5.1".into() };
        assert_eq!(
            signature(Tokenizer::Zh, &info("vi-zh")),
            "BLEU+case.mixed +lang.vi-zh +numrefs.1 +smooth.exp +tok.zh +version.1.5.1"
        );
        assert_eq!(
            signature(Tokenizer::Mteval13a, &info("zh-vi")),
            "BLEU+case.mixed +lang.zh-vi +numrefs.1 +smooth.exp +tok.13a +version.1.5.1"
        );
    }
}
