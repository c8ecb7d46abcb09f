//! Greedy and beam-search decoding.
//!
//! Hypotheses never contain `<pad>` or `<s>`; they end with `</s>` or stop at
//! `max_len` generated tokens. Scores are raw model log-probabilities.

use std::cmp::Ordering;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{argmax, Model, TokenBatch, BOS, EOS, PAD};
use crate::tensor::Tensor;

/// Log-softmax of one logits row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn selectable(token: usize) -> bool {
    token != PAD && token != BOS
}

/// Encoder memory `[S, d]` for raw source ids; `</s>` is appended as in training.
pub fn encode_source(model: &Model, src: &[usize]) -> Result<Tensor> {
    let ids: Vec<usize> = src.iter().copied().chain([EOS]).collect();
    model.encode_sentence(&ids)
}

/// Next-token log-probabilities `[k, V]` for `k` hypotheses of equal length.
fn step_log_probs(model: &Model, memory: &Tensor, hyps: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let (s, d) = (memory.shape()[0], memory.shape()[1]);
    let prefixes: Vec<Vec<usize>> = hyps.iter().map(|h| [BOS].into_iter().chain(h.iter().copied()).collect()).collect();
    let batch = TokenBatch::new(&prefixes)?;
    let k = prefixes.len();
    let mut tiled = Vec::with_capacity(k * s * d);
    for _ in 0..k {
        tiled.extend_from_slice(memory.data());
    }
    let mut g = Graph::new();
    let mem = g.input(Tensor::new(vec![k, s, d], tiled)?);
    let logits = model.decode(&mut g, &batch, mem, &vec![s; k])?;
    let lv = g.value(logits);
    let t = batch.width;
    Ok((0..k).map(|b| log_softmax(lv.row(b * t + t - 1))).collect())
}

/// Picks the highest-scoring selectable token at every step; ties go to the lowest id.
pub fn greedy_decode(model: &Model, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let memory = encode_source(model, src)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = step_log_probs(model, &memory, std::slice::from_ref(&out))?.remove(0);
        let masked: Vec<f64> =
            lp.iter().enumerate().map(|(i, &v)| if selectable(i) { v } else { f64::NEG_INFINITY }).collect();
        let next = argmax(&masked);
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

/// Higher score first, then the lexicographically smaller sequence.
fn by_score_then_ids(a: &Hyp, ak: f64, b: &Hyp, bk: f64) -> Ordering {
    bk.partial_cmp(&ak).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamOptions {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by log-probability per generated token.
    pub length_norm: bool,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions { beam_size: 4, max_len: 200, length_norm: true }
    }
}

/// Beam search returning the best hypothesis and its total log-probability.
///
/// Each step keeps the `beam_size` best extensions of the live hypotheses;
/// extensions that emit `</s>` or reach `max_len` leave the beam as finished.
pub fn beam_search_scored(model: &Model, src: &[usize], opts: BeamOptions) -> Result<(Vec<usize>, f64)> {
    if opts.beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if opts.max_len == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let memory = encode_source(model, src)?;
    let mut alive = vec![Hyp { tokens: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();
    while !alive.is_empty() {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|h| h.tokens.clone()).collect();
        let lps = step_log_probs(model, &memory, &prefixes)?;
        let mut candidates: Vec<Hyp> = Vec::new();
        for (h, lp) in alive.iter().zip(&lps) {
            for (tok, &l) in lp.iter().enumerate().filter(|(t, _)| selectable(*t)) {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                candidates.push(Hyp { tokens, score: h.score + l });
            }
        }
        candidates.sort_by(|a, b| by_score_then_ids(a, a.score, b, b.score));
        candidates.truncate(opts.beam_size);
        alive.clear();
        for c in candidates {
            if c.tokens.last() == Some(&EOS) || c.tokens.len() >= opts.max_len {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
    }
    let key = |h: &Hyp| if opts.length_norm { h.score / h.tokens.len() as f64 } else { h.score };
    finished.sort_by(|a, b| by_score_then_ids(a, key(a), b, key(b)));
    let best = finished.swap_remove(0);
    Ok((best.tokens, best.score))
}

pub fn beam_search(model: &Model, src: &[usize], opts: BeamOptions) -> Result<Vec<usize>> {
    Ok(beam_search_scored(model, src, opts)?.0)
}

/// Total log-probability the model assigns to generating `tokens` after `<s>`.
pub fn sequence_log_prob(model: &Model, src: &[usize], tokens: &[usize]) -> Result<f64> {
    let memory = encode_source(model, src)?;
    let prefix: Vec<usize> = [BOS].into_iter().chain(tokens.iter().copied()).collect();
    let logits = model.decode_sentence(&prefix, &memory)?;
    Ok(tokens.iter().enumerate().map(|(t, &tok)| log_softmax(logits.row(t))[tok]).sum())
}

/// Decoded target ids without the closing `</s>`.
pub fn translate(model: &Model, src: &[usize], opts: BeamOptions) -> Result<Vec<usize>> {
    let mut out =
        if opts.beam_size == 1 { greedy_decode(model, src, opts.max_len)? } else { beam_search(model, src, opts)? };
    if out.last() == Some(&EOS) {
        out.pop();
    }
    Ok(out)
}
