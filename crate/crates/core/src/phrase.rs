//! Phrase attention: n-gram window LSTMs over zipped query/key features.
//!
//! For head `i` with gram set `m`, the projected query and key matrices are
//! concatenated feature-wise (`zip`). For every gram size `n` in `m`, each
//! position `k` is summarised by a forward LSTM over the window
//! `[k - n + 1, k]` plus a backward LSTM over the same window reversed; the
//! two final hidden states are summed. The result is split back (`unzip`)
//! into a phrase key (first half) and a phrase query (second half). Phrase
//! vectors of all gram sizes are concatenated in ascending gram order and
//! replace `q_i`, `k_i` in the scaled dot product. Values are untouched.
//!
//! Windows are truncated at the sentence start and every window is an
//! independent LSTM run from the zero state. Heads with an empty gram set
//! are ordinary attention heads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{ensure_batched, AttentionParams};
use crate::autodiff::{Graph, Mask, ParamStore, Var};
use crate::error::{Error, Result};
use crate::lstm::LstmParams;
use crate::tensor::Tensor;

/// Gram sizes assigned to each attention head. An empty set is a vanilla head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GramConfig {
    per_head: Vec<BTreeSet<usize>>,
}

impl GramConfig {
    pub fn new(per_head: Vec<BTreeSet<usize>>) -> Result<Self> {
        if per_head.is_empty() {
            return Err(Error::Config("gram config needs at least one head".into()));
        }
        if per_head.iter().flatten().any(|&n| n == 0) {
            return Err(Error::Config("gram sizes must be >= 1".into()));
        }
        Ok(GramConfig { per_head })
    }

    /// The same gram set on every head.
    pub fn cross_h(grams: &[usize], heads: usize) -> Result<Self> {
        let set: BTreeSet<usize> = grams.iter().copied().collect();
        Self::new(vec![set; heads])
    }

    pub fn vanilla(heads: usize) -> Self {
        GramConfig { per_head: vec![BTreeSet::new(); heads.max(1)] }
    }

    pub fn heads(&self) -> usize {
        self.per_head.len()
    }

    pub fn grams(&self, head: usize) -> &BTreeSet<usize> {
        &self.per_head[head]
    }

    pub fn per_head(&self) -> &[BTreeSet<usize>] {
        &self.per_head
    }

    pub fn is_vanilla(&self) -> bool {
        self.per_head.iter().all(BTreeSet::is_empty)
    }

    /// Every gram size used by any head.
    pub fn union(&self) -> BTreeSet<usize> {
        self.per_head.iter().flatten().copied().collect()
    }
}

/// Textual gram specification: `cross_h:[2,3]` or `per_head:[[2],[3],[],[2,3]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GramSpec {
    CrossH(Vec<usize>),
    PerHead(Vec<Vec<usize>>),
}

impl GramSpec {
    pub fn resolve(&self, heads: usize) -> Result<GramConfig> {
        match self {
            GramSpec::CrossH(m) => GramConfig::cross_h(m, heads),
            GramSpec::PerHead(sets) => {
                if sets.len() != heads {
                    return Err(Error::Config(format!(
                        "per_head gram spec lists {} heads but the model has {heads}",
                        sets.len()
                    )));
                }
                GramConfig::new(sets.iter().map(|s| s.iter().copied().collect()).collect())
            }
        }
    }
}

impl FromStr for GramSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("invalid gram spec {s:?}: {why}"));
        let (kind, body) = s.split_once(':').ok_or_else(|| bad("expected `cross_h:[..]` or `per_head:[[..],..]`"))?;
        let spec = match kind.trim() {
            "cross_h" => GramSpec::CrossH(serde_json::from_str(body).map_err(|e| bad(&e.to_string()))?),
            "per_head" => GramSpec::PerHead(serde_json::from_str(body).map_err(|e| bad(&e.to_string()))?),
            other => return Err(bad(&format!("unknown kind `{other}`"))),
        };
        let all: Vec<usize> = match &spec {
            GramSpec::CrossH(m) => m.clone(),
            GramSpec::PerHead(sets) => sets.iter().flatten().copied().collect(),
        };
        if all.contains(&0) {
            return Err(bad("gram sizes must be >= 1"));
        }
        Ok(spec)
    }
}

impl fmt::Display for GramSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[usize]| v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        match self {
            GramSpec::CrossH(m) => write!(f, "cross_h:[{}]", list(m)),
            GramSpec::PerHead(sets) => {
                let inner: Vec<String> = sets.iter().map(|s| format!("[{}]", list(s))).collect();
                write!(f, "per_head:[{}]", inner.join(","))
            }
        }
    }
}

/// Forward and backward window LSTMs for one (head, gram) slot.
#[derive(Clone, Copy, Debug)]
pub struct LstmPair {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

/// Phrase LSTMs of one encoder layer, keyed by `(head, gram)`; with
/// `shared` every head reads the `(0, gram)` slot.
#[derive(Clone, Debug, Default)]
pub struct LstmBank {
    entries: BTreeMap<(usize, usize), LstmPair>,
    shared: bool,
}

impl LstmBank {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        grams: &GramConfig,
        head_dim: usize,
        shared: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let width = 2 * head_dim;
        let mut entries = BTreeMap::new();
        let mut slots: Vec<(usize, usize)> = Vec::new();
        if shared {
            slots.extend(grams.union().into_iter().map(|n| (0, n)));
        } else {
            for h in 0..grams.heads() {
                slots.extend(grams.grams(h).iter().map(|&n| (h, n)));
            }
        }
        for (h, n) in slots {
            let base = if shared { format!("{prefix}.shared.g{n}") } else { format!("{prefix}.h{h}.g{n}") };
            let forward = LstmParams::register(store, &format!("{base}.fwd"), width, width, rng)?;
            let backward = LstmParams::register(store, &format!("{base}.bwd"), width, width, rng)?;
            entries.insert((h, n), LstmPair { forward, backward });
        }
        Ok(LstmBank { entries, shared })
    }

    pub fn get(&self, head: usize, gram: usize) -> Option<&LstmPair> {
        let h = if self.shared { 0 } else { head };
        self.entries.get(&(h, gram))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalars in one bank for `grams` at head dimension `head_dim`.
    pub fn num_params(grams: &GramConfig, head_dim: usize, shared: bool) -> usize {
        let slots = if shared { grams.union().len() } else { grams.per_head().iter().map(BTreeSet::len).sum() };
        slots * 2 * LstmParams::num_params(2 * head_dim, 2 * head_dim)
    }
}

/// Feature-axis concatenation in argument order.
pub fn zip_features(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    g.concat(parts)
}

/// Splits an even-width feature axis into its first and second halves.
pub fn unzip_features(g: &mut Graph, z: Var) -> Result<(Var, Var)> {
    let w = g.value(z).last_dim();
    if !w.is_multiple_of(2) {
        return Err(Error::shape("unzip_features", "z", format!("width {w}"), "an even width"));
    }
    Ok((g.slice(z, 0, w / 2)?, g.slice(z, w / 2, w / 2)?))
}

/// Positions (0-based) of the `n`-gram window ending at `k`: `max(0, k+1-n) .. k+1`.
pub fn ngram_window(seq_len: usize, k: usize, n: usize) -> Result<Range<usize>> {
    if k >= seq_len {
        return Err(Error::Invalid(format!("window position {k} outside sequence of length {seq_len}")));
    }
    if n == 0 {
        return Err(Error::Invalid("gram size must be >= 1".into()));
    }
    Ok((k + 1).saturating_sub(n)..k + 1)
}

/// Runs `lstm` over the windows of every position at once. `step_source(k, t)`
/// names the sequence position fed at step `t` for the window of `k`, if any.
#[allow(clippy::too_many_arguments)]
fn run_windows(
    g: &mut Graph,
    store: &ParamStore,
    flat: Var,
    batch: usize,
    seq_len: usize,
    n: usize,
    lstm: &LstmParams,
    step_source: impl Fn(usize, usize) -> Option<usize>,
) -> Result<Var> {
    let rows = batch * seq_len;
    let hd = lstm.hidden_dim;
    let mut h = g.input(Tensor::zeros(&[rows, hd]));
    let mut c = g.input(Tensor::zeros(&[rows, hd]));
    for t in 0..n {
        let index: Vec<Option<usize>> =
            (0..rows).map(|r| step_source(r % seq_len, t).map(|e| (r / seq_len) * seq_len + e)).collect();
        let mask: Vec<bool> = index.iter().map(Option::is_some).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let x = g.gather_rows(flat, &index)?;
        let (h2, c2) = lstm.step(g, store, x, h, c)?;
        if mask.iter().all(|&m| m) {
            (h, c) = (h2, c2);
        } else {
            h = g.select_rows(h2, h, &mask)?;
            c = g.select_rows(c2, c, &mask)?;
        }
    }
    Ok(h)
}

/// Phrase vector per position: forward LSTM over the `n`-gram window ending at
/// `k` plus backward LSTM over the reversed window, final hidden states summed.
///
/// `s` is `[S, 2d_h]` or `[B, S, 2d_h]`; the output has the same shape.
pub fn phrase_sequence(
    g: &mut Graph,
    store: &ParamStore,
    s: Var,
    n: usize,
    forward: &LstmParams,
    backward: &LstmParams,
) -> Result<Var> {
    if n == 0 {
        return Err(Error::Invalid("gram size must be >= 1".into()));
    }
    let shape = g.shape(s).to_vec();
    let (batch, seq_len, width) = match shape[..] {
        [sl, w] => (1, sl, w),
        [b, sl, w] => (b, sl, w),
        _ => return Err(Error::shape("phrase_sequence", "s", format!("{shape:?}"), "[S, 2d_h] or [B, S, 2d_h]")),
    };
    for (operand, p) in [("lstm_f", forward), ("lstm_b", backward)] {
        if p.input_dim != width || p.hidden_dim != width {
            return Err(Error::shape(
                "phrase_sequence",
                operand,
                format!("input {} hidden {}", p.input_dim, p.hidden_dim),
                format!("input = hidden = {width}"),
            ));
        }
    }
    let flat = g.reshape(s, &[batch * seq_len, width])?;
    // forward over k-n+1 ..= k: leading out-of-range steps keep the zero state
    let hf = run_windows(g, store, flat, batch, seq_len, n, forward, |k, t| (k + t + 1).checked_sub(n))?;
    // backward over k, k-1, ..: trailing out-of-range steps keep the final state
    let hb = run_windows(g, store, flat, batch, seq_len, n, backward, |k, t| k.checked_sub(t))?;
    let sum = g.add(hf, hb)?;
    g.reshape(sum, &shape)
}

/// Phrase query/key for one head. Returns `(ph_q, ph_k)`, each
/// `|grams| * d_h` wide; an empty gram set returns `(q, k)` unchanged.
pub fn phrase_qk(
    g: &mut Graph,
    store: &ParamStore,
    q: Var,
    k: Var,
    grams: &BTreeSet<usize>,
    lstm_for: impl Fn(usize) -> Option<LstmPair>,
) -> Result<(Var, Var)> {
    if grams.is_empty() {
        return Ok((q, k));
    }
    let zipped = zip_features(g, &[q, k])?;
    let mut phq = Vec::with_capacity(grams.len());
    let mut phk = Vec::with_capacity(grams.len());
    for &n in grams {
        let pair = lstm_for(n).ok_or_else(|| Error::Invalid(format!("no phrase LSTM registered for gram size {n}")))?;
        let p = phrase_sequence(g, store, zipped, n, &pair.forward, &pair.backward)?;
        let (pk, pq) = unzip_features(g, p)?;
        phq.push(pq);
        phk.push(pk);
    }
    if grams.len() == 1 {
        return Ok((phq[0], phk[0]));
    }
    Ok((zip_features(g, &phq)?, zip_features(g, &phk)?))
}

/// Result of [`phrase_multi_head_attention_with_weights`].
pub struct PhraseAttentionOutput {
    pub output: Var,
    /// `[B, S, S]` attention matrix of each head.
    pub weights: Vec<Var>,
}

/// Encoder self-attention with phrase queries and keys. `x` is `[B, S, d]` or `[S, d]`.
pub fn phrase_multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    attn: &AttentionParams,
    bank: &LstmBank,
    grams: &GramConfig,
    mask: &Mask,
) -> Result<Var> {
    Ok(phrase_multi_head_attention_with_weights(g, store, x, attn, bank, grams, mask)?.output)
}

pub fn phrase_multi_head_attention_with_weights(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    attn: &AttentionParams,
    bank: &LstmBank,
    grams: &GramConfig,
    mask: &Mask,
) -> Result<PhraseAttentionOutput> {
    if grams.heads() != attn.heads {
        return Err(Error::Config(format!("gram config has {} heads, attention has {}", grams.heads(), attn.heads)));
    }
    let (x, lifted) = ensure_batched(g, x)?;
    let dh = attn.head_dim();
    let (wq, wk, wv, wo) =
        (g.param(store, attn.wq), g.param(store, attn.wk), g.param(store, attn.wv), g.param(store, attn.wo));
    let q_all = g.matmul(x, wq)?;
    let k_all = g.matmul(x, wk)?;
    let v_all = g.matmul(x, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(attn.heads);
    let mut weights = Vec::with_capacity(attn.heads);
    for i in 0..attn.heads {
        let q = g.slice(q_all, i * dh, dh)?;
        let k = g.slice(k_all, i * dh, dh)?;
        let v = g.slice(v_all, i * dh, dh)?;
        let (pq, pk) = phrase_qk(g, store, q, k, grams.grams(i), |n| bank.get(i, n).copied())?;
        let scores = g.bmm_nt(pq, pk)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax(scores, Some(mask))?;
        weights.push(w);
        heads.push(g.bmm(w, v)?);
    }
    let cat = g.concat(&heads)?;
    let mut output = g.matmul(cat, wo)?;
    if lifted {
        let s = g.shape(output).to_vec();
        output = g.reshape(output, &s[1..])?;
    }
    Ok(PhraseAttentionOutput { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_mask;
    use crate::init::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn zip_and_unzip_examples() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(1, 2, vec![1., 2.]).unwrap());
        let b = g.input(Tensor::matrix(1, 2, vec![3., 4.]).unwrap());
        let z = zip_features(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(z).data(), &[1., 2., 3., 4.]);
        let (l, r) = unzip_features(&mut g, z).unwrap();
        assert_eq!(g.value(l).data(), &[1., 2.]);
        assert_eq!(g.value(r).data(), &[3., 4.]);

        let a = g.input(Tensor::matrix(2, 1, vec![1., 2.]).unwrap());
        let b = g.input(Tensor::matrix(2, 1, vec![3., 4.]).unwrap());
        let z = zip_features(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(z).data(), &[1., 3., 2., 4.]);

        let w = g.input(Tensor::matrix(1, 2, vec![7., 9.]).unwrap());
        let (l, r) = unzip_features(&mut g, w).unwrap();
        assert_eq!((g.value(l).data(), g.value(r).data()), (&[7.][..], &[9.][..]));
    }

    #[test]
    fn zip_rejects_row_mismatch_and_unzip_odd_width() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 1]));
        let b = g.input(Tensor::zeros(&[3, 1]));
        assert!(zip_features(&mut g, &[a, b]).is_err());
        let odd = g.input(Tensor::zeros(&[2, 3]));
        assert!(unzip_features(&mut g, odd).is_err());
    }

    #[test]
    fn window_examples() {
        // 1-based S=5, k=3, n=2 -> (s_2, s_3)
        assert_eq!(ngram_window(5, 2, 2).unwrap(), 1..3);
        assert_eq!(ngram_window(5, 0, 3).unwrap(), 0..1);
        assert_eq!(ngram_window(5, 4, 1).unwrap(), 4..5);
        assert!(ngram_window(5, 5, 2).is_err());
    }

    #[test]
    fn gram_spec_parsing() {
        let s: GramSpec = "cross_h:[2,3]".parse().unwrap();
        assert_eq!(s, GramSpec::CrossH(vec![2, 3]));
        let cfg = s.resolve(4).unwrap();
        assert!((0..4).all(|h| cfg.grams(h) == &BTreeSet::from([2, 3])));
        let p: GramSpec = "per_head:[[2],[3],[],[2,3]]".parse().unwrap();
        assert_eq!(p.to_string(), "per_head:[[2],[3],[],[2,3]]");
        let cfg = p.resolve(4).unwrap();
        assert!(cfg.grams(2).is_empty());
        assert!(p.resolve(3).is_err());
        assert!("cross_h:[0]".parse::<GramSpec>().is_err());
        assert!("diag:[2]".parse::<GramSpec>().is_err());
        assert!("cross_h:2,3".parse::<GramSpec>().is_err());
    }

    #[test]
    fn bank_entries_follow_gram_sets() {
        let mut store = ParamStore::new();
        let grams = GramConfig::new(vec![BTreeSet::from([2]), BTreeSet::new(), BTreeSet::from([2, 4])]).unwrap();
        let bank = LstmBank::register(&mut store, "l0", &grams, 3, false, &mut rng()).unwrap();
        assert_eq!(bank.len(), 3);
        assert!(bank.get(0, 2).is_some() && bank.get(1, 2).is_none() && bank.get(2, 4).is_some());
        assert_ne!(bank.get(0, 2).unwrap().forward.weight, bank.get(0, 2).unwrap().backward.weight);
        assert_eq!(store.numel(), LstmBank::num_params(&grams, 3, false));

        let mut store = ParamStore::new();
        let shared = LstmBank::register(&mut store, "l0", &grams, 3, true, &mut rng()).unwrap();
        assert_eq!(shared.len(), 2);
        assert_eq!(shared.get(0, 2).unwrap().forward.weight, shared.get(2, 2).unwrap().forward.weight);
        assert_eq!(store.numel(), LstmBank::num_params(&grams, 3, true));
    }

    fn pair(store: &mut ParamStore, width: usize) -> LstmPair {
        let mut r = rng();
        let forward = LstmParams::register(store, "f", width, width, &mut r).unwrap();
        let backward = LstmParams::register(store, "b", width, width, &mut r).unwrap();
        LstmPair { forward, backward }
    }

    #[test]
    fn unigram_phrase_is_single_steps() {
        let mut store = ParamStore::new();
        let p = pair(&mut store, 4);
        let mut g = Graph::new();
        let s = g.input(normal(&mut rng(), &[3, 4], 1.0));
        let out = phrase_sequence(&mut g, &store, s, 1, &p.forward, &p.backward).unwrap();
        let zeros = g.input(Tensor::zeros(&[3, 4]));
        let (hf, _) = p.forward.step(&mut g, &store, s, zeros, zeros).unwrap();
        let (hb, _) = p.backward.step(&mut g, &store, s, zeros, zeros).unwrap();
        let want = g.add(hf, hb).unwrap();
        assert_eq!(g.value(out), g.value(want));
    }

    #[test]
    fn zero_lstm_gives_zero_phrases() {
        let mut store = ParamStore::new();
        let p = pair(&mut store, 4);
        for id in [p.forward.weight, p.backward.weight] {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let s = g.input(normal(&mut rng(), &[5, 4], 1.0));
        let out = phrase_sequence(&mut g, &store, s, 3, &p.forward, &p.backward).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn phrase_sequence_matches_explicit_window_runs() {
        let mut store = ParamStore::new();
        let p = pair(&mut store, 4);
        let s_val = normal(&mut rng(), &[6, 4], 1.0);
        let mut g = Graph::new();
        let s = g.input(s_val.clone());
        let out = phrase_sequence(&mut g, &store, s, 3, &p.forward, &p.backward).unwrap();
        for k in 0..6 {
            let win = ngram_window(6, k, 3).unwrap();
            let run = |lstm: &LstmParams, order: Vec<usize>| {
                let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
                for j in order {
                    (h, c) = crate::lstm::lstm_step(s_val.row(j), &h, &c, &store, lstm).unwrap();
                }
                h
            };
            let hf = run(&p.forward, win.clone().collect());
            let hb = run(&p.backward, win.rev().collect());
            let want: Vec<f64> = hf.iter().zip(&hb).map(|(a, b)| a + b).collect();
            let got = g.value(out).row(k);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "position {k}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn phrase_qk_shapes_and_reductions() {
        let dh = 128;
        let mut store = ParamStore::new();
        let grams = GramConfig::cross_h(&[2, 3], 1).unwrap();
        let bank = LstmBank::register(&mut store, "l", &grams, dh, false, &mut rng()).unwrap();
        let mut g = Graph::new();
        let q = g.input(normal(&mut rng(), &[4, dh], 1.0));
        let k = g.input(normal(&mut rng(), &[4, dh], 1.0));
        let (pq, pk) = phrase_qk(&mut g, &store, q, k, grams.grams(0), |n| bank.get(0, n).copied()).unwrap();
        assert_eq!(g.shape(pq), &[4, 256]);
        assert_eq!(g.shape(pk), &[4, 256]);

        let (eq, ek) = phrase_qk(&mut g, &store, q, k, &BTreeSet::new(), |_| None).unwrap();
        assert_eq!((eq, ek), (q, k));

        let three = BTreeSet::from([3]);
        let (q3, k3) = phrase_qk(&mut g, &store, q, k, &three, |n| bank.get(0, n).copied()).unwrap();
        let z = g.concat(&[q, k]).unwrap();
        let e = bank.get(0, 3).unwrap();
        let direct = phrase_sequence(&mut g, &store, z, 3, &e.forward, &e.backward).unwrap();
        let (dk, dq) = unzip_features(&mut g, direct).unwrap();
        assert_eq!(g.value(q3), g.value(dq));
        assert_eq!(g.value(k3), g.value(dk));

        let missing = phrase_qk(&mut g, &store, q, k, &BTreeSet::from([5]), |n| bank.get(0, n).copied());
        assert!(missing.is_err());
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let attn = AttentionParams::register(&mut store, "a", 8, 2, &mut r).unwrap();
        let grams = GramConfig::cross_h(&[2], 2).unwrap();
        let bank = LstmBank::register(&mut store, "p", &grams, 4, false, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.input(normal(&mut r, &[1, 8], 1.0));
        let mask = attention_mask(&[1], 1, 1, false);
        let out = phrase_multi_head_attention_with_weights(&mut g, &store, x, &attn, &bank, &grams, &mask).unwrap();
        for w in &out.weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
        // output = (x W^v) W^o
        let wv = g.param(&store, attn.wv);
        let wo = g.param(&store, attn.wo);
        let v = g.matmul(x, wv).unwrap();
        let want = g.matmul(v, wo).unwrap();
        assert!(g.value(out.output).max_abs_diff(g.value(want)) < 1e-12);
    }

    #[test]
    fn full_sized_layer_shapes_and_row_sums() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let attn = AttentionParams::register(&mut store, "a", 512, 4, &mut r).unwrap();
        let grams = GramConfig::cross_h(&[2, 3], 4).unwrap();
        let bank = LstmBank::register(&mut store, "p", &grams, 128, false, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.input(normal(&mut r, &[5, 512], 1.0));
        let mask = attention_mask(&[5], 5, 5, false);
        let out = phrase_multi_head_attention_with_weights(&mut g, &store, x, &attn, &bank, &grams, &mask).unwrap();
        assert_eq!(g.shape(out.output), &[5, 512]);
        for w in &out.weights {
            for row in 0..5 {
                let s: f64 = g.value(*w).row(row).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn head_count_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let attn = AttentionParams::register(&mut store, "a", 8, 2, &mut rng()).unwrap();
        let grams = GramConfig::vanilla(4);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 8]));
        let mask = attention_mask(&[2], 2, 2, false);
        let res = phrase_multi_head_attention(&mut g, &store, x, &attn, &LstmBank::default(), &grams, &mask);
        assert!(matches!(res, Err(Error::Config(_))));
    }
}
