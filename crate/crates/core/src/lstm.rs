//! Standard four-gate LSTM cell (no peepholes).
//!
//! The weight matrix is `[(input_dim + hidden_dim), 4 * hidden_dim]` applied to
//! `[x; h]`, with gate columns ordered input, forget, output, candidate:
//!
//! ```text
//! i, f, o = sigmoid(.)   g = tanh(.)
//! c' = f * c + i * g
//! h' = o * tanh(c')
//! ```

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::init::xavier_uniform;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LstmParams {
    /// Number of scalars: `4 * hidden * (input + hidden + 1)`.
    pub fn num_params(input_dim: usize, hidden_dim: usize) -> usize {
        4 * hidden_dim * (input_dim + hidden_dim + 1)
    }

    /// Registers `{prefix}.w` (Xavier uniform) and `{prefix}.b` (zeros, so the forget bias starts at 0).
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight =
            store.insert(format!("{prefix}.w"), xavier_uniform(rng, input_dim + hidden_dim, 4 * hidden_dim))?;
        let bias = store.insert(format!("{prefix}.b"), Tensor::zeros(&[4 * hidden_dim]))?;
        Ok(LstmParams { input_dim, hidden_dim, weight, bias })
    }

    /// One step over a batch of rows: `x[R, input]`, `h[R, hidden]`, `c[R, hidden]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let rows = g.value(x).rows();
        for (operand, v, d) in [("x", x, self.input_dim), ("h", h, self.hidden_dim), ("c", c, self.hidden_dim)] {
            let t = g.value(v);
            if t.last_dim() != d || t.rows() != rows {
                return Err(Error::shape("lstm_step", operand, format!("{:?}", t.shape()), format!("[{rows}, {d}]")));
            }
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xh = g.concat(&[x, h])?;
        let pre = g.matmul(xh, w)?;
        let pre = g.add_bias(pre, b)?;
        let hc = g.lstm_pointwise(pre, c)?;
        let h2 = g.slice(hc, 0, self.hidden_dim)?;
        let c2 = g.slice(hc, self.hidden_dim, self.hidden_dim)?;
        Ok((h2, c2))
    }
}

/// Single-vector LSTM step over plain values.
pub fn lstm_step(x: &[f64], h: &[f64], c: &[f64], store: &ParamStore, p: &LstmParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let expect = |operand: &'static str, got: usize, want: usize| {
        if got == want {
            Ok(())
        } else {
            Err(Error::shape("lstm_step", operand, got.to_string(), want.to_string()))
        }
    };
    expect("x", x.len(), p.input_dim)?;
    expect("h", h.len(), p.hidden_dim)?;
    expect("c", c.len(), p.hidden_dim)?;
    let mut g = Graph::new();
    let xv = g.input(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let hv = g.input(Tensor::new(vec![1, h.len()], h.to_vec())?);
    let cv = g.input(Tensor::new(vec![1, c.len()], c.to_vec())?);
    let (h2, c2) = p.step(&mut g, store, xv, hv, cv)?;
    Ok((g.value(h2).data().to_vec(), g.value(c2).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, DEFAULT_EPS};
    use crate::init::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_cell(input: usize, hidden: usize) -> (ParamStore, LstmParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::register(&mut store, "cell", input, hidden, &mut rng).unwrap();
        store.get_mut(p.weight).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        (store, p)
    }

    #[test]
    fn zero_weights_zero_cell_gives_zero() {
        let (store, p) = zero_cell(3, 2);
        let (h, c) = lstm_step(&[0.4, -2.0, 9.0], &[0.1, 0.2], &[0.0, 0.0], &store, &p).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_weights_carry_half_the_cell() {
        let (store, p) = zero_cell(2, 1);
        let (h, c) = lstm_step(&[1.0, -1.0], &[0.0], &[2.0], &store, &p).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert!((h[0] - 0.5 * 1f64.tanh()).abs() < 1e-15);
        assert!((h[0] - 0.380797).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_names_operand() {
        let (store, p) = zero_cell(2, 1);
        match lstm_step(&[1.0], &[0.0], &[0.0], &store, &p) {
            Err(Error::Shape { operand, .. }) => assert_eq!(operand, "x"),
            other => panic!("unexpected {other:?}"),
        }
        match lstm_step(&[1.0, 2.0], &[0.0], &[0.0, 1.0], &store, &p) {
            Err(Error::Shape { operand, .. }) => assert_eq!(operand, "c"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parameter_count() {
        let (store, _) = zero_cell(5, 3);
        assert_eq!(store.numel(), LstmParams::num_params(5, 3));
        assert_eq!(LstmParams::num_params(5, 3), 4 * 3 * (5 + 3 + 1));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let p = LstmParams::register(&mut store, "cell", 3, 4, &mut rng).unwrap();
        let b = store.get_mut(p.bias);
        b.value = normal(&mut rng, &[16], 0.5);
        let x = store.insert("x", normal(&mut rng, &[2, 3], 1.0)).unwrap();
        let h = store.insert("h", normal(&mut rng, &[2, 4], 1.0)).unwrap();
        let c = store.insert("c", normal(&mut rng, &[2, 4], 1.0)).unwrap();
        let coef = normal(&mut rng, &[2, 8], 1.0);
        let report = finite_diff_check(&mut store, DEFAULT_EPS, |g, s| {
            let (xv, hv, cv) = (g.param(s, x), g.param(s, h), g.param(s, c));
            let (h2, c2) = p.step(g, s, xv, hv, cv)?;
            let both = g.concat(&[h2, c2])?;
            let k = g.input(coef.clone());
            let m = g.mul(both, k)?;
            Ok(g.sum(m))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }
}
