//! Cross-path attention over the branch outputs and the task-supervised
//! adaptive fusion head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{glorot, softmax_rows, Binding, Linear, ParamId, ParamStore, Tape, Tensor, Var};

/// How branch outputs are combined at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// Each row takes the output of its routed branch alone.
    #[serde(rename = "routed")]
    Routed,
    /// Attention weights combine both branches for every row.
    #[serde(rename = "fused")]
    Fused,
    /// Both branches weighted 0.5.
    #[serde(rename = "static:0.5")]
    Static,
}

/// Attention of a pooled missingness query over one token per branch.
///
/// Token `p` is branch `p`'s completed row; keys and values share one
/// projection and keys carry a per-branch bias, so swapping the branches
/// together with their biases leaves the output unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossPathAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub key_bias: [ParamId; 2],
    pub dk: usize,
    pub dv: usize,
}

impl CrossPathAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, embed_dim: usize, d: usize, dk: usize, dv: usize, rng: &mut R) -> Self {
        CrossPathAttention {
            wq: store.add("fusion.wq", glorot(rng, embed_dim, dk)),
            wk: store.add("fusion.wk", glorot(rng, d, dk)),
            wv: store.add("fusion.wv", glorot(rng, d, dv)),
            key_bias: [
                store.add("fusion.key_bias.mice", glorot(rng, 1, dk)),
                store.add("fusion.key_bias.gain", glorot(rng, 1, dk)),
            ],
            dk,
            dv,
        }
    }

    /// `pooled` is `[batch, embed_dim]`; `tokens` pairs a branch slot
    /// (0 = MICE, 1 = GAIN) with its `[batch, d]` output. `log_prior`, if
    /// given, is added to the `[batch, tokens]` scores before the softmax.
    /// Returns `(α, h_fused)`.
    pub fn forward(&self, tape: &mut Tape, p: &Binding, pooled: Var, tokens: &[(usize, Var)], log_prior: Option<Var>) -> Result<(Var, Var)> {
        if tokens.is_empty() || tokens.iter().any(|(s, _)| *s > 1) {
            return Err(Error::contract("cross-path attention needs one or two branch tokens in slots 0/1"));
        }
        let q = tape.matmul(pooled, p[self.wq])?;
        let mut scores = Vec::with_capacity(tokens.len());
        let mut values = Vec::with_capacity(tokens.len());
        for &(slot, x) in tokens {
            let k = tape.matmul(x, p[self.wk])?;
            let k = tape.add_row(k, p[self.key_bias[slot]])?;
            let qk = tape.mul(q, k)?;
            let s = tape.sum_cols(qk)?;
            scores.push(tape.scale(s, 1.0 / (self.dk as f64).sqrt()));
            values.push(tape.matmul(x, p[self.wv])?);
        }
        let mut logits = tape.concat_cols(&scores)?;
        if let Some(lp) = log_prior {
            logits = tape.add(logits, lp)?;
        }
        let alpha = softmax_rows(tape, logits, None)?;
        let fused = weighted_sum(tape, alpha, &values)?;
        Ok((alpha, fused))
    }
}

/// `Σ_p α[:, p] ⊙ items[p]` with row-wise weights.
pub fn weighted_sum(tape: &mut Tape, alpha: Var, items: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, &v) in items.iter().enumerate() {
        let a = tape.slice_cols(alpha, k, 1)?;
        let term = tape.mul_col(v, a)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    acc.ok_or_else(|| Error::contract("weighted_sum of nothing"))
}

/// `λ·h_imp + (1 − λ)·h_task` for a scalar `λ`.
pub fn adaptive_mix(tape: &mut Tape, lambda: Var, h_imp: Var, h_task: Var) -> Result<Var> {
    let shape = tape.value(h_imp).shape().to_vec();
    let l = tape.broadcast_scalar(lambda, &shape)?;
    let one_minus = tape.scale(l, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let a = tape.mul(l, h_imp)?;
    let b = tape.mul(one_minus, h_task)?;
    tape.add(a, b)
}

/// Imputation and task feature paths, fusion ratio and binary task head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveFusionHead {
    pub imp_proj: Linear,
    pub trunk: Linear,
    pub task_proj: Linear,
    /// `[3, 1]` weights over `[t, C_imp, C_task]`.
    pub wt: ParamId,
    pub out: Linear,
    pub width: usize,
}

impl AdaptiveFusionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, dv: usize, width: usize, rng: &mut R) -> Self {
        AdaptiveFusionHead {
            imp_proj: Linear::new(store, "head.imp_proj", dv, width, rng),
            trunk: Linear::new(store, "head.trunk", d, width, rng),
            task_proj: Linear::new(store, "head.task_proj", width, width, rng),
            wt: store.add("head.wt", Tensor::zeros(&[3, 1])),
            out: Linear::new(store, "head.out", width, 1, rng),
            width,
        }
    }

    pub fn h_imp(&self, tape: &mut Tape, p: &Binding, h_fused: Var) -> Result<Var> {
        self.imp_proj.forward(tape, p, h_fused)
    }

    /// Task features from a completed row; `keep` is an optional inverted
    /// dropout mask over the trunk activations.
    pub fn h_task(&self, tape: &mut Tape, p: &Binding, x: Var, keep: Option<&Tensor>) -> Result<Var> {
        let a = self.trunk.forward(tape, p, x)?;
        let mut a = tape.tanh(a);
        if let Some(k) = keep {
            let k = tape.constant(k.clone());
            a = tape.mul(a, k)?;
        }
        self.task_proj.forward(tape, p, a)
    }

    /// `λ_t = σ(W_t · [t, C_imp, C_task])` as a `[1, 1]` value.
    pub fn lambda(&self, tape: &mut Tape, p: &Binding, t: f64, c_imp: f64, c_task: f64) -> Result<Var> {
        let s = tape.constant(Tensor::from_vec(1, 3, vec![t, c_imp, c_task])?);
        let z = tape.matmul(s, p[self.wt])?;
        Ok(tape.sigmoid(z))
    }

    /// Task logit per row from the head input.
    pub fn logits(&self, tape: &mut Tape, p: &Binding, input: Var) -> Result<Var> {
        self.out.forward(tape, p, input)
    }
}

/// `(C_imp, C_task)`: mean squared error over cells `m` marks hidden, and
/// mean binary cross-entropy of the preliminary probabilities.
pub fn confidence_signals(x_imputed: &Tensor, x_true: &Tensor, m: &Tensor, y: &[f64], y_prelim: &[f64]) -> Result<(f64, f64)> {
    if x_imputed.shape() != x_true.shape() || x_true.shape() != m.shape() || y.len() != y_prelim.len() {
        return Err(Error::dim("confidence_signals", "shapes differ"));
    }
    let (mut se, mut count) = (0.0, 0usize);
    for k in 0..m.len() {
        if m.data()[k] == 0.0 {
            se += (x_imputed.data()[k] - x_true.data()[k]).powi(2);
            count += 1;
        }
    }
    let c_imp = if count == 0 { 0.0 } else { se / count as f64 };
    let c_task = if y.is_empty() {
        0.0
    } else {
        y.iter().zip(y_prelim).map(|(&t, &p)| bce(t, p)).sum::<f64>() / y.len() as f64
    };
    Ok((c_imp, c_task))
}

/// Binary cross-entropy of probability `p` against label `y`.
pub fn bce(y: f64, p: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_extremes() {
        let x = Tensor::from_rows(&[vec![1., 2.]]).unwrap();
        let m = Tensor::from_rows(&[vec![0., 1.]]).unwrap();
        let (ci, ct) = confidence_signals(&x, &x, &m, &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(ci, 0.0);
        assert!(ct < 1e-12);
        let (_, half) = confidence_signals(&x, &x, &m, &[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((half - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mode_names() {
        assert_eq!(serde_json::to_string(&FusionMode::Static).unwrap(), "\"static:0.5\"");
        let m: FusionMode = serde_json::from_str("\"routed\"").unwrap();
        assert_eq!(m, FusionMode::Routed);
    }
}
