//! Layer building blocks assembled from tape primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{glorot, Binding, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Affine map `x·W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, p[self.w])?;
        tape.add_row(xw, p[self.b])
    }
}

/// Row-wise softmax of a matrix. Entries where `keep` is zero get weight
/// exactly zero, equivalent to adding `-inf` to their logits.
pub fn softmax_rows(tape: &mut Tape, logits: Var, keep: Option<&Tensor>) -> Result<Var> {
    let lv = tape.value(logits);
    lv.expect_rank2("softmax_rows")?;
    if let Some(k) = keep {
        if k.shape() != lv.shape() {
            return Err(Error::dim("softmax_rows", "keep mask shape"));
        }
    }
    let (r, c) = (lv.rows(), lv.cols());
    let mut shift = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = lv.row(i);
        let mx = (0..c)
            .filter(|&j| keep.is_none_or(|k| k.get(i, j) != 0.0))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mx = if mx.is_finite() { mx } else { 0.0 };
        for j in 0..c {
            shift.set(i, j, mx);
        }
    }
    let shift = tape.constant(shift);
    let mut z = tape.sub(logits, shift)?;
    let keep_var = keep.map(|k| tape.constant(k.clone()));
    if let Some(k) = keep_var {
        z = tape.mul(z, k)?;
    }
    let mut e = tape.exp(z);
    if let Some(k) = keep_var {
        e = tape.mul(e, k)?;
    }
    let total = tape.sum_cols(e)?;
    let inv = tape.recip(total);
    tape.mul_col(e, inv)
}

/// Mean of all entries as a scalar.
pub fn mean_all(tape: &mut Tape, a: Var) -> Var {
    let n = tape.value(a).len() as f64;
    let s = tape.sum_all(a);
    tape.scale(s, 1.0 / n)
}

/// `Σ ((1 - m) ⊙ (a - b))² / count(m == 0)`, or zero when nothing is masked.
pub fn masked_mse(tape: &mut Tape, a: Var, b: Var, mask: &Tensor) -> Result<Var> {
    let missing = mask.map(|v| 1.0 - v);
    let count = missing.sum();
    let diff = tape.sub(a, b)?;
    let w = tape.constant(missing);
    let masked = tape.mul(diff, w)?;
    let sq = tape.mul(masked, masked)?;
    let s = tape.sum_all(sq);
    Ok(if count > 0.0 {
        tape.scale(s, 1.0 / count)
    } else {
        tape.scale(s, 0.0)
    })
}

/// Per-row Euclidean norm of the input gradient of a scalar field.
///
/// `field` maps an `n×k` input to `n×1` scores with rows independent of
/// each other. Returns `(scores, norms)`; `norms[i] = ‖∇ₓ score_i‖₂`. The
/// norms stay differentiable with respect to any parameters the field uses.
pub fn grad_norm_of_scalar_field<F>(tape: &mut Tape, x: &Tensor, field: F) -> Result<(Var, Var)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let xv = tape.param(x.clone());
    let scores = field(tape, xv)?;
    let total = tape.sum_all(scores);
    let gx = tape.grad(total, &[xv])?[0];
    let sq = tape.mul(gx, gx)?;
    let row_sq = tape.sum_cols(sq)?;
    let norms = tape.sqrt(row_sq);
    Ok((scores, norms))
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference<F>(x: &Tensor, h: f64, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1., 2., 3.], vec![-5., 0., 5.]]).unwrap());
        let y = softmax_rows(&mut t, x, None).unwrap();
        for i in 0..2 {
            assert!((t.value(y).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_entries_get_zero_weight() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![100., 2., 3.]]).unwrap());
        let keep = Tensor::from_rows(&[vec![0., 1., 1.]]).unwrap();
        let y = softmax_rows(&mut t, x, Some(&keep)).unwrap();
        assert_eq!(t.value(y).get(0, 0), 0.0);
        assert!((t.value(y).get(0, 1) + t.value(y).get(0, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_field_has_unit_norm() {
        let w = Tensor::from_vec(3, 1, vec![0.6, 0.0, 0.8]).unwrap();
        let x = Tensor::from_rows(&[vec![1., 2., 3.], vec![-1., 0., 4.]]).unwrap();
        let mut t = Tape::new();
        let (_, n) = grad_norm_of_scalar_field(&mut t, &x, |t, xv| {
            let wv = t.constant(w.clone());
            t.matmul(xv, wv)
        })
        .unwrap();
        for &v in t.value(n).data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_field_has_zero_norm() {
        let x = Tensor::zeros(&[2, 3]);
        let mut t = Tape::new();
        let (_, n) = grad_norm_of_scalar_field(&mut t, &x, |t, _| Ok(t.constant(Tensor::full(&[2, 1], 7.0))))
            .unwrap();
        assert_eq!(t.value(n).data(), &[0.0, 0.0]);
    }
}
