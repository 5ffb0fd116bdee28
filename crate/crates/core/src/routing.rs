//! Missingness embedding, missingness rate, gate and per-sample routing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MaskMatrix;
use crate::error::{Error, Result};
use crate::gain::TemporalAttention;
use crate::numerics::{glorot, Binding, ParamId, ParamStore, Tape, Tensor, Var};

/// Rows whose missingness rate reaches this value take the GAIN path in
/// fixed-threshold mode.
pub const FIXED_THRESHOLD: f64 = 0.2;

/// Fraction of missing cells in the whole mask.
pub fn missingness_rate(m: &MaskMatrix) -> f64 {
    let total = m.n_rows() * m.n_cols();
    if total == 0 {
        return 0.0;
    }
    m.count_missing() as f64 / total as f64
}

/// Fraction of missing cells in each row. Computed as a count ratio so
/// that, for example, one missing cell of five is exactly `0.2`.
pub fn missingness_rate_per_row(m: &MaskMatrix) -> Vec<f64> {
    let d = m.n_cols();
    (0..m.n_rows())
        .map(|i| if d == 0 { 0.0 } else { m.row_missing(i) as f64 / d as f64 })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    Mice,
    Gain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    /// Threshold the per-row missingness rate at [`FIXED_THRESHOLD`].
    Fixed,
    /// Threshold the gate probability at `tau_gate`.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathDecision {
    pub mr: f64,
    pub gamma: f64,
    pub path: Path,
}

/// Hard routing; ties go to GAIN.
pub fn route(mr: &[f64], gamma: &[f64], mode: RoutingMode, tau_gate: f64) -> Result<Vec<PathDecision>> {
    if mr.len() != gamma.len() {
        return Err(Error::dim("route", "one rate and one gate value per sample"));
    }
    Ok(mr
        .iter()
        .zip(gamma)
        .map(|(&mr, &gamma)| {
            let gain = match mode {
                RoutingMode::Fixed => mr >= FIXED_THRESHOLD,
                RoutingMode::Learned => gamma >= tau_gate,
            };
            PathDecision {
                mr,
                gamma,
                path: if gain { Path::Gain } else { Path::Mice },
            }
        })
        .collect())
}

/// LSTM over feature steps of `(zero-filled value, mask bit)` pairs, with a
/// causal attention over its hidden states added back residually.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessEmbedder {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub psi: TemporalAttention,
    pub dim: usize,
}

impl MissingnessEmbedder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        let wx = store.add("embedder.wx", glorot(rng, 2, 4 * dim));
        let wh = store.add("embedder.wh", glorot(rng, dim, 4 * dim));
        // Gate order i, f, g, o; forget bias starts at 1.
        let mut b = Tensor::zeros(&[1, 4 * dim]);
        for k in dim..2 * dim {
            b.data_mut()[k] = 1.0;
        }
        let b = store.add("embedder.b", b);
        let psi = TemporalAttention::new(store, "embedder.psi", dim, rng);
        MissingnessEmbedder { wx, wh, b, psi, dim }
    }

    /// `x` holds values (missing cells ignored), `m` the mask; both
    /// `[batch, d]`. Returns `E` as `[batch·d, dim]`, sample-major.
    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: &Tensor, m: &Tensor) -> Result<Var> {
        if x.shape() != m.shape() {
            return Err(Error::dim("embed_missingness", "values and mask shapes differ"));
        }
        let (b, d, e) = (x.rows(), x.cols(), self.dim);
        let mut h = tape.constant(Tensor::zeros(&[b, e]));
        let mut c = tape.constant(Tensor::zeros(&[b, e]));
        let mut states = Vec::with_capacity(d);
        for j in 0..d {
            let mut step = Tensor::zeros(&[b, 2]);
            for i in 0..b {
                let mv = m.get(i, j);
                step.set(i, 0, if mv != 0.0 { x.get(i, j) } else { 0.0 });
                step.set(i, 1, mv);
            }
            let step = tape.constant(step);
            let zx = tape.matmul(step, p[self.wx])?;
            let zh = tape.matmul(h, p[self.wh])?;
            let z = tape.add(zx, zh)?;
            let z = tape.add_row(z, p[self.b])?;
            let gi = tape.slice_cols(z, 0, e)?;
            let gf = tape.slice_cols(z, e, e)?;
            let gg = tape.slice_cols(z, 2 * e, e)?;
            let go = tape.slice_cols(z, 3 * e, e)?;
            let i_g = tape.sigmoid(gi);
            let f_g = tape.sigmoid(gf);
            let g_g = tape.tanh(gg);
            let o_g = tape.sigmoid(go);
            let keep = tape.mul(f_g, c)?;
            let write = tape.mul(i_g, g_g)?;
            c = tape.add(keep, write)?;
            let tc = tape.tanh(c);
            h = tape.mul(o_g, tc)?;
            states.push(h);
        }
        let wide = tape.concat_cols(&states)?;
        let seq = tape.reshape(wide, &[b * d, e])?;
        let (att, _) = self.psi.forward(tape, p, seq, seq, d)?;
        tape.add(seq, att)
    }
}

/// Mean over the step axis of `E` (`[batch·steps, dim]` → `[batch, dim]`).
pub fn mean_pool(tape: &mut Tape, e: Var, steps: usize) -> Result<Var> {
    let v = tape.value(e);
    let (rows, dim) = (v.rows(), v.cols());
    if steps == 0 || rows % steps != 0 {
        return Err(Error::dim("mean_pool", "rows must be a multiple of steps"));
    }
    let b = rows / steps;
    let wide = tape.reshape(e, &[b, steps * dim])?;
    let mut pool = Tensor::zeros(&[steps * dim, dim]);
    for j in 0..steps {
        for k in 0..dim {
            pool.set(j * dim + k, k, 1.0 / steps as f64);
        }
    }
    let pool = tape.constant(pool);
    tape.matmul(wide, pool)
}

/// `γ = σ(w·pool(E) + softplus(r)·MR + b)`. The softplus keeps the rate
/// weight positive, so γ is non-decreasing in MR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateNetwork {
    pub w: ParamId,
    pub mr_raw: ParamId,
    pub b: ParamId,
}

impl GateNetwork {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        GateNetwork {
            w: store.add("gate.w", glorot(rng, dim, 1)),
            mr_raw: store.add("gate.mr_raw", Tensor::scalar(0.0)),
            b: store.add("gate.b", Tensor::scalar(0.0)),
        }
    }

    /// Gate logit per row; `pooled` is `[batch, dim]`, `mr` is `[batch, 1]`.
    pub fn logit(&self, tape: &mut Tape, p: &Binding, pooled: Var, mr: &Tensor) -> Result<Var> {
        let a = tape.matmul(pooled, p[self.w])?;
        let mr = tape.constant(mr.clone());
        let wmr = tape.softplus(p[self.mr_raw]);
        let r = tape.matmul(mr, wmr)?;
        let z = tape.add(a, r)?;
        tape.add_row(z, p[self.b])
    }

    pub fn gamma(&self, tape: &mut Tape, p: &Binding, pooled: Var, mr: &Tensor) -> Result<Var> {
        let z = self.logit(tape, p, pooled, mr)?;
        Ok(tape.sigmoid(z))
    }
}

/// Per-row missingness rate as a `[n, 1]` column.
pub fn mr_column(m: &Tensor) -> Tensor {
    let (n, d) = (m.rows(), m.cols());
    let data = (0..n)
        .map(|i| {
            let missing = m.row(i).iter().filter(|&&v| v == 0.0).count();
            if d == 0 {
                0.0
            } else {
                missing as f64 / d as f64
            }
        })
        .collect();
    Tensor::from_vec(n, 1, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates() {
        let full = MaskMatrix::all_observed(2, 2);
        assert_eq!(missingness_rate(&full), 0.0);
        let none = MaskMatrix::new(2, 2, vec![false; 4]).unwrap();
        assert_eq!(missingness_rate(&none), 1.0);
        let one = MaskMatrix::new(2, 2, vec![true, false, true, true]).unwrap();
        assert_eq!(missingness_rate(&one), 0.25);
        assert_eq!(missingness_rate_per_row(&one), vec![0.5, 0.0]);
    }

    #[test]
    fn fixed_boundary_goes_to_gain() {
        let d = route(&[0.1, 0.19, 0.2], &[0.9, 0.9, 0.0], RoutingMode::Fixed, 0.5).unwrap();
        let paths: Vec<Path> = d.iter().map(|p| p.path).collect();
        assert_eq!(paths, vec![Path::Mice, Path::Mice, Path::Gain]);
        let one_of_five = MaskMatrix::new(1, 5, vec![false, true, true, true, true]).unwrap();
        assert_eq!(missingness_rate_per_row(&one_of_five), vec![0.2]);
    }

    #[test]
    fn learned_threshold() {
        let d = route(&[0.0, 0.0], &[0.7, 0.3], RoutingMode::Learned, 0.5).unwrap();
        assert_eq!(d[0].path, Path::Gain);
        assert_eq!(d[1].path, Path::Mice);
    }

    #[test]
    fn mean_pool_averages_steps() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 6.]]).unwrap());
        let p = mean_pool(&mut tape, e, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[2., 4.]);
    }
}
