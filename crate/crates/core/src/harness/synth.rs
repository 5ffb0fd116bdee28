//! Synthetic correlated Gaussian tables with logistic labels.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DataMatrix, LabelVector};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Covariance {
    Identity,
    /// Unit variances, every off-diagonal entry `rho`.
    Equicorrelated { rho: f64 },
    /// `Σ_ij = rho^|i−j|`.
    Ar1 { rho: f64 },
    /// Explicit row-major `d × d` matrix.
    Full { matrix: Vec<f64> },
}

impl Covariance {
    pub fn matrix(&self, d: usize) -> Result<DMatrix<f64>> {
        let m = match self {
            Covariance::Identity => DMatrix::identity(d, d),
            Covariance::Equicorrelated { rho } => DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { *rho }),
            Covariance::Ar1 { rho } => DMatrix::from_fn(d, d, |i, j| rho.powi((i as i32 - j as i32).abs())),
            Covariance::Full { matrix } => {
                if matrix.len() != d * d {
                    return Err(Error::contract(format!("covariance needs {} entries, got {}", d * d, matrix.len())));
                }
                DMatrix::from_row_slice(d, d, matrix)
            }
        };
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub covariance: Covariance,
    /// Logit weights; `None` uses `1/√d` on every feature.
    pub label_weights: Option<Vec<f64>>,
    pub label_bias: f64,
    /// Standard deviation of Gaussian noise added to each logit.
    pub label_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 5000,
            d: 12,
            covariance: Covariance::Equicorrelated { rho: 0.6 },
            label_weights: None,
            label_bias: 0.0,
            label_noise: 0.0,
        }
    }
}

/// Draws `n` complete rows `x = Lε` with `LLᵀ = Σ` and labels
/// `y ~ Bernoulli(σ(w·x + b + noise))`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<(DataMatrix, LabelVector)> {
    let d = spec.d;
    if d == 0 {
        return Err(Error::contract("synthetic data needs at least one column"));
    }
    let sigma = spec.covariance.matrix(d)?;
    if (0..d).any(|i| (0..d).any(|j| sigma[(i, j)] != sigma[(j, i)])) {
        return Err(Error::contract("covariance must be symmetric"));
    }
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::contract("covariance is not positive definite"))?;
    let l = chol.l();
    let w = match &spec.label_weights {
        Some(w) if w.len() != d => return Err(Error::contract(format!("{} label weights for {d} columns", w.len()))),
        Some(w) => w.clone(),
        None => vec![1.0 / (d as f64).sqrt(); d],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.n * d);
    let mut y = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let row = &l * eps;
        let noise: f64 = rng.sample(StandardNormal);
        let logit = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + spec.label_bias + spec.label_noise * noise;
        let p = crate::numerics::sigmoid(logit);
        y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
        values.extend(row.iter());
    }
    Ok((DataMatrix::new(spec.n, d, values)?, LabelVector::new(y)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indefinite() {
        let spec = SynthSpec {
            n: 5,
            d: 2,
            covariance: Covariance::Full { matrix: vec![1.0, 2.0, 2.0, 1.0] },
            ..Default::default()
        };
        assert!(matches!(synth_generate(&spec, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn seeded() {
        let spec = SynthSpec { n: 20, d: 3, ..Default::default() };
        assert_eq!(synth_generate(&spec, 4).unwrap(), synth_generate(&spec, 4).unwrap());
    }
}
