//! Fixed logistic-regression probe used to score every method's imputed
//! data on the downstream task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::numerics::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 500, lr: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LogisticProbe {
    /// Small Gaussian weights drawn from `seed`, zero bias.
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..d).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
        LogisticProbe { w, b: 0.0 }
    }

    /// SHA-256 over the little-endian bytes of the weights then the bias.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.w.iter().chain(std::iter::once(&self.b)) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Full-batch gradient descent on mean cross-entropy.
    pub fn fit(&mut self, x: &DataMatrix, y: &LabelVector, cfg: &ProbeConfig) -> Result<()> {
        let (n, d) = (x.n_rows(), x.n_cols());
        if d != self.w.len() || y.len() != n {
            return Err(Error::dim("LogisticProbe::fit", "table, labels and weights disagree"));
        }
        if n == 0 || x.has_missing() {
            return Err(Error::contract("probe needs a non-empty complete table"));
        }
        let mut gw = vec![0.0; d];
        for _ in 0..cfg.steps {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for i in 0..n {
                let row = x.row(i);
                let r = sigmoid(self.logit(row)) - y.y[i];
                for (g, v) in gw.iter_mut().zip(row) {
                    *g += r * v;
                }
                gb += r;
            }
            for (w, g) in self.w.iter_mut().zip(&gw) {
                *w -= cfg.lr * g / n as f64;
            }
            self.b -= cfg.lr * gb / n as f64;
        }
        if self.w.iter().any(|w| !w.is_finite()) || !self.b.is_finite() {
            return Err(Error::Numerical("probe weights diverged".into()));
        }
        Ok(())
    }

    fn logit(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    pub fn predict(&self, x: &DataMatrix) -> Vec<f64> {
        (0..x.n_rows()).map(|i| sigmoid(self.logit(x.row(i)))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_init() {
        let a = LogisticProbe::init(3, 1);
        assert_eq!(a.checksum(), LogisticProbe::init(3, 1).checksum());
        assert_ne!(a.checksum(), LogisticProbe::init(3, 2).checksum());
        assert_eq!(a.checksum().len(), 64);
    }

    #[test]
    fn separable_data_is_learned() {
        let x = DataMatrix::from_rows(&[vec![-2.0], vec![-1.0], vec![1.0], vec![2.0]]).unwrap();
        let y = LabelVector::new(vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let mut p = LogisticProbe::init(1, 0);
        p.fit(&x, &y, &ProbeConfig::default()).unwrap();
        let s = p.predict(&x);
        assert!(s[0] < 0.5 && s[3] > 0.5);
    }
}
