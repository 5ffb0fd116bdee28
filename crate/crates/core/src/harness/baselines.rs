//! Mean, MICE-only and GAIN-only imputers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_mask, DataMatrix, ImputationResult, MaskMatrix, Provenance};
use crate::error::Result;
use crate::gain::{gain_train, GainConfig, GainModel};
use crate::mice::mice_fit_impute;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Mean,
    Mice,
    Gain,
}

/// Column means of the cells `m` marks observed; a column with none is
/// filled with 0. Fills are tagged as MICE, being its zero-sweep state.
pub fn mean_impute(x: &DataMatrix, m: &MaskMatrix) -> Result<ImputationResult> {
    let (n, d) = (x.n_rows(), x.n_cols());
    let mut means = vec![0.0; d];
    for (j, mean) in means.iter_mut().enumerate() {
        let obs: Vec<f64> = (0..n).filter(|&i| m.observed(i, j) && !x.is_missing(i, j)).map(|i| x.get(i, j)).collect();
        if !obs.is_empty() {
            *mean = obs.iter().sum::<f64>() / obs.len() as f64;
        }
    }
    let values = (0..n * d)
        .map(|k| if m.bits()[k] { x.values()[k] } else { means[k % d] })
        .collect();
    Ok(ImputationResult::from_fill(x.with_values(values)?, m, Provenance::Mice))
}

/// Imputes `x` under `m` with a baseline. GAIN trains on the complete
/// `train` table (known cells in `train_truth`) with the joint model's
/// epochs, batch size and learning rate; MICE and mean fit on `x` itself.
pub fn baseline_impute(
    method: Baseline,
    train: &DataMatrix,
    train_truth: &MaskMatrix,
    x: &DataMatrix,
    m: &MaskMatrix,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ImputationResult> {
    match method {
        Baseline::Mean => mean_impute(x, m),
        Baseline::Mice => {
            let (res, _) = mice_fit_impute(&apply_mask(x, m)?, m, &cfg.mice, &mut ChaCha8Rng::seed_from_u64(seed))?;
            Ok(res)
        }
        Baseline::Gain => fit_gain(train, train_truth, cfg, seed)?.impute(x, m, false, seed),
    }
}

/// The standalone GAIN baseline, trained with the joint model's epochs,
/// batch size and learning rate.
pub fn fit_gain(train: &DataMatrix, truth: &MaskMatrix, cfg: &TrainConfig, seed: u64) -> Result<GainModel> {
    let gcfg = GainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed,
        ..cfg.gain.clone()
    };
    gain_train(train, truth, &gcfg, &cfg.masking, &cfg.curriculum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_fills_column_mean() {
        let x = DataMatrix::from_rows(&[vec![1.0], vec![f64::NAN], vec![3.0]]).unwrap();
        let m = crate::data::compute_mask(&x);
        let r = mean_impute(&x, &m).unwrap();
        assert_eq!(r.values.values(), &[1.0, 2.0, 3.0]);
        assert_eq!(r.provenance[0], Provenance::Observed);
    }
}
