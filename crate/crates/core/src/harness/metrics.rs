//! Masked RMSE and rank-based AUROC.

use crate::data::{DataMatrix, MaskMatrix};
use crate::error::{Error, Result};

/// Root mean squared error over the cells `m` marks hidden.
pub fn rmse_masked(x_true: &DataMatrix, x_imputed: &DataMatrix, m: &MaskMatrix) -> Result<f64> {
    if x_true.n_rows() != x_imputed.n_rows()
        || x_true.n_cols() != x_imputed.n_cols()
        || m.n_rows() != x_true.n_rows()
        || m.n_cols() != x_true.n_cols()
    {
        return Err(Error::dim("rmse_masked", "truth, imputation and mask shapes differ"));
    }
    let (mut se, mut count) = (0.0, 0usize);
    for (k, &obs) in m.bits().iter().enumerate() {
        if !obs {
            se += (x_true.values()[k] - x_imputed.values()[k]).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract("rmse_masked needs at least one masked cell"));
    }
    Ok((se / count as f64).sqrt())
}

/// Probability that a random positive outscores a random negative, ties
/// counted half. Computed from average ranks (Mann-Whitney U).
pub fn auroc(y_true: &[f64], scores: &[f64]) -> Result<f64> {
    if y_true.len() != scores.len() {
        return Err(Error::dim("auroc", "one score per label"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("auroc scores contain NaN".into()));
    }
    let pos = y_true.iter().filter(|&&y| y == 1.0).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("auroc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| y_true[k] == 1.0).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}
