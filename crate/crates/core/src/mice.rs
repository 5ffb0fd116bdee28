//! Chained-equations imputation with Fisher-score feature gating and
//! held-out early stopping.
//!
//! Sweeps are Jacobi updates: every column in a sweep regresses against the
//! matrix left by the previous sweep, so the regressions of one sweep are
//! independent and may run in parallel without changing the result.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataMatrix, ImputationResult, MaskMatrix, Provenance};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiceConfig {
    pub ridge: f64,
    pub max_iterations: usize,
    pub stall_patience: usize,
    /// Relative improvement the held-out loss must make to reset the stall
    /// counter.
    pub rel_tol: f64,
    /// Fraction of observed cells hidden for the held-out loss.
    pub cv_fraction: f64,
    /// Features kept at high retention per target; `None` keeps all.
    pub top_k: Option<usize>,
    pub retention_high: f64,
    pub retention_floor: f64,
    /// Sweeps applied by [`mice_transform`].
    pub transform_sweeps: usize,
}

impl Default for MiceConfig {
    fn default() -> Self {
        MiceConfig {
            ridge: 1e-3,
            max_iterations: 10,
            stall_patience: 2,
            rel_tol: 1e-4,
            cv_fraction: 0.1,
            top_k: None,
            retention_high: 0.95,
            retention_floor: 0.05,
            transform_sweeps: 3,
        }
    }
}

impl MiceConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.ridge >= 0.0) || !unit(self.cv_fraction) || !unit(self.retention_high) || !unit(self.retention_floor) {
            return Err(Error::Config("MICE ridge must be >= 0 and fractions in [0, 1]".into()));
        }
        if self.stall_patience == 0 {
            return Err(Error::Config("MICE stall_patience must be positive".into()));
        }
        Ok(())
    }
}

/// Feature retention probabilities for one target column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseGate {
    pub target: usize,
    pub scores: Vec<f64>,
    /// Retention probability per column; the target's own entry is 0.
    pub retention: Vec<f64>,
    pub top_k: usize,
}

impl SparseGate {
    /// Columns ordered by descending score (ties by index).
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).filter(|&j| j != self.target).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }
}

/// Fisher separability of `predictor` when rows are split at the median
/// of `target`: `(μ₁ − μ₀)² / (s₀² + s₁²)` over complete pairs.
pub fn fisher_score(target: &[f64], predictor: &[f64]) -> f64 {
    let pairs: Vec<(f64, f64)> = target
        .iter()
        .zip(predictor)
        .filter(|(t, p)| !t.is_nan() && !p.is_nan())
        .map(|(t, p)| (*t, *p))
        .collect();
    if pairs.len() < 2 {
        return 0.0;
    }
    let mut ts: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    ts.sort_by(f64::total_cmp);
    let mid = ts.len() / 2;
    let median = if ts.len() % 2 == 0 {
        0.5 * (ts[mid - 1] + ts[mid])
    } else {
        ts[mid]
    };
    let (lo, hi): (Vec<_>, Vec<_>) = pairs.iter().partition(|p| p.0 <= median);
    if lo.is_empty() || hi.is_empty() {
        return 0.0;
    }
    let stats = |g: &[&(f64, f64)]| {
        let n = g.len() as f64;
        let mu = g.iter().map(|p| p.1).sum::<f64>() / n;
        let var = g.iter().map(|p| (p.1 - mu).powi(2)).sum::<f64>() / n;
        (mu, var)
    };
    let (m0, v0) = stats(&lo);
    let (m1, v1) = stats(&hi);
    (m1 - m0).powi(2) / (v0 + v1 + 1e-12)
}

/// Scores every other column against `target_col` on observed cells and
/// assigns high retention to the `top_k` best, the floor to the rest.
pub fn rank_features(x: &DataMatrix, m: &MaskMatrix, target_col: usize, top_k: usize, cfg: &MiceConfig) -> Result<SparseGate> {
    let d = x.n_cols();
    if target_col >= d {
        return Err(Error::dim("rank_features", format!("target {target_col} of {d} columns")));
    }
    let col = |j: usize| -> Vec<f64> {
        (0..x.n_rows())
            .map(|i| if m.observed(i, j) { x.get(i, j) } else { f64::NAN })
            .collect()
    };
    let target = col(target_col);
    if target.iter().all(|v| v.is_nan()) {
        return Err(Error::contract(format!("column {target_col} has no observed cells")));
    }
    let scores: Vec<f64> = (0..d)
        .map(|j| if j == target_col { 0.0 } else { fisher_score(&target, &col(j)) })
        .collect();
    let mut gate = SparseGate {
        target: target_col,
        scores,
        retention: vec![cfg.retention_floor; d],
        top_k,
    };
    gate.retention[target_col] = 0.0;
    for &j in gate.ranked().iter().take(top_k) {
        gate.retention[j] = cfg.retention_high;
    }
    Ok(gate)
}

/// Fitted conditional model for one column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnEquation {
    pub target: usize,
    pub features: Vec<usize>,
    pub coefs: Vec<f64>,
    pub intercept: f64,
}

impl ColumnEquation {
    fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + self.features.iter().zip(&self.coefs).map(|(&j, c)| c * row[j]).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiceModel {
    /// Equation per column, `None` where a column could not be regressed.
    pub equations: Vec<Option<ColumnEquation>>,
    /// Observed-cell means used to initialise missing cells.
    pub means: Vec<f64>,
    /// Columns with missing cells, ascending by missing count.
    pub visit_order: Vec<usize>,
    pub config: MiceConfig,
    /// Sweeps run before stopping.
    pub iterations: usize,
    /// Held-out loss at mean initialisation followed by one entry per sweep.
    pub loss_trace: Vec<f64>,
}

impl MiceModel {
    pub fn n_cols(&self) -> usize {
        self.means.len()
    }
}

/// Index of the sweep at which the stall rule stops, given a trace whose
/// first entry is the loss before any sweep. `None` if it never fires.
pub fn stall_stop(trace: &[f64], rel_tol: f64, patience: usize) -> Option<usize> {
    let mut best = *trace.first()?;
    let mut stall = 0;
    for (t, &loss) in trace.iter().enumerate().skip(1) {
        if loss < best * (1.0 - rel_tol) {
            best = loss;
            stall = 0;
        } else {
            stall += 1;
            if stall == patience {
                return Some(t);
            }
        }
    }
    None
}

fn ridge_fit(fill: &[f64], d: usize, rows: &[usize], target: usize, features: &[usize], ridge: f64) -> Option<ColumnEquation> {
    let k = features.len();
    let n = rows.len() as f64;
    let mut mean_f = vec![0.0; k];
    let mut mean_y = 0.0;
    for &i in rows {
        let r = &fill[i * d..(i + 1) * d];
        mean_y += r[target];
        for (a, &j) in features.iter().enumerate() {
            mean_f[a] += r[j];
        }
    }
    mean_y /= n;
    mean_f.iter_mut().for_each(|v| *v /= n);
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut b = DVector::<f64>::zeros(k);
    let mut centered = vec![0.0; k];
    for &i in rows {
        let r = &fill[i * d..(i + 1) * d];
        for (c, &j) in features.iter().enumerate() {
            centered[c] = r[j] - mean_f[c];
        }
        let yc = r[target] - mean_y;
        for p in 0..k {
            b[p] += centered[p] * yc;
            for q in 0..=p {
                a[(p, q)] += centered[p] * centered[q];
            }
        }
    }
    for p in 0..k {
        for q in 0..p {
            a[(q, p)] = a[(p, q)];
        }
        a[(p, p)] += ridge;
    }
    let beta = a.cholesky()?.solve(&b);
    if beta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let intercept = mean_y - beta.iter().zip(&mean_f).map(|(c, m)| c * m).sum::<f64>();
    Some(ColumnEquation {
        target,
        features: features.to_vec(),
        coefs: beta.iter().copied().collect(),
        intercept,
    })
}

fn fit_equation(fill: &[f64], d: usize, rows: &[usize], target: usize, features: &[usize], ridge: f64) -> Result<ColumnEquation> {
    if let Some(eq) = ridge_fit(fill, d, rows, target, features, ridge) {
        return Ok(eq);
    }
    let retry = if ridge > 0.0 { ridge * 10.0 } else { 1e-12 };
    ridge_fit(fill, d, rows, target, features, retry).ok_or_else(|| {
        Error::contract(format!(
            "normal equations for column {target} are singular even at ridge {retry}"
        ))
    })
}

struct Problem<'a> {
    d: usize,
    observed: &'a [bool],
    gates: &'a [Option<SparseGate>],
    ridge: f64,
}

impl Problem<'_> {
    fn observed_rows(&self, n: usize, j: usize) -> Vec<usize> {
        (0..n).filter(|&i| self.observed[i * self.d + j]).collect()
    }

    /// Bernoulli feature draw per target, falling back to the best-ranked
    /// feature when the draw keeps nothing.
    fn draw_features<R: Rng + ?Sized>(&self, targets: &[usize], rng: &mut R) -> Vec<Vec<usize>> {
        targets
            .iter()
            .map(|&t| {
                let gate = self.gates[t].as_ref().expect("gate for every target");
                let mut keep: Vec<usize> = (0..self.d)
                    .filter(|&j| j != t)
                    .filter(|&j| rng.random::<f64>() < gate.retention[j])
                    .collect();
                if keep.is_empty() {
                    keep.extend(gate.ranked().first());
                }
                keep
            })
            .collect()
    }

    /// Fits every target against `fill` (Jacobi: all read the same matrix).
    fn fit_all(&self, fill: &[f64], n: usize, targets: &[usize], features: &[Vec<usize>]) -> Result<Vec<ColumnEquation>> {
        par::map_indexed(targets.len(), |k| {
            let t = targets[k];
            fit_equation(fill, self.d, &self.observed_rows(n, t), t, &features[k], self.ridge)
        })
        .into_iter()
        .collect()
    }
}

/// One Jacobi sweep: every missing cell of an equation's target is
/// replaced by the equation's prediction from the current fill.
fn jacobi_sweep(fill: &mut [f64], d: usize, observed: &[bool], equations: &[&ColumnEquation]) {
    par::for_each_row_mut(fill, d, |i, row| {
        let preds: Vec<(usize, f64)> = equations
            .iter()
            .filter(|eq| !observed[i * d + eq.target])
            .map(|eq| (eq.target, eq.predict(row)))
            .collect();
        for (j, v) in preds {
            row[j] = v;
        }
    });
}

fn column_means(x: &DataMatrix, observed: &[bool]) -> Vec<f64> {
    let (n, d) = (x.n_rows(), x.n_cols());
    (0..d)
        .map(|j| {
            let (s, c) = (0..n)
                .filter(|&i| observed[i * d + j])
                .fold((0.0, 0usize), |(s, c), i| (s + x.get(i, j), c + 1));
            if c == 0 {
                0.0
            } else {
                s / c as f64
            }
        })
        .collect()
}

fn initial_fill(x: &DataMatrix, observed: &[bool], means: &[f64]) -> Vec<f64> {
    let d = x.n_cols();
    x.values()
        .iter()
        .enumerate()
        .map(|(k, &v)| if observed[k] { v } else { means[k % d] })
        .collect()
}

fn holdout_mse(fill: &[f64], x: &DataMatrix, holdout: &[usize]) -> f64 {
    holdout
        .iter()
        .map(|&k| (fill[k] - x.values()[k]).powi(2))
        .sum::<f64>()
        / holdout.len() as f64
}

/// Fits chained equations on `x` under mask `m` and returns the completed
/// table with the fitted model.
///
/// The returned fill is [`mice_transform`] of the fitted model applied to
/// the input, so replaying any input row through the model reproduces it.
pub fn mice_fit_impute<R: Rng + ?Sized>(
    x: &DataMatrix,
    m: &MaskMatrix,
    cfg: &MiceConfig,
    rng: &mut R,
) -> Result<(ImputationResult, MiceModel)> {
    cfg.validate()?;
    let (n, d) = (x.n_rows(), x.n_cols());
    if m.n_rows() != n || m.n_cols() != d {
        return Err(Error::dim("mice_fit_impute", "table and mask shapes differ"));
    }
    for (k, &o) in m.bits().iter().enumerate() {
        if o && !x.values()[k].is_finite() {
            return Err(Error::contract(format!(
                "observed cell ({}, {}) is not finite",
                k / d.max(1),
                k % d.max(1)
            )));
        }
    }
    let full_obs = m.bits().to_vec();
    let missing_count: Vec<usize> = (0..d).map(|j| (0..n).filter(|&i| !m.observed(i, j)).count()).collect();
    let mut visit_order: Vec<usize> = (0..d).filter(|&j| missing_count[j] > 0).collect();
    visit_order.sort_by_key(|&j| (missing_count[j], j));

    if visit_order.is_empty() {
        let model = MiceModel {
            equations: vec![None; d],
            means: column_means(x, &full_obs),
            visit_order,
            config: cfg.clone(),
            iterations: 0,
            loss_trace: Vec::new(),
        };
        let values = x.with_values(initial_fill(x, &full_obs, &model.means))?;
        return Ok((ImputationResult::from_fill(values, m, Provenance::Mice), model));
    }

    // Hide a fixed slice of observed cells for the held-out loss, never
    // taking a column below two observed cells.
    let mut cells: Vec<usize> = (0..n * d).filter(|&k| full_obs[k]).collect();
    cells.shuffle(rng);
    let budget = (cfg.cv_fraction * cells.len() as f64).floor() as usize;
    let mut obs_left: Vec<usize> = (0..d).map(|j| n - missing_count[j]).collect();
    let mut holdout = Vec::with_capacity(budget);
    for k in cells {
        if holdout.len() == budget {
            break;
        }
        if obs_left[k % d] > 2 {
            obs_left[k % d] -= 1;
            holdout.push(k);
        }
    }
    holdout.sort_unstable();
    let mut work_obs = full_obs.clone();
    for &k in &holdout {
        work_obs[k] = false;
    }
    let work_mask = MaskMatrix::new(n, d, work_obs.clone())?;

    let eligible = |obs: &[usize], j: usize| obs[j] >= 2;
    let top_k = cfg.top_k.unwrap_or(d.saturating_sub(1));
    let gates: Vec<Option<SparseGate>> = (0..d)
        .map(|j| {
            if obs_left[j] >= 1 {
                rank_features(x, &work_mask, j, top_k, cfg).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;

    // Regression targets: visited columns with enough observed cells.
    let targets: Vec<usize> = visit_order
        .iter()
        .copied()
        .filter(|&j| eligible(&obs_left, j) && d > 1)
        .collect();
    let means = column_means(x, &work_obs);
    let mut fill = initial_fill(x, &work_obs, &means);
    let problem = Problem {
        d,
        observed: &work_obs,
        gates: &gates,
        ridge: cfg.ridge,
    };

    let mut trace = Vec::new();
    if !holdout.is_empty() {
        trace.push(holdout_mse(&fill, x, &holdout));
    }
    let mut iterations = 0;
    while iterations < cfg.max_iterations && !targets.is_empty() {
        let features = problem.draw_features(&targets, rng);
        let eqs = problem.fit_all(&fill, n, &targets, &features)?;
        // Held-out cells are refilled too; only truly observed cells stay.
        let all_targets: Vec<&ColumnEquation> = eqs.iter().collect();
        jacobi_sweep(&mut fill, d, &work_obs, &all_targets);
        iterations += 1;
        if !fill.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("MICE sweep produced non-finite values".into()));
        }
        if !holdout.is_empty() {
            trace.push(holdout_mse(&fill, x, &holdout));
            if stall_stop(&trace, cfg.rel_tol, cfg.stall_patience).is_some() {
                break;
            }
        }
    }

    // Restore held-out cells and fit the final equations on every column
    // that can be regressed, so the model also covers columns that were
    // complete here.
    for &k in &holdout {
        fill[k] = x.values()[k];
    }
    let full_counts: Vec<usize> = (0..d).map(|j| n - missing_count[j]).collect();
    let final_targets: Vec<usize> = (0..d).filter(|&j| eligible(&full_counts, j) && d > 1).collect();
    let full_gates: Vec<Option<SparseGate>> = (0..d)
        .map(|j| {
            if final_targets.contains(&j) {
                rank_features(x, m, j, top_k, cfg).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let final_problem = Problem {
        d,
        observed: &full_obs,
        gates: &full_gates,
        ridge: cfg.ridge,
    };
    let features = final_problem.draw_features(&final_targets, rng);
    let eqs = final_problem.fit_all(&fill, n, &final_targets, &features)?;
    let mut equations = vec![None; d];
    for eq in eqs {
        let t = eq.target;
        equations[t] = Some(eq);
    }
    let model = MiceModel {
        equations,
        means: column_means(x, &full_obs),
        visit_order,
        config: cfg.clone(),
        iterations,
        loss_trace: trace,
    };
    let result = mice_transform(&model, x, m)?;
    Ok((result, model))
}

/// Applies fitted equations to new data: missing cells start at the stored
/// means, then `transform_sweeps` Jacobi sweeps run without refitting.
pub fn mice_transform(model: &MiceModel, x: &DataMatrix, m: &MaskMatrix) -> Result<ImputationResult> {
    let d = model.n_cols();
    if x.n_cols() != d || m.n_cols() != d || m.n_rows() != x.n_rows() {
        return Err(Error::contract(format!(
            "model fitted on {d} columns, got a {}x{} table",
            x.n_rows(),
            x.n_cols()
        )));
    }
    let observed = m.bits();
    let mut fill = initial_fill(x, observed, &model.means);
    let eqs: Vec<&ColumnEquation> = model.equations.iter().flatten().collect();
    if m.count_missing() > 0 {
        for _ in 0..model.config.transform_sweeps {
            jacobi_sweep(&mut fill, d, observed, &eqs);
        }
    }
    if !fill.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("MICE transform produced non-finite values".into()));
    }
    Ok(ImputationResult::from_fill(x.with_values(fill)?, m, Provenance::Mice))
}

/// Seeded convenience wrapper around [`mice_fit_impute`].
pub fn mice_fit_impute_seeded(x: &DataMatrix, m: &MaskMatrix, cfg: &MiceConfig, seed: u64) -> Result<(ImputationResult, MiceModel)> {
    mice_fit_impute(x, m, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stall_rule_counts_consecutive_failures() {
        assert_eq!(stall_stop(&[1.0, 0.5, 0.5, 0.5], 1e-4, 2), Some(3));
        assert_eq!(stall_stop(&[1.0, 0.5, 0.5, 0.4, 0.4, 0.4], 1e-4, 2), Some(5));
        assert_eq!(stall_stop(&[1.0, 0.9, 0.8], 1e-4, 2), None);
        // A gain smaller than the relative tolerance counts as a stall.
        assert_eq!(stall_stop(&[1.0, 0.99999, 0.99998], 1e-4, 2), Some(2));
    }

    #[test]
    fn identical_predictor_ranks_first() {
        let t: Vec<f64> = (0..20).map(f64::from).collect();
        let rows: Vec<Vec<f64>> = t.iter().map(|&v| vec![v, (v * 7.0) % 3.0, v]).collect();
        let x = DataMatrix::from_rows(&rows).unwrap();
        let m = crate::data::compute_mask(&x);
        let gate = rank_features(&x, &m, 0, 1, &MiceConfig::default()).unwrap();
        assert_eq!(gate.ranked()[0], 2);
        assert_eq!(gate.retention, vec![0.0, 0.05, 0.95]);
    }

    #[test]
    fn budget_covering_all_features() {
        let x = DataMatrix::from_rows(&[vec![1., 2., 3.], vec![2., 1., 0.], vec![3., 3., 1.]]).unwrap();
        let m = crate::data::compute_mask(&x);
        let gate = rank_features(&x, &m, 1, 5, &MiceConfig::default()).unwrap();
        assert_eq!(gate.retention, vec![0.95, 0.0, 0.95]);
    }

    #[test]
    fn complete_table_is_identity() {
        let x = DataMatrix::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        let m = crate::data::compute_mask(&x);
        let (res, model) = mice_fit_impute_seeded(&x, &m, &MiceConfig::default(), 1).unwrap();
        assert_eq!(res.values, x);
        assert_eq!(model.iterations, 0);
    }
}
