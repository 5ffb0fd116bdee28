//! Synthetic missingness generators and the curriculum schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataMatrix, MaskMatrix};
use crate::error::{Error, Result};
use crate::numerics::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingSpec {
    pub mechanism: Mechanism,
    pub mcar_rate_low: f64,
    pub mcar_rate_high: f64,
    pub mar_target_rate: f64,
    /// Never-masked columns whose mean drives MAR missingness.
    pub mar_anchors: Vec<usize>,
    pub mnar_a: f64,
    pub mnar_b: f64,
    /// Allow masking on top of cells that are already missing.
    pub compound: bool,
    pub seed: u64,
}

impl Default for MaskingSpec {
    fn default() -> Self {
        MaskingSpec {
            mechanism: Mechanism::Mcar,
            mcar_rate_low: 0.1,
            mcar_rate_high: 0.3,
            mar_target_rate: 0.2,
            mar_anchors: vec![0],
            mnar_a: 2.0,
            mnar_b: -1.5,
            compound: false,
            seed: 0,
        }
    }
}

impl MaskingSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.mcar_rate_low) || !unit(self.mcar_rate_high) || self.mcar_rate_low > self.mcar_rate_high {
            return Err(Error::Config(format!(
                "MCAR rates must satisfy 0 <= low <= high <= 1, got {} / {}",
                self.mcar_rate_low, self.mcar_rate_high
            )));
        }
        if !unit(self.mar_target_rate) {
            return Err(Error::Config("mar_target_rate must be in [0, 1]".into()));
        }
        if !self.mnar_a.is_finite() || self.mnar_b.is_nan() {
            return Err(Error::Config("MNAR coefficients must be numbers".into()));
        }
        Ok(())
    }

    /// Same spec with a different mechanism.
    pub fn with_mechanism(&self, mechanism: Mechanism) -> Self {
        MaskingSpec {
            mechanism,
            ..self.clone()
        }
    }
}

fn check_input(x: &DataMatrix, spec: &MaskingSpec) -> Result<()> {
    spec.validate()?;
    if !spec.compound && x.has_missing() {
        return Err(Error::contract(
            "input already has missing cells; set compound to mask on top of them",
        ));
    }
    Ok(())
}

/// Builds a mask from per-cell missing probabilities, drawing one uniform
/// per cell in row-major order. Cells already missing stay missing.
fn draw<R: Rng + ?Sized>(x: &DataMatrix, rng: &mut R, prob: impl Fn(usize, usize) -> f64) -> MaskMatrix {
    let (n, d) = (x.n_rows(), x.n_cols());
    let mut bits = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            let u: f64 = rng.random();
            bits.push(!x.is_missing(i, j) && u >= prob(i, j));
        }
    }
    MaskMatrix::new(n, d, bits).expect("consistent shape")
}

/// Uniform random masking: one rate `p ~ U(low, high)` per call, then each
/// cell missing independently with probability `p`.
pub fn mask_mcar<R: Rng + ?Sized>(x: &DataMatrix, spec: &MaskingSpec, rng: &mut R) -> Result<MaskMatrix> {
    check_input(x, spec)?;
    let u: f64 = rng.random();
    let p = spec.mcar_rate_low + u * (spec.mcar_rate_high - spec.mcar_rate_low);
    Ok(draw(x, rng, |_, _| p))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter(|(u, v)| !u.is_nan() && !v.is_nan())
        .map(|(u, v)| (*u, *v))
        .collect();
    if pairs.len() < 2 {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (u, v) in &pairs {
        sab += (u - ma) * (v - mb);
        saa += (u - ma) * (u - ma);
        sbb += (v - mb) * (v - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Per-column MAR missing probabilities: proportional to `|corr(col, anchor
/// mean)|`, rescaled so non-anchor columns average `mar_target_rate`, then
/// clipped to `[0, 0.95]`. Anchors get probability 0.
pub fn mar_column_rates(x: &DataMatrix, spec: &MaskingSpec) -> Result<Vec<f64>> {
    let d = x.n_cols();
    if spec.mar_anchors.is_empty() {
        return Err(Error::Config("MAR needs at least one anchor column".into()));
    }
    if let Some(&a) = spec.mar_anchors.iter().find(|&&a| a >= d) {
        return Err(Error::Config(format!("MAR anchor {a} out of range for {d} columns")));
    }
    let anchor_mean: Vec<f64> = (0..x.n_rows())
        .map(|i| spec.mar_anchors.iter().map(|&a| x.get(i, a)).sum::<f64>() / spec.mar_anchors.len() as f64)
        .collect();
    let targets: Vec<usize> = (0..d).filter(|j| !spec.mar_anchors.contains(j)).collect();
    let mut rates = vec![0.0; d];
    if targets.is_empty() {
        return Ok(rates);
    }
    let corr: Vec<f64> = targets
        .iter()
        .map(|&j| pearson(&x.column(j), &anchor_mean).abs())
        .collect();
    let mean_corr = corr.iter().sum::<f64>() / corr.len() as f64;
    let spread = corr.iter().fold(0.0f64, |acc, c| acc.max((c - mean_corr).abs()));
    for (k, &j) in targets.iter().enumerate() {
        let p = if mean_corr <= 0.0 || spread <= 1e-12 * mean_corr {
            spec.mar_target_rate
        } else {
            spec.mar_target_rate * corr[k] / mean_corr
        };
        rates[j] = p.clamp(0.0, 0.95);
    }
    Ok(rates)
}

/// Feature-correlated masking; see [`mar_column_rates`].
pub fn mask_mar<R: Rng + ?Sized>(x: &DataMatrix, spec: &MaskingSpec, rng: &mut R) -> Result<MaskMatrix> {
    check_input(x, spec)?;
    let rates = mar_column_rates(x, spec)?;
    Ok(draw(x, rng, |_, j| rates[j]))
}

/// Value-dependent masking: cell missing with probability `σ(a·x + b)`
/// evaluated on the true value.
pub fn mask_mnar<R: Rng + ?Sized>(x: &DataMatrix, spec: &MaskingSpec, rng: &mut R) -> Result<MaskMatrix> {
    check_input(x, spec)?;
    Ok(draw(x, rng, |i, j| {
        let v = x.get(i, j);
        if v.is_nan() {
            1.0
        } else {
            sigmoid(spec.mnar_a * v + spec.mnar_b)
        }
    }))
}

/// Dispatches on `spec.mechanism`.
pub fn generate_mask<R: Rng + ?Sized>(x: &DataMatrix, spec: &MaskingSpec, rng: &mut R) -> Result<MaskMatrix> {
    match spec.mechanism {
        Mechanism::Mcar => mask_mcar(x, spec, rng),
        Mechanism::Mar => mask_mar(x, spec, rng),
        Mechanism::Mnar => mask_mnar(x, spec, rng),
    }
}

/// Epoch fractions spent in the MCAR, MAR and MNAR phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub fractions: [f64; 3],
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            fractions: [0.3, 0.5, 0.2],
        }
    }
}

impl CurriculumSchedule {
    pub fn new(fractions: [f64; 3]) -> Result<Self> {
        let s = CurriculumSchedule { fractions };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !(*f > 0.0)) || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "curriculum fractions {:?} must be positive and sum to 1",
                self.fractions
            )));
        }
        Ok(())
    }

    /// First epoch of the MAR and MNAR phases for a run of `total` epochs.
    pub fn boundaries(&self, total: usize) -> (usize, usize) {
        let t = total as f64;
        let b1 = (self.fractions[0] * t).round() as usize;
        let b2 = ((self.fractions[0] + self.fractions[1]) * t).round() as usize;
        (b1.min(total), b2.min(total))
    }

    pub fn phase_for_epoch(&self, epoch: usize, total: usize) -> Mechanism {
        let (b1, b2) = self.boundaries(total);
        if epoch < b1 {
            Mechanism::Mcar
        } else if epoch < b2 {
            Mechanism::Mar
        } else {
            Mechanism::Mnar
        }
    }
}
