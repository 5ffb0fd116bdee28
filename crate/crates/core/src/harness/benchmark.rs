//! Method comparison on a held-out split under a mixed test mask.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{apply_mask, load_csv, split, DataMatrix, LabelVector, MaskMatrix, Normalizer};
use crate::error::{Error, Result};
use crate::harness::baselines::{baseline_impute, fit_gain, Baseline};
use crate::harness::config::{DataSource, EvalMask, Method, RunConfig};
use crate::harness::metrics::{auroc, rmse_masked};
use crate::harness::probe::LogisticProbe;
use crate::harness::synth::synth_generate;
use crate::masking::{mask_mcar, mask_mnar, MaskingSpec};
use crate::par;
use crate::routing::Path;
use crate::training::{train, InferenceOptions, TrainConfig};

pub const REPORT_VERSION: u32 = 1;

/// One method on one seed. Metrics are `None` when the method failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub seed: u64,
    pub method: Method,
    /// Masked-cell RMSE over the whole test split.
    pub rmse: Option<f64>,
    /// RMSE over the uniformly masked rows.
    pub rmse_low: Option<f64>,
    /// RMSE over the self-masked rows.
    pub rmse_high: Option<f64>,
    /// Probe AUROC on the imputed test split.
    pub auroc: Option<f64>,
    /// AUROC of the joint model's own task head.
    pub head_auroc: Option<f64>,
    pub seconds: Option<f64>,
    pub path_mice: Option<f64>,
    pub path_gain: Option<f64>,
    /// Inference-time fusion ratio of the joint model.
    pub lambda_t: Option<f64>,
    pub probe_checksum: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub failures: usize,
    pub median_rmse: Option<f64>,
    pub median_rmse_low: Option<f64>,
    pub median_rmse_high: Option<f64>,
    pub median_auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub version: u32,
    pub config: RunConfig,
    pub rows: Vec<MethodRow>,
    pub summary: Vec<MethodSummary>,
}

impl BenchmarkReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "seed", "method", "rmse", "rmse_low", "rmse_high", "auroc", "head_auroc", "seconds", "path_mice", "path_gain", "lambda_t", "error",
        ])?;
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.seed.to_string(),
                r.method.name().to_string(),
                f(r.rmse),
                f(r.rmse_low),
                f(r.rmse_high),
                f(r.auroc),
                f(r.head_auroc),
                f(r.seconds),
                f(r.path_mice),
                f(r.path_gain),
                f(r.lambda_t),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the JSON report and, if configured, the CSV table under
    /// `config.output.dir`.
    pub fn write(&self) -> Result<()> {
        let out = &self.config.output;
        std::fs::create_dir_all(&out.dir)?;
        std::fs::write(out.dir.join(&out.report_json), self.to_json()?)?;
        if let Some(name) = &out.report_csv {
            self.write_csv(std::fs::File::create(out.dir.join(name))?)?;
        }
        Ok(())
    }
}

/// Stream seed for `(seed, name)`: the first eight bytes of
/// SHA-256(seed ‖ name), little-endian.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

/// Leading rows masked uniformly at `mcar_rate`, trailing
/// `round(mnar_fraction·n)` rows self-masked. Returns the mask and the
/// number of leading rows.
pub fn eval_mask(x: &DataMatrix, spec: &EvalMask, seed: u64) -> Result<(MaskMatrix, usize)> {
    let n = x.n_rows();
    let high = ((spec.mnar_fraction * n as f64).round() as usize).min(n);
    let low = n - high;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo_rows: Vec<usize> = (0..low).collect();
    let hi_rows: Vec<usize> = (low..n).collect();
    let mcar = MaskingSpec {
        mcar_rate_low: spec.mcar_rate,
        mcar_rate_high: spec.mcar_rate,
        ..Default::default()
    };
    let mnar = MaskingSpec {
        mnar_a: spec.mnar_a,
        mnar_b: spec.mnar_b,
        ..Default::default()
    };
    let mut bits = Vec::with_capacity(n * x.n_cols());
    if low > 0 {
        bits.extend_from_slice(mask_mcar(&x.select_rows(&lo_rows), &mcar, &mut rng)?.bits());
    }
    if high > 0 {
        bits.extend_from_slice(mask_mnar(&x.select_rows(&hi_rows), &mnar, &mut rng)?.bits());
    }
    Ok((MaskMatrix::new(n, x.n_cols(), bits)?, low))
}

/// One seed's prepared data: normalised complete splits, their masks and
/// the downstream labels.
pub struct Prepared {
    pub train: DataMatrix,
    pub train_y: LabelVector,
    /// Mask applied to the training split for the probe's training data.
    pub train_mask: MaskMatrix,
    pub train_low: usize,
    pub test: DataMatrix,
    pub test_y: LabelVector,
    pub test_mask: MaskMatrix,
    pub test_low: usize,
}

pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let (x, y) = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let (x, y) = synth_generate(spec, seed)?;
            (x, Some(y))
        }
        DataSource::Csv { path, options } => load_csv(path, options)?,
    };
    let y = y.ok_or_else(|| Error::Config("benchmark data needs a label column".into()))?;
    if x.has_missing() {
        return Err(Error::contract("benchmark data must be fully observed"));
    }
    let full = MaskMatrix::all_observed(x.n_rows(), x.n_cols());
    let [train, test, _] = split(&x, &full, Some(&y), [1.0 - cfg.test_fraction, cfg.test_fraction, 0.0], seed)?;
    let norm = Normalizer::fit(&train.x, &train.m)?;
    let train_x = norm.apply(&train.x)?;
    let test_x = norm.apply(&test.x)?;
    let (test_mask, test_low) = eval_mask(&test_x, &cfg.eval_mask, derive_seed(seed, "eval-mask"))?;
    let (train_mask, train_low) = eval_mask(&train_x, &cfg.eval_mask, derive_seed(seed, "probe-mask"))?;
    Ok(Prepared {
        train: train_x,
        train_y: train.y.expect("labels split"),
        train_mask,
        train_low,
        test: test_x,
        test_y: test.y.expect("labels split"),
        test_mask,
        test_low,
    })
}

struct Imputed {
    test: DataMatrix,
    train: DataMatrix,
    head_scores: Option<Vec<f64>>,
    lambda_t: Option<f64>,
    paths: Option<(f64, f64)>,
}

fn run_method(method: Method, data: &Prepared, model_cfg: &TrainConfig, seed: u64) -> Result<Imputed> {
    let truth = MaskMatrix::all_observed(data.train.n_rows(), data.train.n_cols());
    let test_in = apply_mask(&data.test, &data.test_mask)?;
    let train_in = apply_mask(&data.train, &data.train_mask)?;
    if let Some(b) = method.baseline() {
        let (test, train) = if b == Baseline::Gain {
            let model = fit_gain(&data.train, &truth, model_cfg, seed)?;
            (model.impute(&test_in, &data.test_mask, false, seed)?, model.impute(&train_in, &data.train_mask, false, seed)?)
        } else {
            (
                baseline_impute(b, &data.train, &truth, &test_in, &data.test_mask, model_cfg, seed)?,
                baseline_impute(b, &data.train, &truth, &train_in, &data.train_mask, model_cfg, seed)?,
            )
        };
        let paths = match b {
            Baseline::Mean => None,
            Baseline::Mice => Some((1.0, 0.0)),
            Baseline::Gain => Some((0.0, 1.0)),
        };
        return Ok(Imputed {
            test: test.values,
            train: train.values,
            head_scores: None,
            lambda_t: None,
            paths,
        });
    }
    let variant = method.variant().expect("model method");
    let cfg = TrainConfig {
        variant,
        seed,
        ..model_cfg.clone()
    };
    let state = train(&data.train, &truth, Some(&data.train_y), &cfg)?;
    let opts = InferenceOptions {
        stochastic: false,
        ..InferenceOptions::from_config(&cfg)
    };
    let pred = state.predict(&test_in, &data.test_mask, &opts)?;
    let train_pred = state.predict(&train_in, &data.train_mask, &opts)?;
    let n = pred.decisions.len().max(1) as f64;
    let gain = match (variant.uses_mice(), variant.uses_gain()) {
        (true, true) => pred.decisions.iter().filter(|d| d.path == Path::Gain).count() as f64 / n,
        (false, _) => 1.0,
        (true, false) => 0.0,
    };
    Ok(Imputed {
        test: pred.imputation.values,
        train: train_pred.imputation.values,
        head_scores: Some(pred.y_prob),
        lambda_t: Some(pred.lambda_t),
        paths: Some((1.0 - gain, gain)),
    })
}

fn evaluate(method: Method, data: &Prepared, cfg: &RunConfig, seed: u64) -> MethodRow {
    let probe = LogisticProbe::init(data.train.n_cols(), derive_seed(seed, "probe"));
    let mut row = MethodRow {
        seed,
        method,
        rmse: None,
        rmse_low: None,
        rmse_high: None,
        auroc: None,
        head_auroc: None,
        seconds: None,
        path_mice: None,
        path_gain: None,
        lambda_t: None,
        probe_checksum: probe.checksum(),
        error: None,
    };
    let start = Instant::now();
    let outcome = (|| -> Result<()> {
        let imp = run_method(method, data, &cfg.model, derive_seed(seed, method.name()))?;
        let elapsed = start.elapsed().as_secs_f64();
        let n = data.test.n_rows();
        let lo: Vec<usize> = (0..data.test_low).collect();
        let hi: Vec<usize> = (data.test_low..n).collect();
        let part = |rows: &[usize]| -> Option<f64> {
            let m = data.test_mask.select_rows(rows);
            rmse_masked(&data.test.select_rows(rows), &imp.test.select_rows(rows), &m).ok()
        };
        row.rmse = Some(rmse_masked(&data.test, &imp.test, &data.test_mask)?);
        row.rmse_low = part(&lo);
        row.rmse_high = part(&hi);
        let mut p = probe.clone();
        p.fit(&imp.train, &data.train_y, &cfg.probe)?;
        row.auroc = auroc(&data.test_y.y, &p.predict(&imp.test)).ok();
        row.lambda_t = imp.lambda_t;
        row.head_auroc = imp.head_scores.and_then(|s| auroc(&data.test_y.y, &s).ok());
        if let Some((m, g)) = imp.paths {
            row.path_mice = Some(m);
            row.path_gain = Some(g);
        }
        if cfg.record_timing {
            row.seconds = Some(elapsed);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        row.rmse = None;
        row.error = Some(e.to_string());
    }
    row
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

pub fn summarize(methods: &[Method], rows: &[MethodRow]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|&method| {
            let mine: Vec<&MethodRow> = rows.iter().filter(|r| r.method == method).collect();
            let col = |f: fn(&MethodRow) -> Option<f64>| median(mine.iter().filter_map(|r| f(r)).collect());
            MethodSummary {
                method,
                runs: mine.len(),
                failures: mine.iter().filter(|r| r.error.is_some()).count(),
                median_rmse: col(|r| r.rmse),
                median_rmse_low: col(|r| r.rmse_low),
                median_rmse_high: col(|r| r.rmse_high),
                median_auroc: col(|r| r.auroc),
            }
        })
        .collect()
}

/// Runs every method on every seed. Methods run concurrently when the
/// parallel backend is on; each draws from its own `(seed, method)`
/// stream, so the report does not depend on scheduling.
pub fn run_benchmark(cfg: &RunConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for r in 0..cfg.repeats {
        let seed = cfg.seed + r as u64;
        let data = prepare(cfg, seed)?;
        rows.extend(par::map_indexed(cfg.methods.len(), |k| evaluate(cfg.methods[k], &data, cfg, seed)));
    }
    let summary = summarize(&cfg.methods, &rows);
    Ok(BenchmarkReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        rows,
        summary,
    })
}
