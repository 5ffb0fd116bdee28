use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dualimpute::data::{apply_mask, compute_mask, load_csv, save_csv, CsvOptions, DataMatrix, Normalizer};
use dualimpute::harness::checkpoint::{load_checkpoint, save_checkpoint};
use dualimpute::harness::{auroc, rmse_masked, run_benchmark, synth_generate, DataSource, RunConfig, SynthSpec};
use dualimpute::masking::{generate_mask, Mechanism};
use dualimpute::training::{predict_with_uncertainty, train, InferenceOptions};
use dualimpute::{par, Error, Result};

#[derive(Parser)]
#[command(name = "dualimpute", version, about = "Dual-path missing-data imputation")]
struct Cli {
    /// Run configuration (JSON); unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file, or directory for `benchmark`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a complete synthetic table with a `y` label column.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        /// Equicorrelation between every pair of columns.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Hide cells of a CSV under a missingness mechanism.
    Mask {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mechanism: Option<MechanismArg>,
        /// Label column passed through unmasked.
        #[arg(long)]
        label: Option<String>,
    },
    /// Train the dual-path model and write a checkpoint.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        label: Option<String>,
    },
    /// Fill missing cells using a checkpoint.
    Impute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        label: Option<String>,
        /// Stochastic passes for uncertainty; 1 gives a deterministic fill.
        #[arg(long, default_value_t = 1)]
        mc: usize,
    },
    /// RMSE on the cells hidden in `masked`, plus AUROC if predictions and
    /// labels are given.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        masked: PathBuf,
        #[arg(long)]
        imputed: PathBuf,
        #[arg(long)]
        label: Option<String>,
        /// CSV with a `y_prob` column, as written by `impute`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Compare baselines and model variants; writes report.json/report.csv.
    Benchmark,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Mcar,
    Mar,
    Mnar,
}

impl From<MechanismArg> for Mechanism {
    fn from(m: MechanismArg) -> Self {
        match m {
            MechanismArg::Mcar => Mechanism::Mcar,
            MechanismArg::Mar => Mechanism::Mar,
            MechanismArg::Mnar => Mechanism::Mnar,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    par::set_parallel(n > 1);
    #[cfg(feature = "parallel")]
    if n > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn csv_options(label: Option<String>) -> CsvOptions {
    CsvOptions {
        label_column: label,
        ..Default::default()
    }
}

fn out_path(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// `completed.csv` → `completed.<suffix>.csv`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    path.with_file_name(format!("{stem}.{suffix}.csv"))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    configure_threads(cfg.threads)?;
    let seed = cfg.seed;

    match cli.command {
        Command::Synth { n, d, rho } => {
            let mut spec = match &cfg.data {
                DataSource::Synthetic(s) => s.clone(),
                DataSource::Csv { .. } => SynthSpec::default(),
            };
            spec.n = n.unwrap_or(spec.n);
            spec.d = d.unwrap_or(spec.d);
            if let Some(rho) = rho {
                spec.covariance = dualimpute::harness::Covariance::Equicorrelated { rho };
            }
            let (x, y) = synth_generate(&spec, seed)?;
            let out = out_path(&cli.out, "synth.csv");
            save_csv(&out, &x, Some(("y", &y)))?;
            eprintln!("wrote {} rows × {} columns to {}", x.n_rows(), x.n_cols(), out.display());
        }
        Command::Mask { input, mechanism, label } => {
            let (x, y) = load_csv(&input, &csv_options(label.clone()))?;
            let mut spec = cfg.model.masking.clone();
            if let Some(m) = mechanism {
                spec = spec.with_mechanism(m.into());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = generate_mask(&x, &spec, &mut rng)?;
            let masked = apply_mask(&x, &m)?;
            let out = out_path(&cli.out, "masked.csv");
            save_csv(&out, &masked, label.as_deref().zip(y.as_ref()))?;
            eprintln!("hid {} of {} cells; wrote {}", m.count_missing(), x.n_rows() * x.n_cols(), out.display());
        }
        Command::Train { input, label } => {
            let (x, y) = load_csv(&input, &csv_options(label))?;
            let truth = compute_mask(&x);
            let norm = Normalizer::fit(&x, &truth)?;
            let xn = norm.apply(&x)?;
            let mut state = train(&xn, &truth, y.as_ref(), &cfg.model)?;
            state.normalizer = Some(norm);
            if let Some(last) = state.history.last() {
                eprintln!(
                    "epoch {}: imputation loss {:.4}, task loss {:.4}, λ = {:?}",
                    last.epoch, last.losses.imp, last.losses.task, last.lambdas
                );
            }
            let out = out_path(&cli.out, "model.json");
            save_checkpoint(&out, &state)?;
            eprintln!("wrote checkpoint {}", out.display());
        }
        Command::Impute { checkpoint, input, label, mc } => {
            let state = load_checkpoint(&checkpoint)?;
            let (x, y) = load_csv(&input, &csv_options(label.clone()))?;
            let m = compute_mask(&x);
            let norm = state.normalizer.clone();
            let xn = match &norm {
                Some(n) => n.apply(&x)?,
                None => x.clone(),
            };
            let opts = InferenceOptions {
                seed,
                stochastic: mc > 1,
                ..InferenceOptions::from_config(&state.config)
            };
            let est = predict_with_uncertainty(&state, &xn, &m, mc, &opts)?;
            let d = x.n_cols();
            let mut values = est.cell_mean.clone();
            let mut variance = est.cell_variance.clone();
            if let Some(n) = &norm {
                for (k, v) in values.iter_mut().enumerate() {
                    *v = n.invert_value(k % d, *v);
                    variance[k] *= n.column_scale(k % d).powi(2);
                }
            }
            for (k, v) in values.iter_mut().enumerate() {
                if m.bits()[k] {
                    *v = x.values()[k];
                    variance[k] = 0.0;
                }
            }
            let completed = x.with_values(values)?;
            let out = out_path(&cli.out, "completed.csv");
            save_csv(&out, &completed, label.as_deref().zip(y.as_ref()))?;
            write_grid(&sidecar(&out, "provenance"), &x, |k| est.first.imputation.provenance[k].code().to_string())?;
            write_grid(&sidecar(&out, "uncertainty"), &x, |k| variance[k].to_string())?;
            if state.has_labels {
                let mut w = csv::Writer::from_path(sidecar(&out, "predictions"))?;
                w.write_record(["y_prob", "variance", "path"])?;
                for (i, dcs) in est.first.decisions.iter().enumerate() {
                    let path = serde_json::to_value(dcs.path)?;
                    w.write_record([est.mean[i].to_string(), est.variance[i].to_string(), path.as_str().unwrap_or("").to_string()])?;
                }
                w.flush()?;
            }
            eprintln!("filled {} cells; wrote {}", m.count_missing(), out.display());
        }
        Command::Evaluate { truth, masked, imputed, label, predictions } => {
            let opts = csv_options(label);
            let (xt, y) = load_csv(&truth, &opts)?;
            let (xm, _) = load_csv(&masked, &opts)?;
            let (xi, _) = load_csv(&imputed, &opts)?;
            // Cells hidden in `masked` whose truth is known.
            let known = compute_mask(&xt);
            let hidden = compute_mask(&xm);
            if known.n_rows() != hidden.n_rows() || known.n_cols() != hidden.n_cols() {
                return Err(Error::Contract("truth and masked tables differ in shape".into()));
            }
            let bits = known.bits().iter().zip(hidden.bits()).map(|(&k, &h)| h || !k).collect();
            let eval = dualimpute::data::MaskMatrix::new(known.n_rows(), known.n_cols(), bits)?;
            let rmse = rmse_masked(&xt.with_values(xt.filled(0.0))?, &xi, &eval)?;
            let mut report = serde_json::json!({ "rmse": rmse, "masked_cells": eval.count_missing() });
            if let (Some(p), Some(y)) = (predictions, y) {
                report["auroc"] = serde_json::json!(auroc(&y.y, &read_column(&p, "y_prob")?)?);
            }
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(out) = &cli.out {
                std::fs::write(out, text)?;
            }
        }
        Command::Benchmark => {
            if let Some(out) = cli.out {
                cfg.output.dir = out;
            }
            let report = run_benchmark(&cfg)?;
            report.write()?;
            for s in &report.summary {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                eprintln!(
                    "{:<20} rmse {}  low {}  high {}  auroc {}  failures {}",
                    s.method.name(),
                    f(s.median_rmse),
                    f(s.median_rmse_low),
                    f(s.median_rmse_high),
                    f(s.median_auroc),
                    s.failures
                );
            }
            eprintln!("wrote {}", cfg.output.dir.join(&cfg.output.report_json).display());
        }
    }
    Ok(())
}

fn write_grid(path: &Path, x: &DataMatrix, cell: impl Fn(usize) -> String) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(x.column_names())?;
    let d = x.n_cols();
    for i in 0..x.n_rows() {
        w.write_record((0..d).map(|j| cell(i * d + j)))?;
    }
    w.flush()?;
    Ok(())
}

fn read_column(path: &Path, name: &str) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let idx = r
        .headers()?
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Contract(format!("{} has no `{name}` column", path.display())))?;
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            rec[idx].parse::<f64>().map_err(|e| Error::Ingestion {
                row: i + 1,
                column: name.to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}
