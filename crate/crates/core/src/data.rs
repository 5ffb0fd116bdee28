//! Incomplete tables, observation masks, CSV I/O, normalisation and splits.
//!
//! Missing cells are stored as `NaN`. Every other cell is finite.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    /// One level of a one-hot encoded categorical column.
    OneHot { group: String, level: String },
}

/// `n × d` table with `NaN` at missing cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
    column_names: Vec<String>,
    column_kinds: Vec<ColumnKind>,
}

impl DataMatrix {
    /// Numeric table with generated column names `x0, x1, ...`.
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        let names = (0..d).map(|j| format!("x{j}")).collect();
        Self::with_columns(n, d, values, names, vec![ColumnKind::Numeric; d])
    }

    pub fn with_columns(
        n: usize,
        d: usize,
        values: Vec<f64>,
        column_names: Vec<String>,
        column_kinds: Vec<ColumnKind>,
    ) -> Result<Self> {
        if values.len() != n * d || column_names.len() != d || column_kinds.len() != d {
            return Err(Error::dim(
                "DataMatrix",
                format!(
                    "{n}x{d} table with {} values, {} names, {} kinds",
                    values.len(),
                    column_names.len(),
                    column_kinds.len()
                ),
            ));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::contract("observed cells must be finite"));
        }
        Ok(DataMatrix {
            n,
            d,
            values,
            column_names,
            column_kinds,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::dim("DataMatrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn column_kinds(&self) -> &[ColumnKind] {
        &self.column_kinds
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.d + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.get(i, j).is_nan()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Same table with its values replaced.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::with_columns(
            self.n,
            self.d,
            values,
            self.column_names.clone(),
            self.column_kinds.clone(),
        )
    }

    /// Copy with missing cells replaced by `fill`.
    pub fn filled(&self, fill: f64) -> Vec<f64> {
        self.values
            .iter()
            .map(|&v| if v.is_nan() { fill } else { v })
            .collect()
    }

    /// Matrix tensor with missing cells replaced by `fill`.
    pub fn to_tensor(&self, fill: f64) -> Tensor {
        Tensor::from_vec(self.n, self.d, self.filled(fill)).expect("consistent shape")
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let values = rows.iter().flat_map(|&i| self.row(i).to_vec()).collect();
        DataMatrix {
            n: rows.len(),
            d: self.d,
            values,
            column_names: self.column_names.clone(),
            column_kinds: self.column_kinds.clone(),
        }
    }
}

/// Observation indicator: `true` where the paired cell is observed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMatrix {
    n: usize,
    d: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(n: usize, d: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * d {
            return Err(Error::dim("MaskMatrix", format!("{n}x{d} vs {} bits", bits.len())));
        }
        Ok(MaskMatrix { n, d, bits })
    }

    pub fn all_observed(n: usize, d: usize) -> Self {
        MaskMatrix {
            n,
            d,
            bits: vec![true; n * d],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.d
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn observed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.d + j]
    }

    pub fn set(&mut self, i: usize, j: usize, observed: bool) {
        self.bits[i * self.d + j] = observed;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.d..(i + 1) * self.d]
    }

    pub fn count_missing(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    pub fn row_missing(&self, i: usize) -> usize {
        self.row(i).iter().filter(|b| !**b).count()
    }

    /// 1.0 for observed, 0.0 for missing.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.n,
            self.d,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("consistent shape")
    }

    /// Cell-wise AND: missing in either ⇒ missing.
    pub fn and(&self, other: &MaskMatrix) -> Result<Self> {
        if self.n != other.n || self.d != other.d {
            return Err(Error::dim("MaskMatrix::and", "shapes differ"));
        }
        Ok(MaskMatrix {
            n: self.n,
            d: self.d,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        MaskMatrix {
            n: rows.len(),
            d: self.d,
            bits: rows.iter().flat_map(|&i| self.row(i).to_vec()).collect(),
        }
    }
}

/// Binary downstream-task labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub y: Vec<f64>,
}

impl LabelVector {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("labels must be 0 or 1"));
        }
        Ok(LabelVector { y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        LabelVector {
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Where an output cell's value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Observed,
    Mice,
    Gain,
    Fused,
}

impl Provenance {
    pub fn code(self) -> char {
        match self {
            Provenance::Observed => 'O',
            Provenance::Mice => 'M',
            Provenance::Gain => 'G',
            Provenance::Fused => 'F',
        }
    }
}

/// Completed table with per-cell provenance and uncertainty (variance).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationResult {
    pub values: DataMatrix,
    pub provenance: Vec<Provenance>,
    pub uncertainty: Vec<f64>,
}

impl ImputationResult {
    /// Builds a result from a completed table; observed cells come from `m`.
    pub fn from_fill(values: DataMatrix, m: &MaskMatrix, filled_as: Provenance) -> Self {
        let provenance = m
            .bits()
            .iter()
            .map(|&o| if o { Provenance::Observed } else { filled_as })
            .collect();
        let uncertainty = vec![0.0; m.bits().len()];
        ImputationResult {
            values,
            provenance,
            uncertainty,
        }
    }
}

/// Observation mask of a table: `false` exactly at `NaN` cells.
pub fn compute_mask(x: &DataMatrix) -> MaskMatrix {
    MaskMatrix {
        n: x.n,
        d: x.d,
        bits: x.values.iter().map(|v| !v.is_nan()).collect(),
    }
}

/// Copy of `x` with every cell that `m` marks missing set to `NaN`.
pub fn apply_mask(x: &DataMatrix, m: &MaskMatrix) -> Result<DataMatrix> {
    if x.n != m.n || x.d != m.d {
        return Err(Error::dim("apply_mask", "table and mask shapes differ"));
    }
    let values = x
        .values
        .iter()
        .zip(&m.bits)
        .map(|(&v, &o)| if o { v } else { f64::NAN })
        .collect();
    x.with_values(values)
}

/// CSV ingestion options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvOptions {
    /// Tokens (besides the empty field) read as missing.
    pub missing_tokens: Vec<String>,
    /// Column split off as the binary label.
    pub label_column: Option<String>,
    /// Columns one-hot encoded at ingestion.
    pub categorical: Vec<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            missing_tokens: vec!["NA".into(), "NaN".into(), "null".into()],
            label_column: None,
            categorical: Vec::new(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<(DataMatrix, Option<LabelVector>)> {
    let file = std::fs::File::open(path)?;
    read_csv(file, opts)
}

/// Parses CSV text from any reader; see [`load_csv`].
pub fn read_csv<R: std::io::Read>(reader: R, opts: &CsvOptions) -> Result<(DataMatrix, Option<LabelVector>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let mut records = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Ingestion {
            row: r + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        records.push(rec.iter().map(str::to_owned).collect::<Vec<_>>());
    }
    let is_missing = |s: &str| {
        let t = s.trim();
        t.is_empty() || opts.missing_tokens.iter().any(|m| m == t)
    };

    let label_idx = match &opts.label_column {
        Some(name) => Some(header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("label column {name:?} not in header"))
        })?),
        None => None,
    };
    for c in &opts.categorical {
        if !header.contains(c) {
            return Err(Error::Config(format!("categorical column {c:?} not in header")));
        }
    }

    // Output layout: numeric columns stay single, categoricals expand.
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let mut plan: Vec<(usize, Option<Vec<String>>)> = Vec::new();
    for (j, h) in header.iter().enumerate() {
        if Some(j) == label_idx {
            continue;
        }
        if opts.categorical.contains(h) {
            let levels: BTreeSet<String> = records
                .iter()
                .map(|r| r[j].trim().to_owned())
                .filter(|s| !is_missing(s))
                .collect();
            let levels: Vec<String> = levels.into_iter().collect();
            for l in &levels {
                names.push(format!("{h}={l}"));
                kinds.push(ColumnKind::OneHot {
                    group: h.clone(),
                    level: l.clone(),
                });
            }
            plan.push((j, Some(levels)));
        } else {
            names.push(h.clone());
            kinds.push(ColumnKind::Numeric);
            plan.push((j, None));
        }
    }

    let d = names.len();
    let mut values = Vec::with_capacity(records.len() * d);
    let mut labels = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        for (j, levels) in &plan {
            let cell = rec[*j].trim();
            match levels {
                None => {
                    if is_missing(cell) {
                        values.push(f64::NAN);
                    } else {
                        let v: f64 = cell.parse().map_err(|_| Error::Ingestion {
                            row: r + 1,
                            column: header[*j].clone(),
                            message: format!("cannot parse {cell:?} as a number"),
                        })?;
                        if !v.is_finite() {
                            return Err(Error::Ingestion {
                                row: r + 1,
                                column: header[*j].clone(),
                                message: format!("non-finite value {cell:?}"),
                            });
                        }
                        values.push(v);
                    }
                }
                Some(levels) => {
                    if is_missing(cell) {
                        values.extend(std::iter::repeat_n(f64::NAN, levels.len()));
                    } else {
                        values.extend(levels.iter().map(|l| if l == cell { 1.0 } else { 0.0 }));
                    }
                }
            }
        }
        if let Some(li) = label_idx {
            let cell = rec[li].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Ingestion {
                row: r + 1,
                column: header[li].clone(),
                message: format!("label {cell:?} is not 0 or 1"),
            })?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Ingestion {
                    row: r + 1,
                    column: header[li].clone(),
                    message: format!("label {cell:?} is not 0 or 1"),
                });
            }
            labels.push(v);
        }
    }
    let x = DataMatrix::with_columns(records.len(), d, values, names, kinds)?;
    let y = label_idx.map(|_| LabelVector { y: labels });
    Ok((x, y))
}

pub fn save_csv(path: impl AsRef<Path>, x: &DataMatrix, labels: Option<(&str, &LabelVector)>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(file, x, labels)
}

/// Writes a table as CSV; missing cells become empty fields.
pub fn write_csv<W: std::io::Write>(writer: W, x: &DataMatrix, labels: Option<(&str, &LabelVector)>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = x.column_names.iter().map(String::as_str).collect();
    if let Some((name, _)) = labels {
        header.push(name);
    }
    w.write_record(&header)?;
    for i in 0..x.n {
        let mut rec: Vec<String> = x
            .row(i)
            .iter()
            .map(|v| if v.is_nan() { String::new() } else { v.to_string() })
            .collect();
        if let Some((_, y)) = labels {
            rec.push(y.y[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column z-score statistics fitted on observed cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns with fewer than two observed cells, zero spread, or one-hot
    /// encoding are passed through unscaled.
    pub scaled: Vec<bool>,
}

impl Normalizer {
    /// Fits on the cells `m` marks observed. Uses the sample (n − 1)
    /// standard deviation.
    pub fn fit(x: &DataMatrix, m: &MaskMatrix) -> Result<Self> {
        if x.n != m.n || x.d != m.d {
            return Err(Error::dim("Normalizer::fit", "table and mask shapes differ"));
        }
        let mut mean = vec![0.0; x.d];
        let mut std = vec![1.0; x.d];
        let mut scaled = vec![false; x.d];
        for j in 0..x.d {
            if x.column_kinds[j] != ColumnKind::Numeric {
                continue;
            }
            let obs: Vec<f64> = (0..x.n)
                .filter(|&i| m.observed(i, j) && !x.is_missing(i, j))
                .map(|i| x.get(i, j))
                .collect();
            if obs.len() < 2 {
                continue;
            }
            let mu = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (obs.len() - 1) as f64;
            let sd = var.sqrt();
            if sd > 0.0 && sd.is_finite() {
                mean[j] = mu;
                std[j] = sd;
                scaled[j] = true;
            }
        }
        Ok(Normalizer { mean, std, scaled })
    }

    pub fn apply(&self, x: &DataMatrix) -> Result<DataMatrix> {
        self.transform(x, |v, mu, sd| (v - mu) / sd)
    }

    pub fn invert(&self, x: &DataMatrix) -> Result<DataMatrix> {
        self.transform(x, |v, mu, sd| v * sd + mu)
    }

    /// Inverse transform of a single value in column `j`.
    pub fn invert_value(&self, j: usize, v: f64) -> f64 {
        if self.scaled[j] {
            v * self.std[j] + self.mean[j]
        } else {
            v
        }
    }

    /// Scale factor applied to column `j` (variance maps by its square).
    pub fn column_scale(&self, j: usize) -> f64 {
        if self.scaled[j] {
            self.std[j]
        } else {
            1.0
        }
    }

    fn transform(&self, x: &DataMatrix, f: impl Fn(f64, f64, f64) -> f64) -> Result<DataMatrix> {
        if x.d != self.mean.len() {
            return Err(Error::dim("Normalizer", "column count differs from fit"));
        }
        let values = x
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let j = k % x.d;
                if v.is_nan() || !self.scaled[j] {
                    v
                } else {
                    f(v, self.mean[j], self.std[j])
                }
            })
            .collect();
        x.with_values(values)
    }
}

/// One partition produced by [`split`].
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub x: DataMatrix,
    pub m: MaskMatrix,
    pub y: Option<LabelVector>,
    pub rows: Vec<usize>,
}

/// Shuffles rows with `seed` and cuts them into three partitions. The first
/// two sizes are `floor(f·n)`; the last partition takes the remainder.
pub fn split(
    x: &DataMatrix,
    m: &MaskMatrix,
    y: Option<&LabelVector>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[Partition; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    if x.n != m.n || y.is_some_and(|y| y.len() != x.n) {
        return Err(Error::dim("split", "row counts differ"));
    }
    let n = x.n;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n0 = ((fractions[0] * n as f64) + 1e-9).floor() as usize;
    let n1 = (((fractions[1] * n as f64) + 1e-9).floor() as usize).min(n - n0);
    let cuts = [0, n0, n0 + n1, n];
    let part = |k: usize| {
        let rows = idx[cuts[k]..cuts[k + 1]].to_vec();
        Partition {
            x: x.select_rows(&rows),
            m: m.select_rows(&rows),
            y: y.map(|y| y.select_rows(&rows)),
            rows,
        }
    };
    Ok([part(0), part(1), part(2)])
}

#[cfg(test)]
mod tests {
    use super::*;

    const NA: f64 = f64::NAN;

    #[test]
    fn mask_of_fully_observed_table() {
        let x = DataMatrix::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        assert!(compute_mask(&x).bits().iter().all(|&b| b));
    }

    #[test]
    fn mask_marks_missing_cells() {
        let x = DataMatrix::from_rows(&[vec![1., NA], vec![3., 4.]]).unwrap();
        assert_eq!(compute_mask(&x).bits(), &[true, false, true, true]);
        let row = DataMatrix::from_rows(&[vec![NA, NA, NA]]).unwrap();
        assert_eq!(compute_mask(&row).bits(), &[false, false, false]);
    }

    #[test]
    fn csv_empty_field_is_missing() {
        let (x, y) = read_csv("a,b\n1,\n2,3\n".as_bytes(), &CsvOptions::default()).unwrap();
        assert!(y.is_none());
        assert_eq!((x.n_rows(), x.n_cols()), (2, 2));
        assert!(x.is_missing(0, 1));
        assert_eq!(x.get(1, 1), 3.0);
    }

    #[test]
    fn csv_token_is_missing() {
        let opts = CsvOptions {
            missing_tokens: vec!["NA".into()],
            ..Default::default()
        };
        let (x, _) = read_csv("a\nNA\n".as_bytes(), &opts).unwrap();
        assert!(x.is_missing(0, 0));
    }

    #[test]
    fn csv_bad_number_names_cell() {
        let err = read_csv("a,b\n1,2\n3,oops\n".as_bytes(), &CsvOptions::default()).unwrap_err();
        match err {
            Error::Ingestion { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_ragged_rows_rejected() {
        assert!(matches!(
            read_csv("a,b\n1,2\n3\n".as_bytes(), &CsvOptions::default()),
            Err(Error::Ingestion { .. })
        ));
    }

    #[test]
    fn csv_label_and_categorical() {
        let opts = CsvOptions {
            label_column: Some("y".into()),
            categorical: vec!["c".into()],
            ..Default::default()
        };
        let (x, y) = read_csv("a,c,y\n1,red,0\n2,,1\n3,blue,1\n".as_bytes(), &opts).unwrap();
        assert_eq!(x.column_names(), &["a", "c=blue", "c=red"]);
        assert_eq!(x.row(0)[1..], [0.0, 1.0]);
        assert!(x.is_missing(1, 1) && x.is_missing(1, 2));
        assert_eq!(y.unwrap().y, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_column_passes_through() {
        let x = DataMatrix::from_rows(&[vec![2.], vec![2.], vec![2.]]).unwrap();
        let nz = Normalizer::fit(&x, &compute_mask(&x)).unwrap();
        assert!(!nz.scaled[0]);
        assert_eq!(nz.apply(&x).unwrap(), x);
    }

    #[test]
    fn two_point_column_uses_sample_std() {
        // mean 1, sample std sqrt(2): [0, 2] -> [-1/sqrt2, 1/sqrt2]
        let x = DataMatrix::from_rows(&[vec![0.], vec![2.], vec![NA]]).unwrap();
        let nz = Normalizer::fit(&x, &compute_mask(&x)).unwrap();
        let z = nz.apply(&x).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((z.get(0, 0) + r).abs() < 1e-15);
        assert!((z.get(1, 0) - r).abs() < 1e-15);
        assert!(z.is_missing(2, 0));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let x = DataMatrix::new(100, 1, (0..100).map(f64::from).collect()).unwrap();
        let m = compute_mask(&x);
        let a = split(&x, &m, None, [0.7, 0.15, 0.15], 3).unwrap();
        let b = split(&x, &m, None, [0.7, 0.15, 0.15], 3).unwrap();
        assert_eq!([a[0].rows.len(), a[1].rows.len(), a[2].rows.len()], [70, 15, 15]);
        assert_eq!(a, b);
        let all = split(&x, &m, None, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(all[0].rows.len(), 100);
        assert!(split(&x, &m, None, [0.5, 0.6, 0.0], 3).is_err());
    }
}
