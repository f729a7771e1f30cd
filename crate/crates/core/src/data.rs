//! Longitudinal datasets: CSV ingestion, preprocessing and the
//! train/validation/test split.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    /// Level labels of a categorical column; cell values are indices into this.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
}

impl Column {
    pub fn continuous(name: impl Into<String>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Continuous,
            levels: Vec::new(),
        }
    }
}

/// Observations grouped by individual.
///
/// Individuals are dense zero-based indices into `individual_labels`; subsets
/// produced by [`split`] keep the full label universe so that every split
/// indexes the same embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub individual: Vec<usize>,
    pub time: Vec<f64>,
    /// `N x P` covariates.
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub columns: Vec<Column>,
    pub individual_labels: Vec<String>,
}

impl LongitudinalDataset {
    /// All-continuous dataset; individual labels are `1..=I`.
    pub fn new(individual: Vec<usize>, time: Vec<f64>, x: DenseMatrix, y: Vec<f64>) -> Result<Self> {
        let n_ind = individual.iter().max().map_or(0, |m| m + 1);
        let columns = (0..x.cols()).map(|j| Column::continuous(format!("x{}", j + 1))).collect();
        let labels = (1..=n_ind).map(|i| i.to_string()).collect();
        let ds = LongitudinalDataset {
            individual,
            time,
            x,
            y,
            columns,
            individual_labels: labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.individual.len() != n || self.time.len() != n || self.x.rows() != n {
            return Err(Error::shape(
                "LongitudinalDataset",
                format!("{n} rows everywhere"),
                format!("ids {}, times {}, covariates {}", self.individual.len(), self.time.len(), self.x.rows()),
            ));
        }
        if self.columns.len() != self.x.cols() {
            return Err(Error::shape("LongitudinalDataset columns", self.x.cols(), self.columns.len()));
        }
        if let Some(&bad) = self.individual.iter().find(|&&i| i >= self.individual_labels.len()) {
            return Err(Error::UnknownEntity {
                id: bad + 1,
                max: self.individual_labels.len(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Size of the individual universe (I).
    pub fn n_individuals(&self) -> usize {
        self.individual_labels.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.cols()
    }

    /// Row count per individual (N_i).
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_individuals()];
        for &i in &self.individual {
            c[i] += 1;
        }
        c
    }

    /// Row indices of each individual, in dataset order.
    pub fn rows_by_individual(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_individuals()];
        for (r, &i) in self.individual.iter().enumerate() {
            out[i].push(r);
        }
        out
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        LongitudinalDataset {
            individual: rows.iter().map(|&r| self.individual[r]).collect(),
            time: rows.iter().map(|&r| self.time[r]).collect(),
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            columns: self.columns.clone(),
            individual_labels: self.individual_labels.clone(),
        }
    }

    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.len() {
            return Err(Error::shape("with_outcome", self.len(), y.len()));
        }
        Ok(LongitudinalDataset { y, ..self.clone() })
    }
}

/// Names the bookkeeping columns of a CSV file and the kinds of covariates.
/// Every other column is a covariate, continuous unless listed as categorical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub id_column: String,
    pub time_column: String,
    pub outcome_column: String,
    pub categorical: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            id_column: "individual_id".into(),
            time_column: "time".into(),
            outcome_column: "outcome".into(),
            categorical: Vec::new(),
        }
    }
}

impl Schema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            row: e.line(),
            column: "schema".into(),
            message: e.to_string(),
        })
    }
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Parses a dataset. Lines starting with `#` are comments. Individual ids are
/// re-indexed densely in order of first appearance.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(e, 0))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = find(&schema.id_column)?;
    let time_col = find(&schema.time_column)?;
    let y_col = find(&schema.outcome_column)?;
    for cat in &schema.categorical {
        find(cat)?;
    }
    let cov_cols: Vec<usize> = (0..header.len()).filter(|c| ![id_col, time_col, y_col].contains(c)).collect();
    let mut columns: Vec<Column> = cov_cols
        .iter()
        .map(|&c| Column {
            name: header[c].clone(),
            kind: if schema.categorical.contains(&header[c]) {
                ColumnKind::Categorical
            } else {
                ColumnKind::Continuous
            },
            levels: Vec::new(),
        })
        .collect();

    let mut id_index: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut individual = Vec::new();
    let mut time = Vec::new();
    let mut y = Vec::new();
    let mut x = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        // 1-based data row, not counting the header
        let row = r + 1;
        let rec = rec.map_err(|e| csv_error(e, row))?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let raw_id = rec[id_col].to_string();
        let next = labels.len();
        let idx = *id_index.entry(raw_id.clone()).or_insert_with(|| {
            labels.push(raw_id);
            next
        });
        individual.push(idx);
        time.push(parse_cell(&rec[time_col], row, &header[time_col])?);
        y.push(parse_cell(&rec[y_col], row, &header[y_col])?);
        for (k, &c) in cov_cols.iter().enumerate() {
            let v = match columns[k].kind {
                ColumnKind::Continuous => parse_cell(&rec[c], row, &header[c])?,
                ColumnKind::Categorical => {
                    let levels = &mut columns[k].levels;
                    let pos = levels.iter().position(|l| l == &rec[c]).unwrap_or_else(|| {
                        levels.push(rec[c].to_string());
                        levels.len() - 1
                    });
                    pos as f64
                }
            };
            x.push(v);
        }
    }
    let n = y.len();
    let ds = LongitudinalDataset {
        individual,
        time,
        x: DenseMatrix::from_vec(n, cov_cols.len(), x)?,
        y,
        columns,
        individual_labels: labels,
    };
    ds.validate()?;
    Ok(ds)
}

fn parse_cell(s: &str, row: usize, column: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(Error::Parse {
            row,
            column: column.into(),
            message: format!("non-finite value '{s}'"),
        }),
        Err(_) => Err(Error::Parse {
            row,
            column: column.into(),
            message: format!("'{s}' is not a number"),
        }),
    }
}

fn csv_error(e: csv::Error, row: usize) -> Error {
    Error::Parse {
        row,
        column: "*".into(),
        message: e.to_string(),
    }
}

pub fn save_csv(data: &LongitudinalDataset, path: &Path, comment: Option<&str>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(data, std::io::BufWriter::new(file), comment)
}

/// Writes the dataset with an optional leading `# comment` line. Floats use
/// the shortest representation that parses back to the identical value.
pub fn write_csv<W: Write>(data: &LongitudinalDataset, mut out: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let schema = Schema::default();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![schema.id_column, schema.time_column, schema.outcome_column];
    header.extend(data.columns.iter().map(|c| c.name.clone()));
    w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
    for r in 0..data.len() {
        let mut rec = vec![
            data.individual_labels[data.individual[r]].clone(),
            data.time[r].to_string(),
            data.y[r].to_string(),
        ];
        for (c, col) in data.columns.iter().enumerate() {
            let v = data.x[(r, c)];
            rec.push(match col.kind {
                ColumnKind::Continuous => v.to_string(),
                ColumnKind::Categorical => col.levels[v as usize].clone(),
            });
        }
        w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnPlan {
    Continuous { name: String, mean: f64, std: f64 },
    Categorical { name: String, levels: Vec<String> },
    /// Zero variance on the training split.
    Dropped { name: String },
}

/// Statistics fitted on a training split and reusable on any other split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub columns: Vec<ColumnPlan>,
    pub outcome_mean: f64,
}

impl PreprocessSpec {
    pub fn fit(train: &LongitudinalDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidConfig("cannot fit preprocessing on an empty split".into()));
        }
        let n = train.len() as f64;
        let columns = train
            .columns
            .iter()
            .enumerate()
            .map(|(c, col)| match col.kind {
                ColumnKind::Continuous => {
                    let vals = train.x.col(c);
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let std = var.sqrt();
                    if std > 1e-12 * mean.abs().max(1.0) {
                        ColumnPlan::Continuous {
                            name: col.name.clone(),
                            mean,
                            std,
                        }
                    } else {
                        ColumnPlan::Dropped { name: col.name.clone() }
                    }
                }
                ColumnKind::Categorical => ColumnPlan::Categorical {
                    name: col.name.clone(),
                    levels: col.levels.clone(),
                },
            })
            .collect();
        let outcome_mean = train.y.iter().sum::<f64>() / n;
        Ok(PreprocessSpec { columns, outcome_mean })
    }

    pub fn dropped(&self) -> Vec<&str> {
        self.columns
            .iter()
            .filter_map(|c| match c {
                ColumnPlan::Dropped { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn output_width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                ColumnPlan::Continuous { .. } => 1,
                ColumnPlan::Categorical { levels, .. } => levels.len(),
                ColumnPlan::Dropped { .. } => 0,
            })
            .sum()
    }

    /// Scales continuous columns, one-hot expands categoricals (unseen levels
    /// encode as all zeros) and centers the outcome.
    pub fn apply(&self, data: &LongitudinalDataset) -> Result<LongitudinalDataset> {
        let mut source = Vec::with_capacity(self.columns.len());
        for plan in &self.columns {
            let name = match plan {
                ColumnPlan::Continuous { name, .. } | ColumnPlan::Categorical { name, .. } | ColumnPlan::Dropped { name } => name,
            };
            let idx = data
                .columns
                .iter()
                .position(|c| &c.name == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))?;
            source.push(idx);
        }
        let mut out_cols = Vec::new();
        for plan in &self.columns {
            match plan {
                ColumnPlan::Continuous { name, .. } => out_cols.push(Column::continuous(name.clone())),
                ColumnPlan::Categorical { name, levels } => {
                    out_cols.extend(levels.iter().map(|l| Column::continuous(format!("{name}={l}"))))
                }
                ColumnPlan::Dropped { .. } => {}
            }
        }
        let width = out_cols.len();
        let mut x = DenseMatrix::zeros(data.len(), width);
        for r in 0..data.len() {
            let mut k = 0;
            for (plan, &c) in self.columns.iter().zip(&source) {
                let v = data.x[(r, c)];
                match plan {
                    ColumnPlan::Continuous { mean, std, .. } => {
                        x[(r, k)] = (v - mean) / std;
                        k += 1;
                    }
                    ColumnPlan::Categorical { levels, .. } => {
                        let label = data.columns[c].levels.get(v as usize);
                        if let Some(pos) = label.and_then(|l| levels.iter().position(|m| m == l)) {
                            x[(r, k + pos)] = 1.0;
                        }
                        k += levels.len();
                    }
                    ColumnPlan::Dropped { .. } => {}
                }
            }
        }
        Ok(LongitudinalDataset {
            individual: data.individual.clone(),
            time: data.time.clone(),
            x,
            y: data.y.iter().map(|v| v - self.outcome_mean).collect(),
            columns: out_cols,
            individual_labels: data.individual_labels.clone(),
        })
    }
}

/// Fits statistics on `train` and applies them to it.
pub fn preprocess(train: &LongitudinalDataset) -> Result<(LongitudinalDataset, PreprocessSpec)> {
    let spec = PreprocessSpec::fit(train)?;
    Ok((spec.apply(train)?, spec))
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.5, 0.2, 0.3];

/// Row indices of the train, validation and test parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Observation-level split within each individual. Individuals with fewer
/// than three rows go entirely to training.
pub fn split_indices(data: &LongitudinalDataset, fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(fractions));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for mut rows in data.rows_by_individual() {
        if rows.len() < 3 {
            out.train.extend(rows);
            continue;
        }
        rows.shuffle(&mut rng);
        let [a, b, _] = apportion(rows.len(), fractions);
        out.train.extend_from_slice(&rows[..a]);
        out.valid.extend_from_slice(&rows[a..a + b]);
        out.test.extend_from_slice(&rows[a + b..]);
    }
    for part in [&mut out.train, &mut out.valid, &mut out.test] {
        part.sort_unstable();
    }
    Ok(out)
}

pub fn split(
    data: &LongitudinalDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(LongitudinalDataset, LongitudinalDataset, LongitudinalDataset)> {
    let idx = split_indices(data, fractions, seed)?;
    Ok((data.subset(&idx.train), data.subset(&idx.valid), data.subset(&idx.test)))
}

/// Largest-remainder rounding of `n * fractions`.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        counts[k] = exact[k].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}
