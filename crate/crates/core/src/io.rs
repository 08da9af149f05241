//! Covariate designs, CSV ingestion, normalisation and posterior files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{AcceptanceTable, ColumnRoles, Draw, Hyperparams, PosteriorDraws, Variant};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    /// Values are codes into `levels`; `-1` marks a level unseen in training.
    Categorical { levels: Vec<String> },
}

impl ColumnKind {
    pub fn is_continuous(&self) -> bool {
        matches!(self, ColumnKind::Continuous)
    }
}

/// Row-major covariate matrix with per-column kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Design {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
    kinds: Vec<ColumnKind>,
}

impl Design {
    pub fn new(n_rows: usize, n_cols: usize, values: Vec<f64>, kinds: Vec<ColumnKind>) -> Result<Self> {
        if values.len() != n_rows * n_cols {
            return Err(Error::InvalidInput(format!(
                "{} values for a {n_rows}x{n_cols} design",
                values.len()
            )));
        }
        if kinds.len() != n_cols {
            return Err(Error::InvalidInput(format!(
                "{} column kinds for {n_cols} columns",
                kinds.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite covariate at row {}, column {}",
                pos / n_cols.max(1),
                pos % n_cols.max(1)
            )));
        }
        for (j, kind) in kinds.iter().enumerate() {
            if let ColumnKind::Categorical { levels } = kind {
                for i in 0..n_rows {
                    let c = values[i * n_cols + j];
                    if c.fract() != 0.0 || c < -1.0 || c >= levels.len() as f64 {
                        return Err(Error::InvalidInput(format!(
                            "row {i}, column {j}: {c} is not a level code"
                        )));
                    }
                }
            }
        }
        Ok(Design {
            n_rows,
            n_cols,
            values,
            kinds,
        })
    }

    /// All-continuous design.
    pub fn continuous(n_rows: usize, n_cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(n_rows, n_cols, values, vec![ColumnKind::Continuous; n_cols])
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }

    pub fn kind(&self, j: usize) -> &ColumnKind {
        &self.kinds[j]
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, j)).collect()
    }

    pub fn continuous_columns(&self) -> Vec<usize> {
        (0..self.n_cols)
            .filter(|&j| self.kinds[j].is_continuous())
            .collect()
    }

    /// `rows x cols` sub-matrix used as kernel input.
    pub fn gp_matrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| self.get(rows[a], cols[b]))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Design {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols);
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        Design {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            values,
            kinds: self.kinds.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// Column names and kinds of a training set, used to read later files with
/// the same encoding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub target: String,
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

/// A row dropped during ingestion. `line` is the 1-based line in the file,
/// with the header on line 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub line: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub target: String,
    pub design: Design,
    pub y: Vec<f64>,
    pub rejected: Vec<Rejection>,
}

impl Dataset {
    pub fn new(names: Vec<String>, target: String, design: Design, y: Vec<f64>) -> Result<Self> {
        if names.len() != design.n_cols() {
            return Err(Error::InvalidInput("column names do not match the design".into()));
        }
        if y.len() != design.n_rows() {
            return Err(Error::InvalidInput(format!(
                "{} targets for {} rows",
                y.len(),
                design.n_rows()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite target value".into()));
        }
        Ok(Dataset {
            names,
            target,
            design,
            y,
            rejected: Vec::new(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn schema(&self) -> Schema {
        Schema {
            target: self.target.clone(),
            columns: self
                .names
                .iter()
                .zip(self.design.kinds())
                .map(|(name, kind)| ColumnSpec {
                    name: name.clone(),
                    kind: kind.clone(),
                })
                .collect(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            target: self.target.clone(),
            design: self.design.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            rejected: Vec::new(),
        }
    }

    /// Drop the named feature columns.
    pub fn without_columns(&self, drop: &[String]) -> Result<Dataset> {
        for d in drop {
            if !self.names.contains(d) {
                return Err(Error::InvalidInput(format!("column '{d}' not found")));
            }
        }
        let keep: Vec<usize> = (0..self.names.len())
            .filter(|&j| !drop.contains(&self.names[j]))
            .collect();
        if keep.is_empty() {
            return Err(Error::InvalidInput("no feature columns left".into()));
        }
        let n = self.n_rows();
        let mut values = Vec::with_capacity(n * keep.len());
        for i in 0..n {
            let row = self.design.row(i);
            values.extend(keep.iter().map(|&j| row[j]));
        }
        let kinds = keep.iter().map(|&j| self.design.kind(j).clone()).collect();
        Ok(Dataset {
            names: keep.iter().map(|&j| self.names[j].clone()).collect(),
            target: self.target.clone(),
            design: Design::new(n, keep.len(), values, kinds)?,
            y: self.y.clone(),
            rejected: self.rejected.clone(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        self.write_csv_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.names.clone();
        header.push(self.target.clone());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec: Vec<String> = self
                .design
                .row(i)
                .iter()
                .zip(self.design.kinds())
                .map(|(&v, kind)| match kind {
                    ColumnKind::Continuous => format_float(v),
                    ColumnKind::Categorical { levels } => levels[v as usize].clone(),
                })
                .collect();
            rec.push(format_float(self.y[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest text that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
}

fn parse_number(cell: &str) -> Option<f64> {
    let v: f64 = cell.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| {
        Error::InvalidInput(format!("cannot open {}: {e}", path.display()))
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::Headers)
        .comment(Some(b'#'))
        .from_reader(file))
}

fn header_index(header: &csv::StringRecord) -> HashMap<&str, usize> {
    header.iter().enumerate().map(|(i, h)| (h, i)).collect()
}

/// Read a CSV with a header row. Columns listed in `categorical` are
/// dictionary-encoded in order of first appearance; every other non-target
/// column must be numeric. Rows with a missing or unparseable cell are
/// dropped and reported in [`Dataset::rejected`].
pub fn load_csv(path: &Path, target: &str, categorical: &[String]) -> Result<Dataset> {
    let mut reader = open_reader(path)?;
    let header = reader.headers()?.clone();
    let index = header_index(&header);
    let target_idx = *index
        .get(target)
        .ok_or_else(|| Error::InvalidInput(format!("target column '{target}' not found")))?;
    for c in categorical {
        if !index.contains_key(c.as_str()) {
            return Err(Error::InvalidInput(format!("categorical column '{c}' not found")));
        }
        if c == target {
            return Err(Error::InvalidInput(format!("target column '{c}' cannot be categorical")));
        }
    }
    let feature_idx: Vec<usize> = (0..header.len()).filter(|&i| i != target_idx).collect();
    let names: Vec<String> = feature_idx.iter().map(|&i| header[i].to_string()).collect();
    let is_cat: Vec<bool> = names.iter().map(|n| categorical.contains(n)).collect();
    let mut dictionaries: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    let mut lookups: Vec<HashMap<String, usize>> = vec![HashMap::new(); names.len()];

    let mut values = Vec::new();
    let mut y = Vec::new();
    let mut rejected = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            rejected.push(Rejection {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
            continue;
        }
        let Some(target_value) = parse_number(&record[target_idx]) else {
            rejected.push(Rejection {
                line,
                message: format!("column '{target}': '{}' is not numeric", &record[target_idx]),
            });
            continue;
        };
        let mut row = Vec::with_capacity(names.len());
        let mut problem = None;
        for (k, &i) in feature_idx.iter().enumerate() {
            let cell = record[i].trim();
            if is_cat[k] {
                if cell.is_empty() {
                    problem = Some(format!("column '{}': missing value", names[k]));
                    break;
                }
                // Resolved after the whole row is accepted.
                row.push(f64::NAN);
            } else {
                match parse_number(cell) {
                    Some(v) => row.push(v),
                    None => {
                        problem = Some(format!("column '{}': '{cell}' is not numeric", names[k]));
                        break;
                    }
                }
            }
        }
        if let Some(message) = problem {
            rejected.push(Rejection { line, message });
            continue;
        }
        for (k, &i) in feature_idx.iter().enumerate() {
            if is_cat[k] {
                let cell = record[i].trim();
                let code = match lookups[k].get(cell) {
                    Some(&c) => c,
                    None => {
                        let c = dictionaries[k].len();
                        dictionaries[k].push(cell.to_string());
                        lookups[k].insert(cell.to_string(), c);
                        c
                    }
                };
                row[k] = code as f64;
            }
        }
        values.extend(row);
        y.push(target_value);
    }
    if y.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no usable rows ({} rejected)",
            path.display(),
            rejected.len()
        )));
    }
    let kinds = is_cat
        .iter()
        .zip(dictionaries)
        .map(|(&cat, levels)| {
            if cat {
                ColumnKind::Categorical { levels }
            } else {
                ColumnKind::Continuous
            }
        })
        .collect();
    let design = Design::new(y.len(), names.len(), values, kinds)?;
    let mut data = Dataset::new(names, target.to_string(), design, y)?;
    data.rejected = rejected;
    Ok(data)
}

/// Covariates read against a training schema; the target is optional.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub design: Design,
    pub y: Option<Vec<f64>>,
    pub rejected: Vec<Rejection>,
}

/// Read a CSV using the column order and level dictionaries of `schema`.
/// Extra columns are ignored; unseen categorical levels get code `-1`.
pub fn load_csv_with_schema(path: &Path, schema: &Schema) -> Result<Features> {
    let mut reader = open_reader(path)?;
    let header = reader.headers()?.clone();
    let index = header_index(&header);
    let mut positions = Vec::with_capacity(schema.columns.len());
    for col in &schema.columns {
        let pos = index.get(col.name.as_str()).ok_or_else(|| {
            Error::InvalidInput(format!("column '{}' from the training schema is missing", col.name))
        })?;
        positions.push(*pos);
    }
    let target_idx = index.get(schema.target.as_str()).copied();
    let lookups: Vec<Option<HashMap<&str, usize>>> = schema
        .columns
        .iter()
        .map(|c| match &c.kind {
            ColumnKind::Categorical { levels } => Some(
                levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect(),
            ),
            ColumnKind::Continuous => None,
        })
        .collect();

    let mut values = Vec::new();
    let mut y = Vec::new();
    let mut rejected = Vec::new();
    'records: for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            rejected.push(Rejection {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
            continue;
        }
        let mut row = Vec::with_capacity(positions.len());
        for (k, &pos) in positions.iter().enumerate() {
            let cell = record[pos].trim();
            let name = &schema.columns[k].name;
            let value = match &lookups[k] {
                Some(lookup) if !cell.is_empty() => Some(lookup.get(cell).map_or(-1.0, |&c| c as f64)),
                Some(_) => None,
                None => parse_number(cell),
            };
            match value {
                Some(v) => row.push(v),
                None => {
                    rejected.push(Rejection {
                        line,
                        message: format!("column '{name}': '{cell}' is not usable"),
                    });
                    continue 'records;
                }
            }
        }
        if let Some(t) = target_idx {
            match parse_number(&record[t]) {
                Some(v) => y.push(v),
                None => {
                    rejected.push(Rejection {
                        line,
                        message: format!("column '{}': '{}' is not numeric", schema.target, &record[t]),
                    });
                    continue;
                }
            }
        }
        values.extend(row);
    }
    let n = values.len() / schema.columns.len().max(1);
    if n == 0 {
        return Err(Error::InvalidInput(format!(
            "{}: no usable rows ({} rejected)",
            path.display(),
            rejected.len()
        )));
    }
    let kinds = schema.columns.iter().map(|c| c.kind.clone()).collect();
    Ok(Features {
        design: Design::new(n, schema.columns.len(), values, kinds)?,
        y: target_idx.map(|_| y),
        rejected,
    })
}

/// Min-max map of continuous covariates onto `[0, 1]` and of the target onto
/// `[-0.5, 0.5]`, fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    /// `(min, max)` per column; `None` for categorical columns.
    pub columns: Vec<Option<(f64, f64)>>,
    pub y_min: f64,
    pub y_max: f64,
}

impl NormalizationTransform {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let design = &data.design;
        let mut columns = Vec::with_capacity(design.n_cols());
        for j in 0..design.n_cols() {
            if !design.kind(j).is_continuous() {
                columns.push(None);
                continue;
            }
            let (lo, hi) = min_max((0..design.n_rows()).map(|i| design.get(i, j)));
            if !(lo < hi) {
                return Err(Error::InvalidInput(format!(
                    "column '{}' is constant in the training data",
                    data.names[j]
                )));
            }
            columns.push(Some((lo, hi)));
        }
        let (y_min, y_max) = min_max(data.y.iter().copied());
        if !(y_min < y_max) {
            return Err(Error::InvalidInput(format!(
                "target '{}' is constant in the training data",
                data.target
            )));
        }
        Ok(NormalizationTransform { columns, y_min, y_max })
    }

    pub fn y_range(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn transform_design(&self, design: &Design) -> Result<Design> {
        if design.n_cols() != self.columns.len() {
            return Err(Error::InvalidInput(format!(
                "design has {} columns, transform expects {}",
                design.n_cols(),
                self.columns.len()
            )));
        }
        let p = design.n_cols();
        let values = design
            .values()
            .iter()
            .enumerate()
            .map(|(k, &v)| match self.columns[k % p] {
                Some((lo, hi)) => (v - lo) / (hi - lo),
                None => v,
            })
            .collect();
        Design::new(design.n_rows(), p, values, design.kinds().to_vec())
    }

    pub fn inverse_design(&self, design: &Design) -> Result<Design> {
        let p = design.n_cols();
        let values = design
            .values()
            .iter()
            .enumerate()
            .map(|(k, &v)| match self.columns[k % p] {
                Some((lo, hi)) => lo + v * (hi - lo),
                None => v,
            })
            .collect();
        Design::new(design.n_rows(), p, values, design.kinds().to_vec())
    }

    pub fn transform_y(&self, y: f64) -> f64 {
        (y - self.y_min) / self.y_range() - 0.5
    }

    pub fn inverse_y(&self, v: f64) -> f64 {
        (v + 0.5) * self.y_range() + self.y_min
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Fit the transform on `train` and return it with the normalised data.
pub fn fit_transform(train: &Dataset) -> Result<(NormalizationTransform, Dataset)> {
    let t = NormalizationTransform::fit(train)?;
    let design = t.transform_design(&train.design)?;
    let y = train.y.iter().map(|&v| t.transform_y(v)).collect();
    let mut out = Dataset::new(train.names.clone(), train.target.clone(), design, y)?;
    out.rejected = train.rejected.clone();
    Ok((t, out))
}

pub const FORMAT_NAME: &str = "gpbart-posterior";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to predict from a fitted model.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub transform: NormalizationTransform,
    pub schema: Schema,
    pub posterior: PosteriorDraws,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    seed: Option<u64>,
    config_hash: Option<String>,
    variant: Variant,
    hyperparams: Hyperparams,
    roles: ColumnRoles,
    transform: NormalizationTransform,
    schema: Schema,
    design: Design,
    tau_trace: Vec<f64>,
    acceptance: AcceptanceTable,
    n_draws: usize,
}

#[derive(Serialize, Deserialize)]
struct DrawRecord {
    index: usize,
    #[serde(flatten)]
    draw: Draw,
}

/// Write the model as JSON lines: one header record, then one record per
/// retained draw.
pub fn save_draws(model: &SavedModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_draws(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_draws<W: Write>(model: &SavedModel, w: &mut W) -> Result<()> {
    let post = &model.posterior;
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        seed: model.seed,
        config_hash: model.config_hash.clone(),
        variant: post.variant,
        hyperparams: post.hyperparams.clone(),
        roles: post.roles.clone(),
        transform: model.transform.clone(),
        schema: model.schema.clone(),
        design: post.design.clone(),
        tau_trace: post.tau_trace.clone(),
        acceptance: post.acceptance.clone(),
        n_draws: post.draws.len(),
    };
    serde_json::to_writer(&mut *w, &header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    for (index, draw) in post.draws.iter().enumerate() {
        let rec = DrawRecord {
            index,
            draw: draw.clone(),
        };
        serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_draws(path: &Path) -> Result<SavedModel> {
    let file = File::open(path).map_err(|e| {
        Error::InvalidInput(format!("cannot open posterior file {}: {e}", path.display()))
    })?;
    read_draws(BufReader::new(file))
}

pub fn read_draws<R: BufRead>(reader: R) -> Result<SavedModel> {
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty file".into()))??;
    let probe: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if probe.get("format").and_then(|v| v.as_str()) != Some(FORMAT_NAME) {
        return Err(Error::Format("not a posterior file".into()));
    }
    let version = probe.get("version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Format(format!(
            "version mismatch: file has {version:?}, expected {FORMAT_VERSION}"
        )));
    }
    let header: Header =
        serde_json::from_str(&first).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let mut draws = Vec::with_capacity(header.n_draws);
    for k in 0..header.n_draws {
        let line = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(Error::Format(format!(
                    "truncated: {} of {} draw records present",
                    k, header.n_draws
                )))
            }
        };
        let rec: DrawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("draw record {k} is corrupted: {e}")))?;
        if rec.index != k {
            return Err(Error::Format(format!(
                "draw record {k} is corrupted: carries index {}",
                rec.index
            )));
        }
        rec.draw
            .validate(header.design.n_rows(), header.roles.gp.len())
            .map_err(|e| Error::Format(format!("draw record {k} is corrupted: {e}")))?;
        draws.push(rec.draw);
    }
    if let Some(extra) = lines.next() {
        if !extra?.trim().is_empty() {
            return Err(Error::Format("trailing data after the last draw record".into()));
        }
    }
    Ok(SavedModel {
        seed: header.seed,
        config_hash: header.config_hash,
        transform: header.transform,
        schema: header.schema,
        posterior: PosteriorDraws {
            variant: header.variant,
            hyperparams: header.hyperparams,
            roles: header.roles,
            design: header.design,
            draws,
            tau_trace: header.tau_trace,
            acceptance: header.acceptance,
        },
    })
}
