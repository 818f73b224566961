//! Cohort-labelled marker tables: delimited-text input and output, and
//! per-channel quantile normalization across source samples.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Marker;

/// Cohort label: `One` is the reference condition, `Two` the one whose
/// excess density is sought.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cohort {
    One,
    Two,
}

impl Cohort {
    pub fn label(self) -> u8 {
        match self {
            Cohort::One => 1,
            Cohort::Two => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "1" => Some(Cohort::One),
            "2" => Some(Cohort::Two),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Cohort::One => Cohort::Two,
            Cohort::Two => Cohort::One,
        }
    }
}

/// N×p marker expressions, stored row-major, with a cohort label per row and
/// an optional source-sample id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerMatrix<S> {
    values: Vec<S>,
    dims: usize,
    cohort: Vec<Cohort>,
    sample: Option<Vec<u32>>,
    sample_names: Vec<String>,
    marker_names: Vec<String>,
}

impl<S: Marker> MarkerMatrix<S> {
    pub fn new(marker_names: Vec<String>, values: Vec<S>, cohort: Vec<Cohort>) -> Result<Self> {
        let dims = marker_names.len();
        if dims == 0 {
            return Err(Error::Shape(
                "at least one marker column is required".into(),
            ));
        }
        if values.len() != cohort.len() * dims {
            return Err(Error::Shape(format!(
                "{} values for {} rows of {} markers",
                values.len(),
                cohort.len(),
                dims
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonNumeric {
                row: pos / dims + 1,
                column: marker_names[pos % dims].clone(),
            });
        }
        Ok(Self {
            values,
            dims,
            cohort,
            sample: None,
            sample_names: Vec::new(),
            marker_names,
        })
    }

    /// Attaches source-sample ids; `ids[row]` indexes into `names`.
    pub fn with_samples(mut self, names: Vec<String>, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != self.rows() {
            return Err(Error::Shape(format!(
                "{} sample ids for {} rows",
                ids.len(),
                self.rows()
            )));
        }
        if ids.iter().any(|&i| i as usize >= names.len()) {
            return Err(Error::Shape("sample id out of range".into()));
        }
        self.sample = Some(ids);
        self.sample_names = names;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.cohort.len()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn value(&self, row: usize, dim: usize) -> S {
        self.values[row * self.dims + dim]
    }

    pub fn row(&self, row: usize) -> &[S] {
        &self.values[row * self.dims..(row + 1) * self.dims]
    }

    pub fn column(&self, dim: usize) -> impl Iterator<Item = S> + '_ {
        self.values.iter().skip(dim).step_by(self.dims).copied()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn cohorts(&self) -> &[Cohort] {
        &self.cohort
    }

    pub fn marker_names(&self) -> &[String] {
        &self.marker_names
    }

    pub fn sample_ids(&self) -> Option<&[u32]> {
        self.sample.as_deref()
    }

    pub fn sample_names(&self) -> &[String] {
        &self.sample_names
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.marker_names.iter().position(|m| m == name)
    }

    /// (N₁, N₂).
    pub fn cohort_sizes(&self) -> (u64, u64) {
        let n2 = self.cohort.iter().filter(|&&c| c == Cohort::Two).count() as u64;
        (self.rows() as u64 - n2, n2)
    }

    pub fn ensure_both_cohorts(&self) -> Result<()> {
        match self.cohort_sizes() {
            (0, _) => Err(Error::EmptyCohort(1)),
            (_, 0) => Err(Error::EmptyCohort(2)),
            _ => Ok(()),
        }
    }

    /// Keeps only the listed marker columns, in the given order.
    pub fn select_dims(&self, dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d >= self.dims) {
            return Err(Error::Shape(format!(
                "cannot select {dims:?} from {} markers",
                self.dims
            )));
        }
        let mut values = Vec::with_capacity(self.rows() * dims.len());
        for r in 0..self.rows() {
            let row = self.row(r);
            values.extend(dims.iter().map(|&d| row[d]));
        }
        Ok(Self {
            values,
            dims: dims.len(),
            cohort: self.cohort.clone(),
            sample: self.sample.clone(),
            sample_names: self.sample_names.clone(),
            marker_names: dims.iter().map(|&d| self.marker_names[d].clone()).collect(),
        })
    }

    /// Swaps cohort labels 1 ↔ 2.
    pub fn flip_cohorts(&self) -> Self {
        let mut out = self.clone();
        out.cohort.iter_mut().for_each(|c| *c = c.flipped());
        out
    }
}

/// Column mapping for delimited input.
#[derive(Clone, Debug)]
pub struct Schema {
    pub delimiter: u8,
    /// Column holding labels "1"/"2". Ignored in two-file mode.
    pub cohort_column: Option<String>,
    pub sample_column: Option<String>,
    /// Marker columns to read; `None` takes every other column.
    pub markers: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            delimiter: b',',
            cohort_column: Some("cohort".into()),
            sample_column: None,
            markers: None,
        }
    }
}

impl Schema {
    pub fn tsv() -> Self {
        Self {
            delimiter: b'\t',
            ..Self::default()
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a single table whose cohort column labels every row.
pub fn read_matrix<S: Marker>(path: impl AsRef<Path>, schema: &Schema) -> Result<MarkerMatrix<S>> {
    let m = read_from(open(path.as_ref())?, schema, None)?;
    m.ensure_both_cohorts()?;
    Ok(m)
}

/// Two-file mode: every row of `first` is cohort 1, every row of `second`
/// cohort 2.
pub fn read_matrix_pair<S: Marker>(
    first: impl AsRef<Path>,
    second: impl AsRef<Path>,
    schema: &Schema,
) -> Result<MarkerMatrix<S>> {
    let a = read_from::<S, _>(open(first.as_ref())?, schema, Some(Cohort::One))?;
    let b = read_from::<S, _>(open(second.as_ref())?, schema, Some(Cohort::Two))?;
    let merged = concat(a, b)?;
    merged.ensure_both_cohorts()?;
    Ok(merged)
}

fn concat<S: Marker>(a: MarkerMatrix<S>, b: MarkerMatrix<S>) -> Result<MarkerMatrix<S>> {
    if a.marker_names != b.marker_names {
        return Err(Error::Shape(format!(
            "marker columns differ: {:?} vs {:?}",
            a.marker_names, b.marker_names
        )));
    }
    let sample = match (&a.sample, &b.sample) {
        (Some(sa), Some(sb)) => {
            let mut names = a.sample_names.clone();
            let mut lookup: HashMap<String, u32> = names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i as u32))
                .collect();
            let mut ids = sa.clone();
            for &id in sb {
                let name = &b.sample_names[id as usize];
                let next = names.len() as u32;
                let mapped = *lookup.entry(name.clone()).or_insert_with(|| {
                    names.push(name.clone());
                    next
                });
                ids.push(mapped);
            }
            Some((names, ids))
        }
        (None, None) => None,
        _ => {
            return Err(Error::Shape(
                "sample column present in only one file".into(),
            ))
        }
    };
    let mut values = a.values;
    values.extend(b.values);
    let mut cohort = a.cohort;
    cohort.extend(b.cohort);
    let out = MarkerMatrix::new(a.marker_names, values, cohort)?;
    match sample {
        Some((names, ids)) => out.with_samples(names, ids),
        None => Ok(out),
    }
}

/// Parses delimited text with a header row. With `fixed` set every row gets
/// that cohort and the cohort column (if any) is ignored.
pub fn read_from<S: Marker, R: Read>(
    reader: R,
    schema: &Schema,
    fixed: Option<Cohort>,
) -> Result<MarkerMatrix<S>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };

    let cohort_col = match (fixed, &schema.cohort_column) {
        (Some(_), Some(name)) => header.iter().position(|h| h == name),
        (Some(_), None) => None,
        (None, Some(name)) => Some(find(name)?),
        (None, None) => return Err(Error::MissingColumn("cohort".into())),
    };
    let sample_col = schema.sample_column.as_deref().map(find).transpose()?;
    let marker_cols: Vec<usize> = match &schema.markers {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|&i| Some(i) != cohort_col && Some(i) != sample_col)
            .collect(),
    };
    if marker_cols.is_empty() {
        return Err(Error::Shape("no marker columns".into()));
    }
    let marker_names: Vec<String> = marker_cols.iter().map(|&i| header[i].clone()).collect();

    let mut values = Vec::new();
    let mut cohort = Vec::new();
    let mut sample_names: Vec<String> = Vec::new();
    let mut sample_lookup: HashMap<String, u32> = HashMap::new();
    let mut sample_ids = Vec::new();

    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        for &c in &marker_cols {
            let cell = record.get(c).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::MissingValue {
                    row,
                    column: header[c].clone(),
                });
            }
            match cell.parse::<S>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(Error::NonNumeric {
                        row,
                        column: header[c].clone(),
                    })
                }
            }
        }
        let label = match (fixed, cohort_col) {
            (Some(c), _) => c,
            (None, Some(col)) => {
                let raw = record.get(col).unwrap_or("");
                Cohort::parse(raw).ok_or_else(|| Error::UnknownCohort {
                    row,
                    value: raw.to_owned(),
                })?
            }
            (None, None) => unreachable!("cohort column resolved above"),
        };
        cohort.push(label);
        if let Some(col) = sample_col {
            let name = record.get(col).unwrap_or("");
            if name.is_empty() {
                return Err(Error::MissingValue {
                    row,
                    column: header[col].clone(),
                });
            }
            let next = sample_names.len() as u32;
            let id = *sample_lookup.entry(name.to_owned()).or_insert_with(|| {
                sample_names.push(name.to_owned());
                next
            });
            sample_ids.push(id);
        }
    }

    if let Some(c) = fixed {
        if cohort.is_empty() {
            return Err(Error::EmptyCohort(c.label()));
        }
    }

    let m = MarkerMatrix::new(marker_names, values, cohort)?;
    if sample_col.is_some() {
        m.with_samples(sample_names, sample_ids)
    } else {
        Ok(m)
    }
}

/// Writes the matrix in the format [`read_from`] accepts: marker columns,
/// then `cohort`, then `sample` when present. Values use the shortest
/// representation that parses back to the same float.
pub fn write_matrix<S: Marker, W: Write>(
    writer: W,
    matrix: &MarkerMatrix<S>,
    delimiter: u8,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    let mut header: Vec<&str> = matrix.marker_names.iter().map(String::as_str).collect();
    header.push("cohort");
    if matrix.sample.is_some() {
        header.push("sample");
    }
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for r in 0..matrix.rows() {
        record.clear();
        record.extend(matrix.row(r).iter().map(|v| v.to_string()));
        record.push(matrix.cohort[r].label().to_string());
        if let Some(ids) = &matrix.sample {
            record.push(matrix.sample_names[ids[r] as usize].clone());
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

/// A (sample, channel) pair left unnormalized because it held one value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstantChannel {
    pub sample: String,
    pub marker: String,
}

#[derive(Clone, Debug)]
pub struct Normalized<S> {
    pub matrix: MarkerMatrix<S>,
    pub constant: Vec<ConstantChannel>,
}

/// Per-channel quantile normalization across source samples.
///
/// The reference distribution is the mean of the samples' quantile
/// functions, each evaluated on a common grid of `L = max nₛ` points with
/// linear interpolation at fractional ranks. Each value is then replaced by
/// the reference at its own fractional rank; a run of tied values receives
/// the mean of the reference over its rank span. Constant (sample, channel)
/// pairs are passed through and reported.
pub fn quantile_normalize<S: Marker>(matrix: &MarkerMatrix<S>) -> Result<Normalized<S>> {
    let ids = matrix.sample_ids().ok_or(Error::MissingSampleId)?;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); matrix.sample_names.len()];
    for (row, &id) in ids.iter().enumerate() {
        groups[id as usize].push(row);
    }
    groups.retain(|g| !g.is_empty());

    let per_channel: Vec<ChannelResult> = (0..matrix.dims())
        .into_par_iter()
        .map(|dim| normalize_channel(matrix, dim, &groups))
        .collect();

    let mut out = matrix.clone();
    let mut constant = Vec::new();
    for (dim, (replacements, flat)) in per_channel.into_iter().enumerate() {
        for (row, v) in replacements {
            out.values[row * out.dims + dim] = S::from_f64(v).expect("finite");
        }
        for g in flat {
            let sample = ids[groups[g][0]] as usize;
            log::warn!(
                "sample {} is constant on {}; left unnormalized",
                matrix.sample_names[sample],
                matrix.marker_names[dim]
            );
            constant.push(ConstantChannel {
                sample: matrix.sample_names[sample].clone(),
                marker: matrix.marker_names[dim].clone(),
            });
        }
    }
    Ok(Normalized {
        matrix: out,
        constant,
    })
}

/// Linear interpolation of `sorted` at position `num / den`, computed with
/// integer index arithmetic so that whole positions are read exactly.
fn interpolate(sorted: &[f64], num: usize, den: usize) -> f64 {
    let idx = num / den;
    let rem = num % den;
    if rem == 0 || idx + 1 >= sorted.len() {
        return sorted[idx.min(sorted.len() - 1)];
    }
    let t = rem as f64 / den as f64;
    sorted[idx] + t * (sorted[idx + 1] - sorted[idx])
}

/// Rewritten (row, value) pairs and the constant sample groups of one channel.
type ChannelResult = (Vec<(usize, f64)>, Vec<usize>);

fn normalize_channel<S: Marker>(
    matrix: &MarkerMatrix<S>,
    dim: usize,
    groups: &[Vec<usize>],
) -> ChannelResult {
    // (rows sorted by value, sorted values) per sample
    let sorted: Vec<(Vec<usize>, Vec<f64>)> = groups
        .iter()
        .map(|rows| {
            let mut rows = rows.clone();
            rows.sort_by(|&a, &b| {
                matrix
                    .value(a, dim)
                    .partial_cmp(&matrix.value(b, dim))
                    .expect("finite")
                    .then(a.cmp(&b))
            });
            let vals = rows
                .iter()
                .map(|&r| matrix.value(r, dim).to_f64().expect("finite"))
                .collect();
            (rows, vals)
        })
        .collect();

    let (active, flat): (Vec<usize>, Vec<usize>) =
        (0..groups.len()).partition(|&g| sorted[g].1.first() != sorted[g].1.last());
    if active.is_empty() {
        return (Vec::new(), flat);
    }

    let grid = active.iter().map(|&g| sorted[g].1.len()).max().unwrap_or(1);
    let reference: Vec<f64> = if grid == 1 {
        vec![active.iter().map(|&g| sorted[g].1[0]).sum::<f64>() / active.len() as f64]
    } else {
        (0..grid)
            .map(|j| {
                let total: f64 = active
                    .iter()
                    .map(|&g| {
                        let vals = &sorted[g].1;
                        interpolate(vals, j * (vals.len() - 1), grid - 1)
                    })
                    .sum();
                total / active.len() as f64
            })
            .collect()
    };

    let mut replacements = Vec::new();
    for &g in &active {
        let (rows, vals) = &sorted[g];
        let n = vals.len();
        let at_rank = |r: usize| {
            if n == 1 {
                reference[0]
            } else {
                interpolate(&reference, r * (grid - 1), n - 1)
            }
        };
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && vals[end] == vals[start] {
                end += 1;
            }
            let v = if end - start == 1 {
                at_rank(start)
            } else {
                (start..end).map(at_rank).sum::<f64>() / (end - start) as f64
            };
            replacements.extend(rows[start..end].iter().map(|&row| (row, v)));
            start = end;
        }
    }
    (replacements, flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<MarkerMatrix<f64>> {
        read_from(text.as_bytes(), &Schema::default(), None)
    }

    #[test]
    fn reads_four_rows() {
        let m = parse("a,b,cohort\n1,2,1\n3,4,1\n5,6,2\n7,8,2\n").unwrap();
        assert_eq!(m.rows(), 4);
        assert_eq!(m.dims(), 2);
        assert_eq!(m.cohort_sizes(), (2, 2));
        assert_eq!(m.row(2), &[5.0, 6.0]);
        assert_eq!(m.marker_names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn nan_cell_is_non_numeric() {
        let err = parse("a,b,cohort\n1,2,1\n3,NaN,2\n").unwrap_err();
        assert_eq!(err.to_string(), "non-numeric value at row 2, column b");
        let err = parse("a,cohort\nx,1\n").unwrap_err();
        assert!(matches!(err, Error::NonNumeric { row: 1, .. }));
    }

    #[test]
    fn rejects_bad_cohort_and_missing_cells() {
        assert!(matches!(
            parse("a,cohort\n1,3\n").unwrap_err(),
            Error::UnknownCohort { row: 1, .. }
        ));
        assert!(matches!(
            parse("a,b,cohort\n1,,1\n").unwrap_err(),
            Error::MissingValue { row: 1, .. }
        ));
    }

    #[test]
    fn empty_cohort_is_an_error_for_analysis() {
        let m = parse("a,cohort\n1,1\n2,1\n").unwrap();
        assert!(matches!(
            m.ensure_both_cohorts(),
            Err(Error::EmptyCohort(2))
        ));
    }

    #[test]
    fn two_file_mode() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "x\n1\n2\n3\n").unwrap();
        std::fs::write(&b, "x\n1\n2\n3\n4\n5\n").unwrap();
        let m: MarkerMatrix<f64> = read_matrix_pair(&a, &b, &Schema::default()).unwrap();
        assert_eq!(m.cohort_sizes(), (3, 5));
    }

    #[test]
    fn missing_file() {
        let err = read_matrix::<f64>("/nonexistent/x.csv", &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn selects_and_flips() {
        let m = parse("a,b,c,cohort\n1,2,3,1\n4,5,6,2\n").unwrap();
        let s = m.select_dims(&[2, 0]).unwrap();
        assert_eq!(s.row(1), &[6.0, 4.0]);
        assert_eq!(s.marker_names(), &["c".to_string(), "a".to_string()]);
        assert_eq!(m.flip_cohorts().cohorts(), &[Cohort::Two, Cohort::One]);
    }

    fn with_samples(cols: &[(&str, &[f64])]) -> MarkerMatrix<f64> {
        let mut values = Vec::new();
        let mut ids = Vec::new();
        let mut names = Vec::new();
        for (i, (name, vals)) in cols.iter().enumerate() {
            names.push(name.to_string());
            values.extend_from_slice(vals);
            ids.extend(std::iter::repeat_n(i as u32, vals.len()));
        }
        let n = values.len();
        MarkerMatrix::new(vec!["m".into()], values, vec![Cohort::One; n])
            .unwrap()
            .with_samples(names, ids)
            .unwrap()
    }

    #[test]
    fn quantile_normalize_hand_example() {
        let m = with_samples(&[("s1", &[1.0, 2.0, 3.0]), ("s2", &[10.0, 20.0, 30.0])]);
        let out = quantile_normalize(&m).unwrap().matrix;
        assert_eq!(out.values(), &[5.5, 11.0, 16.5, 5.5, 11.0, 16.5]);
    }

    #[test]
    fn quantile_normalize_identity_cases() {
        let m = with_samples(&[("s1", &[3.0, 1.0, 2.0]), ("s2", &[2.0, 3.0, 1.0])]);
        assert_eq!(quantile_normalize(&m).unwrap().matrix, m);
        let single = with_samples(&[("only", &[0.3, -1.0, 7.5, 2.0])]);
        assert_eq!(quantile_normalize(&single).unwrap().matrix, single);
    }

    #[test]
    fn quantile_normalize_unequal_sizes_interpolates() {
        // reference on a 3-point grid: s2 quantiles at 0, 1/2, 1 are 0, 5, 10
        let m = with_samples(&[("s1", &[1.0, 2.0, 3.0]), ("s2", &[0.0, 10.0])]);
        let out = quantile_normalize(&m).unwrap().matrix;
        assert_eq!(out.values(), &[0.5, 3.5, 6.5, 0.5, 6.5]);
    }

    #[test]
    fn ties_share_the_span_mean() {
        let m = with_samples(&[("s1", &[1.0, 1.0, 3.0]), ("s2", &[10.0, 20.0, 30.0])]);
        let out = quantile_normalize(&m).unwrap().matrix;
        // reference = 5.5, 10.5, 16.5; ranks 0 and 1 tie in s1
        assert_eq!(out.values()[..3], [8.0, 8.0, 16.5]);
    }

    #[test]
    fn constant_sample_passes_through_with_warning() {
        let m = with_samples(&[
            ("s1", &[4.0, 4.0]),
            ("s2", &[1.0, 2.0]),
            ("s3", &[3.0, 5.0]),
        ]);
        let n = quantile_normalize(&m).unwrap();
        assert_eq!(&n.matrix.values()[..2], &[4.0, 4.0]);
        assert_eq!(&n.matrix.values()[2..], &[2.0, 3.5, 2.0, 3.5]);
        assert_eq!(
            n.constant,
            vec![ConstantChannel {
                sample: "s1".into(),
                marker: "m".into()
            }]
        );
    }

    #[test]
    fn normalization_requires_samples() {
        let m = parse("a,cohort\n1,1\n2,2\n").unwrap();
        assert!(matches!(
            quantile_normalize(&m),
            Err(Error::MissingSampleId)
        ));
    }
}
