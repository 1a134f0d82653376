//! Finitely supported probability measures.
//!
//! A [`DiscreteMeasure`] is a list of distinct atoms in `R^d` carrying strictly
//! positive weights that sum to one. Everything downstream (the solver, the
//! kernel operators, the inference layer) assumes these invariants, so they
//! are enforced once, at construction.
//!
//! Measures are read from two plain formats:
//!
//! * CSV, no header, one atom per row: `x_1,...,x_d,weight`;
//! * JSON, `{"points": [[x_1, ..., x_d], ...], "weights": [...]}`.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinates closer than this (componentwise) are the same atom.
pub const MERGE_TOLERANCE: f64 = 1e-12;
/// Weight sums within this distance of one are renormalized, anything else is rejected.
pub const SUM_TOLERANCE: f64 = 1e-9;
/// Smallest admissible atom weight after merging.
pub const MIN_WEIGHT: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    /// Row-major `len * dim` coordinates.
    points: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureFormat {
    Csv,
    Json,
}

impl MeasureFormat {
    /// Guess the format from a file extension; anything but `.json` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => MeasureFormat::Json,
            _ => MeasureFormat::Csv,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MeasureDoc {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Builds a validated measure. Duplicate atoms are merged by summing their
    /// weights; a weight sum within [`SUM_TOLERANCE`] of one is renormalized.
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidMeasure("measure has no atoms".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::InvalidMeasure("points have dimension 0".into()));
        }
        let mut flat = Vec::with_capacity(points.len() * dim);
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "point {i} has dimension {} (expected {dim})",
                    p.len()
                )));
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidMeasure(format!("point {i} is not finite")));
            }
            flat.extend_from_slice(p);
        }
        Self::from_flat(flat, dim, weights)
    }

    /// Same as [`DiscreteMeasure::new`] with row-major coordinates.
    pub fn from_flat(points: Vec<f64>, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() != dim * weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates do not form {} points of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("measure has no atoms".into()));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidMeasure(format!(
                    "weight {i} is not strictly positive ({w})"
                )));
            }
        }

        let mut merged_points: Vec<f64> = Vec::with_capacity(points.len());
        let mut merged_weights: Vec<f64> = Vec::with_capacity(weights.len());
        for (atom, &w) in points.chunks_exact(dim).zip(&weights) {
            let existing = merged_points
                .chunks_exact(dim)
                .position(|q| same_point(q, atom));
            match existing {
                Some(k) => merged_weights[k] += w,
                None => {
                    merged_points.extend_from_slice(atom);
                    merged_weights.push(w);
                }
            }
        }

        let total: f64 = merged_weights.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total} (off by more than {SUM_TOLERANCE:e})"
            )));
        }
        for w in &mut merged_weights {
            *w /= total;
        }
        if let Some(w) = merged_weights.iter().find(|&&w| w < MIN_WEIGHT) {
            return Err(Error::InvalidMeasure(format!("atom weight {w:e} below {MIN_WEIGHT:e}")));
        }

        Ok(DiscreteMeasure {
            points: merged_points,
            weights: merged_weights,
            dim,
        })
    }

    /// Point mass at `point`.
    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        Self::new(vec![point], vec![1.0])
    }

    /// Empirical measure of a list of draws, each with mass `1/n`.
    pub fn from_samples(samples: Vec<Vec<f64>>) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::EmptySample);
        }
        Self::new(samples, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    /// Weighted mean of a function given by its values on the atoms.
    pub fn mean(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Weighted variance of a function given by its values on the atoms.
    pub fn variance(&self, values: &[f64]) -> f64 {
        let mean = self.mean(values);
        let var: f64 = self
            .weights
            .iter()
            .zip(values)
            .map(|(w, v)| w * (v - mean) * (v - mean))
            .sum();
        var.max(0.0)
    }

    /// Same atoms (in the same order) and same weights, both up to `tol`.
    pub fn approx_eq(&self, other: &DiscreteMeasure, tol: f64) -> bool {
        self.dim == other.dim
            && self.len() == other.len()
            && self
                .points
                .iter()
                .zip(&other.points)
                .all(|(a, b)| (a - b).abs() <= tol)
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    /// Index of the atom at `point`, if any.
    pub fn find_atom(&self, point: &[f64]) -> Option<usize> {
        self.points().position(|q| same_point(q, point))
    }

    /// Squared diameter of the union of the supports of `self` and `other`.
    pub fn max_squared_distance(&self, other: &DiscreteMeasure) -> f64 {
        let mut best = 0.0f64;
        for x in self.points() {
            for y in other.points() {
                best = best.max(squared_distance(x, y));
            }
        }
        best
    }

    pub fn load(path: &Path, format: MeasureFormat) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        match format {
            MeasureFormat::Csv => Self::parse_csv(&text, path),
            MeasureFormat::Json => Self::parse_json(&text, path),
        }
    }

    pub fn save(&self, path: &Path, format: MeasureFormat) -> Result<()> {
        let text = match format {
            MeasureFormat::Csv => self.to_csv_string(),
            MeasureFormat::Json => self.to_json_string()?,
        };
        fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let rows = parse_csv_rows(text, origin)?;
        let mut points = Vec::with_capacity(rows.len());
        let mut weights = Vec::with_capacity(rows.len());
        for (line, mut row) in rows {
            if row.len() < 2 {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line,
                    message: "expected at least one coordinate and a weight".into(),
                });
            }
            let w = row.pop().unwrap_or_default();
            if let Some(first) = points.first() {
                let first: &Vec<f64> = first;
                if first.len() != row.len() {
                    return Err(Error::Parse {
                        path: origin.to_path_buf(),
                        line,
                        message: format!(
                            "row has {} coordinates, previous rows have {}",
                            row.len(),
                            first.len()
                        ),
                    });
                }
            }
            points.push(row);
            weights.push(w);
        }
        Self::new(points, weights)
    }

    pub fn parse_json(text: &str, origin: &Path) -> Result<Self> {
        let doc: MeasureDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::new(doc.points, doc.weights)
    }

    /// CSV with 17 significant digits per value.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for (p, w) in self.points().zip(&self.weights) {
            for c in p {
                out.push_str(&format!("{c:.16e},"));
            }
            out.push_str(&format!("{w:.16e}\n"));
        }
        out
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = MeasureDoc {
            points: self.points().map(<[f64]>::to_vec).collect(),
            weights: self.weights.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

impl Serialize for DiscreteMeasure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MeasureDoc {
            points: self.points().map(<[f64]>::to_vec).collect(),
            weights: self.weights.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DiscreteMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = MeasureDoc::deserialize(d)?;
        DiscreteMeasure::new(doc.points, doc.weights).map_err(serde::de::Error::custom)
    }
}

/// Reads a CSV of sample points, one draw per row, no weight column.
pub fn load_sample_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let rows = parse_csv_rows(&text, path)?;
    if rows.is_empty() {
        return Err(Error::EmptySample);
    }
    let dim = rows[0].1.len();
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        if row.len() != dim {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("row has {} coordinates, expected {dim}", row.len()),
            });
        }
        out.push(row);
    }
    Ok(out)
}

/// Dense matrix from a CSV, one matrix row per line.
pub fn load_matrix_csv(path: &Path) -> Result<nalgebra::DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let rows = parse_csv_rows(&text, path)?;
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "matrix file is empty".into(),
        });
    }
    let ncols = rows[0].1.len();
    let mut data = Vec::with_capacity(nrows * ncols);
    for (line, row) in rows {
        if row.len() != ncols {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("row has {} entries, expected {ncols}", row.len()),
            });
        }
        data.extend(row);
    }
    Ok(nalgebra::DMatrix::from_row_slice(nrows, ncols, &data))
}

/// Writes a dense matrix as headerless CSV with 17 significant digits.
pub fn matrix_to_csv(m: &nalgebra::DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn parse_csv_rows(text: &str, origin: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut header_seen = false;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        // An optional header: a first row with no numeric field at all.
        if rows.is_empty() && !header_seen && record.iter().all(|f| f.parse::<f64>().is_err()) {
            header_seen = true;
            continue;
        }
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| Error::Parse {
                    path: origin.to_path_buf(),
                    line,
                    message: format!("not a number: {field:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, row));
    }
    Ok(rows)
}

fn same_point(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= MERGE_TOLERANCE)
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// An i.i.d. sample of atom indices drawn from a ground-truth measure.
#[derive(Debug, Clone)]
pub struct SampleBatch<'a> {
    draws: Vec<usize>,
    source: &'a DiscreteMeasure,
}

/// Empirical measure together with the truth atom behind each of its atoms.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    pub measure: DiscreteMeasure,
    /// `support[k]` is the index in the source measure of atom `k`.
    pub support: Vec<usize>,
    pub n: usize,
}

impl<'a> SampleBatch<'a> {
    pub fn draw<R: Rng + ?Sized>(source: &'a DiscreteMeasure, n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be at least 1".into()));
        }
        let dist = WeightedIndex::new(source.weights())
            .map_err(|e| Error::InvalidMeasure(e.to_string()))?;
        let draws = (0..n).map(|_| dist.sample(rng)).collect();
        Ok(SampleBatch { draws, source })
    }

    pub fn n(&self) -> usize {
        self.draws.len()
    }

    pub fn draws(&self) -> &[usize] {
        &self.draws
    }

    pub fn source(&self) -> &DiscreteMeasure {
        self.source
    }

    /// Multinomial counts per source atom.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.source.len()];
        for &i in &self.draws {
            counts[i] += 1;
        }
        counts
    }

    /// Empirical measure on the atoms that received at least one draw.
    pub fn empirical(&self) -> EmpiricalMeasure {
        let n = self.n() as f64;
        let dim = self.source.dim();
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut support = Vec::new();
        for (i, &c) in self.counts().iter().enumerate() {
            if c > 0 {
                points.extend_from_slice(self.source.point(i));
                weights.push(c as f64 / n);
                support.push(i);
            }
        }
        // Source atoms are already distinct and counts sum to n, so no merge
        // or renormalization beyond rounding can happen here.
        let measure = DiscreteMeasure::from_flat(points, dim, weights)
            .expect("empirical measure of a valid source is valid");
        EmpiricalMeasure {
            measure,
            support,
            n: self.n(),
        }
    }
}

/// Draws `n` i.i.d. atoms from `truth` and returns their empirical measure.
pub fn empirical_from_sample<R: Rng + ?Sized>(
    truth: &DiscreteMeasure,
    n: usize,
    rng: &mut R,
) -> Result<DiscreteMeasure> {
    Ok(SampleBatch::draw(truth, n, rng)?.empirical().measure)
}
