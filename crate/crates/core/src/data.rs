//! Dataset representation, CSV ingestion, missing-value imputation,
//! standardization and overlap diagnostics.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::PropensityModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnKind {
    Continuous,
    Binary,
    CategoricalEncoded,
    MissingIndicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    /// For missing indicators, the name of the column whose missingness it records.
    pub indicator_for: Option<String>,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Column {
            name: name.into(),
            kind,
            indicator_for: None,
        }
    }
}

/// Outcome vector, binary treatment and feature matrix for `n` units.
///
/// Construction validates the invariants; afterwards the value is immutable
/// and can be shared across worker threads.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    t: Vec<u8>,
    x: DMatrix<f64>,
    schema: Vec<Column>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, t: Vec<u8>, x: DMatrix<f64>, schema: Vec<Column>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::contract("dataset must contain at least one row"));
        }
        if t.len() != n || x.nrows() != n {
            return Err(Error::contract(format!(
                "row counts disagree: y={}, t={}, x={}",
                n,
                t.len(),
                x.nrows()
            )));
        }
        if schema.len() != x.ncols() {
            return Err(Error::contract(format!(
                "schema has {} columns but feature matrix has {}",
                schema.len(),
                x.ncols()
            )));
        }
        if let Some(bad) = t.iter().find(|&&v| v > 1) {
            return Err(Error::schema(
                "SCHEMA_TREATMENT",
                format!("treatment value {bad} is not binary"),
            ));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema(
                "SCHEMA_OUTCOME",
                "outcome contains non-finite values",
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema(
                "SCHEMA_FEATURE",
                "features contain non-finite values",
            ));
        }
        Ok(Dataset { y, t, x, schema })
    }

    /// Dataset whose features are all continuous, named `x1..xd`.
    pub fn from_continuous(y: Vec<f64>, t: Vec<u8>, x: DMatrix<f64>) -> Result<Self> {
        let schema = (0..x.ncols())
            .map(|j| Column::new(format!("x{}", j + 1), ColumnKind::Continuous))
            .collect();
        Dataset::new(y, t, x, schema)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn t(&self) -> &[u8] {
        &self.t
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn schema(&self) -> &[Column] {
        &self.schema
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    /// Row indices belonging to treatment arm `arm` (0 or 1), in order.
    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        self.t
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == arm)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn arm_sizes(&self) -> (usize, usize) {
        let treated = self.t.iter().filter(|&&v| v == 1).count();
        (self.n() - treated, treated)
    }

    /// Error unless both arms contain at least `min` rows.
    pub fn require_arms(&self, min: usize) -> Result<()> {
        let (n0, n1) = self.arm_sizes();
        if n0.min(n1) < min.max(1) {
            return Err(Error::contract(format!(
                "each treatment arm needs at least {} rows (control={n0}, treated={n1})",
                min.max(1)
            )));
        }
        Ok(())
    }

    /// New dataset made of the given rows (duplicates allowed), in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            t: rows.iter().map(|&i| self.t[i]).collect(),
            x: self.x.select_rows(rows),
            schema: self.schema.clone(),
        }
    }

    /// Same units with a replaced feature matrix (same shape and schema).
    pub fn with_features(&self, x: DMatrix<f64>) -> Result<Dataset> {
        Dataset::new(self.y.clone(), self.t.clone(), x, self.schema.clone())
    }

    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Dataset> {
        Dataset::new(y, self.t.clone(), self.x.clone(), self.schema.clone())
    }
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub outcome: String,
    pub treatment: String,
    /// Feature columns; empty means "every column except outcome and treatment".
    pub features: Vec<String>,
    /// Declared kinds. Undeclared features are `binary` when every observed
    /// value is 0 or 1 and `continuous` otherwise.
    pub kinds: HashMap<String, ColumnKind>,
}

impl ColumnRoles {
    pub fn new(outcome: impl Into<String>, treatment: impl Into<String>) -> Self {
        ColumnRoles {
            outcome: outcome.into(),
            treatment: treatment.into(),
            ..Default::default()
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

pub fn ingest_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Ingestion(format!("cannot open {}: {e}", path.display())))?;
    ingest_reader(file, roles)
}

/// Parse a headed CSV into a [`Dataset`].
///
/// Missing feature cells (empty or `NA`) are replaced by 0 and a binary
/// `<name>_missing` indicator is appended after the features for every column
/// that had at least one missing cell. Row order is preserved.
pub fn ingest_reader<R: Read>(reader: R, roles: &ColumnRoles) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Ingestion("file is empty".into()));
    }
    let find = |name: &str| headers.iter().position(|h| h == name);
    let y_col = find(&roles.outcome).ok_or_else(|| {
        Error::schema(
            "SCHEMA_OUTCOME",
            format!("outcome column '{}' not found", roles.outcome),
        )
    })?;
    let t_col = find(&roles.treatment).ok_or_else(|| {
        Error::schema(
            "SCHEMA_TREATMENT",
            format!("treatment column '{}' not found", roles.treatment),
        )
    })?;
    let feature_names: Vec<String> = if roles.features.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y_col && *i != t_col)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        roles.features.clone()
    };
    if feature_names.is_empty() {
        return Err(Error::schema(
            "SCHEMA_FEATURE",
            "no feature columns configured",
        ));
    }
    let feature_cols: Vec<usize> = feature_names
        .iter()
        .map(|name| {
            find(name).ok_or_else(|| {
                Error::schema(
                    "SCHEMA_FEATURE",
                    format!("feature column '{name}' not found"),
                )
            })
        })
        .collect::<Result<_>>()?;

    let d = feature_cols.len();
    let mut y = Vec::new();
    let mut t = Vec::new();
    let mut raw: Vec<Vec<Option<f64>>> = Vec::new();
    for (row_no, record) in rdr.records().enumerate() {
        let record = record?;
        let line = row_no + 2;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let parse = |c: usize, what: &str| -> Result<Option<f64>> {
            let s = cell(c);
            if is_missing(s) {
                return Ok(None);
            }
            s.trim().parse::<f64>().map(Some).map_err(|_| {
                Error::Ingestion(format!("line {line}: cannot parse {what} value '{s}'"))
            })
        };
        let yv = parse(y_col, "outcome")?.ok_or_else(|| {
            Error::schema("SCHEMA_OUTCOME", format!("line {line}: outcome is missing"))
        })?;
        let tv = parse(t_col, "treatment")
            .map_err(|_| {
                Error::schema(
                    "SCHEMA_TREATMENT",
                    format!("line {line}: treatment '{}' is not binary", cell(t_col)),
                )
            })?
            .ok_or_else(|| {
                Error::schema(
                    "SCHEMA_TREATMENT",
                    format!("line {line}: treatment is missing"),
                )
            })?;
        let tv = if tv == 0.0 {
            0u8
        } else if tv == 1.0 {
            1u8
        } else {
            return Err(Error::schema(
                "SCHEMA_TREATMENT",
                format!("line {line}: treatment value {tv} is not 0 or 1"),
            ));
        };
        y.push(yv);
        t.push(tv);
        let row = feature_cols
            .iter()
            .zip(&feature_names)
            .map(|(&c, name)| parse(c, name))
            .collect::<Result<Vec<_>>>()?;
        raw.push(row);
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::Ingestion(
            "file has a header but no data rows".into(),
        ));
    }

    let mut schema = Vec::with_capacity(d);
    let mut indicators: Vec<usize> = Vec::new();
    for (j, name) in feature_names.iter().enumerate() {
        let missing = raw.iter().filter(|r| r[j].is_none()).count();
        if missing == n {
            return Err(Error::schema(
                "SCHEMA_FEATURE_MISSING",
                format!("feature column '{name}' is entirely missing"),
            ));
        }
        if missing > 0 {
            indicators.push(j);
        }
        let kind = roles.kinds.get(name).copied().unwrap_or_else(|| {
            let binary = raw
                .iter()
                .filter_map(|r| r[j])
                .all(|v| v == 0.0 || v == 1.0);
            if binary {
                ColumnKind::Binary
            } else {
                ColumnKind::Continuous
            }
        });
        schema.push(Column::new(name.clone(), kind));
    }
    for &j in &indicators {
        schema.push(Column {
            name: format!("{}_missing", feature_names[j]),
            kind: ColumnKind::MissingIndicator,
            indicator_for: Some(feature_names[j].clone()),
        });
    }
    let width = d + indicators.len();
    let x = DMatrix::from_fn(n, width, |i, j| {
        if j < d {
            raw[i][j].unwrap_or(0.0)
        } else if raw[i][indicators[j - d]].is_none() {
            1.0
        } else {
            0.0
        }
    });
    Dataset::new(y, t, x, schema)
}

/// Variance denominator used when standardizing continuous columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScaleConvention {
    /// Divide by `n` (z-scores of (1,2,3) are ±1.2247).
    #[default]
    Population,
    /// Divide by `n - 1`.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub convention: ScaleConvention,
    /// One entry per zero-variance continuous column.
    pub warnings: Vec<String>,
}

impl StandardizationParams {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[j]) / self.scale[j]
        })
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
            z[(i, j)] * self.scale[j] + self.mean[j]
        })
    }
}

/// Centre and scale the continuous feature columns.
///
/// Binary, categorical and missing-indicator columns are left untouched (mean 0,
/// scale 1 in the returned parameters). A constant continuous column keeps its
/// values and gets scale 1 plus a warning.
pub fn standardize(
    ds: &Dataset,
    convention: ScaleConvention,
) -> Result<(Dataset, StandardizationParams)> {
    let n = ds.n();
    if n < 2 {
        return Err(Error::contract("standardization needs at least 2 rows"));
    }
    let d = ds.d();
    let mut mean = vec![0.0; d];
    let mut scale = vec![1.0; d];
    let mut warnings = Vec::new();
    let denom = match convention {
        ScaleConvention::Population => n as f64,
        ScaleConvention::Sample => (n - 1) as f64,
    };
    for (j, col) in ds.schema().iter().enumerate() {
        if col.kind != ColumnKind::Continuous {
            continue;
        }
        let c = ds.x().column(j);
        let m = c.iter().sum::<f64>() / n as f64;
        let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / denom;
        let sd = var.sqrt();
        if sd <= f64::EPSILON * m.abs().max(1.0) {
            warnings.push(format!(
                "column '{}' has zero variance; left unscaled",
                col.name
            ));
            continue;
        }
        mean[j] = m;
        scale[j] = sd;
    }
    let params = StandardizationParams {
        mean,
        scale,
        convention,
        warnings,
    };
    for w in &params.warnings {
        log::warn!("{w}");
    }
    let x = params.apply(ds.x());
    Ok((ds.with_features(x)?, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub min: f64,
    pub q01: f64,
    pub median: f64,
    pub q99: f64,
    pub max: f64,
    pub epsilon: f64,
    /// Units with raw propensity outside `[epsilon, 1 - epsilon]`.
    pub outside: usize,
    pub violated: bool,
}

/// Linear-interpolation quantile of sorted data (the "type 7" definition).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn overlap_diagnostic(
    ds: &Dataset,
    rho: &PropensityModel,
    epsilon: f64,
) -> Result<OverlapReport> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::contract(format!(
            "epsilon must lie in (0, 0.5), got {epsilon}"
        )));
    }
    if rho.n_features() != ds.d() {
        return Err(Error::contract(format!(
            "propensity model expects {} features, dataset has {}",
            rho.n_features(),
            ds.d()
        )));
    }
    let raw = rho.predict_raw(ds.x());
    Ok(overlap_from_scores(&raw, epsilon))
}

pub(crate) fn overlap_from_scores(raw: &[f64], epsilon: f64) -> OverlapReport {
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let outside = raw
        .iter()
        .filter(|&&p| p < epsilon || p > 1.0 - epsilon)
        .count();
    OverlapReport {
        min: sorted[0],
        q01: quantile_sorted(&sorted, 0.01),
        median: quantile_sorted(&sorted, 0.5),
        q99: quantile_sorted(&sorted, 0.99),
        max: sorted[sorted.len() - 1],
        epsilon,
        outside,
        violated: outside > 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn roles() -> ColumnRoles {
        ColumnRoles::new("y", "t")
    }

    #[test]
    fn missing_cell_gets_zero_and_indicator() {
        let csv = "y,t,a,b\n1,0,0.5,2\n2,1,1.5,3\n3,0,,4\n4,1,2.5,NA\n";
        let ds = ingest_reader(csv.as_bytes(), &roles()).unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.d(), 4);
        assert_eq!(ds.schema()[2].name, "a_missing");
        assert_eq!(ds.schema()[2].kind, ColumnKind::MissingIndicator);
        assert_eq!(ds.schema()[2].indicator_for.as_deref(), Some("a"));
        let ind: Vec<f64> = ds.x().column(2).iter().copied().collect();
        assert_eq!(ind, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(ds.x()[(2, 0)], 0.0);
        assert_eq!(ds.x()[(3, 1)], 0.0);
        assert_eq!(ds.x()[(3, 3)], 1.0);
    }

    #[test]
    fn single_missing_feature_adds_one_column() {
        let csv = "y,t,a\n1,0,0.5\n2,1,1.5\n3,0,\n4,1,2.5\n";
        let ds = ingest_reader(csv.as_bytes(), &roles()).unwrap();
        assert_eq!(ds.d(), 2);
        let ind: Vec<f64> = ds.x().column(1).iter().copied().collect();
        assert_eq!(ind, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_binary_treatment_is_schema_error() {
        let csv = "y,t,a\n1,0,1\n2,1,2\n3,2,3\n";
        let err = ingest_reader(csv.as_bytes(), &roles()).unwrap_err();
        assert_eq!(err.tag(), "SCHEMA_TREATMENT");
    }

    #[test]
    fn missing_treatment_column_is_tagged() {
        let csv = "y,a\n1,1\n";
        let err = ingest_reader(csv.as_bytes(), &roles()).unwrap_err();
        assert_eq!(err.tag(), "SCHEMA_TREATMENT");
    }

    #[test]
    fn empty_file_is_ingestion_error() {
        let err = ingest_reader("".as_bytes(), &roles()).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)), "{err}");
        let err = ingest_reader("y,t,a\n".as_bytes(), &roles()).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)), "{err}");
    }

    #[test]
    fn entirely_missing_feature_names_column() {
        let csv = "y,t,a,b\n1,0,1,\n2,1,2,NA\n";
        let err = ingest_reader(csv.as_bytes(), &roles()).unwrap_err();
        assert_eq!(err.tag(), "SCHEMA_FEATURE_MISSING");
        assert!(err.to_string().contains("'b'"));
    }

    #[test]
    fn binary_columns_detected() {
        let csv = "y,t,a,b\n1,0,1,0.3\n2,1,0,0.7\n";
        let ds = ingest_reader(csv.as_bytes(), &roles()).unwrap();
        assert_eq!(ds.schema()[0].kind, ColumnKind::Binary);
        assert_eq!(ds.schema()[1].kind, ColumnKind::Continuous);
    }

    #[test]
    fn zscores_population_convention() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let ds = Dataset::from_continuous(vec![0.0; 3], vec![0, 1, 0], x).unwrap();
        let (z, p) = standardize(&ds, ScaleConvention::Population).unwrap();
        assert_abs_diff_eq!(z.x()[(0, 0)], -1.224744871391589, epsilon = 1e-12);
        assert_abs_diff_eq!(z.x()[(1, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z.x()[(2, 0)], 1.224744871391589, epsilon = 1e-12);
        assert!(p.warnings.is_empty());
        let (zs, _) = standardize(&ds, ScaleConvention::Sample).unwrap();
        assert_abs_diff_eq!(zs.x()[(0, 0)], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_column_unchanged_with_warning() {
        let x = DMatrix::from_column_slice(3, 1, &[5.0, 5.0, 5.0]);
        let ds = Dataset::from_continuous(vec![0.0; 3], vec![0, 1, 0], x).unwrap();
        let (z, p) = standardize(&ds, ScaleConvention::Population).unwrap();
        assert_eq!(
            z.x().column(0).iter().copied().collect::<Vec<_>>(),
            vec![5.0; 3]
        );
        assert_eq!(p.scale[0], 1.0);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn standardizing_twice_is_identity() {
        let x = DMatrix::from_fn(50, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.37 - 1.0);
        let ds = Dataset::from_continuous(vec![0.0; 50], vec![0; 50], x).unwrap();
        let (z, _) = standardize(&ds, ScaleConvention::Population).unwrap();
        let (zz, _) = standardize(&z, ScaleConvention::Population).unwrap();
        for (a, b) in z.x().iter().zip(zz.x().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn binary_columns_untouched() {
        let csv = "y,t,a,b\n1,0,1,0.3\n2,1,0,0.7\n3,1,1,0.1\n";
        let ds = ingest_reader(csv.as_bytes(), &roles()).unwrap();
        let (z, p) = standardize(&ds, ScaleConvention::Population).unwrap();
        assert_eq!(z.x().column(0), ds.x().column(0));
        assert_eq!((p.mean[0], p.scale[0]), (0.0, 1.0));
        assert_eq!(z.y(), ds.y());
        assert_eq!(z.t(), ds.t());
    }

    #[test]
    fn overlap_counts_boundary_units() {
        let r = overlap_from_scores(&[0.5; 10], 0.01);
        assert_eq!(r.outside, 0);
        assert!(!r.violated);
        let mut s = vec![0.5; 10];
        s[3] = 0.999;
        let r = overlap_from_scores(&s, 0.01);
        assert_eq!(r.outside, 1);
        assert!(r.violated);
        assert!(r.min <= r.q01 && r.q01 <= r.median && r.median <= r.q99 && r.q99 <= r.max);
    }

    proptest::proptest! {
        #[test]
        fn standardize_round_trips(vals in proptest::collection::vec(-1e3f64..1e3, 6..40)) {
            let n = vals.len() / 2;
            let x = DMatrix::from_column_slice(n, 2, &vals[..2 * n]);
            let ds = Dataset::from_continuous(vec![0.0; n], vec![0; n], x.clone()).unwrap();
            let (z, p) = standardize(&ds, ScaleConvention::Population).unwrap();
            let back = p.invert(z.x());
            for (a, b) in back.iter().zip(x.iter()) {
                proptest::prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }
}
