//! Feature maps φ(X_i) built from pretreatment outcomes.
//!
//! The balancing class is the unit ℓ2 ball of linear combinations of the
//! columns of a [`FeatureMatrix`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::{Error, Result};

/// Pretreatment variance (mean square deviation) below which a unit's
/// autocorrelation is reported as 0.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    names: Vec<String>,
    standardized: bool,
    centers: Vec<f64>,
    scales: Vec<f64>,
    /// Columns whose sample variance was zero when standardizing.
    zero_variance: Vec<usize>,
    /// Units whose autocorrelation fell back to 0.
    degenerate_units: usize,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let p = values.ncols();
        if p == 0 {
            return Err(Error::Validation("feature matrix needs at least one column".into()));
        }
        if names.len() != p {
            return Err(Error::Shape(format!("{p} columns but {} names", names.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature matrix has non-finite entries".into()));
        }
        Ok(Self {
            values,
            names,
            standardized: false,
            centers: vec![0.0; p],
            scales: vec![1.0; p],
            zero_variance: Vec::new(),
            degenerate_units: 0,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_variance_columns(&self) -> &[usize] {
        &self.zero_variance
    }

    pub fn degenerate_units(&self) -> usize {
        self.degenerate_units
    }

    /// Center each column and scale to unit sample variance (n−1 denominator).
    /// Zero-variance columns are only centered and get flagged.
    pub fn standardize(&self) -> Self {
        let n = self.n();
        let mut out = self.clone();
        out.zero_variance.clear();
        let denom = (n.max(2) - 1) as f64;
        for j in 0..self.p() {
            let col = self.values.column(j);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / denom;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            if var <= 0.0 {
                out.zero_variance.push(j);
            }
            for i in 0..n {
                out.values[(i, j)] = (self.values[(i, j)] - mean) / scale;
            }
            out.centers[j] = mean;
            out.scales[j] = scale;
        }
        out.standardized = true;
        out
    }

    /// Columns `start..start+len` as a new matrix.
    pub fn slice_columns(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.p() {
            return Err(Error::Range(format!("columns {start}..{} of {}", start + len, self.p())));
        }
        let mut out = Self::new(
            self.values.columns(start, len).into_owned(),
            self.names[start..start + len].to_vec(),
        )?;
        out.standardized = self.standardized;
        out.centers = self.centers[start..start + len].to_vec();
        out.scales = self.scales[start..start + len].to_vec();
        out.degenerate_units = self.degenerate_units;
        Ok(out)
    }

    /// Rows in the given order (used by resampling).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = self.clone();
        out.values = self.values.select_rows(rows.iter());
        out
    }
}

/// Pretreatment outcome levels: column `t` is `Y_{i,t}` for `t = 1..=t0`.
pub fn lagged_levels(data: &PanelDataset) -> FeatureMatrix {
    let names = (1..=data.t0()).map(|t| format!("y{t}")).collect();
    FeatureMatrix::new(data.pre_block(), names).expect("validated panel has finite pretreatment block")
}

/// Lag-1 sample autocorrelation of one demeaned series.
///
/// Returns `None` when the mean square deviation is below [`DEGENERATE_VARIANCE`].
pub fn lag1_autocorrelation(series: &[f64]) -> Option<f64> {
    let len = series.len() as f64;
    let mean = series.iter().sum::<f64>() / len;
    let denom: f64 = series.iter().map(|y| (y - mean).powi(2)).sum();
    if denom / len < DEGENERATE_VARIANCE {
        return None;
    }
    let num: f64 = series.windows(2).map(|w| (w[1] - mean) * (w[0] - mean)).sum();
    Some(num / denom)
}

/// Per-unit autocorrelation ρ̂_i over periods `1..=end_period`.
pub fn unit_autocorrelation(data: &PanelDataset, end_period: usize) -> Result<FeatureMatrix> {
    if end_period < 3 || end_period > data.t0() {
        return Err(Error::Range(format!(
            "autocorrelation end period {end_period} must lie in 3..={}",
            data.t0()
        )));
    }
    let y = data.outcomes();
    let mut degenerate = 0;
    let rho = DMatrix::from_fn(data.n(), 1, |i, _| {
        let series: Vec<f64> = (0..end_period).map(|t| y[(i, t)]).collect();
        lag1_autocorrelation(&series).unwrap_or_else(|| {
            degenerate += 1;
            0.0
        })
    });
    let mut out = FeatureMatrix::new(rho, vec![format!("rho1..{end_period}")])?;
    out.degenerate_units = degenerate;
    Ok(out)
}

/// Horizontal concatenation; repeated names get a `#k` suffix.
pub fn concat(features: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    let first = features
        .first()
        .ok_or_else(|| Error::Validation("nothing to concatenate".into()))?;
    let n = first.n();
    if let Some(bad) = features.iter().find(|f| f.n() != n) {
        return Err(Error::Shape(format!("row counts {n} and {} differ", bad.n())));
    }
    let p: usize = features.iter().map(FeatureMatrix::p).sum();
    let mut values = DMatrix::zeros(n, p);
    let mut names: Vec<String> = Vec::with_capacity(p);
    let mut centers = Vec::with_capacity(p);
    let mut scales = Vec::with_capacity(p);
    let mut zero_variance = Vec::new();
    let mut offset = 0;
    for f in features {
        values.columns_mut(offset, f.p()).copy_from(&f.values);
        for name in &f.names {
            let mut candidate = name.clone();
            let mut k = 2;
            while names.contains(&candidate) {
                candidate = format!("{name}#{k}");
                k += 1;
            }
            names.push(candidate);
        }
        centers.extend_from_slice(&f.centers);
        scales.extend_from_slice(&f.scales);
        zero_variance.extend(f.zero_variance.iter().map(|j| j + offset));
        offset += f.p();
    }
    let mut out = FeatureMatrix::new(values, names)?;
    out.standardized = features.iter().all(|f| f.standardized);
    out.centers = centers;
    out.scales = scales;
    out.zero_variance = zero_variance;
    out.degenerate_units = features.iter().map(|f| f.degenerate_units).sum();
    Ok(out)
}

/// One entry of a feature recipe, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureSpec {
    Lags,
    Autocorr { end: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecipe {
    pub features: Vec<FeatureSpec>,
    #[serde(default)]
    pub standardize: bool,
}

impl Default for FeatureRecipe {
    fn default() -> Self {
        Self { features: vec![FeatureSpec::Lags], standardize: false }
    }
}

impl FeatureRecipe {
    pub fn lags() -> Self {
        Self::default()
    }

    /// Parse the CLI shorthand: `lags`, `autocorr`, `autocorr:8`, comma separated.
    pub fn parse_list(spec: &str) -> Result<Self> {
        let mut features = Vec::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (kind, arg) = item.split_once(':').map_or((item, None), |(k, a)| (k, Some(a)));
            match kind {
                "lags" => features.push(FeatureSpec::Lags),
                "autocorr" => {
                    let end = match arg {
                        Some(a) => a
                            .parse()
                            .map_err(|_| Error::Parse(format!("autocorr end {a:?}")))?,
                        None => 0,
                    };
                    features.push(FeatureSpec::Autocorr { end });
                }
                other => return Err(Error::Parse(format!("unknown feature kind {other:?}"))),
            }
        }
        if features.is_empty() {
            return Err(Error::Parse("empty feature list".into()));
        }
        Ok(Self { features, standardize: false })
    }

    /// Build φ for a dataset. `Autocorr { end: 0 }` means "up to t0".
    pub fn build(&self, data: &PanelDataset) -> Result<FeatureMatrix> {
        let parts = self
            .features
            .iter()
            .map(|spec| match *spec {
                FeatureSpec::Lags => Ok(lagged_levels(data)),
                FeatureSpec::Autocorr { end } => {
                    unit_autocorrelation(data, if end == 0 { data.t0() } else { end })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let phi = if parts.len() == 1 { parts.into_iter().next().unwrap() } else { concat(&parts)? };
        Ok(if self.standardize { phi.standardize() } else { phi })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(rows: &[&[f64]], treated: &[bool], t0: usize) -> PanelDataset {
        let n = rows.len();
        let t = rows[0].len();
        let y = DMatrix::from_fn(n, t, |i, j| rows[i][j]);
        PanelDataset::from_matrix(y, treated.to_vec(), t0).unwrap()
    }

    #[test]
    fn lagged_levels_copies_pre_block() {
        let data = panel(&[&[1.0, 2.0, 9.0], &[3.0, 4.0, 9.0]], &[true, false], 2);
        let f = lagged_levels(&data);
        assert_eq!(f.p(), 2);
        assert_eq!(f.values(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn lagged_levels_ignores_post_columns() {
        let a = panel(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]], &[true, false], 3);
        let b = panel(&[&[1.0, 2.0, 3.0, -40.0], &[5.0, 6.0, 7.0, 1e6]], &[true, false], 3);
        assert_eq!(lagged_levels(&a), lagged_levels(&b));
    }

    #[test]
    fn constant_series_gives_zero_with_warning() {
        let data = panel(&[&[2.0; 5], &[1.0, 3.0, 2.0, 5.0, 0.0]], &[true, false], 4);
        let f = unit_autocorrelation(&data, 4).unwrap();
        assert_eq!(f.values()[(0, 0)], 0.0);
        assert_eq!(f.degenerate_units(), 1);
        assert_ne!(f.values()[(1, 0)], 0.0);
    }

    #[test]
    fn alternating_series_matches_direct_formula() {
        let s: Vec<f64> = (0..8).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        // mean 0, sum of lagged products = -7, sum of squares = 8
        let expected = -7.0 / 8.0;
        assert!((lag1_autocorrelation(&s).unwrap() - expected).abs() < 1e-15);
        let long: Vec<f64> = (0..400).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(lag1_autocorrelation(&long).unwrap() < -0.99);
    }

    #[test]
    fn autocorrelation_range_checked() {
        let data = panel(&[&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 3.0, 4.0]], &[true, false], 3);
        assert!(matches!(unit_autocorrelation(&data, 2), Err(Error::Range(_))));
        assert!(matches!(unit_autocorrelation(&data, 4), Err(Error::Range(_))));
        assert!(unit_autocorrelation(&data, 3).is_ok());
    }

    #[test]
    fn concat_counts_columns_and_uniquifies_names() {
        let data = panel(
            &[&[1.0, 2.0, 0.5, 3.0, 0.0], &[2.0, 1.0, 4.0, 3.0, 0.0]],
            &[true, false],
            4,
        );
        let lags = lagged_levels(&data);
        let rho = unit_autocorrelation(&data, 4).unwrap();
        let both = concat(&[lags.clone(), rho.clone()]).unwrap();
        assert_eq!(both.p(), 5);
        let twice = concat(&[lags.clone(), lags.clone()]).unwrap();
        assert_eq!(twice.names()[4], "y1#2");
        assert_eq!(concat(&[lags.clone()]).unwrap(), lags);
        assert_eq!(both.slice_columns(0, 4).unwrap().values(), lags.values());
        assert_eq!(both.slice_columns(4, 1).unwrap().values(), rho.values());
    }

    #[test]
    fn concat_rejects_row_mismatch() {
        let a = FeatureMatrix::new(DMatrix::zeros(3, 1), vec!["a".into()]).unwrap();
        let b = FeatureMatrix::new(DMatrix::zeros(4, 1), vec!["b".into()]).unwrap();
        assert!(matches!(concat(&[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn standardize_gives_zero_mean_unit_variance() {
        let values = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 4.0, 5.0, 9.0, 5.0]);
        let f = FeatureMatrix::new(values, vec!["a".into(), "b".into()]).unwrap().standardize();
        let col = f.values().column(0);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        assert_eq!(f.zero_variance_columns(), &[1]);
        assert!(f.values().column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recipe_parses_shorthand_and_json() {
        let r = FeatureRecipe::parse_list("lags,autocorr:8").unwrap();
        assert_eq!(r.features, vec![FeatureSpec::Lags, FeatureSpec::Autocorr { end: 8 }]);
        let json: FeatureRecipe =
            serde_json::from_str(r#"{"features":[{"kind":"lags"},{"kind":"autocorr","end":8}]}"#).unwrap();
        assert_eq!(json, r);
        assert!(FeatureRecipe::parse_list("splines").is_err());
    }
}
