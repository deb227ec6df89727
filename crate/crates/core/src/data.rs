//! Balanced panel model and long-format CSV ingestion.
//!
//! Periods are 1-based in every public API: periods `1..=t0` are
//! pretreatment, `t0+1..=t0+k+1` are post-treatment. Event time of period
//! `t` is `k = t - t0 - 1`, so horizon 0 is the first treated period.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balancer::BalanceSolution;
use crate::error::{Error, Result};

/// Units × periods outcome matrix with a block (single-date) treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    outcomes: DMatrix<f64>,
    treated: Vec<bool>,
    t0: usize,
    unit_ids: Vec<String>,
}

impl PanelDataset {
    pub fn new(
        unit_ids: Vec<String>,
        outcomes: DMatrix<f64>,
        treated: Vec<bool>,
        t0: usize,
    ) -> Result<Self> {
        let n = outcomes.nrows();
        if unit_ids.len() != n || treated.len() != n {
            return Err(Error::Shape(format!(
                "{} outcome rows, {} unit ids, {} treatment flags",
                n,
                unit_ids.len(),
                treated.len()
            )));
        }
        if t0 < 2 {
            return Err(Error::Validation(format!("t0 = {t0}, need at least 2 pretreatment periods")));
        }
        if outcomes.ncols() <= t0 {
            return Err(Error::Validation(format!(
                "{} periods leaves no post-treatment period after t0 = {t0}",
                outcomes.ncols()
            )));
        }
        if outcomes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("outcome matrix has non-finite cells".into()));
        }
        let n1 = treated.iter().filter(|&&d| d).count();
        if n1 == 0 {
            return Err(Error::Validation("no treated units".into()));
        }
        if n1 == n {
            return Err(Error::Validation("no control units".into()));
        }
        Ok(Self { outcomes, treated, t0, unit_ids })
    }

    /// Dataset with generated labels `u1, u2, ...`.
    pub fn from_matrix(outcomes: DMatrix<f64>, treated: Vec<bool>, t0: usize) -> Result<Self> {
        let ids = (1..=outcomes.nrows()).map(|i| format!("u{i}")).collect();
        Self::new(ids, outcomes, treated, t0)
    }

    pub fn n(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn periods(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    /// Number of post-treatment periods minus one (largest horizon).
    pub fn k_post(&self) -> usize {
        self.periods() - self.t0 - 1
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn n_treated(&self) -> usize {
        self.treated.iter().filter(|&&d| d).count()
    }

    /// Treated share `n1 / n`.
    pub fn pi_bar(&self) -> f64 {
        self.n_treated() as f64 / self.n() as f64
    }

    /// Outcomes of period `t` (1-based).
    pub fn period(&self, t: usize) -> DVector<f64> {
        self.outcomes.column(t - 1).into_owned()
    }

    /// Pretreatment block, `n × t0`.
    pub fn pre_block(&self) -> DMatrix<f64> {
        self.outcomes.columns(0, self.t0).into_owned()
    }

    /// Event time of period `t`.
    pub fn event_time(&self, t: usize) -> i64 {
        t as i64 - self.t0 as i64 - 1
    }

    /// Keep periods `1..=last` and move the treatment date to `t0`.
    pub fn truncate(&self, last: usize, t0: usize) -> Result<Self> {
        if last > self.periods() || last == 0 {
            return Err(Error::Range(format!("cannot keep {last} of {} periods", self.periods())));
        }
        Self::new(
            self.unit_ids.clone(),
            self.outcomes.columns(0, last).into_owned(),
            self.treated.clone(),
            t0,
        )
    }

    /// Dataset made of the listed rows, in order; rows may repeat.
    pub fn select_units(&self, rows: &[usize]) -> Result<Self> {
        let outcomes = self.outcomes.select_rows(rows.iter());
        let treated = rows.iter().map(|&i| self.treated[i]).collect();
        let ids = rows.iter().map(|&i| self.unit_ids[i].clone()).collect();
        Self::new(ids, outcomes, treated, self.t0)
    }

    /// Same design with outcomes replaced.
    pub fn with_outcomes(&self, outcomes: DMatrix<f64>) -> Result<Self> {
        if outcomes.shape() != self.outcomes.shape() {
            return Err(Error::Shape(format!(
                "outcomes {:?} vs dataset {:?}",
                outcomes.shape(),
                self.outcomes.shape()
            )));
        }
        Self::new(self.unit_ids.clone(), outcomes, self.treated.clone(), self.t0)
    }
}

/// Treatment-effect estimate of a single fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateResult {
    pub horizons: Vec<i64>,
    pub tau_hat: Vec<f64>,
    pub n1: usize,
    pub pi_bar: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weights: Option<BalanceSolution>,
}

impl EstimateResult {
    pub fn at(&self, horizon: i64) -> Option<f64> {
        self.horizons.iter().position(|&h| h == horizon).map(|i| self.tau_hat[i])
    }
}

#[derive(Debug, Deserialize)]
struct LongRow {
    unit: String,
    time: String,
    outcome: String,
    treated: String,
}

fn parse_flag(raw: &str, line: usize) -> Result<bool> {
    match raw.trim() {
        "1" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "false" | "FALSE" | "False" => Ok(false),
        other => Err(Error::Parse(format!("line {line}: treated flag {other:?}"))),
    }
}

/// Read a long-format panel (`unit,time,outcome,treated`).
///
/// Times are sorted and re-indexed to `1..=T`; units keep their order of
/// first appearance. The treatment date is not inferred: `t0` is supplied.
pub fn load_panel_csv(path: impl AsRef<Path>, t0: usize) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut units: Vec<String> = Vec::new();
    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut flags: Vec<bool> = Vec::new();
    let mut cells: Vec<(usize, i64, f64)> = Vec::new();

    for (row_no, record) in reader.deserialize::<LongRow>().enumerate() {
        let line = row_no + 2;
        let row = record?;
        let time: i64 = row
            .time
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("line {line}: time {:?} is not an integer", row.time)))?;
        let outcome: f64 = row
            .outcome
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("line {line}: outcome {:?} is not numeric", row.outcome)))?;
        let flag = parse_flag(&row.treated, line)?;
        let idx = match unit_index.get(&row.unit) {
            Some(&i) => {
                if flags[i] != flag {
                    return Err(Error::Consistency(format!(
                        "treatment of unit {:?} varies over time (line {line})",
                        row.unit
                    )));
                }
                i
            }
            None => {
                unit_index.insert(row.unit.clone(), units.len());
                units.push(row.unit);
                flags.push(flag);
                units.len() - 1
            }
        };
        cells.push((idx, time, outcome));
    }
    if units.is_empty() {
        return Err(Error::Validation("panel file has no rows".into()));
    }

    let mut times: Vec<i64> = cells.iter().map(|c| c.1).collect();
    times.sort_unstable();
    times.dedup();
    let time_index: HashMap<i64, usize> = times.iter().enumerate().map(|(j, &t)| (t, j)).collect();

    let n = units.len();
    let periods = times.len();
    let mut outcomes = DMatrix::from_element(n, periods, f64::NAN);
    for &(i, t, y) in &cells {
        let j = time_index[&t];
        if !outcomes[(i, j)].is_nan() {
            return Err(Error::Balance(format!("unit {:?} has period {t} more than once", units[i])));
        }
        outcomes[(i, j)] = y;
    }
    for i in 0..n {
        for j in 0..periods {
            if outcomes[(i, j)].is_nan() {
                return Err(Error::Balance(format!("unit {:?} is missing period {}", units[i], times[j])));
            }
        }
    }
    PanelDataset::new(units, outcomes, flags, t0)
}

/// Write the long format read by [`load_panel_csv`]; periods are written as `1..=T`.
pub fn write_panel_csv(data: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    if data.n() == 0 || data.periods() == 0 {
        return Err(Error::Validation("refusing to write an empty dataset".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = data.unit_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Validation(format!("duplicate unit label {dup:?}; long format would merge units")));
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["unit", "time", "outcome", "treated"])?;
    for i in 0..data.n() {
        let flag = if data.treated[i] { "1" } else { "0" };
        for t in 0..data.periods() {
            writer.write_record([
                data.unit_ids[i].as_str(),
                &(t + 1).to_string(),
                &data.outcomes[(i, t)].to_string(),
                flag,
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Wide layout (one row per unit) for eyeballing; not read back.
pub fn write_panel_wide_csv(data: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["unit".to_string(), "treated".to_string()];
    header.extend((1..=data.periods()).map(|t| format!("t{t}")));
    writer.write_record(&header)?;
    for i in 0..data.n() {
        let mut row = vec![data.unit_ids[i].clone(), (data.treated[i] as u8).to_string()];
        row.extend((0..data.periods()).map(|t| data.outcomes[(i, t)].to_string()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let path = dir.path().join("panel.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn minimal_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "unit,time,outcome,treated\nA,1,1.0,0\nA,2,2.0,0\nA,3,3.0,0\nB,1,1.5,1\nB,2,2.5,1\nB,3,4.0,1\n",
        );
        let data = load_panel_csv(&path, 2).unwrap();
        assert_eq!(data.n(), 2);
        assert_eq!(data.periods(), 3);
        assert_eq!(data.treated(), &[false, true]);
        assert_eq!(data.outcomes()[(1, 2)], 4.0);
    }

    #[test]
    fn times_are_reindexed_and_units_keep_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "unit,time,outcome,treated\nZ,2003,3,1\nZ,2001,1,1\nZ,2002,2,1\nA,2002,20,0\nA,2001,10,0\nA,2003,30,0\n",
        );
        let data = load_panel_csv(&path, 2).unwrap();
        assert_eq!(data.unit_ids(), &["Z".to_string(), "A".to_string()]);
        assert_eq!(data.period(1).as_slice(), &[1.0, 10.0]);
        assert_eq!(data.period(3).as_slice(), &[3.0, 30.0]);
    }

    #[test]
    fn missing_period_is_a_balance_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "unit,time,outcome,treated\nA,1,1,0\nA,3,3,0\nB,1,1,1\nB,2,2,1\nB,3,3,1\n",
        );
        assert!(matches!(load_panel_csv(&path, 2), Err(Error::Balance(_))));
    }

    #[test]
    fn duplicated_cell_is_a_balance_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "unit,time,outcome,treated\nA,1,1,0\nA,1,1,0\nA,2,2,0\nA,3,3,0\nB,1,1,1\nB,2,2,1\nB,3,3,1\n",
        );
        assert!(matches!(load_panel_csv(&path, 2), Err(Error::Balance(_))));
    }

    #[test]
    fn varying_treatment_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "unit,time,outcome,treated\nA,1,1,0\nA,2,2,1\nA,3,3,0\nB,1,1,1\nB,2,2,1\nB,3,3,1\n",
        );
        assert!(matches!(load_panel_csv(&path, 2), Err(Error::Consistency(_))));
    }

    #[test]
    fn non_numeric_outcome_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "unit,time,outcome,treated\nA,1,abc,0\n");
        assert!(matches!(load_panel_csv(&path, 2), Err(Error::Parse(_))));
    }

    #[test]
    fn validation_rejects_degenerate_designs() {
        let y = DMatrix::from_element(3, 4, 1.0);
        assert!(PanelDataset::from_matrix(y.clone(), vec![true, true, true], 2).is_err());
        assert!(PanelDataset::from_matrix(y.clone(), vec![false, false, false], 2).is_err());
        assert!(PanelDataset::from_matrix(y.clone(), vec![true, false, false], 1).is_err());
        assert!(PanelDataset::from_matrix(y.clone(), vec![true, false, false], 4).is_err());
        assert!(PanelDataset::from_matrix(y, vec![true, false, false], 2).is_ok());
    }

    #[test]
    fn write_rejects_duplicate_labels() {
        let dir = tempfile::tempdir().unwrap();
        let y = DMatrix::from_element(2, 3, 1.0);
        let data = PanelDataset::new(vec!["a".into(), "a".into()], y, vec![true, false], 2).unwrap();
        assert!(write_panel_csv(&data, dir.path().join("x.csv")).is_err());
    }

    #[test]
    fn pi_bar_is_exact_share() {
        let y = DMatrix::from_element(4, 3, 0.0);
        let data = PanelDataset::from_matrix(y, vec![true, false, false, true], 2).unwrap();
        assert_eq!(data.pi_bar(), 0.5);
        assert_eq!(data.k_post(), 0);
        assert_eq!(data.event_time(1), -2);
        assert_eq!(data.event_time(3), 0);
    }
}
