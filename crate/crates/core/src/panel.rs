//! Treated/control panel data: CSV ingestion, growth transforms,
//! scale standardization, and level reconstruction.

use nalgebra::DMatrix;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("unit '{0}' not found in the panel header")]
    MissingUnit(String),
    #[error("time label '{0}' not found in the panel")]
    MissingTime(String),
    #[error("non-numeric cell at row {row}, column {col}")]
    NonNumericCell { row: usize, col: usize },
    #[error("too few periods: need at least {needed}, have {got}")]
    TooFewPeriods { needed: usize, got: usize },
    #[error("zero base value at row {row}, column {col} in growth transform")]
    ZeroBase { row: usize, col: usize },
    #[error("unit '{0}' has constant pre-treatment outcomes")]
    DegenerateSeries(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("insufficient history: t0 = {t0} is shorter than lag {lag}")]
    InsufficientHistory { t0: usize, lag: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Outcome panel with the treated unit in column 0 and the donor pool in
/// columns `1..=J`. Rows are time periods, pre-treatment first.
#[derive(Debug, Clone)]
pub struct PanelData {
    outcomes: DMatrix<f64>,
    t0: usize,
    t1: usize,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
}

/// Pre-treatment standard deviations used for scale standardization.
#[derive(Debug, Clone)]
pub struct ScaleVector {
    pub sigma0: f64,
    pub sigma: Vec<f64>,
}

impl PanelData {
    pub fn new(
        outcomes: DMatrix<f64>,
        t0: usize,
        t1: usize,
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
    ) -> Result<Self, PanelError> {
        // A single pre-treatment period is representable (e.g. after a
        // long-lag growth transform); estimation entry points require more.
        if t0 < 1 {
            return Err(PanelError::TooFewPeriods { needed: 1, got: t0 });
        }
        assert_eq!(outcomes.nrows(), t0 + t1, "outcome rows must equal t0 + t1");
        assert!(outcomes.ncols() >= 2, "need the treated unit plus at least one control");
        assert_eq!(unit_labels.len(), outcomes.ncols());
        assert_eq!(time_labels.len(), t0 + t1);
        for (idx, &v) in outcomes.iter().enumerate() {
            if !v.is_finite() {
                return Err(PanelError::NonNumericCell {
                    row: idx % outcomes.nrows(),
                    col: idx / outcomes.nrows(),
                });
            }
        }
        Ok(PanelData {
            outcomes,
            t0,
            t1,
            unit_labels,
            time_labels,
        })
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn t1(&self) -> usize {
        self.t1
    }

    /// Number of control units.
    pub fn num_controls(&self) -> usize {
        self.outcomes.ncols() - 1
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    /// Treated outcome at period `t`.
    pub fn treated(&self, t: usize) -> f64 {
        self.outcomes[(t, 0)]
    }

    /// Treated pre-treatment series.
    pub fn treated_pre(&self) -> Vec<f64> {
        (0..self.t0).map(|t| self.outcomes[(t, 0)]).collect()
    }

    /// Control outcomes at period `t`, length J.
    pub fn controls_at(&self, t: usize) -> Vec<f64> {
        (1..self.outcomes.ncols())
            .map(|j| self.outcomes[(t, j)])
            .collect()
    }

    /// `w' y_t` over the controls at period `t`.
    pub fn combine(&self, w: &[f64], t: usize) -> f64 {
        w.iter()
            .enumerate()
            .map(|(j, &wj)| wj * self.outcomes[(t, j + 1)])
            .sum()
    }

    /// Restricts the panel to a subset of pre-treatment rows, which become the
    /// new pre-treatment window. Used by cross-validation.
    pub fn subset_pre(&self, rows: &[usize]) -> Result<PanelData, PanelError> {
        let ncols = self.outcomes.ncols();
        let mut m = DMatrix::zeros(rows.len(), ncols);
        let mut times = Vec::with_capacity(rows.len());
        for (i, &t) in rows.iter().enumerate() {
            assert!(t < self.t0);
            for j in 0..ncols {
                m[(i, j)] = self.outcomes[(t, j)];
            }
            times.push(self.time_labels[t].clone());
        }
        PanelData::new(m, rows.len(), 0, self.unit_labels.to_vec(), times)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<f64>> = (0..self.outcomes.nrows())
            .map(|t| (0..self.outcomes.ncols()).map(|j| self.outcomes[(t, j)]).collect())
            .collect();
        serde_json::json!({
            "t0": self.t0,
            "t1": self.t1,
            "units": self.unit_labels,
            "times": self.time_labels,
            "outcomes": rows,
        })
    }
}

/// Loads a wide-format CSV (`time,<unit1>,<unit2>,...`) and splits it at
/// `treatment_time_label`, which names the first treated period.
pub fn load_panel_csv(
    path: &Path,
    treated_label: &str,
    treatment_time_label: &str,
) -> Result<PanelData, PanelError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let units: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let treated_col = units
        .iter()
        .position(|u| u == treated_label)
        .ok_or_else(|| PanelError::MissingUnit(treated_label.to_string()))?;

    let mut time_labels = Vec::new();
    let mut raw_rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let time = record.get(0).unwrap_or("").to_string();
        let mut row = Vec::with_capacity(units.len());
        for (c, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| PanelError::NonNumericCell { row: r, col: c })?;
            if !v.is_finite() {
                return Err(PanelError::NonNumericCell { row: r, col: c });
            }
            row.push(v);
        }
        if row.len() != units.len() {
            return Err(PanelError::NonNumericCell { row: r, col: row.len() });
        }
        time_labels.push(time);
        raw_rows.push(row);
    }

    let t0 = time_labels
        .iter()
        .position(|t| t == treatment_time_label)
        .ok_or_else(|| PanelError::MissingTime(treatment_time_label.to_string()))?;
    if t0 < 2 {
        return Err(PanelError::TooFewPeriods { needed: 2, got: t0 });
    }
    let t1 = time_labels.len() - t0;

    // Move the treated unit to column 0.
    let mut order: Vec<usize> = vec![treated_col];
    order.extend((0..units.len()).filter(|&j| j != treated_col));
    let unit_labels: Vec<String> = order.iter().map(|&j| units[j].clone()).collect();
    let mut m = DMatrix::zeros(time_labels.len(), units.len());
    for (t, row) in raw_rows.iter().enumerate() {
        for (jj, &j) in order.iter().enumerate() {
            m[(t, jj)] = row[j];
        }
    }
    PanelData::new(m, t0, t1, unit_labels, time_labels)
}

/// Year-over-year style growth transform: entry `(t, j)` becomes
/// `y_{j,t} / y_{j,t-lag} - 1`, dropping the first `lag` periods.
pub fn yoy_growth(panel: &PanelData, lag: usize) -> Result<PanelData, PanelError> {
    assert!(lag >= 1, "lag must be positive");
    let total = panel.t0 + panel.t1;
    if total < lag + 1 || panel.t0 <= lag {
        return Err(PanelError::TooFewPeriods {
            needed: lag + 1,
            got: total.min(panel.t0),
        });
    }
    let ncols = panel.outcomes.ncols();
    let mut m = DMatrix::zeros(total - lag, ncols);
    for t in lag..total {
        for j in 0..ncols {
            let base = panel.outcomes[(t - lag, j)];
            if base == 0.0 {
                return Err(PanelError::ZeroBase { row: t - lag, col: j });
            }
            m[(t - lag, j)] = panel.outcomes[(t, j)] / base - 1.0;
        }
    }
    let time_labels = panel.time_labels[lag..].to_vec();
    PanelData::new(
        m,
        panel.t0 - lag,
        panel.t1,
        panel.unit_labels.to_vec(),
        time_labels,
    )
}

fn pre_treatment_sd(panel: &PanelData, col: usize) -> f64 {
    let t0 = panel.t0 as f64;
    let mean: f64 = (0..panel.t0).map(|t| panel.outcomes[(t, col)]).sum::<f64>() / t0;
    let ss: f64 = (0..panel.t0)
        .map(|t| {
            let d = panel.outcomes[(t, col)] - mean;
            d * d
        })
        .sum();
    (ss / (t0 - 1.0)).sqrt()
}

/// Divides each column by its pre-treatment sample standard deviation.
/// Means are kept; only scales change.
pub fn standardize(panel: &PanelData) -> Result<(PanelData, ScaleVector), PanelError> {
    let ncols = panel.outcomes.ncols();
    let mut sds = Vec::with_capacity(ncols);
    for j in 0..ncols {
        let sd = pre_treatment_sd(panel, j);
        if sd <= 0.0 {
            return Err(PanelError::DegenerateSeries(panel.unit_labels[j].clone()));
        }
        sds.push(sd);
    }
    let mut m = panel.outcomes.clone();
    for j in 0..ncols {
        for t in 0..m.nrows() {
            m[(t, j)] /= sds[j];
        }
    }
    let scaled = PanelData::new(
        m,
        panel.t0,
        panel.t1,
        panel.unit_labels.to_vec(),
        panel.time_labels.to_vec(),
    )?;
    Ok((
        scaled,
        ScaleVector {
            sigma0: sds[0],
            sigma: sds[1..].to_vec(),
        },
    ))
}

/// Maps standardized weights back to the raw scale:
/// `w_j = sigma0 * w^s_j / sigma_j`. Applying the result to raw outcomes
/// reproduces the standardized predictions.
pub fn destandardize_weights(w_s: &[f64], scales: &ScaleVector) -> Result<Vec<f64>, PanelError> {
    if w_s.len() != scales.sigma.len() {
        return Err(PanelError::DimensionMismatch {
            expected: scales.sigma.len(),
            got: w_s.len(),
        });
    }
    Ok(w_s
        .iter()
        .zip(&scales.sigma)
        .map(|(&w, &s)| scales.sigma0 * w / s)
        .collect())
}

/// Rebuilds post-treatment level counterfactuals from growth predictions:
/// `yhat_t = (1 + ghat_t) * z_{t-lag}` where the base `z` is observed before
/// treatment and reconstructed after it.
pub fn reconstruct_levels(
    growth_predictions: &[f64],
    observed_levels: &[f64],
    t0: usize,
    lag: usize,
) -> Result<Vec<f64>, PanelError> {
    assert!(lag >= 1, "lag must be positive");
    if t0 < lag {
        return Err(PanelError::InsufficientHistory { t0, lag });
    }
    let t1 = growth_predictions.len();
    if observed_levels.len() < t0 + t1 {
        return Err(PanelError::DimensionMismatch {
            expected: t0 + t1,
            got: observed_levels.len(),
        });
    }
    let mut levels = Vec::with_capacity(t1);
    for (i, &g) in growth_predictions.iter().enumerate() {
        let t = t0 + i; // absolute period index
        let base = if t >= lag && t - lag < t0 {
            observed_levels[t - lag]
        } else {
            levels[t - lag - t0]
        };
        levels.push((1.0 + g) * base);
    }
    Ok(levels)
}
