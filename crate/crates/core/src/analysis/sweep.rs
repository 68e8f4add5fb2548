use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cost::{window_total, LayerDims, WindowCount};
use crate::attention::Span;
use crate::error::{Error, Result};

/// Least-squares polynomial with coefficients in ascending powers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub degree: usize,
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

impl Fit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Fit> {
    if x.len() != y.len() || x.len() <= degree {
        return Err(Error::Domain(format!(
            "a degree-{degree} fit needs more than {degree} paired points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    // Scaling x to [-1, 1] keeps the Vandermonde system well conditioned.
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, k| (x[i] / scale).powi(k as i32));
    let b = DVector::from_column_slice(y);
    let solution = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Evaluation(format!("polynomial fit failed: {e}")))?;
    let coefficients: Vec<f64> = solution
        .iter()
        .enumerate()
        .map(|(k, c)| c / scale.powi(k as i32))
        .collect();
    let fitted = &a * &solution;
    let residuals: Vec<f64> = y.iter().zip(fitted.iter()).map(|(y, f)| y - f).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let total: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let unexplained: f64 = residuals.iter().map(|r| r * r).sum();
    let r_squared = if total == 0.0 { 1.0 } else { 1.0 - unexplained / total };
    Ok(Fit {
        degree,
        coefficients,
        r_squared,
        residuals,
    })
}

/// One measured or counted series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub label: String,
    pub variable: String,
    pub unit: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Interquartile range per point, for timings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<Vec<f64>>,
    /// Linear and quadratic fits.
    pub fits: Vec<Fit>,
    /// Indices `i` with `y[i] < y[i - 1]`.
    #[serde(default)]
    pub monotone_violations: Vec<usize>,
}

impl SweepResult {
    pub fn new(label: &str, variable: &str, unit: &str, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if y.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain(format!("{label}: sweep values must be positive")));
        }
        let fits = (1..=2)
            .filter(|&d| x.len() > d)
            .map(|d| polyfit(&x, &y, d))
            .collect::<Result<Vec<_>>>()?;
        let monotone_violations = (1..y.len()).filter(|&i| y[i] < y[i - 1]).collect();
        Ok(SweepResult {
            label: label.into(),
            variable: variable.into(),
            unit: unit.into(),
            x,
            y,
            spread: None,
            fits,
            monotone_violations,
        })
    }

    pub fn fit(&self, degree: usize) -> Option<&Fit> {
        self.fits.iter().find(|f| f.degree == degree)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "# {} ({} vs {})\n{:>8}  {:>16}",
            self.label, self.unit, self.variable, self.variable, self.unit
        );
        if self.spread.is_some() {
            out.push_str(&format!("  {:>12}", "IQR"));
        }
        out.push('\n');
        for (i, (x, y)) in self.x.iter().zip(&self.y).enumerate() {
            out.push_str(&format!("{x:>8}  {y:>16.1}"));
            if let Some(s) = &self.spread {
                out.push_str(&format!("  {:>12.1}", s[i]));
            }
            out.push('\n');
        }
        for f in &self.fits {
            out.push_str(&format!("# degree {} fit: R^2 = {:.6}\n", f.degree, f.r_squared));
        }
        if !self.monotone_violations.is_empty() {
            out.push_str(&format!("# non-monotone at points {:?}\n", self.monotone_violations));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{}", self.variable, self.unit);
        if self.spread.is_some() {
            out.push_str(",iqr");
        }
        out.push('\n');
        for (i, (x, y)) in self.x.iter().zip(&self.y).enumerate() {
            out.push_str(&format!("{x},{y}"));
            if let Some(s) = &self.spread {
                out.push_str(&format!(",{}", s[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Counted cost of one axial layer and one 2D local layer over a span list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanSweep {
    pub resolution: usize,
    pub count: WindowCount,
    pub layer: LayerDims,
    pub axial: SweepResult,
    pub local_2d: SweepResult,
}

/// Analytic M-Adds of a `resolution x resolution` layer for each span `m`.
pub fn span_sweep(layer: &LayerDims, spans: &[usize], resolution: usize, count: WindowCount) -> Result<SpanSweep> {
    if spans.is_empty() {
        return Err(Error::Config("span sweep needs at least one span".into()));
    }
    for &m in spans {
        Span::Local(m).validate()?;
        if m > resolution {
            return Err(Error::Config(format!(
                "span {m} exceeds the {resolution}-position axis"
            )));
        }
    }
    let len = resolution as u64;
    let positions = len * len;
    let mut axial = Vec::new();
    let mut planar = Vec::new();
    for &m in spans {
        let per_line = window_total(resolution, Span::Local(m), count);
        axial.push(layer.madds(positions, len * per_line) as f64);
        planar.push(layer.madds(positions, per_line * per_line) as f64);
    }
    let x: Vec<f64> = spans.iter().map(|&m| m as f64).collect();
    Ok(SpanSweep {
        resolution,
        count,
        layer: *layer,
        axial: SweepResult::new("axial attention layer", "span", "M-Adds", x.clone(), axial)?,
        local_2d: SweepResult::new("2D local attention layer", "span", "M-Adds", x, planar)?,
    })
}
