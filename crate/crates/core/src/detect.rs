//! Effective-depth detectors over aggregated per-layer curves.
//!
//! Three estimators, each reading one curve of length `n_layers`:
//!
//! - cosine transition: the last layer at which the averaged
//!   contribution-residual cosine is negative, with every later layer
//!   nonnegative;
//! - KL half-max: the first layer where the lens KL drops strictly
//!   below a fraction (default half) of its maximum;
//! - overlap threshold: the first layer where the lens top-5 overlap
//!   strictly exceeds a threshold (default 0.3).
//!
//! Degenerate curves are flagged rather than rejected so batch tables
//! always fill.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorMethod {
    #[serde(rename = "cosine-transition")]
    CosineTransition,
    #[serde(rename = "kl-halfmax")]
    KlHalfMax,
    #[serde(rename = "overlap-threshold")]
    OverlapThreshold,
}

impl DetectorMethod {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorMethod::CosineTransition => "cosine-transition",
            DetectorMethod::KlHalfMax => "kl-halfmax",
            DetectorMethod::OverlapThreshold => "overlap-threshold",
        }
    }
}

/// Why an estimate fell back to a boundary value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegenerateCase {
    /// Cosine curve never goes negative; estimate pinned to layer 0.
    #[serde(rename = "no-negative-phase")]
    NoNegativePhase,
    /// Cosine curve is still negative at the last layer.
    #[serde(rename = "no-transition")]
    NoTransition,
    /// Threshold never crossed; estimate pinned to the last layer.
    #[serde(rename = "no-crossing")]
    NoCrossing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub overlap_threshold: f64,
    pub kl_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            overlap_threshold: 0.3,
            kl_fraction: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("overlap_threshold", self.overlap_threshold),
            ("kl_fraction", self.kl_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::input(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// One effective-depth estimate: a 0-based layer index and the ratio
/// `(ed + 1) / n_layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEstimate {
    pub method: DetectorMethod,
    pub ed: usize,
    pub ratio: f64,
    pub n_layers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<DegenerateCase>,
}

/// The effective-depth ratio `(ed + 1) / n_layers`, in f64.
pub fn ratio(ed: usize, n_layers: usize) -> Result<f64> {
    if n_layers == 0 || ed >= n_layers {
        return Err(Error::input(format!(
            "ed {ed} out of range for {n_layers} layers"
        )));
    }
    Ok((ed + 1) as f64 / n_layers as f64)
}

/// Two-decimal rendering used in human-readable tables.
pub fn format_ratio(r: f64) -> String {
    format!("{r:.2}")
}

fn check_curve(curve: &[f64], n_layers: usize) -> Result<()> {
    if curve.is_empty() {
        return Err(Error::input("empty curve".to_string()));
    }
    if curve.len() != n_layers {
        return Err(Error::input(format!(
            "curve has {} entries, expected {n_layers}",
            curve.len()
        )));
    }
    Ok(())
}

fn estimate(
    method: DetectorMethod,
    ed: usize,
    n_layers: usize,
    parameter: Option<f64>,
    degenerate: Option<DegenerateCase>,
) -> Result<DepthEstimate> {
    Ok(DepthEstimate {
        method,
        ed,
        ratio: ratio(ed, n_layers)?,
        n_layers,
        parameter,
        degenerate,
    })
}

/// Last negative-to-nonnegative crossing of the averaged cosine curve:
/// the final layer with a negative value such that every later layer is
/// nonnegative.
pub fn ed_from_cosine(curve: &[f64], n_layers: usize) -> Result<DepthEstimate> {
    check_curve(curve, n_layers)?;
    let method = DetectorMethod::CosineTransition;
    match curve.iter().rposition(|&v| v < 0.0) {
        None => estimate(method, 0, n_layers, None, Some(DegenerateCase::NoNegativePhase)),
        Some(i) if i == n_layers - 1 => {
            estimate(method, i, n_layers, None, Some(DegenerateCase::NoTransition))
        }
        Some(i) => estimate(method, i, n_layers, None, None),
    }
}

/// First layer where KL drops strictly below `kl_fraction` of the
/// curve's maximum.
pub fn ed_from_kl(curve: &[f64], n_layers: usize, cfg: &DetectorConfig) -> Result<DepthEstimate> {
    check_curve(curve, n_layers)?;
    cfg.validate()?;
    if let Some(bad) = curve.iter().find(|&&v| v < 0.0) {
        return Err(Error::input(format!("KL curve has negative entry {bad}")));
    }
    let method = DetectorMethod::KlHalfMax;
    let max = curve.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return estimate(method, 0, n_layers, Some(cfg.kl_fraction), None);
    }
    let cut = cfg.kl_fraction * max;
    match curve.iter().position(|&v| v < cut) {
        Some(i) => estimate(method, i, n_layers, Some(cfg.kl_fraction), None),
        None => estimate(
            method,
            n_layers - 1,
            n_layers,
            Some(cfg.kl_fraction),
            Some(DegenerateCase::NoCrossing),
        ),
    }
}

/// First layer where the top-5 overlap strictly exceeds the threshold.
pub fn ed_from_overlap(
    curve: &[f64],
    n_layers: usize,
    cfg: &DetectorConfig,
) -> Result<DepthEstimate> {
    check_curve(curve, n_layers)?;
    cfg.validate()?;
    if let Some(bad) = curve.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::input(format!(
            "overlap curve has out-of-range entry {bad}"
        )));
    }
    let method = DetectorMethod::OverlapThreshold;
    match curve.iter().position(|&v| v > cfg.overlap_threshold) {
        Some(i) => estimate(method, i, n_layers, Some(cfg.overlap_threshold), None),
        None => estimate(
            method,
            n_layers - 1,
            n_layers,
            Some(cfg.overlap_threshold),
            Some(DegenerateCase::NoCrossing),
        ),
    }
}
