//! Curve files, run manifests, report documents, and CSV/SVG emission.
//!
//! Everything written here is byte-deterministic: maps are sorted,
//! floats are rounded to 9 significant digits before JSON encoding, and
//! no timestamps are embedded. Curve files carry the manifest of the
//! run that produced them; reports carry digests of their inputs so a
//! reader can verify provenance by rehashing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::detect::{
    ed_from_cosine, ed_from_kl, ed_from_overlap, DepthEstimate, DetectorConfig, DetectorMethod,
};
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A file referenced by a manifest: the path as given plus the SHA-256
/// of its bytes (64 hex characters).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("hashing {}", path.display()), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.to_string_lossy().into_owned(),
        sha256: sha256_hex(path)?,
    })
}

/// Identity of one probe run: inputs, probe list, parameters, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub model: FileDigest,
    pub corpus: FileDigest,
    pub probes: Vec<String>,
    pub parameters: BTreeMap<String, Value>,
}

/// Aggregated per-layer curves for one probe over one corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveSet {
    pub probe: String,
    pub dataset: String,
    pub n_layers: usize,
    pub prompts: usize,
    /// Series name → one value per layer index.
    pub series: BTreeMap<String, Vec<f64>>,
    /// Optional per-prompt curves (series name → one row per prompt).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_prompt: Option<BTreeMap<String, Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

// ---------------------------------------------------------------------------
// Canonical JSON
// ---------------------------------------------------------------------------

fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let exp = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(8 - exp);
    (x * factor).round() / factor
}

fn round_value(v: Value) -> Value {
    match v {
        Value::Number(n) => {
            if n.is_f64() {
                let x = round_sig9(n.as_f64().expect("checked"));
                serde_json::Number::from_f64(x)
                    .map(Value::Number)
                    .unwrap_or(Value::Null)
            } else {
                Value::Number(n)
            }
        }
        Value::Array(items) => Value::Array(items.into_iter().map(round_value).collect()),
        Value::Object(map) => {
            Value::Object(map.into_iter().map(|(k, v)| (k, round_value(v))).collect())
        }
        other => other,
    }
}

/// Serializes with sorted keys and floats rounded to 9 significant
/// digits, so identical inputs give identical bytes.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = serde_json::to_string_pretty(&round_value(v))?;
    out.push('\n');
    Ok(out)
}

pub fn write_canonical_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let s = to_canonical_json(value)?;
    std::fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

// ---------------------------------------------------------------------------
// Curve file I/O
// ---------------------------------------------------------------------------

pub fn save_curves(curves: &CurveSet, path: &Path) -> Result<()> {
    write_canonical_json(curves, path)
}

/// Loads curve sets from a file; `.json` holds one set, `.csv` may hold
/// several (ungrouped rows lose dataset and prompt metadata).
pub fn load_curves(path: &Path) -> Result<Vec<CurveSet>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "json" => {
            let content = std::fs::read_to_string(path)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let cs: CurveSet = serde_json::from_str(&content)
                .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
            Ok(vec![cs])
        }
        "csv" => {
            let content = std::fs::read_to_string(path)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            curves_from_csv(&content)
        }
        other => Err(Error::input(format!(
            "unsupported curve file extension {other:?} for {}",
            path.display()
        ))),
    }
}

/// Fixed column order: probe, series, layer, value. Values use the
/// shortest round-trip float rendering, so parsing them back is
/// lossless.
pub fn curves_to_csv(sets: &[CurveSet]) -> String {
    let mut out = String::from("probe,series,layer,value\n");
    for cs in sets {
        for (series, values) in &cs.series {
            for (layer, v) in values.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", cs.probe, series, layer, v));
            }
        }
    }
    out
}

pub fn curves_from_csv(content: &str) -> Result<Vec<CurveSet>> {
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<(usize, f64)>>> = BTreeMap::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 {
            if line.trim() != "probe,series,layer,value" {
                return Err(Error::format(format!(
                    "line 1: expected header probe,series,layer,value, got {line:?}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(format!(
                "line {line_no}: expected 4 fields, got {}",
                fields.len()
            )));
        }
        let layer: usize = fields[2]
            .parse()
            .map_err(|e| Error::format(format!("line {line_no}: bad layer: {e}")))?;
        let value: f64 = fields[3]
            .parse()
            .map_err(|e| Error::format(format!("line {line_no}: bad value: {e}")))?;
        grouped
            .entry(fields[0].to_string())
            .or_default()
            .entry(fields[1].to_string())
            .or_default()
            .push((layer, value));
    }

    let mut out = Vec::new();
    for (probe, series_map) in grouped {
        let mut series = BTreeMap::new();
        let mut n_layers = 0;
        for (name, mut rows) in series_map {
            rows.sort_by_key(|&(l, _)| l);
            for (i, &(l, _)) in rows.iter().enumerate() {
                if l != i {
                    return Err(Error::format(format!(
                        "probe {probe} series {name}: layer indices are not contiguous"
                    )));
                }
            }
            n_layers = n_layers.max(rows.len());
            series.insert(name, rows.into_iter().map(|(_, v)| v).collect());
        }
        out.push(CurveSet {
            probe,
            dataset: String::new(),
            n_layers,
            prompts: 0,
            series,
            per_prompt: None,
            manifest: None,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Report document
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectManifest {
    pub tool_version: String,
    /// Digests of the curve files this report was built from.
    pub inputs: Vec<FileDigest>,
    /// Manifest of the producing run, when the inputs agree on one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<RunManifest>,
}

/// One cell of the method × dataset table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthCell {
    pub method: DetectorMethod,
    pub dataset: String,
    pub ed: usize,
    pub ratio: f64,
    pub n_layers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<String>,
}

impl DepthCell {
    fn from_estimate(e: &DepthEstimate, dataset: &str) -> Self {
        DepthCell {
            method: e.method,
            dataset: dataset.to_string(),
            ed: e.ed,
            ratio: e.ratio,
            n_layers: e.n_layers,
            degenerate: e.degenerate.map(|d| {
                serde_json::to_value(d)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default()
            }),
        }
    }
}

/// Per-prompt spread of an estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispersionCell {
    pub method: DetectorMethod,
    pub dataset: String,
    pub prompts: usize,
    pub min_ed: usize,
    pub max_ed: usize,
    pub mean_ed: f64,
    pub stddev_ed: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDocument {
    pub manifest: DetectManifest,
    pub curves: Vec<CurveSet>,
    pub table: Vec<DepthCell>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dispersion: Option<Vec<DispersionCell>>,
}

fn estimate_for(
    method: DetectorMethod,
    curve: &[f64],
    n_layers: usize,
    cfg: &DetectorConfig,
) -> Result<DepthEstimate> {
    match method {
        DetectorMethod::CosineTransition => ed_from_cosine(curve, n_layers),
        DetectorMethod::KlHalfMax => ed_from_kl(curve, n_layers, cfg),
        DetectorMethod::OverlapThreshold => ed_from_overlap(curve, n_layers, cfg),
    }
}

/// Which series each detector reads: (method, probe, series).
const DETECTOR_INPUTS: [(DetectorMethod, &str, &str); 3] = [
    (DetectorMethod::CosineTransition, "cosine", "avg"),
    (DetectorMethod::KlHalfMax, "lens", "kl"),
    (DetectorMethod::OverlapThreshold, "lens", "overlap"),
];

/// Builds the method × dataset table from curve sets. Cells whose input
/// curves are missing stay absent. Fails with an insufficient-data
/// error when no detector has any input.
pub fn build_report(
    curve_sets: Vec<CurveSet>,
    cfg: &DetectorConfig,
    inputs: Vec<FileDigest>,
    with_dispersion: bool,
) -> Result<ReportDocument> {
    let mut table = Vec::new();
    let mut dispersion = Vec::new();
    for cs in &curve_sets {
        for (method, probe, series) in DETECTOR_INPUTS {
            if cs.probe != probe {
                continue;
            }
            let Some(curve) = cs.series.get(series) else { continue };
            if curve.is_empty() {
                continue;
            }
            let estimate = estimate_for(method, curve, cs.n_layers, cfg)?;
            table.push(DepthCell::from_estimate(&estimate, &cs.dataset));

            if with_dispersion {
                if let Some(rows) = cs.per_prompt.as_ref().and_then(|pp| pp.get(series)) {
                    let mut eds = Vec::with_capacity(rows.len());
                    for row in rows {
                        eds.push(estimate_for(method, row, cs.n_layers, cfg)?.ed);
                    }
                    if !eds.is_empty() {
                        let n = eds.len() as f64;
                        let mean = eds.iter().map(|&e| e as f64).sum::<f64>() / n;
                        let var =
                            eds.iter().map(|&e| (e as f64 - mean).powi(2)).sum::<f64>() / n;
                        dispersion.push(DispersionCell {
                            method,
                            dataset: cs.dataset.clone(),
                            prompts: eds.len(),
                            min_ed: *eds.iter().min().expect("nonempty"),
                            max_ed: *eds.iter().max().expect("nonempty"),
                            mean_ed: mean,
                            stddev_ed: var.sqrt(),
                        });
                    }
                }
            }
        }
    }
    if table.is_empty() {
        return Err(Error::Insufficient(
            "no usable detector input curves found".to_string(),
        ));
    }
    table.sort_by(|a, b| {
        a.method
            .name()
            .cmp(b.method.name())
            .then(a.dataset.cmp(&b.dataset))
    });

    // Carry the producing run's manifest through when all inputs agree.
    let mut source: Option<RunManifest> = None;
    let mut consistent = true;
    for cs in &curve_sets {
        if let Some(m) = &cs.manifest {
            match &source {
                None => source = Some(m.clone()),
                Some(existing) if existing == m => {}
                Some(_) => consistent = false,
            }
        }
    }
    Ok(ReportDocument {
        manifest: DetectManifest {
            tool_version: TOOL_VERSION.to_string(),
            inputs,
            source: if consistent { source } else { None },
        },
        curves: curve_sets,
        table,
        dispersion: if with_dispersion && !dispersion.is_empty() {
            Some(dispersion)
        } else {
            None
        },
    })
}

pub fn load_report(path: &Path) -> Result<ReportDocument> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading report {}", path.display()), e))?;
    serde_json::from_str(&content).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Fixed-width text rendering of the table, ratios at two decimals.
pub fn render_table(report: &ReportDocument) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:<16} {:>6} {:>7} {:>8}  {}\n",
        "method", "dataset", "ed", "ratio", "layers", "note"
    ));
    for cell in &report.table {
        out.push_str(&format!(
            "{:<20} {:<16} {:>6} {:>7} {:>8}  {}\n",
            cell.method.name(),
            cell.dataset,
            cell.ed,
            crate::detect::format_ratio(cell.ratio),
            cell.n_layers,
            cell.degenerate.as_deref().unwrap_or("-"),
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// SVG charts
// ---------------------------------------------------------------------------

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 500.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 30.0;
const MARGIN_T: f64 = 50.0;
const MARGIN_B: f64 = 60.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static line chart for one probe's curves: layer index on the x axis,
/// metric value on the y axis, one polyline per series. Empty curve
/// sets render axes plus a "no data" annotation.
pub fn render_svg(cs: &CurveSet) -> String {
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let title = xml_escape(&format!("{} ({})", cs.probe, cs.dataset));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"28\" font-size=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\">{title}</text>\n",
        SVG_W / 2.0
    ));
    // Axes.
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        SVG_H - MARGIN_B,
        SVG_W - MARGIN_R,
        SVG_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        SVG_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\" font-family=\"sans-serif\">layer index</text>\n",
        MARGIN_L + plot_w / 2.0,
        SVG_H - 15.0
    ));
    svg.push_str(&format!(
        "  <text x=\"18\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 18 {})\">value</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));

    let nonempty: Vec<(&String, &Vec<f64>)> =
        cs.series.iter().filter(|(_, v)| !v.is_empty()).collect();
    if nonempty.is_empty() || cs.n_layers == 0 {
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\" fill=\"#888\">no data</text>\n",
            MARGIN_L + plot_w / 2.0,
            MARGIN_T + plot_h / 2.0
        ));
        svg.push_str("</svg>\n");
        return svg;
    }

    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut x_max = 1usize;
    for (_, values) in &nonempty {
        for &v in *values {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
        x_max = x_max.max(values.len().saturating_sub(1));
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    let (y_min, y_max) = (y_min - pad, y_max + pad);

    let x_of = |l: usize| MARGIN_L + plot_w * l as f64 / x_max.max(1) as f64;
    let y_of = |v: f64| MARGIN_T + plot_h * (1.0 - (v - y_min) / (y_max - y_min));

    // Ticks.
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{y}\" x2=\"{MARGIN_L}\" y2=\"{y}\" stroke=\"black\"/>\n",
            MARGIN_L - 5.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">{v:.3}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0
        ));
    }
    let x_ticks = x_max.min(8).max(1);
    for i in 0..=x_ticks {
        let l = i * x_max / x_ticks;
        let x = x_of(l);
        svg.push_str(&format!(
            "  <line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\n",
            SVG_H - MARGIN_B,
            SVG_H - MARGIN_B + 5.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{x}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">{l}</text>\n",
            SVG_H - MARGIN_B + 18.0
        ));
    }

    for (si, (name, values)) in nonempty.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(l, &v)| format!("{:.2},{:.2}", x_of(l), y_of(v)))
            .collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = MARGIN_T + 16.0 * si as f64 + 6.0;
        svg.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            SVG_W - MARGIN_R - 120.0,
            SVG_W - MARGIN_R - 96.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
            SVG_W - MARGIN_R - 90.0,
            ly + 4.0,
            xml_escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
