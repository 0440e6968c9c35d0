//! Number-of-Clicks evaluation.
//!
//! Each sample starts from an empty prediction. A click is simulated against
//! the current binarized prediction, the backend predicts from all clicks so
//! far, and IoU is recorded; NoC@t is the first click count whose IoU reaches
//! t, capped (and counted as a failure) at `max_clicks`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clicks::{simulate_next_click, Click};
use crate::dataset::{load_pairs, LabeledImage};
use crate::error::{Error, Result};
use crate::mask::{iou, GrayF64, Mask2D};
use crate::model::{predict_padded, Weights};

/// Maps an image and its clicks to a foreground probability per pixel.
pub trait Backend: Sync {
    fn name(&self) -> &str;
    fn predict(&self, image: &GrayF64, clicks: &[Click]) -> Result<Vec<f64>>;
}

pub struct ModelBackend {
    pub weights: Weights,
}

impl Backend for ModelBackend {
    fn name(&self) -> &str {
        "model"
    }

    fn predict(&self, image: &GrayF64, clicks: &[Click]) -> Result<Vec<f64>> {
        predict_padded(&self.weights, image, clicks)
    }
}

/// Always predicts background.
pub struct EmptyBackend;

impl Backend for EmptyBackend {
    fn name(&self) -> &str {
        "empty"
    }

    fn predict(&self, image: &GrayF64, _clicks: &[Click]) -> Result<Vec<f64>> {
        Ok(vec![0.0; image.height * image.width])
    }
}

/// Returns the ground truth of whichever known image it is shown.
pub struct OracleBackend {
    truth: HashMap<u64, Mask2D>,
}

fn image_key(image: &GrayF64) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    (image.height, image.width).hash(&mut h);
    for v in &image.data {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

impl OracleBackend {
    pub fn new(samples: &[LabeledImage]) -> Self {
        OracleBackend {
            truth: samples.iter().map(|s| (image_key(&s.image), s.gt.clone())).collect(),
        }
    }
}

impl Backend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict(&self, image: &GrayF64, _clicks: &[Click]) -> Result<Vec<f64>> {
        self.truth
            .get(&image_key(image))
            .map(Mask2D::to_f64)
            .ok_or_else(|| Error::InvalidConfig("oracle backend shown an unknown image".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Ascending IoU targets.
    pub thresholds: Vec<f64>,
    pub max_clicks: usize,
    pub binarize: f64,
    /// Measure per-click latency. Off makes reports byte-reproducible.
    pub timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.80, 0.85, 0.90],
            max_clicks: 20,
            binarize: 0.5,
            timing: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfig(format!(
                "thresholds must be non-empty and ascending, got {:?}",
                self.thresholds
            )));
        }
        if self.max_clicks == 0 {
            return Err(Error::InvalidConfig("max_clicks must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoCRecord {
    pub sample_id: String,
    pub thresholds: Vec<f64>,
    pub noc_at: Vec<usize>,
    pub failed_at: Vec<bool>,
    pub iou_trace: Vec<f64>,
    pub spc_ms: f64,
}

impl NoCRecord {
    pub fn noc(&self, threshold: f64) -> Option<usize> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.noc_at[i])
    }
}

pub fn run_sample(
    backend: &dyn Backend,
    sample_id: &str,
    image: &GrayF64,
    gt: &Mask2D,
    config: &EvalConfig,
) -> Result<NoCRecord> {
    config.validate()?;
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let (h, w) = gt.dims();
    if (image.height, image.width) != (h, w) {
        return Err(Error::DimMismatch(format!(
            "image {}x{} vs mask {h}x{w}",
            image.height, image.width
        )));
    }
    let top = *config.thresholds.last().expect("validated non-empty");
    let mut pred = Mask2D::new(h, w);
    let mut clicks = Vec::new();
    let mut trace = Vec::new();
    let mut elapsed_ms = 0.0;
    for n in 1..=config.max_clicks {
        let click = match simulate_next_click(&pred, gt, n - 1) {
            Ok(c) => c,
            Err(Error::NoMisclassifiedPixels) => break,
            Err(e) => return Err(e),
        };
        clicks.push(click);
        let start = config.timing.then(Instant::now);
        let probs = backend.predict(image, &clicks)?;
        if let Some(s) = start {
            elapsed_ms += s.elapsed().as_secs_f64() * 1e3;
        }
        pred = Mask2D::threshold(h, w, &probs, config.binarize)?;
        trace.push(iou(&pred, gt)?);
        if trace[trace.len() - 1] >= top {
            break;
        }
    }
    let mut noc_at = Vec::with_capacity(config.thresholds.len());
    let mut failed_at = Vec::with_capacity(config.thresholds.len());
    for &t in &config.thresholds {
        match trace.iter().position(|&v| v >= t) {
            Some(i) => {
                noc_at.push(i + 1);
                failed_at.push(false);
            }
            None => {
                noc_at.push(config.max_clicks);
                failed_at.push(true);
            }
        }
    }
    Ok(NoCRecord {
        sample_id: sample_id.to_string(),
        thresholds: config.thresholds.clone(),
        noc_at,
        failed_at,
        spc_ms: if trace.is_empty() {
            0.0
        } else {
            elapsed_ms / trace.len() as f64
        },
        iou_trace: trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoCReport {
    pub backend: String,
    pub sample_count: usize,
    pub max_clicks: usize,
    pub thresholds: Vec<f64>,
    pub mean_noc: Vec<f64>,
    /// Population standard deviation.
    pub std_noc: Vec<f64>,
    /// Samples that never reached the threshold (the "≥max" column).
    pub failures: Vec<usize>,
    pub mean_spc_ms: f64,
    pub records: Vec<NoCRecord>,
}

impl NoCReport {
    fn index(&self, threshold: f64) -> Option<usize> {
        self.thresholds.iter().position(|&t| t == threshold)
    }

    pub fn mean(&self, threshold: f64) -> Option<f64> {
        self.index(threshold).map(|i| self.mean_noc[i])
    }

    pub fn failures_at(&self, threshold: f64) -> Option<usize> {
        self.index(threshold).map(|i| self.failures[i])
    }
}

pub fn aggregate(backend: &str, records: Vec<NoCRecord>, config: &EvalConfig) -> Result<NoCReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("NoC records"));
    }
    let k = config.thresholds.len();
    if let Some(r) = records.iter().find(|r| r.noc_at.len() != k) {
        return Err(Error::DimMismatch(format!(
            "{}: {} thresholds, expected {k}",
            r.sample_id,
            r.noc_at.len()
        )));
    }
    let n = records.len() as f64;
    let mut mean_noc = Vec::with_capacity(k);
    let mut std_noc = Vec::with_capacity(k);
    let mut failures = Vec::with_capacity(k);
    for i in 0..k {
        let m = records.iter().map(|r| r.noc_at[i] as f64).sum::<f64>() / n;
        let var = records.iter().map(|r| (r.noc_at[i] as f64 - m).powi(2)).sum::<f64>() / n;
        mean_noc.push(m);
        std_noc.push(var.sqrt());
        failures.push(records.iter().filter(|r| r.failed_at[i]).count());
    }
    Ok(NoCReport {
        backend: backend.to_string(),
        sample_count: records.len(),
        max_clicks: config.max_clicks,
        thresholds: config.thresholds.clone(),
        mean_noc,
        std_noc,
        failures,
        mean_spc_ms: records.iter().map(|r| r.spc_ms).sum::<f64>() / n,
        records,
    })
}

/// Runs every sample (in parallel) and aggregates in input order.
pub fn evaluate(backend: &dyn Backend, samples: &[LabeledImage], config: &EvalConfig) -> Result<NoCReport> {
    config.validate()?;
    let records = samples
        .par_iter()
        .map(|s| run_sample(backend, &s.id, &s.image, &s.gt, config))
        .collect::<Result<Vec<_>>>()?;
    aggregate(backend.name(), records, config)
}

pub fn evaluate_dataset(backend: &dyn Backend, dir: &Path, config: &EvalConfig) -> Result<NoCReport> {
    evaluate(backend, &load_pairs(dir)?, config)
}

fn pct(t: f64) -> String {
    format!("{}", (t * 100.0).round() as i64)
}

pub fn records_csv(report: &NoCReport) -> String {
    let mut out = String::from("id");
    for &t in &report.thresholds {
        write!(out, ",noc@{}", pct(t)).unwrap();
    }
    for &t in &report.thresholds {
        write!(out, ",failed@{}", pct(t)).unwrap();
    }
    out.push_str(",spc_ms\n");
    for r in &report.records {
        out.push_str(&r.sample_id);
        for n in &r.noc_at {
            write!(out, ",{n}").unwrap();
        }
        for f in &r.failed_at {
            write!(out, ",{}", *f as u8).unwrap();
        }
        writeln!(out, ",{:.3}", r.spc_ms).unwrap();
    }
    out
}

/// Tab-separated header and row: NoC mean(std) per threshold, failure
/// counts, mean seconds-per-click in milliseconds.
pub fn summary_table(report: &NoCReport) -> String {
    let mut head = vec!["backend".to_string()];
    let mut row = vec![report.backend.clone()];
    for (i, &t) in report.thresholds.iter().enumerate() {
        head.push(format!("NoC@{}", pct(t)));
        row.push(format!("{:.2}({:.2})", report.mean_noc[i], report.std_noc[i]));
    }
    for (i, &t) in report.thresholds.iter().enumerate() {
        head.push(format!(">={}@{}", report.max_clicks, pct(t)));
        row.push(report.failures[i].to_string());
    }
    head.push("SPC_ms".into());
    row.push(format!("{:.2}", report.mean_spc_ms));
    format!("{}\n{}\n", head.join("\t"), row.join("\t"))
}

/// Writes the full report to `json` and the per-sample rows next to it
/// with a `.csv` extension.
pub fn write_report(report: &NoCReport, json: &Path) -> Result<()> {
    if let Some(dir) = json.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(json, e))?;
    let csv = json.with_extension("csv");
    fs::write(&csv, records_csv(report)).map_err(|e| Error::io(&csv, e))
}
