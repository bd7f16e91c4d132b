//! Test-set reports for trained runs and comparison tables across runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{load_run, SystemQuantizer, TrainedSystem};

/// File a CLI training run writes its wall-clock time to.
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseReport {
    pub run: String,
    pub method: String,
    pub latent_dim: usize,
    pub bits: u32,
    pub nmse_db: f64,
    /// Same decoder fed the unquantized latent.
    pub nmse_unquantized_db: f64,
    /// Mean squared latent quantization error per output.
    pub quant_loss: f64,
    /// Feedback bits per channel; 0 without a quantizer.
    pub total_bits: u32,
    /// Number of outputs per bit count (scalar quantizers).
    pub bit_histogram: BTreeMap<u32, usize>,
    pub train_seconds: Option<f64>,
}

pub fn evaluate(sys: &TrainedSystem, test: &[Vec<f64>], run: &str) -> Result<NmseReport> {
    let latents = sys.latents(test)?;
    let q = sys.quantizer.as_latent();
    let mut sq = 0.0;
    for z in &latents {
        let zq = q.quantize_latent(z)?;
        sq += zq.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let m = sys.autoencoder.latent_dim();
    let mut bit_histogram = BTreeMap::new();
    if let SystemQuantizer::Scalar { allocation, .. } = &sys.quantizer {
        for &b in allocation.bits() {
            *bit_histogram.entry(b).or_insert(0) += 1;
        }
    }
    let total_bits = match sys.quantizer {
        SystemQuantizer::None => 0,
        _ => sys.total_bits()?,
    };
    Ok(NmseReport {
        run: run.to_string(),
        method: sys.method.tag().into(),
        latent_dim: m,
        bits: sys.config.bits,
        nmse_db: sys.nmse_db(test)?,
        nmse_unquantized_db: sys.nmse_unquantized_db(test)?,
        quant_loss: sq / (latents.len() * m) as f64,
        total_bits,
        bit_histogram,
        train_seconds: None,
    })
}

/// Loads a run directory and evaluates it on `test`.
pub fn evaluate_run(dir: impl AsRef<Path>, test: &[Vec<f64>]) -> Result<NmseReport> {
    let dir = dir.as_ref();
    let sys = load_run(dir)?;
    let mut report = evaluate(&sys, test, &dir.display().to_string())?;
    report.train_seconds = read_timing(dir)?.map(|t| t.train_seconds);
    Ok(report)
}

pub fn write_timing(dir: impl AsRef<Path>, t: &Timing) -> Result<()> {
    let json = serde_json::to_string_pretty(t).expect("timing serializes");
    fs::write(dir.as_ref().join(TIMING_FILE), json + "\n")?;
    Ok(())
}

fn read_timing(dir: &Path) -> Result<Option<Timing>> {
    let path = dir.join(TIMING_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let t = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    Ok(Some(t))
}

/// One report per run directory, in the order given.
pub fn compare<P: AsRef<Path>>(dirs: &[P], test: &[Vec<f64>]) -> Result<Vec<NmseReport>> {
    dirs.iter().map(|d| evaluate_run(d, test)).collect()
}

pub const REPORT_CSV_HEADER: &str =
    "run,method,M,B,nmse_db,nmse_unquantized_db,quant_loss,total_bits,bit_histogram,train_seconds";

/// Table with dB values at two decimals; the histogram is `bits:count` pairs.
pub fn reports_csv(reports: &[NmseReport]) -> String {
    let mut s = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        let hist: Vec<String> = r.bit_histogram.iter().map(|(b, n)| format!("{b}:{n}")).collect();
        let secs = r.train_seconds.map(|t| format!("{t:.2}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{:.2},{:.2},{:e},{},{},{}\n",
            r.run,
            r.method,
            r.latent_dim,
            r.bits,
            r.nmse_db,
            r.nmse_unquantized_db,
            r.quant_loss,
            r.total_bits,
            hist.join(" "),
            secs
        ));
    }
    s
}

pub fn reports_json(reports: &[NmseReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize") + "\n"
}
