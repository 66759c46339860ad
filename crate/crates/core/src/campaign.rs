//! Campaign records shared by the fuzzer and the baselines, and their
//! on-disk form: a JSON manifest plus a THM1 tensor blob of fault inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coverage::CoverageReport;
use crate::engine::{load_tensors, save_tensors};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sensitivity::FaultRecord;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Technique {
    Senscov,
    Nc { threshold: f64 },
    Kmnc { sections: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CoverageReached,
    BudgetExhausted,
}

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub calculator_secs: f64,
    pub coverage_secs: f64,
    pub fuzzer_secs: f64,
    pub total_secs: f64,
}

/// One row per outer iteration (senscov) or per accepted input (baselines).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub inputs: usize,
    pub new_faults: usize,
    pub total_faults: usize,
    pub coverage: f64,
}

impl IterationSummary {
    pub const CSV_HEADER: &'static str = "iteration,inputs,new_faults,total_faults,coverage";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration, self.inputs, self.new_faults, self.total_faults, self.coverage
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignResult<T = f64> {
    pub technique: Technique,
    /// Snapshot of the run configuration.
    pub config: serde_json::Value,
    pub model_hash: String,
    pub iterations: Vec<IterationSummary>,
    /// Per-iteration coverage reports; empty for baselines.
    pub reports: Vec<CoverageReport>,
    pub faults: Vec<FaultRecord>,
    /// Perturbed inputs, indexed by `FaultRecord::blob_index`.
    pub fault_inputs: Vec<Tensor<T>>,
    pub inputs_generated: usize,
    pub termination: Termination,
    pub timings: Option<PhaseTimings>,
}

impl<T: Scalar> CampaignResult<T> {
    pub fn fault_count(&self) -> usize {
        self.faults.len()
    }

    pub fn final_coverage(&self) -> f64 {
        self.iterations.last().map_or(0.0, |s| s.coverage)
    }

    pub fn iterations_csv(&self) -> String {
        let mut out = String::from(IterationSummary::CSV_HEADER);
        out.push('\n');
        for s in &self.iterations {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn faults_csv(&self) -> String {
        let mut out = String::from(FaultRecord::CSV_HEADER);
        out.push('\n');
        for f in &self.faults {
            out.push_str(&f.csv_row());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CampaignManifest {
    format_version: u32,
    technique: Technique,
    config: serde_json::Value,
    model_hash: String,
    inputs_generated: usize,
    fault_count: usize,
    termination: Termination,
    fault_blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timings: Option<PhaseTimings>,
    iterations: Vec<IterationSummary>,
    faults: Vec<FaultRecord>,
    reports: Vec<CoverageReport>,
}

/// `c.json` -> `c.faults.thm`, next to the manifest.
pub fn blob_path(manifest: &Path) -> PathBuf {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "campaign".into());
    manifest.with_file_name(format!("{stem}.faults.thm"))
}

pub fn campaign_to_json<T: Scalar>(result: &CampaignResult<T>, blob_name: &str) -> Result<String> {
    let manifest = CampaignManifest {
        format_version: FORMAT_VERSION,
        technique: result.technique,
        config: result.config.clone(),
        model_hash: result.model_hash.clone(),
        inputs_generated: result.inputs_generated,
        fault_count: result.faults.len(),
        termination: result.termination,
        fault_blob: blob_name.to_string(),
        timings: result.timings,
        iterations: result.iterations.clone(),
        faults: result.faults.clone(),
        reports: result.reports.clone(),
    };
    let mut s = serde_json::to_string_pretty(&manifest)?;
    s.push('\n');
    Ok(s)
}

pub fn save_campaign<T: Scalar>(result: &CampaignResult<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let blob_name = blob
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    save_tensors(&result.fault_inputs, &blob)?;
    fs::write(path, campaign_to_json(result, &blob_name)?)?;
    Ok(())
}

pub fn load_campaign<T: Scalar>(path: impl AsRef<Path>) -> Result<CampaignResult<T>> {
    let path = path.as_ref();
    let m: CampaignManifest = serde_json::from_slice(&fs::read(path)?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported campaign format {}",
            m.format_version
        )));
    }
    let blob = path.with_file_name(&m.fault_blob);
    let fault_inputs = load_tensors(blob)?;
    if fault_inputs.len() != m.faults.len() || m.fault_count != m.faults.len() {
        return Err(Error::Format(format!(
            "campaign lists {} faults but the blob holds {} inputs",
            m.faults.len(),
            fault_inputs.len()
        )));
    }
    Ok(CampaignResult {
        technique: m.technique,
        config: m.config,
        model_hash: m.model_hash,
        iterations: m.iterations,
        reports: m.reports,
        faults: m.faults,
        fault_inputs,
        inputs_generated: m.inputs_generated,
        termination: m.termination,
        timings: m.timings,
    })
}
