//! Machine-readable run outputs: the JSON report and the versioned metrics
//! CSV.
//!
//! Everything except `timing` is a pure function of config and seed, so two
//! runs with the same inputs produce byte-identical files once the timing
//! field is ignored.

use crate::attack::AttackEvaluation;
use crate::error::{Error, Result};
use crate::probes::ProbeReport;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Schema tag written as the first line of every metrics CSV.
pub const METRICS_SCHEMA: &str = "sladv-metrics-v1";

/// Wall-clock measurements, quarantined in their own struct so determinism
/// checks can drop them wholesale.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// Percent.
    pub clean_accuracy: f64,
    /// Percent.
    pub adversarial_accuracy: f64,
    /// Percentage points; must equal clean - adversarial.
    pub accuracy_drop: f64,
    /// Percent.
    pub random_noise_accuracy: f64,
    /// Percentage points.
    pub random_noise_drop: f64,
    pub skipped_samples: usize,
    /// Per-round L_sim values; empty for honest runs.
    pub sim_history: Vec<f64>,
    pub probes: Option<ProbeReport>,
    /// Verbatim copy of the run configuration.
    pub config_echo: serde_json::Value,
    pub timing: Timing,
}

impl RunReport {
    pub fn new(
        seed: u64,
        eval: &AttackEvaluation,
        sim_history: Vec<f64>,
        probes: Option<ProbeReport>,
        config_echo: serde_json::Value,
    ) -> Self {
        RunReport {
            seed,
            clean_accuracy: eval.clean_accuracy,
            adversarial_accuracy: eval.adversarial_accuracy,
            accuracy_drop: eval.accuracy_drop,
            random_noise_accuracy: eval.random_noise_accuracy,
            random_noise_drop: eval.random_noise_drop,
            skipped_samples: eval.skipped_samples,
            sim_history,
            probes,
            config_echo,
            timing: Timing::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.accuracy_drop - (self.clean_accuracy - self.adversarial_accuracy)).abs() > 1e-9 {
            return Err(Error::internal(format!(
                "accuracy_drop {} disagrees with clean {} - adversarial {}",
                self.accuracy_drop, self.clean_accuracy, self.adversarial_accuracy
            )));
        }
        if let Some(p) = &self.probes {
            p.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::internal(format!("report serialization failed: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Writes `round,task_loss,l_sim` rows under a schema header. `sims`, when
/// present, must be as long as `losses`; honest runs leave the column empty.
pub fn write_metrics_csv(path: &Path, losses: &[f64], sims: Option<&[f64]>) -> Result<()> {
    if let Some(s) = sims {
        if s.len() != losses.len() {
            return Err(Error::internal(format!(
                "{} L_sim values for {} rounds",
                s.len(),
                losses.len()
            )));
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "# schema: {METRICS_SCHEMA}");
    out.push_str("round,task_loss,l_sim\n");
    for (i, loss) in losses.iter().enumerate() {
        match sims {
            Some(s) => {
                let _ = writeln!(out, "{i},{loss},{}", s[i]);
            }
            None => {
                let _ = writeln!(out, "{i},{loss},");
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}
