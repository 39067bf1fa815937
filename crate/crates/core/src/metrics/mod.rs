//! Evaluation: perceptual diversity, the Kim vote score, a stratified total
//! correlation estimate, the one-hot reconstruction probe and the Q cosine report.

mod extractor;
mod kim;
mod pdiv;
mod probes;
mod tc;

pub use extractor::{ConvExtractor, ExtractorTraining, FeatureExtractor, IdentityExtractor};
pub use kim::{critic_encoder, kim_score, KimOptions};
pub use pdiv::{perceptual_diversity, PdivOptions, PdivRange};
pub use probes::{onehot_l1_probe, pairwise_abs_cosines, q_cosine_report, ProbeResult};
pub use tc::{log_normal_density, sample_posterior, tc_brute_force, tc_estimate, tc_from_critic};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub score: f64,
    pub dispersion: f64,
    pub n_samples: usize,
    /// Free-form echo of the settings that produced the score.
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, score: f64, dispersion: f64, n_samples: usize, config: serde_json::Value) -> Result<Self> {
        if n_samples == 0 {
            return invalid("a metric report needs at least one sample");
        }
        if !(dispersion >= 0.0) {
            return invalid(format!("dispersion must be nonnegative, got {dispersion}"));
        }
        Ok(Self {
            name: name.into(),
            score,
            dispersion,
            n_samples,
            config,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Appends one row, writing the header first when the file is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "name,score,dispersion,n_samples,config")?;
        }
        let config = serde_json::to_string(&self.config)?.replace('"', "\"\"");
        writeln!(
            f,
            "{},{},{},{},\"{}\"",
            self.name, self.score, self.dispersion, self.n_samples, config
        )?;
        Ok(())
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
