//! Trace generation and I/O, metrics, configuration files, runs and reports.

pub mod metrics;
pub mod report;
pub mod run;
pub mod synth;
pub mod trace;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::error::Result;

pub use metrics::{recall_at_k, relative_l2, summarize, top_k_ids, Summary};
pub use report::{validate_report, Report, SCHEMA_VERSION};
pub use run::{oracle_outputs, run, sweep, OracleDump, RunOptions, RunOutput, SweepAxis};
pub use synth::{gen_trace, SynthParams};
pub use trace::{read_trace, write_trace, DecodeInput, Trace, TraceHeader};

/// Top-level config file: `{"engine": {...}}`. Omitted keys take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub engine: EngineConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.engine.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn load_synth_params(path: &Path) -> Result<SynthParams> {
    let p: SynthParams = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::DenominatorMode;

    #[test]
    fn config_file_parsing() {
        let cfg = RunConfig::from_json(
            r#"{"engine": {"cache_fraction": 0.5, "denominator_mode": "cluster_mass"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.engine.cache_fraction, 0.5);
        assert_eq!(cfg.engine.denominator_mode, DenominatorMode::ClusterMass);
        assert_eq!(cfg.engine.segment_size, 8192);
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        assert!(RunConfig::from_json(r#"{"engine": {"cache_fractoin": 0.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"engine": {"retrieval_fraction": 2.0}}"#).is_err());
    }
}
