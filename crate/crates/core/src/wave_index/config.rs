use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of clusters ranked below the estimation zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    /// Ignored entirely.
    #[default]
    Drop,
    /// Contribute their centroid mass to the softmax denominator only.
    DenominatorOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    /// Average tokens per centroid.
    pub centroid_ratio: usize,
    /// Tokens per independently clustered prefill segment.
    pub segment_size: usize,
    pub kmeans_iters: usize,
    /// Decode tokens clustered per index update.
    pub update_segment: usize,
    pub sink_tokens: usize,
    pub local_window: usize,
    pub retrieval_fraction: f64,
    pub estimation_fraction: f64,
    pub tail_mode: TailMode,
    pub rng_seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            centroid_ratio: 16,
            segment_size: 8192,
            kmeans_iters: 10,
            update_segment: 1024,
            sink_tokens: 4,
            local_window: 64,
            retrieval_fraction: 0.018,
            estimation_fraction: 0.232,
            tail_mode: TailMode::Drop,
            rng_seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("centroid_ratio", self.centroid_ratio),
            ("segment_size", self.segment_size),
            ("kmeans_iters", self.kmeans_iters),
            ("update_segment", self.update_segment),
            ("sink_tokens", self.sink_tokens),
            ("local_window", self.local_window),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("retrieval_fraction", self.retrieval_fraction),
            ("estimation_fraction", self.estimation_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.retrieval_fraction + self.estimation_fraction > 1.0 + 1e-12 {
            return Err(Error::config(
                "retrieval_fraction + estimation_fraction must not exceed 1",
            ));
        }
        Ok(())
    }

    /// Clusters for a run of `tokens` tokens: `ceil(tokens / centroid_ratio)`.
    pub fn clusters_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.centroid_ratio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        IndexConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = IndexConfig {
            centroid_ratio: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg = IndexConfig {
            retrieval_fraction: 0.9,
            estimation_fraction: 0.2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg = IndexConfig {
            estimation_fraction: -0.1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tail_mode_wire_names() {
        assert_eq!(
            serde_json::to_string(&TailMode::DenominatorOnly).unwrap(),
            "\"denominator_only\""
        );
        assert_eq!(
            serde_json::from_str::<TailMode>("\"drop\"").unwrap(),
            TailMode::Drop
        );
    }
}
