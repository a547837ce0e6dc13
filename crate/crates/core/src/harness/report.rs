//! JSON run reports and their schema check.

use serde::Serialize;
use serde_json::Value;

use super::metrics::{summarize, Summary};
use super::trace::TraceHeader;
use crate::engine::{EngineConfig, StepMetrics, TokenAccounting};
use crate::wave_buffer::BufferStats;

pub const SCHEMA_VERSION: u32 = 1;

/// Per-step metrics of one head as parallel arrays, one entry per step.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepSeries {
    pub recall: Vec<f64>,
    pub relative_error: Option<Vec<f64>>,
    pub log_denominator: Vec<f64>,
    pub oracle_log_denominator: Option<Vec<f64>>,
    pub denominator_exact_coverage: Vec<f64>,
    pub hits: Vec<usize>,
    pub misses: Vec<usize>,
    pub cumulative_hit_ratio: Vec<f64>,
    pub bytes_slow_to_fast: Vec<u64>,
    pub bytes_fast_internal: Vec<u64>,
    pub missed_blocks: Vec<usize>,
    pub clusters: Vec<usize>,
    pub retrieval_clusters: Vec<usize>,
    pub estimation_clusters: Vec<usize>,
    pub dropped_clusters: Vec<usize>,
    pub attended_tokens: Vec<usize>,
    pub exact_ops: Vec<u64>,
    pub estimation_ops: Vec<u64>,
    pub new_clusters: Vec<usize>,
}

impl StepSeries {
    pub fn from_metrics(steps: &[StepMetrics], with_oracle: bool) -> Self {
        let col = |f: &dyn Fn(&StepMetrics) -> f64| steps.iter().map(f).collect::<Vec<_>>();
        let oracle_col = |f: &dyn Fn(&StepMetrics) -> Option<f64>| {
            with_oracle.then(|| steps.iter().map(|m| f(m).unwrap_or(f64::NAN)).collect())
        };
        Self {
            recall: col(&|m| m.recall),
            relative_error: oracle_col(&|m| m.relative_error),
            log_denominator: col(&|m| m.log_denominator),
            oracle_log_denominator: oracle_col(&|m| m.oracle_log_denominator),
            denominator_exact_coverage: col(&|m| m.denominator_exact_coverage),
            hits: steps.iter().map(|m| m.hits).collect(),
            misses: steps.iter().map(|m| m.misses).collect(),
            cumulative_hit_ratio: col(&|m| m.cumulative_hit_ratio),
            bytes_slow_to_fast: steps.iter().map(|m| m.bytes_slow_to_fast).collect(),
            bytes_fast_internal: steps.iter().map(|m| m.bytes_fast_internal).collect(),
            missed_blocks: steps.iter().map(|m| m.missed_blocks).collect(),
            clusters: steps.iter().map(|m| m.clusters).collect(),
            retrieval_clusters: steps.iter().map(|m| m.retrieval_clusters).collect(),
            estimation_clusters: steps.iter().map(|m| m.estimation_clusters).collect(),
            dropped_clusters: steps.iter().map(|m| m.dropped_clusters).collect(),
            attended_tokens: steps.iter().map(|m| m.attended_tokens).collect(),
            exact_ops: steps.iter().map(|m| m.exact_ops).collect(),
            estimation_ops: steps.iter().map(|m| m.estimation_ops).collect(),
            new_clusters: steps.iter().map(|m| m.new_clusters).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadReport {
    pub head: usize,
    pub prefill_clusters: usize,
    pub prefill_segments: usize,
    pub final_clusters: usize,
    pub update_clusterings: usize,
    pub slow_tier_blocks: usize,
    pub offload_bytes: u64,
    pub accounting: TokenAccounting,
    pub buffer: BufferStats,
    pub steps: StepSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub steps: usize,
    pub recall: Option<Summary>,
    pub relative_error: Option<Summary>,
    /// Hits over all cluster accesses of all heads.
    pub cumulative_hit_ratio: f64,
    pub hits: u64,
    pub misses: u64,
    pub bytes_slow_to_fast: u64,
    pub bytes_fast_internal: u64,
    pub slow_blocks_read: u64,
    pub admissions: u64,
    pub evictions: u64,
    pub rejections: u64,
    pub offload_bytes: u64,
}

impl Aggregates {
    pub fn from_heads(heads: &[HeadReport]) -> Self {
        let all = |f: &dyn Fn(&StepSeries) -> Option<&Vec<f64>>| -> Option<Vec<f64>> {
            heads
                .iter()
                .map(|h| f(&h.steps).cloned())
                .collect::<Option<Vec<_>>>()
                .map(|v| v.concat())
        };
        let sum = |f: &dyn Fn(&HeadReport) -> u64| heads.iter().map(f).sum::<u64>();
        let hits = sum(&|h| h.buffer.hits);
        let misses = sum(&|h| h.buffer.misses);
        Self {
            steps: heads.first().map_or(0, |h| h.steps.recall.len()),
            recall: all(&|s| Some(&s.recall)).as_deref().and_then(summarize),
            relative_error: all(&|s| s.relative_error.as_ref())
                .as_deref()
                .and_then(summarize),
            cumulative_hit_ratio: crate::wave_buffer::hit_ratio(hits, misses),
            hits,
            misses,
            bytes_slow_to_fast: sum(&|h| h.buffer.bytes_slow_to_fast),
            bytes_fast_internal: sum(&|h| h.buffer.bytes_fast_internal),
            slow_blocks_read: sum(&|h| h.buffer.slow_blocks_read),
            admissions: sum(&|h| h.buffer.admissions),
            evictions: sum(&|h| h.buffer.evictions),
            rejections: sum(&|h| h.buffer.rejections),
            offload_bytes: sum(&|h| h.offload_bytes),
        }
    }
}

/// Wall-clock measurements. Present only when requested, since they vary
/// between otherwise identical runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    /// Per head, prefill including the index build.
    pub build_seconds: Vec<f64>,
    pub decode_seconds: Vec<f64>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    /// Unix seconds. The only field that differs between identical runs.
    pub timestamp: u64,
    pub config: EngineConfig,
    pub trace: TraceHeader,
    pub with_oracle: bool,
    pub heads: Vec<HeadReport>,
    pub aggregates: Aggregates,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl Report {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

const STEP_SERIES: &[&str] = &[
    "recall",
    "log_denominator",
    "denominator_exact_coverage",
    "hits",
    "misses",
    "cumulative_hit_ratio",
    "bytes_slow_to_fast",
    "bytes_fast_internal",
    "missed_blocks",
    "clusters",
    "retrieval_clusters",
    "estimation_clusters",
    "dropped_clusters",
    "attended_tokens",
    "exact_ops",
    "estimation_ops",
    "new_clusters",
];

const ORACLE_SERIES: &[&str] = &["relative_error", "oracle_log_denominator"];

const HEAD_COUNTS: &[&str] = &[
    "head",
    "prefill_clusters",
    "prefill_segments",
    "final_clusters",
    "update_clusterings",
    "slow_tier_blocks",
    "offload_bytes",
];

const AGGREGATE_COUNTS: &[&str] = &[
    "steps",
    "hits",
    "misses",
    "bytes_slow_to_fast",
    "bytes_fast_internal",
    "slow_blocks_read",
    "admissions",
    "evictions",
    "rejections",
    "offload_bytes",
];

const SUMMARY_FIELDS: &[&str] = &["mean", "p50", "p90", "p99", "max"];

struct Checker {
    errors: Vec<String>,
}

impl Checker {
    fn fail(&mut self, path: &str, what: &str) {
        self.errors.push(format!("{path}: {what}"));
    }

    fn get<'a>(&mut self, v: &'a Value, path: &str, key: &str) -> Option<&'a Value> {
        let found = v.get(key);
        if found.is_none() {
            self.fail(path, &format!("missing field `{key}`"));
        }
        found
    }

    fn uint(&mut self, v: &Value, path: &str, key: &str) -> Option<u64> {
        let x = self.get(v, path, key)?.as_u64();
        if x.is_none() {
            self.fail(&format!("{path}.{key}"), "expected a non-negative integer");
        }
        x
    }

    fn finite(&mut self, v: &Value, path: &str) -> Option<f64> {
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.fail(path, "expected a finite number");
                None
            }
        }
    }

    fn fraction(&mut self, v: &Value, path: &str) {
        if let Some(x) = self.finite(v, path) {
            if !(0.0..=1.0).contains(&x) {
                self.fail(path, "expected a value in [0, 1]");
            }
        }
    }

    fn series(&mut self, v: &Value, path: &str, len: u64) -> Option<Vec<Value>> {
        match v.as_array() {
            Some(a) if a.len() as u64 == len => Some(a.clone()),
            Some(a) => {
                self.fail(path, &format!("expected {len} entries, found {}", a.len()));
                None
            }
            None => {
                self.fail(path, "expected an array");
                None
            }
        }
    }

    fn summary(&mut self, v: &Value, path: &str, present: bool) {
        if !present {
            if !v.is_null() {
                self.fail(path, "expected null");
            }
            return;
        }
        if !v.is_object() {
            self.fail(path, "expected a summary object");
            return;
        }
        for f in SUMMARY_FIELDS {
            if let Some(x) = self.get(v, path, f) {
                self.finite(x, &format!("{path}.{f}"));
            }
        }
    }
}

/// Checks a parsed report against the documented schema. Returns every
/// violation found.
pub fn validate_report(v: &Value) -> Result<(), Vec<String>> {
    let mut c = Checker { errors: Vec::new() };
    let root = "$";
    if v.get("schema_version").and_then(Value::as_u64) != Some(SCHEMA_VERSION as u64) {
        c.fail(root, "schema_version must be 1");
    }
    c.uint(v, root, "timestamp");

    if let Some(cfg) = c.get(v, root, "config") {
        let want = serde_json::to_value(EngineConfig::default()).expect("config serializes");
        for key in want.as_object().expect("config is an object").keys() {
            c.get(cfg, "$.config", key);
        }
    }

    let mut heads_n = 0;
    let mut steps_n = 0;
    if let Some(t) = c.get(v, root, "trace") {
        heads_n = c.uint(t, "$.trace", "n_heads").unwrap_or(0);
        c.uint(t, "$.trace", "d");
        c.uint(t, "$.trace", "n_prefill");
        steps_n = c.uint(t, "$.trace", "n_decode").unwrap_or(0);
    }
    let with_oracle = match v.get("with_oracle").and_then(Value::as_bool) {
        Some(b) => b,
        None => {
            c.fail(root, "with_oracle must be a boolean");
            false
        }
    };

    if let Some(heads) = c.get(v, root, "heads").cloned() {
        if let Some(heads) = c.series(&heads, "$.heads", heads_n) {
            for (i, h) in heads.iter().enumerate() {
                let hp = format!("$.heads[{i}]");
                for key in HEAD_COUNTS {
                    c.uint(h, &hp, key);
                }
                if let Some(acc) = c.get(h, &hp, "accounting") {
                    let ap = format!("{hp}.accounting");
                    let parts: Vec<u64> = ["indexed", "sink", "buffered", "seen"]
                        .iter()
                        .filter_map(|k| c.uint(acc, &ap, k))
                        .collect();
                    if parts.len() == 4 && parts[0] + parts[1] + parts[2] != parts[3] {
                        c.fail(&ap, "indexed + sink + buffered must equal seen");
                    }
                }
                if let Some(buf) = c.get(h, &hp, "buffer") {
                    if let Some(x) = c.get(buf, &format!("{hp}.buffer"), "hit_ratio") {
                        c.fraction(x, &format!("{hp}.buffer.hit_ratio"));
                    }
                }
                let Some(steps) = c.get(h, &hp, "steps") else {
                    continue;
                };
                let sp = format!("{hp}.steps");
                for key in STEP_SERIES {
                    let Some(s) = c.get(steps, &sp, key) else {
                        continue;
                    };
                    let path = format!("{sp}.{key}");
                    let Some(items) = c.series(s, &path, steps_n) else {
                        continue;
                    };
                    for (j, x) in items.iter().enumerate() {
                        let p = format!("{path}[{j}]");
                        match *key {
                            "recall" | "cumulative_hit_ratio" | "denominator_exact_coverage" => {
                                c.fraction(x, &p)
                            }
                            "log_denominator" => {
                                c.finite(x, &p);
                            }
                            _ => {
                                if x.as_u64().is_none() {
                                    c.fail(&p, "expected a non-negative integer");
                                }
                            }
                        }
                    }
                }
                for key in ORACLE_SERIES {
                    let Some(s) = c.get(steps, &sp, key) else {
                        continue;
                    };
                    let path = format!("{sp}.{key}");
                    if !with_oracle {
                        if !s.is_null() {
                            c.fail(&path, "expected null without the oracle");
                        }
                        continue;
                    }
                    if let Some(items) = c.series(s, &path, steps_n) {
                        for (j, x) in items.iter().enumerate() {
                            c.finite(x, &format!("{path}[{j}]"));
                        }
                    }
                }
            }
        }
    }

    if let Some(agg) = c.get(v, root, "aggregates") {
        let ap = "$.aggregates";
        for key in AGGREGATE_COUNTS {
            c.uint(agg, ap, key);
        }
        if let Some(x) = c.get(agg, ap, "cumulative_hit_ratio") {
            c.fraction(x, "$.aggregates.cumulative_hit_ratio");
        }
        if let Some(x) = c.get(agg, ap, "recall") {
            c.summary(x, "$.aggregates.recall", steps_n > 0);
        }
        if let Some(x) = c.get(agg, ap, "relative_error") {
            c.summary(x, "$.aggregates.relative_error", steps_n > 0 && with_oracle);
        }
    }

    if let Some(t) = v.get("timing") {
        for key in ["build_seconds", "decode_seconds"] {
            if let Some(s) = c.get(t, "$.timing", key) {
                if let Some(items) = c.series(s, &format!("$.timing.{key}"), heads_n) {
                    for (j, x) in items.iter().enumerate() {
                        c.finite(x, &format!("$.timing.{key}[{j}]"));
                    }
                }
            }
        }
        if let Some(x) = c.get(t, "$.timing", "total_seconds") {
            c.finite(x, "$.timing.total_seconds");
        }
    }

    if c.errors.is_empty() {
        Ok(())
    } else {
        Err(c.errors)
    }
}
