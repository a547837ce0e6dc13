//! Trace-driven runs, oracle dumps and parameter sweeps.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::report::{Aggregates, HeadReport, Report, StepSeries, Timing, SCHEMA_VERSION};
use super::trace::{Trace, TraceHeader};
use crate::attention::oracle_attention;
use crate::engine::{EngineConfig, HeadEngine, StepMetrics};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Compute full attention every step for error metrics.
    pub with_oracle: bool,
    /// Attach wall-clock timing to the report.
    pub timing: bool,
}

/// Exact attention outputs, `outputs[head][step]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleDump {
    pub trace: TraceHeader,
    pub outputs: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    /// Present when run with the oracle.
    pub oracle: Option<OracleDump>,
}

struct HeadRun {
    report: HeadReport,
    oracle: Vec<Vec<f32>>,
    build_seconds: f64,
    decode_seconds: f64,
}

fn run_head(trace: &Trace, head: usize, cfg: &EngineConfig, opts: RunOptions) -> Result<HeadRun> {
    let t0 = Instant::now();
    let mut engine = HeadEngine::prefill(
        head,
        &trace.prefill_keys[head],
        &trace.prefill_values[head],
        trace.d(),
        cfg,
    )?;
    let build_seconds = t0.elapsed().as_secs_f64();
    engine.set_oracle(opts.with_oracle);
    let prefill_clusters = engine.index().len();

    let t1 = Instant::now();
    let mut metrics: Vec<StepMetrics> = Vec::with_capacity(trace.n_decode());
    let mut oracle = Vec::new();
    for step in 0..trace.n_decode() {
        let input = trace.step(step, head);
        let out = engine.decode_step(input.q, input.new_key, input.new_value)?;
        if !engine.accounting().balanced() {
            return Err(Error::integrity(format!(
                "head {head} step {step}: token accounting broken: {:?}",
                engine.accounting()
            )));
        }
        metrics.push(out.metrics);
        oracle.extend(out.oracle_output);
    }
    let decode_seconds = t1.elapsed().as_secs_f64();

    let report = HeadReport {
        head,
        prefill_clusters,
        prefill_segments: engine.index().prefill_segments(),
        final_clusters: engine.index().len(),
        update_clusterings: engine.index().update_clusterings(),
        slow_tier_blocks: engine.store().num_blocks(),
        offload_bytes: engine.offload_bytes(),
        accounting: engine.accounting(),
        buffer: engine.buffer().stats(),
        steps: StepSeries::from_metrics(&metrics, opts.with_oracle),
    };
    Ok(HeadRun {
        report,
        oracle,
        build_seconds,
        decode_seconds,
    })
}

fn unix_seconds() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Runs every head of `trace` through its own engine. Heads run in parallel;
/// results are collected in head order.
pub fn run(trace: &Trace, cfg: &EngineConfig, opts: RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let t0 = Instant::now();
    let runs = (0..trace.heads())
        .into_par_iter()
        .map(|h| run_head(trace, h, cfg, opts))
        .collect::<Result<Vec<_>>>()?;
    let total_seconds = t0.elapsed().as_secs_f64();

    let timing = opts.timing.then(|| Timing {
        build_seconds: runs.iter().map(|r| r.build_seconds).collect(),
        decode_seconds: runs.iter().map(|r| r.decode_seconds).collect(),
        total_seconds,
    });
    let oracle = opts.with_oracle.then(|| OracleDump {
        trace: trace.header,
        outputs: runs.iter().map(|r| r.oracle.clone()).collect(),
    });
    let heads: Vec<HeadReport> = runs.into_iter().map(|r| r.report).collect();
    let report = Report {
        schema_version: SCHEMA_VERSION,
        timestamp: unix_seconds(),
        config: cfg.clone(),
        trace: trace.header,
        with_oracle: opts.with_oracle,
        aggregates: Aggregates::from_heads(&heads),
        heads,
        timing,
    };
    Ok(RunOutput { report, oracle })
}

/// Full attention for every step of every head: each query attends over the
/// prefill plus all earlier decode tokens.
pub fn oracle_outputs(trace: &Trace) -> Result<OracleDump> {
    let d = trace.d();
    let outputs = (0..trace.heads())
        .into_par_iter()
        .map(|h| {
            let mut keys = trace.prefill_keys[h].clone();
            let mut values = trace.prefill_values[h].clone();
            let mut outs = Vec::with_capacity(trace.n_decode());
            for step in 0..trace.n_decode() {
                let input = trace.step(step, h);
                outs.push(oracle_attention(input.q, &keys, &values, d)?.output);
                keys.extend_from_slice(input.new_key);
                values.extend_from_slice(input.new_value);
            }
            Ok(outs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleDump {
        trace: trace.header,
        outputs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    RetrievalFraction,
    EstimationFraction,
    SegmentSize,
    CacheFraction,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::RetrievalFraction => "retrieval_fraction",
            SweepAxis::EstimationFraction => "estimation_fraction",
            SweepAxis::SegmentSize => "segment_size",
            SweepAxis::CacheFraction => "cache_fraction",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &EngineConfig, value: f64) -> Result<EngineConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::RetrievalFraction => cfg.retrieval_fraction = value,
            SweepAxis::EstimationFraction => cfg.estimation_fraction = value,
            SweepAxis::CacheFraction => cfg.cache_fraction = value,
            SweepAxis::SegmentSize => {
                if value < 1.0 || value.fract() != 0.0 || value > usize::MAX as f64 {
                    return Err(Error::config(format!(
                        "segment_size must be a positive integer, got {value}"
                    )));
                }
                cfg.segment_size = value as usize;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval_fraction" => Ok(SweepAxis::RetrievalFraction),
            "estimation_fraction" => Ok(SweepAxis::EstimationFraction),
            "segment_size" => Ok(SweepAxis::SegmentSize),
            "cache_fraction" => Ok(SweepAxis::CacheFraction),
            other => Err(Error::config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// One timed report per value, in the given order.
pub fn sweep(
    trace: &Trace,
    base: &EngineConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<Report>> {
    let configs = values
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let opts = RunOptions {
        with_oracle: false,
        timing: true,
    };
    configs
        .iter()
        .map(|cfg| run(trace, cfg, opts).map(|o| o.report))
        .collect()
}
