//! CSV row types and file writers.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::HarnessError;
use crate::bf16::Bf16Pattern;
use crate::faultlab::{InjectionSpec, TrialMetrics};
use crate::integrity::{DetectionEvent, DIGEST_ALGORITHM};

pub const TRIALS_CSV: &str = "trials.csv";
pub const PERSISTENCE_CSV: &str = "persistence.csv";
pub const DETECTIONS_CSV: &str = "detections.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// A CSV row with a fixed column list, so empty tables still get a header.
pub trait Row: Serialize {
    const COLUMNS: &'static [&'static str];
}

pub fn hex(b: Bf16Pattern) -> String {
    format!("{:#06x}", b.bits())
}

/// One injection (or control) trial; selective trials emit one row per group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial_id: usize,
    pub model_seed: u64,
    pub seed: u64,
    /// Empty for control trials.
    pub p: Option<u8>,
    pub n_c: usize,
    pub group: Option<&'static str>,
    pub layer: usize,
    pub block: usize,
    pub slot: usize,
    pub head: usize,
    pub channel: usize,
    pub before: String,
    pub after: String,
    pub tcr: f64,
    pub mean_tdr: f64,
    pub mean_rouge: f64,
    pub category: &'static str,
}

impl Row for TrialRow {
    const COLUMNS: &'static [&'static str] = &[
        "trial_id",
        "model_seed",
        "seed",
        "p",
        "n_c",
        "group",
        "layer",
        "block",
        "slot",
        "head",
        "channel",
        "before",
        "after",
        "tcr",
        "mean_tdr",
        "mean_rouge",
        "category",
    ];
}

impl TrialRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        trial_id: usize,
        model_seed: u64,
        seed: u64,
        n_c: usize,
        group: Option<&'static str>,
        spec: &InjectionSpec,
        flip: (Bf16Pattern, Bf16Pattern),
        m: &TrialMetrics,
    ) -> Self {
        let c = spec.coord;
        Self {
            trial_id,
            model_seed,
            seed,
            p: spec.bit.map(u8::from),
            n_c,
            group,
            layer: c.layer,
            block: c.block,
            slot: c.slot,
            head: c.head,
            channel: c.channel,
            before: hex(flip.0),
            after: hex(flip.1),
            tcr: m.tcr,
            mean_tdr: m.mean_tdr,
            mean_rouge: m.mean_rouge,
            category: m.category.as_str(),
        }
    }
}

/// One injection replay against the integrity mechanism.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayRow {
    pub trial_id: usize,
    pub model_seed: u64,
    pub seed: u64,
    pub p: Option<u8>,
    pub n_c: usize,
    pub window: &'static str,
    pub cycles: usize,
    pub block: usize,
    pub affected: usize,
    pub detected: usize,
    pub false_positives: usize,
    pub detected_before_serve: bool,
    pub post_recompute_equal: bool,
}

impl Row for ReplayRow {
    const COLUMNS: &'static [&'static str] = &[
        "trial_id",
        "model_seed",
        "seed",
        "p",
        "n_c",
        "window",
        "cycles",
        "block",
        "affected",
        "detected",
        "false_positives",
        "detected_before_serve",
        "post_recompute_equal",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersistenceRow {
    pub run_id: usize,
    pub model_seed: u64,
    pub p: Option<u8>,
    pub i: usize,
    pub c_i: u8,
    #[serde(rename = "C_i")]
    pub cum_i: u32,
    /// Filled at survival checkpoints only.
    pub block_present: Option<bool>,
}

impl Row for PersistenceRow {
    const COLUMNS: &'static [&'static str] = &[
        "run_id",
        "model_seed",
        "p",
        "i",
        "c_i",
        "C_i",
        "block_present",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionRow {
    pub run_id: usize,
    pub cycle: u64,
    pub block_id: usize,
    pub cause: String,
    pub action: String,
    pub algorithm: &'static str,
}

impl Row for DetectionRow {
    const COLUMNS: &'static [&'static str] = &[
        "run_id",
        "cycle",
        "block_id",
        "cause",
        "action",
        "algorithm",
    ];
}

impl DetectionRow {
    pub fn new(run_id: usize, e: &DetectionEvent) -> Self {
        Self {
            run_id,
            cycle: e.cycle,
            block_id: e.block_id,
            cause: e.cause.to_string(),
            action: e.action.clone(),
            algorithm: DIGEST_ALGORITHM,
        }
    }
}

/// Per-request timing of the overhead experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub run_id: usize,
    pub arm: &'static str,
    pub request: usize,
    pub tokens: usize,
    pub seconds: f64,
    pub tokens_per_sec: f64,
    /// SHA-256 of the generated token ids; equal across arms and reruns.
    pub output_digest: String,
}

impl Row for TimingRow {
    const COLUMNS: &'static [&'static str] = &[
        "run_id",
        "arm",
        "request",
        "tokens",
        "seconds",
        "tokens_per_sec",
        "output_digest",
    ];
}

pub fn csv_bytes<R: Row>(rows: &[R]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(R::COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Io {
        path: "<buffer>".into(),
        source: e.into_error(),
    })
}

pub fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), HarnessError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| HarnessError::Io { path, source })
}
