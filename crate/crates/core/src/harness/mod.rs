//! Experiment runners behind the `kvguard` subcommands.
//!
//! Every runner is a pure function of its resolved config except for the
//! timing columns of `overhead`. Rows are produced in (model seed, bit,
//! batch size, trial) order. Trial seeds are derived from the top-level seed
//! and the trial index only, so all bits and batch sizes of trial `t` share
//! their injection coordinate and workload.

mod config;
pub mod output;

use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{Experiment, ExperimentConfig, IntegrityFlags, Resolved, REPRESENTATIVE_BITS};
pub use output::{DetectionRow, PersistenceRow, ReplayRow, Row, TimingRow, TrialRow};

use crate::bf16::BitPosition;
use crate::engine::{EngineConfig, Model};
use crate::faultlab::{
    self, derive_seed, ocr, run_persistence_against, run_replay, run_selective_trial, run_trial,
    run_trial_at, synthetic_prefix, Category, ControlReport, FaultError, InjectionWindow,
    PersistenceRun, SweepReport, TrialEnv,
};
use crate::integrity::{DetectionCause, IntegrityConfig};
use crate::stats::{self, LinearFit, StatsError, TestResult};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

const TAG_TRIAL: u64 = 10;
const TAG_RUN: u64 = 11;
const TAG_CONTROL: u64 = 12;
const TAG_SWEEP: u64 = 13;

pub fn trial_seed(seed: u64, t: usize) -> u64 {
    derive_seed(seed, &[TAG_TRIAL, t as u64])
}

pub fn run_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, &[TAG_RUN, k as u64])
}

pub fn build_env(
    r: &Resolved,
    model_seed: u64,
    integrity: IntegrityConfig,
) -> Result<TrialEnv<f32>, HarnessError> {
    let cfg = r.model_config(model_seed);
    let model = Model::build(&cfg).map_err(HarnessError::Config)?;
    Ok(TrialEnv {
        model: Arc::new(model),
        engine: EngineConfig {
            n_blocks: r.base.n_blocks,
            block_size: r.base.block_size,
            integrity,
        },
        prefix: synthetic_prefix(r.base.prefix_len, cfg.vocab_size, r.base.prefix_seed),
    })
}

fn bit_u8(p: Option<BitPosition>) -> Option<u8> {
    p.map(u8::from)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CategoryCounts {
    pub no_effect: usize,
    pub partial: usize,
    pub complete: usize,
    pub collapse: usize,
}

impl CategoryCounts {
    pub fn add(&mut self, c: Category) {
        match c {
            Category::NoEffect => self.no_effect += 1,
            Category::Partial => self.partial += 1,
            Category::Complete => self.complete += 1,
            Category::Collapse => self.collapse += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.no_effect + self.partial + self.complete + self.collapse
    }
}

/// Aggregates over a set of trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialAggregate {
    pub trials: usize,
    pub ocr: f64,
    pub mean_tcr: f64,
    pub mean_tdr: f64,
    pub mean_rouge: f64,
    pub categories: CategoryCounts,
}

impl TrialAggregate {
    fn of(rows: &[&TrialRow]) -> Result<Self, HarnessError> {
        let tcrs: Vec<f64> = rows.iter().map(|r| r.tcr).collect();
        let mut categories = CategoryCounts::default();
        for r in rows {
            categories.add(category_from_str(r.category));
        }
        Ok(Self {
            trials: rows.len(),
            ocr: ocr(&tcrs).map_err(FaultError::from)?,
            mean_tcr: stats::mean(&tcrs),
            mean_tdr: stats::mean(&rows.iter().map(|r| r.mean_tdr).collect::<Vec<_>>()),
            mean_rouge: stats::mean(&rows.iter().map(|r| r.mean_rouge).collect::<Vec<_>>()),
            categories,
        })
    }
}

fn category_from_str(s: &str) -> Category {
    Category::ALL
        .into_iter()
        .find(|c| c.as_str() == s)
        .expect("row category")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanCondition {
    pub model_seed: u64,
    pub p: u8,
    pub n_c: usize,
    #[serde(flatten)]
    pub aggregate: TrialAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanBit {
    /// `None` when pooled over model seeds.
    pub model_seed: Option<u64>,
    pub p: u8,
    #[serde(flatten)]
    pub aggregate: TrialAggregate,
    /// Kruskal–Wallis of TCR across batch sizes; absent with one batch size.
    pub kruskal_wallis: Option<TestResult<f64>>,
    /// Bonferroni-adjusted over the bits of the same model seed.
    pub kw_p_adjusted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanSummary {
    pub conditions: Vec<ScanCondition>,
    pub per_seed: Vec<ScanBit>,
    pub pooled: Vec<ScanBit>,
    /// Bits with at least one collapse classification.
    pub collapse_bits: Vec<u8>,
}

impl ScanSummary {
    pub fn pooled_ocr(&self, p: u8) -> Option<f64> {
        self.pooled
            .iter()
            .find(|b| b.p == p)
            .map(|b| b.aggregate.ocr)
    }
}

pub struct ScanOutput {
    pub rows: Vec<TrialRow>,
    pub summary: ScanSummary,
}

pub fn scan_bits(r: &Resolved) -> Result<ScanOutput, HarnessError> {
    let integrity = r.base.integrity.to_config();
    let mut rows = Vec::new();
    for &ms in &r.base.model_seeds {
        let env = build_env(r, ms, integrity)?;
        for &p in &r.bits {
            for &n_c in &r.nc_levels {
                for t in 0..r.trials {
                    let seed = trial_seed(r.base.seed, t);
                    let res = run_trial_at(&env, r.base.site, Some(p), n_c, seed)?;
                    rows.push(TrialRow::new(
                        rows.len(),
                        ms,
                        seed,
                        n_c,
                        None,
                        &res.spec,
                        (res.before, res.after),
                        &res.metrics,
                    ));
                }
            }
        }
    }
    let summary = summarize_scan(r, &rows)?;
    Ok(ScanOutput { rows, summary })
}

pub fn summarize_scan(r: &Resolved, rows: &[TrialRow]) -> Result<ScanSummary, HarnessError> {
    let select = |ms: Option<u64>, p: u8, n_c: Option<usize>| -> Vec<&TrialRow> {
        rows.iter()
            .filter(|x| {
                ms.is_none_or(|m| x.model_seed == m)
                    && x.p == Some(p)
                    && n_c.is_none_or(|n| x.n_c == n)
            })
            .collect()
    };
    let mut conditions = Vec::new();
    let mut per_seed = Vec::new();
    for &ms in &r.base.model_seeds {
        let mut seed_bits = Vec::new();
        for p in r.bits.iter().map(|b| b.get()) {
            for &n_c in &r.nc_levels {
                conditions.push(ScanCondition {
                    model_seed: ms,
                    p,
                    n_c,
                    aggregate: TrialAggregate::of(&select(Some(ms), p, Some(n_c)))?,
                });
            }
            let kruskal_wallis = if r.nc_levels.len() >= 2 {
                let groups: Vec<Vec<f64>> = r
                    .nc_levels
                    .iter()
                    .map(|&n| select(Some(ms), p, Some(n)).iter().map(|x| x.tcr).collect())
                    .collect();
                Some(stats::kruskal_wallis(&groups)?)
            } else {
                None
            };
            seed_bits.push(ScanBit {
                model_seed: Some(ms),
                p,
                aggregate: TrialAggregate::of(&select(Some(ms), p, None))?,
                kruskal_wallis,
                kw_p_adjusted: None,
            });
        }
        let ps: Vec<f64> = seed_bits
            .iter()
            .filter_map(|b| b.kruskal_wallis.map(|k| k.p_value))
            .collect();
        if ps.len() == seed_bits.len() {
            for (b, adj) in seed_bits.iter_mut().zip(stats::bonferroni(&ps)) {
                b.kw_p_adjusted = Some(adj);
            }
        }
        per_seed.extend(seed_bits);
    }
    let pooled = r
        .bits
        .iter()
        .map(|b| {
            Ok(ScanBit {
                model_seed: None,
                p: b.get(),
                aggregate: TrialAggregate::of(&select(None, b.get(), None))?,
                kruskal_wallis: None,
                kw_p_adjusted: None,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let collapse_bits = pooled
        .iter()
        .filter(|b| b.aggregate.categories.collapse > 0)
        .map(|b| b.p)
        .collect();
    Ok(ScanSummary {
        conditions,
        per_seed,
        pooled,
        collapse_bits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectiveBit {
    pub model_seed: u64,
    pub p: u8,
    pub trials: usize,
    pub group_a_mean_tcr: f64,
    pub group_a_ocr: f64,
    pub group_b_max_tcr: f64,
    /// Trials where the non-sharing group changed.
    pub group_b_nonzero: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectiveSummary {
    pub trials: usize,
    pub group_b_nonzero: usize,
    pub bits: Vec<SelectiveBit>,
}

pub struct SelectiveOutput {
    pub rows: Vec<TrialRow>,
    pub summary: SelectiveSummary,
}

pub fn selective(r: &Resolved) -> Result<SelectiveOutput, HarnessError> {
    let integrity = r.base.integrity.to_config();
    let mut rows = Vec::new();
    let mut bits = Vec::new();
    let mut trials = 0;
    for &ms in &r.base.model_seeds {
        let env = build_env(r, ms, integrity)?;
        let prefix_b = synthetic_prefix(
            r.base.prefix_len,
            env.model.config().vocab_size,
            r.base.group_b_prefix_seed,
        );
        if faultlab::prefixes_share_blocks(&env.prefix, &prefix_b, r.base.block_size) {
            return Err(HarnessError::Config(
                "the two prefix groups share their first block".into(),
            ));
        }
        for &p in &r.bits {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for &n_c in &r.nc_levels {
                for t in 0..r.trials {
                    let seed = trial_seed(r.base.seed, t);
                    let res = run_selective_trial(&env, &prefix_b, Some(p), n_c, seed)?;
                    let flip = (res.before, res.after);
                    let trial_id = trials;
                    trials += 1;
                    rows.push(TrialRow::new(
                        trial_id,
                        ms,
                        seed,
                        n_c,
                        Some("a"),
                        &res.spec,
                        flip,
                        &res.group_a,
                    ));
                    rows.push(TrialRow::new(
                        trial_id,
                        ms,
                        seed,
                        n_c,
                        Some("b"),
                        &res.spec,
                        flip,
                        &res.group_b,
                    ));
                    a.push(res.group_a.tcr);
                    b.push(res.group_b.tcr);
                }
            }
            bits.push(SelectiveBit {
                model_seed: ms,
                p: p.get(),
                trials: a.len(),
                group_a_mean_tcr: stats::mean(&a),
                group_a_ocr: ocr(&a).map_err(FaultError::from)?,
                group_b_max_tcr: b.iter().copied().fold(0.0, f64::max),
                group_b_nonzero: b.iter().filter(|&&x| x > 0.0).count(),
            });
        }
    }
    let summary = SelectiveSummary {
        trials,
        group_b_nonzero: bits.iter().map(|b| b.group_b_nonzero).sum(),
        bits,
    };
    Ok(SelectiveOutput { rows, summary })
}

impl SelectiveSummary {
    pub fn failures(&self) -> Vec<String> {
        if self.group_b_nonzero == 0 {
            return Vec::new();
        }
        vec![format!(
            "non-sharing group changed in {} of {} trials",
            self.group_b_nonzero, self.trials
        )]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersistenceCondition {
    pub model_seed: u64,
    pub p: u8,
    pub runs: usize,
    pub requests: usize,
    /// Mean per-request corruption rate over all runs and requests.
    pub mean_rate: f64,
    /// OLS of the mean cumulative count against the request index.
    pub ols: LinearFit<f64>,
    pub slope_minus_rate: f64,
    /// Spearman of the mean indicator against the request index.
    pub trend: TestResult<f64>,
    /// Bonferroni-adjusted over conditions; absent when the trend is degenerate.
    pub trend_p_adjusted: Option<f64>,
    /// The injected block was resident at every checkpoint of every run.
    pub survived_all_checkpoints: bool,
    pub max_corrupted_serves: usize,
    pub mean_corrupted_serves: f64,
    pub detections: usize,
    pub mean_indicator: Vec<f64>,
    pub mean_cumulative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersistenceSummary {
    pub integrity: IntegrityConfig,
    pub conditions: Vec<PersistenceCondition>,
}

pub struct PersistenceOutput {
    pub rows: Vec<PersistenceRow>,
    pub detections: Vec<DetectionRow>,
    pub summary: PersistenceSummary,
}

fn persistence_rows(
    run_id: usize,
    model_seed: u64,
    run: &PersistenceRun,
    out: &mut Vec<PersistenceRow>,
) {
    for (k, (&c, &cum)) in run.indicators.iter().zip(&run.cumulative).enumerate() {
        let i = k + 1;
        out.push(PersistenceRow {
            run_id,
            model_seed,
            p: bit_u8(run.spec.bit),
            i,
            c_i: u8::from(c),
            cum_i: cum,
            block_present: run
                .survival
                .iter()
                .find(|s| s.after_request == i)
                .map(|s| s.block_present),
        });
    }
}

/// Clean outputs of every run, shared by all bits of a model seed.
fn run_baselines(r: &Resolved, env: &TrialEnv<f32>) -> Result<Vec<Vec<Vec<u32>>>, HarnessError> {
    (0..r.runs)
        .map(|k| {
            Ok(faultlab::persistence_baselines(
                env,
                r.requests,
                run_seed(r.base.seed, k),
            )?)
        })
        .collect()
}

pub fn persistence(r: &Resolved) -> Result<PersistenceOutput, HarnessError> {
    let integrity = r.base.integrity.to_config();
    let mut rows = Vec::new();
    let mut detections = Vec::new();
    let mut conditions = Vec::new();
    let mut run_id = 0;
    for &ms in &r.base.model_seeds {
        let env = build_env(r, ms, integrity)?;
        let baselines = run_baselines(r, &env)?;
        for &p in &r.bits {
            let mut runs = Vec::with_capacity(r.runs);
            for (k, base) in baselines.iter().enumerate() {
                let run = run_persistence_against(
                    &env,
                    Some(p),
                    base,
                    &r.base.checkpoints,
                    run_seed(r.base.seed, k),
                )?;
                persistence_rows(run_id, ms, &run, &mut rows);
                detections.extend(run.detections.iter().map(|e| DetectionRow::new(run_id, e)));
                runs.push(run);
                run_id += 1;
            }
            conditions.push(persistence_condition(ms, p, r.requests, &runs)?);
        }
    }
    adjust_trends(&mut conditions);
    Ok(PersistenceOutput {
        rows,
        detections,
        summary: PersistenceSummary {
            integrity,
            conditions,
        },
    })
}

pub fn persistence_condition(
    model_seed: u64,
    p: BitPosition,
    requests: usize,
    runs: &[PersistenceRun],
) -> Result<PersistenceCondition, HarnessError> {
    let n = runs.len() as f64;
    let mean_indicator: Vec<f64> = (0..requests)
        .map(|i| runs.iter().filter(|r| r.indicators[i]).count() as f64 / n)
        .collect();
    let mean_cumulative: Vec<f64> = (0..requests)
        .map(|i| runs.iter().map(|r| f64::from(r.cumulative[i])).sum::<f64>() / n)
        .collect();
    let index: Vec<f64> = (1..=requests).map(|i| i as f64).collect();
    let ols = stats::ols_fit(&index, &mean_cumulative)?;
    let mean_rate = stats::mean(&runs.iter().map(PersistenceRun::rate).collect::<Vec<_>>());
    let serves: Vec<f64> = runs.iter().map(|r| r.corrupted_serves as f64).collect();
    Ok(PersistenceCondition {
        model_seed,
        p: p.get(),
        runs: runs.len(),
        requests,
        mean_rate,
        slope_minus_rate: ols.slope - mean_rate,
        ols,
        trend: stats::spearman(&index, &mean_indicator)?,
        trend_p_adjusted: None,
        survived_all_checkpoints: runs
            .iter()
            .all(|r| r.survival.iter().all(|s| s.block_present)),
        max_corrupted_serves: runs.iter().map(|r| r.corrupted_serves).max().unwrap_or(0),
        mean_corrupted_serves: stats::mean(&serves),
        detections: runs.iter().map(|r| r.detections.len()).sum(),
        mean_indicator,
        mean_cumulative,
    })
}

fn adjust_trends(conditions: &mut [PersistenceCondition]) {
    let live: Vec<usize> = (0..conditions.len())
        .filter(|&i| !conditions[i].trend.degenerate)
        .collect();
    let ps: Vec<f64> = live.iter().map(|&i| conditions[i].trend.p_value).collect();
    for (&i, adj) in live.iter().zip(stats::bonferroni(&ps)) {
        conditions[i].trend_p_adjusted = Some(adj);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReplayTally {
    pub replays: usize,
    pub detected: usize,
    pub detected_before_serve: usize,
    pub false_positives: usize,
    pub max_affected: usize,
    /// Replays whose affected requests exceeded the injection batch.
    pub damage_violations: usize,
    pub post_recompute_failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PersistenceReplayTally {
    pub runs: usize,
    pub detected: usize,
    pub corrupted_serves: usize,
    pub corrupted_outputs: usize,
    pub false_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectSummary {
    pub between_cycles: ReplayTally,
    pub after_verify: ReplayTally,
    pub persistence: PersistenceReplayTally,
    pub sweep: Option<SweepReport>,
    pub control: ControlReport,
    pub control_hits_required: u64,
}

impl DetectSummary {
    pub fn failures(&self) -> Vec<String> {
        let mut f = Vec::new();
        let b = &self.between_cycles;
        if b.detected_before_serve < b.replays {
            f.push(format!(
                "{} of {} replays not detected before serve",
                b.replays - b.detected_before_serve,
                b.replays
            ));
        }
        let a = &self.after_verify;
        if a.detected < a.replays {
            f.push(format!(
                "{} of {} in-window replays never detected",
                a.replays - a.detected,
                a.replays
            ));
        }
        for (name, t) in [("between-cycles", b), ("after-verify", a)] {
            if t.false_positives > 0 {
                f.push(format!("{name}: {} false positives", t.false_positives));
            }
            if t.damage_violations > 0 {
                f.push(format!(
                    "{name}: {} replays exceeded one batch of damage",
                    t.damage_violations
                ));
            }
            if t.post_recompute_failures > 0 {
                f.push(format!(
                    "{name}: {} replays differ from baseline after recompute",
                    t.post_recompute_failures
                ));
            }
        }
        let p = &self.persistence;
        if p.detected < p.runs || p.corrupted_serves > 0 || p.false_positives > 0 {
            f.push(format!(
                "persistence replay: {}/{} detected, {} corrupted serves, {} false positives",
                p.detected, p.runs, p.corrupted_serves, p.false_positives
            ));
        }
        if let Some(s) = &self.sweep {
            if s.detected < s.flips || s.collateral_mismatches > 0 || s.residual_mismatches > 0 {
                f.push(format!(
                    "sweep: {}/{} detected, {} collateral, {} residual",
                    s.detected, s.flips, s.collateral_mismatches, s.residual_mismatches
                ));
            }
        }
        let c = &self.control;
        if c.mismatches > 0 {
            f.push(format!("control arm: {} false positives", c.mismatches));
        }
        if c.verified_hits < self.control_hits_required {
            f.push(format!(
                "control arm reached {} verified hits, {} required",
                c.verified_hits, self.control_hits_required
            ));
        }
        f
    }
}

pub struct DetectOutput {
    pub rows: Vec<ReplayRow>,
    pub persistence: Vec<PersistenceRow>,
    pub detections: Vec<DetectionRow>,
    pub summary: DetectSummary,
}

pub fn detect(r: &Resolved) -> Result<DetectOutput, HarnessError> {
    let integrity = r.base.integrity.to_config();
    if !integrity.enabled {
        return Err(HarnessError::Config(
            "detect requires the integrity mechanism".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut detections = Vec::new();
    let mut persistence = Vec::new();
    let mut between_cycles = ReplayTally::default();
    let mut after_verify = ReplayTally::default();
    let mut ptally = PersistenceReplayTally::default();
    let mut control = None;
    let mut run_id = 0;
    for &ms in &r.base.model_seeds {
        let env = build_env(r, ms, integrity)?;
        let baselines = run_baselines(r, &env)?;
        for &p in &r.bits {
            for &n_c in &r.nc_levels {
                for t in 0..r.trials {
                    let seed = trial_seed(r.base.seed, t);
                    for (window, tally) in [
                        (InjectionWindow::BetweenCycles, &mut between_cycles),
                        (InjectionWindow::AfterVerify, &mut after_verify),
                    ] {
                        let rep =
                            run_replay(&env, Some(p), n_c, r.base.replay_cycles, window, seed)?;
                        tally.replays += 1;
                        tally.detected += usize::from(rep.detected > 0);
                        tally.detected_before_serve += usize::from(rep.detected_before_serve);
                        tally.false_positives += rep.false_positives;
                        tally.max_affected = tally.max_affected.max(rep.affected);
                        let bound = match window {
                            InjectionWindow::BetweenCycles => 0,
                            InjectionWindow::AfterVerify => n_c,
                        };
                        tally.damage_violations += usize::from(rep.affected > bound);
                        tally.post_recompute_failures += usize::from(!rep.post_recompute_equal);
                        detections.extend(rep.events.iter().map(|e| DetectionRow::new(run_id, e)));
                        rows.push(ReplayRow {
                            trial_id: run_id,
                            model_seed: ms,
                            seed,
                            p: bit_u8(rep.spec.bit),
                            n_c,
                            window: match window {
                                InjectionWindow::BetweenCycles => "between-cycles",
                                InjectionWindow::AfterVerify => "after-verify",
                            },
                            cycles: rep.cycles,
                            block: rep.spec.coord.block,
                            affected: rep.affected,
                            detected: rep.detected,
                            false_positives: rep.false_positives,
                            detected_before_serve: rep.detected_before_serve,
                            post_recompute_equal: rep.post_recompute_equal,
                        });
                        run_id += 1;
                    }
                }
            }
            for (k, base) in baselines.iter().enumerate() {
                let run = run_persistence_against(
                    &env,
                    Some(p),
                    base,
                    &r.base.checkpoints,
                    run_seed(r.base.seed, k),
                )?;
                let on_target = run
                    .detections
                    .iter()
                    .filter(|e| {
                        e.cause == DetectionCause::Checksum && e.block_id == run.spec.coord.block
                    })
                    .count();
                ptally.runs += 1;
                ptally.detected += usize::from(on_target > 0);
                ptally.false_positives += run
                    .detections
                    .iter()
                    .filter(|e| e.cause == DetectionCause::Checksum)
                    .count()
                    - on_target;
                ptally.corrupted_serves += run.corrupted_serves;
                ptally.corrupted_outputs += run.total() as usize;
                persistence_rows(run_id, ms, &run, &mut persistence);
                detections.extend(run.detections.iter().map(|e| DetectionRow::new(run_id, e)));
                run_id += 1;
            }
        }
        if control.is_none() {
            control = Some(faultlab::run_control_arm(
                &env,
                r.base.control_hits,
                derive_seed(r.base.seed, &[TAG_CONTROL]),
            )?);
        }
    }
    let sweep = if r.base.exhaustive_sweep {
        Some(faultlab::exhaustive_sweep(
            faultlab::SWEEP_GEOMETRY,
            derive_seed(r.base.seed, &[TAG_SWEEP]),
        )?)
    } else {
        None
    };
    let summary = DetectSummary {
        between_cycles,
        after_verify,
        persistence: ptally,
        sweep,
        control: control.expect("at least one model seed"),
        control_hits_required: r.base.control_hits,
    };
    Ok(DetectOutput {
        rows,
        persistence,
        detections,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Throughput {
    pub measurements: usize,
    pub mean_tokens_per_sec: f64,
    pub sd_tokens_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadSummary {
    pub on: Throughput,
    pub off: Throughput,
    /// `(on − off) / off` of the mean throughput.
    pub relative_delta: f64,
    /// Both arms generated the same tokens for every request.
    pub outputs_identical: bool,
}

pub struct OverheadOutput {
    pub rows: Vec<TimingRow>,
    pub summary: OverheadSummary,
}

fn token_digest(tokens: &[u32]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Batch-size-one follow-up requests with the checksum mechanism on and off.
/// Arms alternate order between runs.
pub fn overhead(r: &Resolved) -> Result<OverheadOutput, HarnessError> {
    let ms = r.base.model_seeds[0];
    let on_env = build_env(r, ms, IntegrityConfig::checksums())?;
    let off_env = on_env.with_integrity(IntegrityConfig::disabled());
    let mut rows = Vec::new();
    for k in 0..r.runs {
        let seed = run_seed(r.base.seed, k);
        let arms = [("on", &on_env), ("off", &off_env)];
        let order: Vec<_> = if k % 2 == 0 {
            arms.to_vec()
        } else {
            arms.into_iter().rev().collect()
        };
        for (arm, env) in order {
            let mut engine = env.new_engine()?;
            env.warm_up(&mut engine, &env.prefix, seed)?;
            for (i, req) in env
                .trial_requests(&env.prefix, r.requests, seed, 0)
                .iter()
                .enumerate()
            {
                let start = Instant::now();
                let out = engine.run_request(req).map_err(FaultError::from)?;
                let seconds = start.elapsed().as_secs_f64();
                rows.push(TimingRow {
                    run_id: k,
                    arm,
                    request: i + 1,
                    tokens: out.tokens.len(),
                    seconds,
                    tokens_per_sec: out.tokens.len() as f64 / seconds.max(f64::MIN_POSITIVE),
                    output_digest: token_digest(&out.tokens),
                });
            }
        }
    }
    rows.sort_by(|a, b| (a.run_id, a.arm, a.request).cmp(&(b.run_id, b.arm, b.request)));
    let arm = |name: &str| {
        let tps: Vec<f64> = rows
            .iter()
            .filter(|x| x.arm == name)
            .map(|x| x.tokens_per_sec)
            .collect();
        Throughput {
            measurements: tps.len(),
            mean_tokens_per_sec: stats::mean(&tps),
            sd_tokens_per_sec: stats::std_dev(&tps),
        }
    };
    let (on, off) = (arm("on"), arm("off"));
    let digests = |name: &str| -> Vec<&str> {
        rows.iter()
            .filter(|x| x.arm == name)
            .map(|x| x.output_digest.as_str())
            .collect()
    };
    let summary = OverheadSummary {
        relative_delta: (on.mean_tokens_per_sec - off.mean_tokens_per_sec)
            / off.mean_tokens_per_sec,
        outputs_identical: digests("on") == digests("off"),
        on,
        off,
    };
    Ok(OverheadOutput { rows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseLevel {
    pub n_c: usize,
    pub trials: usize,
    pub divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSummary {
    pub trials: usize,
    pub divergences: usize,
    pub force_divergence: bool,
    pub levels: Vec<NoiseLevel>,
}

impl NoiseSummary {
    pub fn failures(&self) -> Vec<String> {
        if self.divergences == 0 {
            return Vec::new();
        }
        vec![format!(
            "{} of {} injection-free trials diverged from baseline",
            self.divergences, self.trials
        )]
    }
}

pub struct NoiseOutput {
    pub rows: Vec<TrialRow>,
    pub summary: NoiseSummary,
}

/// Bit flipped in test mode to force divergences.
const FORCED_BIT: u8 = 14;

pub fn noise_floor(r: &Resolved) -> Result<NoiseOutput, HarnessError> {
    let integrity = r.base.integrity.to_config();
    let bit = if r.base.force_divergence {
        BitPosition::new(FORCED_BIT).ok()
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut levels: Vec<NoiseLevel> = r
        .nc_levels
        .iter()
        .map(|&n_c| NoiseLevel {
            n_c,
            trials: 0,
            divergences: 0,
        })
        .collect();
    for &ms in &r.base.model_seeds {
        let env = build_env(r, ms, integrity)?;
        for level in levels.iter_mut() {
            for t in 0..r.trials {
                let seed = trial_seed(r.base.seed, t);
                let res = run_trial(&env, bit, level.n_c, seed)?;
                level.trials += 1;
                level.divergences += usize::from(res.metrics.tcr > 0.0);
                let flip = (res.before, res.after);
                rows.push(TrialRow::new(
                    rows.len(),
                    ms,
                    seed,
                    level.n_c,
                    None,
                    &res.spec,
                    flip,
                    &res.metrics,
                ));
            }
        }
    }
    let summary = NoiseSummary {
        trials: levels.iter().map(|l| l.trials).sum(),
        divergences: levels.iter().map(|l| l.divergences).sum(),
        force_divergence: r.base.force_divergence,
        levels,
    };
    Ok(NoiseOutput { rows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub experiment: Experiment,
    pub version: &'static str,
    pub config: ExperimentConfig,
    pub results: serde_json::Value,
    /// Violated experiment assertions; nonempty means exit status 3.
    pub failures: Vec<String>,
}

/// Run `r.experiment`, write its files into `out` and return the report
/// that was written as `summary.json`.
pub fn execute(r: &Resolved, out: &Path) -> Result<Report, HarnessError> {
    std::fs::create_dir_all(out).map_err(|source| HarnessError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    use output::{
        csv_bytes, write_file, DETECTIONS_CSV, PERSISTENCE_CSV, SUMMARY_JSON, TRIALS_CSV,
    };
    let (results, failures) = match r.experiment {
        Experiment::ScanBits => {
            let o = scan_bits(r)?;
            write_file(out, TRIALS_CSV, &csv_bytes(&o.rows)?)?;
            (serde_json::to_value(&o.summary)?, Vec::new())
        }
        Experiment::Selective => {
            let o = selective(r)?;
            write_file(out, TRIALS_CSV, &csv_bytes(&o.rows)?)?;
            (serde_json::to_value(&o.summary)?, o.summary.failures())
        }
        Experiment::Persistence => {
            let o = persistence(r)?;
            write_file(out, PERSISTENCE_CSV, &csv_bytes(&o.rows)?)?;
            write_file(out, DETECTIONS_CSV, &csv_bytes(&o.detections)?)?;
            (serde_json::to_value(&o.summary)?, Vec::new())
        }
        Experiment::Detect => {
            let o = detect(r)?;
            write_file(out, TRIALS_CSV, &csv_bytes(&o.rows)?)?;
            write_file(out, PERSISTENCE_CSV, &csv_bytes(&o.persistence)?)?;
            write_file(out, DETECTIONS_CSV, &csv_bytes(&o.detections)?)?;
            (serde_json::to_value(&o.summary)?, o.summary.failures())
        }
        Experiment::Overhead => {
            let o = overhead(r)?;
            write_file(out, TRIALS_CSV, &csv_bytes(&o.rows)?)?;
            (serde_json::to_value(&o.summary)?, Vec::new())
        }
        Experiment::NoiseFloor => {
            let o = noise_floor(r)?;
            write_file(out, TRIALS_CSV, &csv_bytes(&o.rows)?)?;
            (serde_json::to_value(&o.summary)?, o.summary.failures())
        }
    };
    let report = Report {
        experiment: r.experiment,
        version: env!("CARGO_PKG_VERSION"),
        config: r.to_config(),
        results,
        failures,
    };
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    write_file(out, SUMMARY_JSON, &json)?;
    Ok(report)
}
