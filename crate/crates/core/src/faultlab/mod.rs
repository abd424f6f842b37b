//! Fault injection: target selection, single-bit injection and the trial,
//! persistence, replay and sweep drivers built on top of the engine.
//!
//! A trial runs four phases on a fresh engine: a warm-up request populates
//! the prefix blocks, `n_c` requests produce baselines, one bit of one value
//! element inside a shared prefix block is flipped, and the same `n_c`
//! requests run again. Coordinates and suffixes are derived from the trial
//! seed only, so trials with the same seed at different bit positions hit the
//! same element with the same workload.

pub mod metrics;

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bf16::{encode, flip_bit, Bf16Pattern, BitPosition};
use crate::block_pool::{chain_hashes, BlockHash, BlockId, BlockPool, ExtraKeys, TokenId};
use crate::engine::{
    Engine, EngineConfig, EngineError, GenerationOutput, Model, Request, RequestContext,
};
use crate::integrity::{self, DetectionEvent, IntegrityConfig, IntegrityError, Verdict};
use crate::kvstore::{Coord, KvError, KvGeometry, KvSide, KvStore};
use crate::num::Scalar;

pub use metrics::{
    classify_trial, corruption_indicator, cumulative, lcs_len, ocr, rouge_l_f1, tcr, tdr, Category,
    MetricError, TrialMetrics, COLLAPSE_ROUGE_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum FaultError {
    #[error("injection surface is empty")]
    EmptySurface,
    #[error("prefix groups share their first block")]
    SharedPrefix,
    #[error("trial needs at least one request")]
    NoRequests,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] KvError),
    #[error(transparent)]
    Integrity(#[from] IntegrityError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

const STREAM_COORD: u64 = 1;
const STREAM_SUFFIX: u64 = 2;
const STREAM_WARMUP: u64 = 3;
const STREAM_PREFIX: u64 = 4;

/// Suffix lengths are uniform over this range.
pub const SUFFIX_LEN_MIN: usize = 8;
pub const SUFFIX_LEN_MAX: usize = 32;

/// Derive an independent seed by walking `tags` through ChaCha streams.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(seed, |s, &t| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        r.set_stream(t);
        r.next_u64()
    })
}

/// `len` tokens uniform over `[1, vocab)`; id 0 is the collapse token.
pub fn synthetic_tokens(len: usize, vocab_size: usize, seed: u64) -> Vec<TokenId> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| r.gen_range(1..vocab_size as TokenId))
        .collect()
}

pub fn synthetic_prefix(len: usize, vocab_size: usize, seed: u64) -> Vec<TokenId> {
    synthetic_tokens(len, vocab_size, derive_seed(seed, &[STREAM_PREFIX]))
}

/// Per-request suffix with a seeded length in `[8, 32]`.
pub fn synthetic_suffix(vocab_size: usize, seed: u64) -> Vec<TokenId> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let len = r.gen_range(SUFFIX_LEN_MIN..=SUFFIX_LEN_MAX);
    synthetic_tokens(len, vocab_size, r.next_u64())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSpec {
    /// `None` marks a control trial: nothing is flipped.
    pub bit: Option<BitPosition>,
    pub coord: Coord,
    pub rng_seed: u64,
}

/// Uniform target over (layer, block in `surface`, slot, head, channel) on
/// the value side.
pub fn pick_target(
    surface: &[BlockId],
    geometry: &KvGeometry,
    bit: Option<BitPosition>,
    seed: u64,
) -> Result<InjectionSpec, FaultError> {
    if surface.is_empty() {
        return Err(FaultError::EmptySurface);
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let coord = Coord {
        layer: r.gen_range(0..geometry.n_layers),
        side: KvSide::Value,
        block: surface[r.gen_range(0..surface.len())],
        slot: r.gen_range(0..geometry.block_size),
        head: r.gen_range(0..geometry.n_kv_heads),
        channel: r.gen_range(0..geometry.head_dim),
    };
    Ok(InjectionSpec {
        bit,
        coord,
        rng_seed: seed,
    })
}

/// Flip `spec.bit` in place; returns the element before and after.
pub fn inject(
    store: &mut KvStore,
    spec: &InjectionSpec,
) -> Result<(Bf16Pattern, Bf16Pattern), KvError> {
    let before = store.read(&spec.coord)?;
    let after = match spec.bit {
        Some(p) => flip_bit(before, p),
        None => before,
    };
    store.write(&spec.coord, after)?;
    Ok((before, after))
}

/// Shared inputs of every driver: the model, engine sizing and the prefix.
#[derive(Clone)]
pub struct TrialEnv<S: Scalar> {
    pub model: Arc<Model<S>>,
    pub engine: EngineConfig,
    pub prefix: Vec<TokenId>,
}

impl<S: Scalar> TrialEnv<S> {
    pub fn new_engine(&self) -> Result<Engine<S>, FaultError> {
        Ok(Engine::new(self.model.clone(), self.engine)?)
    }

    pub fn with_integrity(&self, integrity: IntegrityConfig) -> Self {
        let mut e = self.clone();
        e.engine.integrity = integrity;
        e
    }

    fn vocab(&self) -> usize {
        self.model.config().vocab_size
    }

    pub fn request(&self, prefix: &[TokenId], request_id: u64, suffix_seed: u64) -> Request {
        Request {
            request_id,
            prefix_tokens: prefix.to_vec(),
            suffix_tokens: synthetic_suffix(self.vocab(), suffix_seed),
            salt: None,
        }
    }

    /// Requests `0..n` of a trial, identical for every bit position.
    pub fn trial_requests(
        &self,
        prefix: &[TokenId],
        n: usize,
        seed: u64,
        id_base: u64,
    ) -> Vec<Request> {
        (0..n as u64)
            .map(|i| {
                self.request(
                    prefix,
                    id_base + i,
                    derive_seed(seed, &[STREAM_SUFFIX, id_base + i]),
                )
            })
            .collect()
    }

    /// Run the warm-up request and return the shared prefix blocks.
    pub fn warm_up(
        &self,
        engine: &mut Engine<S>,
        prefix: &[TokenId],
        seed: u64,
    ) -> Result<Vec<BlockId>, FaultError> {
        let r = self.request(prefix, u64::MAX, derive_seed(seed, &[STREAM_WARMUP]));
        engine.run_request(&r)?;
        Ok(engine.cached_prefix_blocks(prefix, None))
    }
}

fn tokens(outs: &[GenerationOutput]) -> Vec<Vec<TokenId>> {
    outs.iter().map(|o| o.tokens.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub spec: InjectionSpec,
    pub n_c: usize,
    pub before: Bf16Pattern,
    pub after: Bf16Pattern,
    pub baselines: Vec<Vec<TokenId>>,
    pub outputs: Vec<Vec<TokenId>>,
    pub metrics: TrialMetrics,
    /// 1 when any request changed.
    pub ocr_contribution: f64,
    pub degenerate_outputs: usize,
}

pub fn run_trial<S: Scalar>(
    env: &TrialEnv<S>,
    bit: Option<BitPosition>,
    n_c: usize,
    seed: u64,
) -> Result<TrialResult, FaultError> {
    if n_c == 0 {
        return Err(FaultError::NoRequests);
    }
    let mut engine = env.new_engine()?;
    let surface = env.warm_up(&mut engine, &env.prefix, seed)?;
    let reqs = env.trial_requests(&env.prefix, n_c, seed, 0);
    let baselines = tokens(&engine.run_cycle(&reqs)?);
    let spec = pick_target(
        &surface,
        engine.store().geometry(),
        bit,
        derive_seed(seed, &[STREAM_COORD]),
    )?;
    let (before, after) = inject(engine.store_mut(), &spec)?;
    let post = engine.run_cycle(&reqs)?;
    let outputs = tokens(&post);
    let metrics = TrialMetrics::compute(&baselines, &outputs)?;
    Ok(TrialResult {
        ocr_contribution: if metrics.tcr > 0.0 { 1.0 } else { 0.0 },
        degenerate_outputs: post.iter().filter(|o| o.degenerate).count(),
        spec,
        n_c,
        before,
        after,
        baselines,
        outputs,
        metrics,
    })
}

/// Where a scan trial's flip lands.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionSite {
    /// A shared prefix block, before the repeat cycle reads it.
    #[default]
    Prefix,
    /// A written prompt slot of one request's own blocks (the partial
    /// boundary block or the suffix), after prefill and before decode.
    Private,
}

/// Pick one written, uncached prompt slot of one request in `ctxs`.
fn pick_private_target<S>(
    ctxs: &[RequestContext<S>],
    geometry: &KvGeometry,
    bit: Option<BitPosition>,
    seed: u64,
) -> Result<InjectionSpec, FaultError> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let c = &ctxs[r.gen_range(0..ctxs.len())];
    let start = c.hit_blocks * geometry.block_size;
    if start >= c.prompt.len() {
        return Err(FaultError::EmptySurface);
    }
    let pos = r.gen_range(start..c.prompt.len());
    let coord = Coord {
        layer: r.gen_range(0..geometry.n_layers),
        side: KvSide::Value,
        block: c.block_table[pos / geometry.block_size],
        slot: pos % geometry.block_size,
        head: r.gen_range(0..geometry.n_kv_heads),
        channel: r.gen_range(0..geometry.head_dim),
    };
    Ok(InjectionSpec {
        bit,
        coord,
        rng_seed: seed,
    })
}

/// A scan trial with the flip placed at `site`. Same requests and seeds as
/// `run_trial`, which is the `Prefix` case.
pub fn run_trial_at<S: Scalar>(
    env: &TrialEnv<S>,
    site: InjectionSite,
    bit: Option<BitPosition>,
    n_c: usize,
    seed: u64,
) -> Result<TrialResult, FaultError> {
    if site == InjectionSite::Prefix {
        return run_trial(env, bit, n_c, seed);
    }
    if n_c == 0 {
        return Err(FaultError::NoRequests);
    }
    let mut engine = env.new_engine()?;
    env.warm_up(&mut engine, &env.prefix, seed)?;
    let reqs = env.trial_requests(&env.prefix, n_c, seed, 0);
    let baselines = tokens(&engine.run_cycle(&reqs)?);
    let geometry = *engine.store().geometry();
    let mut injected = None;
    let post = engine.run_cycle_hooked(
        &reqs,
        |_, _| {},
        |store, ctxs| {
            injected = Some(
                pick_private_target(ctxs, &geometry, bit, derive_seed(seed, &[STREAM_COORD]))
                    .and_then(|spec| Ok((inject(store, &spec)?, spec))),
            );
        },
    )?;
    let ((before, after), spec) = injected.expect("hook runs once per cycle")?;
    let outputs = tokens(&post);
    let metrics = TrialMetrics::compute(&baselines, &outputs)?;
    Ok(TrialResult {
        ocr_contribution: if metrics.tcr > 0.0 { 1.0 } else { 0.0 },
        degenerate_outputs: post.iter().filter(|o| o.degenerate).count(),
        spec,
        n_c,
        before,
        after,
        baselines,
        outputs,
        metrics,
    })
}

/// Two prefix groups in one cycle; only group A's blocks are injected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveResult {
    pub spec: InjectionSpec,
    pub n_c: usize,
    pub before: Bf16Pattern,
    pub after: Bf16Pattern,
    pub group_a: TrialMetrics,
    pub group_b: TrialMetrics,
}

pub fn prefixes_share_blocks(a: &[TokenId], b: &[TokenId], block_size: usize) -> bool {
    let (ha, hb) = (
        chain_hashes(a, block_size, &ExtraKeys::default()),
        chain_hashes(b, block_size, &ExtraKeys::default()),
    );
    matches!((ha.first(), hb.first()), (Some(x), Some(y)) if x == y)
}

pub fn run_selective_trial<S: Scalar>(
    env: &TrialEnv<S>,
    prefix_b: &[TokenId],
    bit: Option<BitPosition>,
    n_c: usize,
    seed: u64,
) -> Result<SelectiveResult, FaultError> {
    if n_c == 0 {
        return Err(FaultError::NoRequests);
    }
    if prefixes_share_blocks(&env.prefix, prefix_b, env.engine.block_size) {
        return Err(FaultError::SharedPrefix);
    }
    let mut engine = env.new_engine()?;
    let surface = env.warm_up(&mut engine, &env.prefix, seed)?;
    env.warm_up(&mut engine, prefix_b, derive_seed(seed, &[STREAM_PREFIX]))?;
    let mut reqs = env.trial_requests(&env.prefix, n_c, seed, 0);
    reqs.extend(env.trial_requests(prefix_b, n_c, seed, n_c as u64));
    let baselines = tokens(&engine.run_cycle(&reqs)?);
    let spec = pick_target(
        &surface,
        engine.store().geometry(),
        bit,
        derive_seed(seed, &[STREAM_COORD]),
    )?;
    let (before, after) = inject(engine.store_mut(), &spec)?;
    let outputs = tokens(&engine.run_cycle(&reqs)?);
    Ok(SelectiveResult {
        group_a: TrialMetrics::compute(&baselines[..n_c], &outputs[..n_c])?,
        group_b: TrialMetrics::compute(&baselines[n_c..], &outputs[n_c..])?,
        spec,
        n_c,
        before,
        after,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivalCheckpoint {
    pub after_request: usize,
    pub block_present: bool,
}

/// One injection followed by `N` sequential requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceRun {
    pub spec: InjectionSpec,
    pub before: Bf16Pattern,
    pub after: Bf16Pattern,
    /// `c_i` for `i = 1..=N`.
    pub indicators: Vec<bool>,
    pub cumulative: Vec<u32>,
    pub survival: Vec<SurvivalCheckpoint>,
    /// Requests that read the injected element while it was corrupted.
    pub corrupted_serves: usize,
    pub detections: Vec<DetectionEvent>,
}

impl PersistenceRun {
    pub fn total(&self) -> u32 {
        self.cumulative.last().copied().unwrap_or(0)
    }

    pub fn rate(&self) -> f64 {
        if self.indicators.is_empty() {
            0.0
        } else {
            f64::from(self.total()) / self.indicators.len() as f64
        }
    }
}

/// Location of the injected element inside the prefix chain.
struct Target {
    block: BlockId,
    hash: BlockHash,
    chain_index: usize,
}

impl Target {
    fn locate(engine: &Engine<impl Scalar>, surface: &[BlockId], spec: &InjectionSpec) -> Self {
        let chain_index = surface
            .iter()
            .position(|&b| b == spec.coord.block)
            .expect("target on surface");
        let hash = engine
            .pool()
            .meta(spec.coord.block)
            .ok()
            .and_then(|m| m.chain_hash)
            .expect("surface blocks are registered");
        Self {
            block: spec.coord.block,
            hash,
            chain_index,
        }
    }

    fn present(&self, pool: &BlockPool) -> bool {
        pool.lookup(&self.hash) == Some(self.block)
    }
}

/// Outputs of requests `1..=n_requests` of a persistence run on an engine
/// with no injection and no integrity mechanism. By cache transparency they
/// equal recomputing each request from scratch, and they do not depend on
/// the bit, so one set serves every bit of the same run seed.
pub fn persistence_baselines<S: Scalar>(
    env: &TrialEnv<S>,
    n_requests: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>, FaultError> {
    let env = env.with_integrity(IntegrityConfig::disabled());
    let mut clean = env.new_engine()?;
    env.warm_up(&mut clean, &env.prefix, seed)?;
    (1..=n_requests as u64)
        .map(|i| {
            Ok(clean
                .run_request(&persistence_request(&env, i, seed))?
                .tokens)
        })
        .collect()
}

fn persistence_request<S: Scalar>(env: &TrialEnv<S>, i: u64, seed: u64) -> Request {
    env.request(&env.prefix, i, derive_seed(seed, &[STREAM_SUFFIX, i]))
}

pub fn run_persistence<S: Scalar>(
    env: &TrialEnv<S>,
    bit: Option<BitPosition>,
    n_requests: usize,
    checkpoints: &[usize],
    seed: u64,
) -> Result<PersistenceRun, FaultError> {
    let baselines = persistence_baselines(env, n_requests, seed)?;
    run_persistence_against(env, bit, &baselines, checkpoints, seed)
}

/// One injection, then one request per baseline.
pub fn run_persistence_against<S: Scalar>(
    env: &TrialEnv<S>,
    bit: Option<BitPosition>,
    baselines: &[Vec<TokenId>],
    checkpoints: &[usize],
    seed: u64,
) -> Result<PersistenceRun, FaultError> {
    let n_requests = baselines.len();
    let mut engine = env.new_engine()?;
    let surface = env.warm_up(&mut engine, &env.prefix, seed)?;
    let spec = pick_target(
        &surface,
        engine.store().geometry(),
        bit,
        derive_seed(seed, &[STREAM_COORD]),
    )?;
    let target = Target::locate(&engine, &surface, &spec);
    let (before, after) = inject(engine.store_mut(), &spec)?;

    let mut indicators = Vec::with_capacity(n_requests);
    let mut survival = Vec::new();
    let mut corrupted_serves = 0;
    for (i, base) in (1..=n_requests as u64).zip(baselines) {
        let r = persistence_request(env, i, seed);
        let live = before != after
            && target.present(engine.pool())
            && engine.store().read(&spec.coord)? == after;
        let out = engine.run_request(&r)?;
        if live && out.cache_hits() > target.chain_index {
            corrupted_serves += 1;
        }
        indicators.push(corruption_indicator(base, &out.tokens));
        if checkpoints.contains(&(i as usize)) {
            survival.push(SurvivalCheckpoint {
                after_request: i as usize,
                block_present: target.present(engine.pool()),
            });
        }
    }
    Ok(PersistenceRun {
        cumulative: cumulative(&indicators),
        detections: engine.detection_events().to_vec(),
        spec,
        before,
        after,
        indicators,
        survival,
        corrupted_serves,
    })
}

/// When the flip lands relative to the injection cycle's verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionWindow {
    /// Between cycles: the next verification sees it.
    BetweenCycles,
    /// After the cycle's verification, before its model step reads the block.
    AfterVerify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub spec: InjectionSpec,
    pub window: InjectionWindow,
    pub n_c: usize,
    pub cycles: usize,
    /// Requests over all cycles whose output differs from its baseline.
    pub affected: usize,
    /// Mismatches raised on the injected block.
    pub detected: usize,
    /// Mismatches raised on any other block.
    pub false_positives: usize,
    /// A mismatch on the injected block fired before any request read it.
    pub detected_before_serve: bool,
    /// Every output from the cycle after the injection cycle on equals its baseline.
    pub post_recompute_equal: bool,
    pub events: Vec<DetectionEvent>,
}

/// Replay one injection against an engine running the configured integrity
/// mechanism, with the same `n_c` requests in every cycle.
pub fn run_replay<S: Scalar>(
    env: &TrialEnv<S>,
    bit: Option<BitPosition>,
    n_c: usize,
    cycles: usize,
    window: InjectionWindow,
    seed: u64,
) -> Result<ReplayReport, FaultError> {
    if n_c == 0 {
        return Err(FaultError::NoRequests);
    }
    let mut engine = env.new_engine()?;
    let surface = env.warm_up(&mut engine, &env.prefix, seed)?;
    let reqs = env.trial_requests(&env.prefix, n_c, seed, 0);
    let baselines = tokens(&engine.run_cycle(&reqs)?);
    let spec = pick_target(
        &surface,
        engine.store().geometry(),
        bit,
        derive_seed(seed, &[STREAM_COORD]),
    )?;
    let events_before = engine.detection_events().len();
    let mut affected = 0;
    let mut post_recompute_equal = true;
    for cycle in 0..cycles {
        let outs = if cycle == 0 {
            match window {
                InjectionWindow::BetweenCycles => {
                    inject(engine.store_mut(), &spec)?;
                    engine.run_cycle(&reqs)?
                }
                InjectionWindow::AfterVerify => {
                    let mut res = Ok(());
                    let outs = engine
                        .run_cycle_with(&reqs, |store, _| res = inject(store, &spec).map(drop))?;
                    res?;
                    outs
                }
            }
        } else {
            engine.run_cycle(&reqs)?
        };
        let changed = outs
            .iter()
            .zip(&baselines)
            .filter(|(o, b)| o.tokens != **b)
            .count();
        affected += changed;
        if cycle > 0 && changed > 0 {
            post_recompute_equal = false;
        }
    }
    let events = &engine.detection_events()[events_before..];
    let on_target = |e: &&DetectionEvent| e.block_id == spec.coord.block;
    let detected = events.iter().filter(on_target).count();
    let first_cycle = engine.cycle() - cycles as u64;
    let detected_before_serve = match window {
        InjectionWindow::BetweenCycles => events
            .iter()
            .filter(on_target)
            .any(|e| e.cycle == first_cycle),
        InjectionWindow::AfterVerify => false,
    };
    Ok(ReplayReport {
        false_positives: events.len() - detected,
        spec,
        window,
        n_c,
        cycles,
        affected,
        detected,
        detected_before_serve,
        post_recompute_equal,
        events: events.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub geometry: KvGeometry,
    pub elements: usize,
    pub flips: usize,
    pub detected: usize,
    /// Blocks other than the flipped one that failed verification.
    pub collateral_mismatches: usize,
    /// Blocks still failing after the flip was undone.
    pub residual_mismatches: usize,
}

/// Geometry of the exhaustive detection sweep.
pub const SWEEP_GEOMETRY: KvGeometry = KvGeometry {
    n_layers: 2,
    n_blocks: 4,
    block_size: 4,
    n_kv_heads: 2,
    head_dim: 4,
};

/// Seal every block of a seeded store, then flip every bit of every element
/// on both sides and verify each block.
pub fn exhaustive_sweep(geometry: KvGeometry, seed: u64) -> Result<SweepReport, FaultError> {
    let mut store = KvStore::new(geometry)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for layer in 0..geometry.n_layers {
        for side in KvSide::BOTH {
            for block in 0..geometry.n_blocks {
                for slot in 0..geometry.block_size {
                    for head in 0..geometry.n_kv_heads {
                        for channel in 0..geometry.head_dim {
                            let c = Coord {
                                layer,
                                side,
                                block,
                                slot,
                                head,
                                channel,
                            };
                            store.write(&c, encode(r.gen_range(-2.0f32..2.0)))?;
                            coords.push(c);
                        }
                    }
                }
            }
        }
    }
    let mut pool = BlockPool::new(geometry.n_blocks, geometry.block_size);
    let tokens = synthetic_tokens(geometry.n_blocks * geometry.block_size, 1 << 15, seed);
    for h in chain_hashes(&tokens, geometry.block_size, &ExtraKeys::default()) {
        let b = pool.allocate_block().map_err(EngineError::from)?;
        pool.seal_block(b, h).map_err(EngineError::from)?;
        integrity::seal(&store, &mut pool, b, 0)?;
    }
    let mut report = SweepReport {
        geometry,
        elements: coords.len(),
        flips: 0,
        detected: 0,
        collateral_mismatches: 0,
        residual_mismatches: 0,
    };
    for c in &coords {
        for p in BitPosition::all() {
            let spec = InjectionSpec {
                bit: Some(p),
                coord: *c,
                rng_seed: seed,
            };
            inject(&mut store, &spec)?;
            report.flips += 1;
            for b in 0..geometry.n_blocks {
                let mismatch = integrity::verify(&store, &pool, b)? == Verdict::Mismatch;
                if b == c.block {
                    report.detected += usize::from(mismatch);
                } else {
                    report.collateral_mismatches += usize::from(mismatch);
                }
            }
            inject(&mut store, &spec)?;
            if integrity::verify(&store, &pool, c.block)? == Verdict::Mismatch {
                report.residual_mismatches += 1;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlReport {
    pub requests: usize,
    pub verified_hits: u64,
    pub mismatches: u64,
    pub pre_seal_hits: u64,
}

/// Injection-free requests against a checksum-enabled engine until at least
/// `min_verified_hits` hits were verified.
pub fn run_control_arm<S: Scalar>(
    env: &TrialEnv<S>,
    min_verified_hits: u64,
    seed: u64,
) -> Result<ControlReport, FaultError> {
    let env = env.with_integrity(IntegrityConfig {
        enabled: true,
        ..env.engine.integrity
    });
    let mut engine = env.new_engine()?;
    env.warm_up(&mut engine, &env.prefix, seed)?;
    let mut requests = 0;
    while engine.integrity_stats().verified_hits < min_verified_hits {
        let before = engine.integrity_stats().verified_hits;
        let r = env.request(
            &env.prefix,
            requests as u64,
            derive_seed(seed, &[STREAM_SUFFIX, requests as u64]),
        );
        engine.run_request(&r)?;
        requests += 1;
        if engine.integrity_stats().verified_hits == before && requests > 16 {
            break;
        }
    }
    let s = engine.integrity_stats();
    Ok(ControlReport {
        requests,
        verified_hits: s.verified_hits,
        mismatches: s.mismatches,
        pre_seal_hits: s.pre_seal_hits,
    })
}

#[cfg(test)]
mod tests;
