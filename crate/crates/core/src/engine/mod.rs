//! Serving engine: prefix-cache scheduling, prefill and greedy decoding.
//!
//! One engine instance is strictly sequential. A scheduling cycle takes a
//! batch of requests and
//!
//! 1. schedules each one in order: walks its prefix chain hashes, verifies
//!    every hit (when checksums are enabled), touches the hits, allocates the
//!    rest and registers the prefix blocks it is about to compute;
//! 2. runs the prompt forward pass of every request (the model step);
//! 3. installs the deferred digests of blocks registered in this cycle;
//! 4. decodes every request greedily;
//! 5. releases all blocks.
//!
//! Only blocks lying entirely inside the shared prefix are registered. The
//! block straddling the prefix/suffix border holds request-specific tokens
//! and is never shared.

mod model;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{argmax, rms_norm, AttentionOutput, LayerWeights, Matrix, Model, ToyModelConfig};

use crate::block_pool::{BlockId, BlockPool, ExtraKeys, PoolError, TokenId};
use crate::integrity::{
    self, DetectionCause, DetectionEvent, IntegrityConfig, IntegrityError, IntegrityStats,
    TtlDecision, Verdict, ACTION_EVICT_RECOMPUTE,
};
use crate::kvstore::{KvError, KvGeometry, KvStore};
use crate::num::Scalar;

/// Token emitted for every remaining step once logits stop being finite.
pub const COLLAPSE_TOKEN: TokenId = 0;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Store(#[from] KvError),
    #[error(transparent)]
    Integrity(#[from] IntegrityError),
    #[error("request {0} has no tokens")]
    EmptyRequest(u64),
    #[error("request {request_id} needs {needed} positions, model supports {max}")]
    TooLong {
        request_id: u64,
        needed: usize,
        max: usize,
    },
    #[error("token {token} outside vocabulary of {vocab}")]
    BadToken { token: TokenId, vocab: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    /// Shared system-prompt tokens.
    pub prefix_tokens: Vec<TokenId>,
    /// Per-request tokens.
    pub suffix_tokens: Vec<TokenId>,
    #[serde(default)]
    pub salt: Option<Vec<u8>>,
}

impl Request {
    pub fn prompt(&self) -> Vec<TokenId> {
        let mut p = self.prefix_tokens.clone();
        p.extend_from_slice(&self.suffix_tokens);
        p
    }

    pub fn extra_keys(&self) -> ExtraKeys {
        ExtraKeys {
            salt: self.salt.clone(),
            lora_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub request_id: u64,
    pub tokens: Vec<TokenId>,
    /// One flag per block of the request's block table.
    pub served_from_cache: Vec<bool>,
    /// Logits went non-finite and the collapse token was emitted.
    pub degenerate: bool,
}

impl GenerationOutput {
    pub fn cache_hits(&self) -> usize {
        self.served_from_cache.iter().filter(|&&h| h).count()
    }
}

/// A scheduled request holding references to its blocks.
#[derive(Debug, Clone)]
pub struct RequestContext<S> {
    pub request_id: u64,
    pub prompt: Vec<TokenId>,
    pub block_table: Vec<BlockId>,
    /// Leading entries of `block_table` served from the cache.
    pub hit_blocks: usize,
    /// Blocks this request registered for sharing.
    pub registered: Vec<BlockId>,
    /// First prompt position the model step has to compute.
    pub compute_from: usize,
    last_logits: Option<Vec<S>>,
    prefilled: bool,
}

impl<S> RequestContext<S> {
    pub fn hit_block_ids(&self) -> &[BlockId] {
        &self.block_table[..self.hit_blocks]
    }

    pub fn is_prefilled(&self) -> bool {
        self.prefilled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub n_blocks: usize,
    pub block_size: usize,
    pub integrity: IntegrityConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_blocks: 1024,
            block_size: 16,
            integrity: IntegrityConfig::disabled(),
        }
    }
}

pub struct Engine<S: Scalar = f32> {
    model: Arc<Model<S>>,
    cfg: EngineConfig,
    store: KvStore,
    pool: BlockPool,
    stats: IntegrityStats,
    events: Vec<DetectionEvent>,
    cycle: u64,
    pending_digests: Vec<BlockId>,
}

impl<S: Scalar> Engine<S> {
    pub fn new(model: Arc<Model<S>>, cfg: EngineConfig) -> Result<Self, EngineError> {
        let m = model.config();
        let geometry = KvGeometry::new(
            m.n_layers,
            cfg.n_blocks,
            cfg.block_size,
            m.n_kv_heads,
            m.head_dim,
        )?;
        Ok(Self {
            store: KvStore::new(geometry)?,
            pool: BlockPool::new(cfg.n_blocks, cfg.block_size),
            model,
            cfg,
            stats: IntegrityStats::default(),
            events: Vec::new(),
            cycle: 0,
            pending_digests: Vec::new(),
        })
    }

    pub fn model(&self) -> &Arc<Model<S>> {
        &self.model
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    /// Direct store access, e.g. for fault injection between cycles.
    pub fn store_mut(&mut self) -> &mut KvStore {
        &mut self.store
    }

    pub fn pool(&self) -> &BlockPool {
        &self.pool
    }

    pub fn integrity_stats(&self) -> &IntegrityStats {
        &self.stats
    }

    pub fn detection_events(&self) -> &[DetectionEvent] {
        &self.events
    }

    /// Number of completed scheduling cycles.
    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// Physical blocks currently serving `prefix` under `salt`.
    pub fn cached_prefix_blocks(&self, prefix: &[TokenId], salt: Option<&[u8]>) -> Vec<BlockId> {
        let extra = ExtraKeys {
            salt: salt.map(<[u8]>::to_vec),
            lora_id: None,
        };
        self.pool
            .find_longest_cached_prefix(prefix, &extra)
            .hit_blocks
    }

    fn validate(&self, req: &Request) -> Result<(), EngineError> {
        let prompt_len = req.prefix_tokens.len() + req.suffix_tokens.len();
        if prompt_len == 0 {
            return Err(EngineError::EmptyRequest(req.request_id));
        }
        let needed = prompt_len + self.model.config().max_new_tokens;
        let max = self.model.config().max_positions;
        if needed > max {
            return Err(EngineError::TooLong {
                request_id: req.request_id,
                needed,
                max,
            });
        }
        let vocab = self.model.config().vocab_size;
        if let Some(&t) = req
            .prefix_tokens
            .iter()
            .chain(&req.suffix_tokens)
            .find(|&&t| t as usize >= vocab)
        {
            return Err(EngineError::BadToken { token: t, vocab });
        }
        Ok(())
    }

    /// Look up, verify and pin cached prefix blocks, allocate the rest and
    /// register the prefix blocks this request will compute.
    pub fn schedule(&mut self, req: &Request) -> Result<RequestContext<S>, EngineError> {
        self.validate(req)?;
        let bs = self.cfg.block_size;
        let prompt = req.prompt();
        let extra = req.extra_keys();
        let prefix_len = req.prefix_tokens.len();
        // The last prompt token is always recomputed to produce logits.
        let lookup_len = prefix_len.min(prompt.len() - 1) / bs * bs;
        let lookup = self
            .pool
            .find_longest_cached_prefix(&prompt[..lookup_len], &extra);

        let mut table = Vec::new();
        let result = self
            .pin_hits(&lookup.hit_blocks, &mut table)
            .and_then(|()| {
                let hits = table.len();
                let positions = prompt.len() + self.model.config().max_new_tokens.max(1) - 1;
                let n_table = positions.div_ceil(bs);
                while table.len() < n_table {
                    table.push(self.pool.allocate_block()?);
                }
                Ok(hits)
            });
        let hits = match result {
            Ok(h) => h,
            Err(e) => {
                self.pool.release(&table)?;
                return Err(e);
            }
        };

        let hashes = crate::block_pool::chain_hashes(&prompt[..prefix_len / bs * bs], bs, &extra);
        let mut registered = Vec::new();
        for (i, h) in hashes.iter().enumerate().skip(hits) {
            let id = table[i];
            self.pool.seal_block(id, *h)?;
            if self.cfg.integrity.enabled {
                self.pool.meta_mut(id)?.digest_pending = true;
                self.pending_digests.push(id);
            }
            registered.push(id);
        }

        Ok(RequestContext {
            request_id: req.request_id,
            compute_from: hits * bs,
            prompt,
            block_table: table,
            hit_blocks: hits,
            registered,
            last_logits: None,
            prefilled: false,
        })
    }

    fn pin_hits(
        &mut self,
        candidates: &[BlockId],
        table: &mut Vec<BlockId>,
    ) -> Result<(), EngineError> {
        let integrity = self.cfg.integrity;
        for &b in candidates {
            if integrity.enabled {
                let meta = self.pool.meta(b)?;
                if meta.digest_pending {
                    self.stats.pre_seal_hits += 1;
                } else if meta.digest.is_some() {
                    self.stats.verified_hits += 1;
                    if integrity::verify(&self.store, &self.pool, b)? == Verdict::Mismatch {
                        self.stats.mismatches += 1;
                        self.record(b, DetectionCause::Checksum);
                        integrity::on_mismatch(&mut self.pool, b)?;
                        return Ok(());
                    }
                }
            }
            if integrity::ttl_check(&self.pool, b, &integrity)? == TtlDecision::Recompute {
                self.stats.ttl_recomputes += 1;
                self.record(b, DetectionCause::Ttl);
                self.pool.invalidate(b)?;
                return Ok(());
            }
            self.pool.touch(b)?;
            table.push(b);
        }
        Ok(())
    }

    fn record(&mut self, block_id: BlockId, cause: DetectionCause) {
        self.events.push(DetectionEvent {
            cycle: self.cycle,
            block_id,
            cause,
            action: ACTION_EVICT_RECOMPUTE.to_string(),
        });
    }

    /// Model step for one request: compute and store K/V of every prompt
    /// position not served from the cache.
    pub fn compute_prompt(&mut self, ctx: &mut RequestContext<S>) {
        let last = ctx.prompt.len() - 1;
        let start = ctx.compute_from.min(last);
        for pos in start..=last {
            ctx.last_logits = self.model.forward_token(
                &mut self.store,
                &ctx.block_table,
                pos,
                ctx.prompt[pos],
                pos == last,
            );
        }
        ctx.prefilled = true;
    }

    /// Install the deferred digests of blocks registered since the last step.
    pub fn end_model_step(&mut self) -> Result<(), EngineError> {
        for id in std::mem::take(&mut self.pending_digests) {
            // Skip blocks invalidated or re-registered before their digest landed.
            if self.pool.meta(id)?.digest_pending {
                integrity::seal(&self.store, &mut self.pool, id, self.cycle)?;
                self.stats.digests_computed += 1;
            }
        }
        Ok(())
    }

    /// Schedule and compute the prompt of one request.
    pub fn prefill(&mut self, req: &Request) -> Result<RequestContext<S>, EngineError> {
        let mut ctx = self.schedule(req)?;
        self.compute_prompt(&mut ctx);
        Ok(ctx)
    }

    /// Greedy decoding with lowest-id tie break. Once any logit is non-finite
    /// the collapse token fills the remaining steps.
    pub fn decode_greedy(&mut self, ctx: &mut RequestContext<S>) -> GenerationOutput {
        assert!(ctx.prefilled, "decode before prefill");
        let max_new = self.model.config().max_new_tokens;
        let mut tokens = Vec::with_capacity(max_new);
        let mut degenerate = false;
        let mut logits = ctx.last_logits.take();
        for step in 0..max_new {
            let next = if degenerate {
                None
            } else {
                logits.as_deref().and_then(argmax)
            };
            let Some(tok) = next else {
                degenerate = true;
                tokens.push(COLLAPSE_TOKEN);
                continue;
            };
            tokens.push(tok);
            if step + 1 < max_new {
                let pos = ctx.prompt.len() + step;
                logits =
                    self.model
                        .forward_token(&mut self.store, &ctx.block_table, pos, tok, true);
            }
        }
        GenerationOutput {
            request_id: ctx.request_id,
            tokens,
            served_from_cache: (0..ctx.block_table.len())
                .map(|i| i < ctx.hit_blocks)
                .collect(),
            degenerate,
        }
    }

    /// Drop a request's references, tail blocks first.
    pub fn release(&mut self, ctx: &RequestContext<S>) -> Result<(), EngineError> {
        let rev: Vec<BlockId> = ctx.block_table.iter().rev().copied().collect();
        self.pool.release(&rev)?;
        Ok(())
    }

    pub fn run_cycle(&mut self, reqs: &[Request]) -> Result<Vec<GenerationOutput>, EngineError> {
        self.run_cycle_with(reqs, |_, _| {})
    }

    /// Run one scheduling cycle. `after_schedule` runs once every request is
    /// scheduled and verified but before any of them reads the cache.
    pub fn run_cycle_with<F>(
        &mut self,
        reqs: &[Request],
        after_schedule: F,
    ) -> Result<Vec<GenerationOutput>, EngineError>
    where
        F: FnOnce(&mut KvStore, &[RequestContext<S>]),
    {
        self.run_cycle_hooked(reqs, after_schedule, |_, _| {})
    }

    /// As `run_cycle_with`, plus `after_prefill`, which runs once every prompt
    /// is written and digested but before the first decode step.
    pub fn run_cycle_hooked<F, G>(
        &mut self,
        reqs: &[Request],
        after_schedule: F,
        after_prefill: G,
    ) -> Result<Vec<GenerationOutput>, EngineError>
    where
        F: FnOnce(&mut KvStore, &[RequestContext<S>]),
        G: FnOnce(&mut KvStore, &[RequestContext<S>]),
    {
        let mut ctxs = Vec::with_capacity(reqs.len());
        for r in reqs {
            match self.schedule(r) {
                Ok(c) => ctxs.push(c),
                Err(e) => {
                    for c in &ctxs {
                        self.release(c)?;
                    }
                    return Err(e);
                }
            }
        }
        after_schedule(&mut self.store, &ctxs);
        for c in ctxs.iter_mut() {
            self.compute_prompt(c);
        }
        self.end_model_step()?;
        after_prefill(&mut self.store, &ctxs);
        let outputs = ctxs.iter_mut().map(|c| self.decode_greedy(c)).collect();
        for c in &ctxs {
            self.release(c)?;
        }
        self.cycle += 1;
        Ok(outputs)
    }

    /// A cycle holding a single request.
    pub fn run_request(&mut self, req: &Request) -> Result<GenerationOutput, EngineError> {
        Ok(self.run_cycle(std::slice::from_ref(req))?.remove(0))
    }
}
