//! Block integrity countermeasure.
//!
//! When a prefix block is registered its SHA-256 digest over
//! [`KvStore::block_bytes`] is computed once the model step that wrote it has
//! returned. Every later cache hit recomputes the digest at scheduling time;
//! a mismatch invalidates the block so the request recomputes it through the
//! normal prefill path. An optional time-to-live forces the same
//! recomputation after a fixed number of hits, checksums or not.

use std::fmt;
use std::num::NonZeroU64;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::block_pool::{BlockId, BlockPool, PoolError};
use crate::kvstore::{KvError, KvStore};

pub const DIGEST_ALGORITHM: &str = "SHA-256";

#[derive(Debug, Error)]
pub enum IntegrityError {
    #[error("block {0} has no installed digest")]
    NoDigest(BlockId),
    #[error("block {0} is not sealed")]
    NotSealed(BlockId),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Store(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityConfig {
    /// Checksum sealing and verification.
    pub enabled: bool,
    /// Hits served per seal before a forced recompute.
    pub ttl_requests: Option<NonZeroU64>,
}

impl Default for IntegrityConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

impl IntegrityConfig {
    pub const fn disabled() -> Self {
        Self {
            enabled: false,
            ttl_requests: None,
        }
    }

    pub const fn checksums() -> Self {
        Self {
            enabled: true,
            ttl_requests: None,
        }
    }

    pub fn with_ttl(mut self, ttl: u64) -> Self {
        self.ttl_requests = NonZeroU64::new(ttl);
        self
    }

    pub fn digest_algorithm(&self) -> &'static str {
        DIGEST_ALGORITHM
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sha256Digest(pub [u8; 32]);

impl fmt::Debug for Sha256Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sha256Digest({}..)", &hex::encode(self.0)[..12])
    }
}

impl fmt::Display for Sha256Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDigest {
    pub block_id: BlockId,
    pub digest: Sha256Digest,
    /// Scheduling cycle in which the digest was installed.
    pub sealed_at: u64,
}

pub fn digest_block(store: &KvStore, block: BlockId) -> Result<Sha256Digest, KvError> {
    let bytes = store.block_bytes(block)?;
    Ok(Sha256Digest(Sha256::digest(&bytes).into()))
}

/// Compute and install the digest of a registered block.
pub fn seal(
    store: &KvStore,
    pool: &mut BlockPool,
    block: BlockId,
    cycle: u64,
) -> Result<BlockDigest, IntegrityError> {
    if !pool.meta(block)?.sealed {
        return Err(IntegrityError::NotSealed(block));
    }
    let d = BlockDigest {
        block_id: block,
        digest: digest_block(store, block)?,
        sealed_at: cycle,
    };
    let meta = pool.meta_mut(block)?;
    meta.digest = Some(d);
    meta.digest_pending = false;
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Ok,
    Mismatch,
}

/// Recompute a sealed block's digest and compare with the stored one.
pub fn verify(
    store: &KvStore,
    pool: &BlockPool,
    block: BlockId,
) -> Result<Verdict, IntegrityError> {
    let meta = pool.meta(block)?;
    if !meta.sealed {
        return Err(IntegrityError::NotSealed(block));
    }
    let stored = meta.digest.ok_or(IntegrityError::NoDigest(block))?;
    Ok(if digest_block(store, block)? == stored.digest {
        Verdict::Ok
    } else {
        Verdict::Mismatch
    })
}

/// Evict a block that failed verification; the caller treats it as a miss.
pub fn on_mismatch(pool: &mut BlockPool, block: BlockId) -> Result<(), IntegrityError> {
    pool.invalidate(block)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TtlDecision {
    Keep,
    Recompute,
}

pub fn ttl_check(
    pool: &BlockPool,
    block: BlockId,
    cfg: &IntegrityConfig,
) -> Result<TtlDecision, IntegrityError> {
    let meta = pool.meta(block)?;
    Ok(match cfg.ttl_requests {
        Some(ttl) if meta.hits_since_seal >= ttl.get() => TtlDecision::Recompute,
        _ => TtlDecision::Keep,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionCause {
    Checksum,
    Ttl,
}

impl fmt::Display for DetectionCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectionCause::Checksum => "checksum",
            DetectionCause::Ttl => "ttl",
        })
    }
}

/// One row of `detections.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub cycle: u64,
    pub block_id: BlockId,
    pub cause: DetectionCause,
    pub action: String,
}

pub const ACTION_EVICT_RECOMPUTE: &str = "evict-recompute";

/// Counters kept by the engine's scheduler.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityStats {
    /// Cache hits whose digest was recomputed and compared.
    pub verified_hits: u64,
    pub mismatches: u64,
    pub ttl_recomputes: u64,
    /// Hits on blocks whose deferred digest was not installed yet.
    pub pre_seal_hits: u64,
    pub digests_computed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bf16::{flip_bit, Bf16Pattern, BitPosition};
    use crate::block_pool::{chain_hashes, ExtraKeys};
    use crate::kvstore::{Coord, KvGeometry, KvSide};

    fn setup() -> (KvStore, BlockPool, BlockId) {
        let g = KvGeometry::new(2, 4, 4, 2, 4).unwrap();
        let mut store = KvStore::new(g).unwrap();
        for layer in 0..2 {
            for side in KvSide::BOTH {
                for slot in 0..4 {
                    for (i, w) in store.token_mut(layer, side, 1, slot).iter_mut().enumerate() {
                        *w = Bf16Pattern(0x3F00 + (layer * 100 + slot * 10 + i) as u16);
                    }
                }
            }
        }
        let mut pool = BlockPool::new(4, 4);
        let _ = pool.allocate_block().unwrap();
        let b = pool.allocate_block().unwrap();
        let h = chain_hashes(&[1, 2, 3, 4], 4, &ExtraKeys::default())[0];
        pool.seal_block(b, h).unwrap();
        (store, pool, b)
    }

    #[test]
    fn seal_is_deterministic() {
        let (store, mut pool, b) = setup();
        let d1 = seal(&store, &mut pool, b, 1).unwrap();
        let d2 = seal(&store, &mut pool, b, 2).unwrap();
        assert_eq!(d1.digest, d2.digest);
        assert_eq!(d1.digest.0.len(), 32);
        assert_eq!(pool.meta(b).unwrap().digest.unwrap().sealed_at, 2);
    }

    #[test]
    fn seal_requires_registration() {
        let (store, mut pool, _) = setup();
        assert!(matches!(
            seal(&store, &mut pool, 0, 0),
            Err(IntegrityError::NotSealed(0))
        ));
        assert!(matches!(
            verify(&store, &pool, 0),
            Err(IntegrityError::NotSealed(0))
        ));
    }

    #[test]
    fn verify_unsealed_digest_is_error() {
        let (store, pool, b) = setup();
        assert!(matches!(
            verify(&store, &pool, b),
            Err(IntegrityError::NoDigest(_))
        ));
    }

    #[test]
    fn flip_detected_and_unflip_restores() {
        let (mut store, mut pool, b) = setup();
        seal(&store, &mut pool, b, 0).unwrap();
        assert_eq!(verify(&store, &pool, b).unwrap(), Verdict::Ok);
        let c = Coord {
            layer: 1,
            side: KvSide::Value,
            block: b,
            slot: 2,
            head: 1,
            channel: 3,
        };
        for p in BitPosition::all() {
            let v = store.read(&c).unwrap();
            store.write(&c, flip_bit(v, p)).unwrap();
            assert_eq!(verify(&store, &pool, b).unwrap(), Verdict::Mismatch);
            store.write(&c, v).unwrap();
            assert_eq!(verify(&store, &pool, b).unwrap(), Verdict::Ok);
        }
    }

    #[test]
    fn writes_elsewhere_do_not_affect_digest() {
        let (mut store, mut pool, b) = setup();
        seal(&store, &mut pool, b, 0).unwrap();
        let other = Coord {
            layer: 0,
            side: KvSide::Key,
            block: 2,
            slot: 0,
            head: 0,
            channel: 0,
        };
        store.write(&other, Bf16Pattern(0xFFFF)).unwrap();
        assert_eq!(verify(&store, &pool, b).unwrap(), Verdict::Ok);
    }

    #[test]
    fn digest_ignores_metadata() {
        let (store, mut pool, b) = setup();
        let d = seal(&store, &mut pool, b, 0).unwrap();
        pool.touch(b).unwrap();
        pool.release(&[b, b]).unwrap();
        assert_eq!(digest_block(&store, b).unwrap(), d.digest);
        assert_eq!(verify(&store, &pool, b).unwrap(), Verdict::Ok);
    }

    #[test]
    fn mismatch_evicts() {
        let (store, mut pool, b) = setup();
        seal(&store, &mut pool, b, 0).unwrap();
        let h = pool.meta(b).unwrap().chain_hash.unwrap();
        on_mismatch(&mut pool, b).unwrap();
        assert_eq!(pool.lookup(&h), None);
        assert!(pool.meta(b).unwrap().digest.is_none());
    }

    #[test]
    fn ttl_decisions() {
        let (_, mut pool, b) = setup();
        let off = IntegrityConfig::disabled();
        let ttl = IntegrityConfig::disabled().with_ttl(2);
        assert_eq!(ttl_check(&pool, b, &off).unwrap(), TtlDecision::Keep);
        assert_eq!(ttl_check(&pool, b, &ttl).unwrap(), TtlDecision::Keep);
        pool.touch(b).unwrap();
        assert_eq!(ttl_check(&pool, b, &ttl).unwrap(), TtlDecision::Keep);
        pool.touch(b).unwrap();
        assert_eq!(ttl_check(&pool, b, &ttl).unwrap(), TtlDecision::Recompute);
        for _ in 0..50 {
            pool.touch(b).unwrap();
        }
        assert_eq!(ttl_check(&pool, b, &off).unwrap(), TtlDecision::Keep);
        assert_eq!(IntegrityConfig::checksums().with_ttl(0).ttl_requests, None);
    }
}
