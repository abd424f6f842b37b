//! CPU-side prefix-cache metadata.
//!
//! Full blocks are indexed by a chain hash over (parent hash, token ids,
//! extra keys), so a hit on block `i` implies the whole prefix up to and
//! including block `i` matches token for token. Blocks with `ref_cnt == 0`
//! sit in an LRU free queue: releasing appends to the tail, allocation pops
//! the head and only then forgets the block's hash. A released block keeps
//! its hash and remains hittable until it is reallocated.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::integrity::BlockDigest;

pub type TokenId = u32;
pub type BlockId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("block pool exhausted: no free blocks")]
    Exhausted,
    #[error("block {0} does not exist")]
    UnknownBlock(BlockId),
    #[error("block {0} is not sealed")]
    NotSealed(BlockId),
    #[error("block {0} is already sealed")]
    AlreadySealed(BlockId),
    #[error("block {0} released with ref_cnt 0")]
    NotReferenced(BlockId),
}

/// SHA-256 chain hash of one block.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockHash(pub [u8; 32]);

impl BlockHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockHash({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for BlockHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for BlockHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("block hash must be 32 bytes"))?;
        Ok(BlockHash(arr))
    }
}

/// Keys mixed into every block hash besides the tokens themselves.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtraKeys {
    pub salt: Option<Vec<u8>>,
    pub lora_id: Option<u64>,
}

impl ExtraKeys {
    pub fn salted(salt: impl Into<Vec<u8>>) -> Self {
        Self {
            salt: Some(salt.into()),
            lora_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChainHashInput<'a> {
    pub parent: Option<&'a BlockHash>,
    pub tokens: &'a [TokenId],
    pub extra: &'a ExtraKeys,
}

/// Hash over a length-prefixed encoding of `(parent, tokens, extra keys)`.
pub fn compute_block_hash(input: ChainHashInput<'_>) -> BlockHash {
    let mut h = Sha256::new();
    h.update(b"kvguard-block-v1");
    match input.parent {
        Some(p) => {
            h.update([1u8]);
            h.update(p.0);
        }
        None => h.update([0u8]),
    }
    h.update((input.tokens.len() as u64).to_le_bytes());
    for t in input.tokens {
        h.update(t.to_le_bytes());
    }
    match &input.extra.salt {
        Some(s) => {
            h.update([1u8]);
            h.update((s.len() as u64).to_le_bytes());
            h.update(s);
        }
        None => h.update([0u8]),
    }
    match input.extra.lora_id {
        Some(id) => {
            h.update([1u8]);
            h.update(id.to_le_bytes());
        }
        None => h.update([0u8]),
    }
    BlockHash(h.finalize().into())
}

/// Chain hashes of every full block of `tokens`.
pub fn chain_hashes(tokens: &[TokenId], block_size: usize, extra: &ExtraKeys) -> Vec<BlockHash> {
    let mut out: Vec<BlockHash> = Vec::with_capacity(tokens.len() / block_size);
    for chunk in tokens.chunks_exact(block_size) {
        let h = compute_block_hash(ChainHashInput {
            parent: out.last(),
            tokens: chunk,
            extra,
        });
        out.push(h);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMeta {
    pub block_id: BlockId,
    pub ref_cnt: u32,
    pub chain_hash: Option<BlockHash>,
    pub sealed: bool,
    /// Integrity digest, installed once the sealing model step has returned.
    pub digest: Option<BlockDigest>,
    /// Registered in the hash map but the deferred digest is not computed yet.
    pub digest_pending: bool,
    /// Cache hits since the block was last sealed.
    pub hits_since_seal: u64,
    /// Cache hits over the block's lifetime.
    pub hit_count: u64,
    allocated_once: bool,
}

impl BlockMeta {
    fn new(block_id: BlockId) -> Self {
        Self {
            block_id,
            ref_cnt: 0,
            chain_hash: None,
            sealed: false,
            digest: None,
            digest_pending: false,
            hits_since_seal: 0,
            hit_count: 0,
            allocated_once: false,
        }
    }

    fn forget(&mut self) {
        self.chain_hash = None;
        self.sealed = false;
        self.digest = None;
        self.digest_pending = false;
        self.hits_since_seal = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PrefixLookup {
    /// Consecutive hits from block 0.
    pub hit_blocks: Vec<BlockId>,
    /// Token index of the first token not covered by a hit.
    pub miss_from: usize,
    /// Chain hashes of every full block of the queried tokens.
    pub hashes: Vec<BlockHash>,
}

/// One row of the JSON pool dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockState {
    pub block_id: BlockId,
    pub ref_cnt: u32,
    pub hash: Option<BlockHash>,
    pub sealed: bool,
    /// Position in the free queue, 0 = next to be evicted.
    pub queue_position: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BlockPool {
    block_size: usize,
    blocks: Vec<BlockMeta>,
    hash_map: HashMap<BlockHash, BlockId>,
    /// Never-allocated blocks; drawn before any cached block is evicted.
    fresh: VecDeque<BlockId>,
    /// LRU queue keyed by release stamp: first entry is the head.
    free_queue: BTreeMap<u64, BlockId>,
    queue_stamp: Vec<Option<u64>>,
    next_stamp: u64,
}

impl BlockPool {
    pub fn new(n_blocks: usize, block_size: usize) -> Self {
        assert!(n_blocks > 0 && block_size > 0);
        Self {
            block_size,
            blocks: (0..n_blocks).map(BlockMeta::new).collect(),
            hash_map: HashMap::new(),
            fresh: (0..n_blocks).collect(),
            free_queue: BTreeMap::new(),
            queue_stamp: vec![None; n_blocks],
            next_stamp: 0,
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_free(&self) -> usize {
        self.fresh.len() + self.free_queue.len()
    }

    pub fn meta(&self, id: BlockId) -> Result<&BlockMeta, PoolError> {
        self.blocks.get(id).ok_or(PoolError::UnknownBlock(id))
    }

    pub(crate) fn meta_mut(&mut self, id: BlockId) -> Result<&mut BlockMeta, PoolError> {
        self.blocks.get_mut(id).ok_or(PoolError::UnknownBlock(id))
    }

    pub fn lookup(&self, hash: &BlockHash) -> Option<BlockId> {
        self.hash_map.get(hash).copied()
    }

    pub fn in_free_queue(&self, id: BlockId) -> bool {
        self.queue_stamp.get(id).is_some_and(|s| s.is_some())
    }

    /// Free-queue contents from head (next evicted) to tail.
    pub fn free_queue(&self) -> Vec<BlockId> {
        self.free_queue.values().copied().collect()
    }

    /// Walk the chain hashes of `tokens` from block 0 and stop at the first miss.
    pub fn find_longest_cached_prefix(
        &self,
        tokens: &[TokenId],
        extra: &ExtraKeys,
    ) -> PrefixLookup {
        let hashes = chain_hashes(tokens, self.block_size, extra);
        let hit_blocks: Vec<BlockId> = hashes
            .iter()
            .map_while(|h| self.hash_map.get(h).copied())
            .collect();
        PrefixLookup {
            miss_from: hit_blocks.len() * self.block_size,
            hit_blocks,
            hashes,
        }
    }

    pub fn touch(&mut self, id: BlockId) -> Result<(), PoolError> {
        let meta = self.meta(id)?;
        if !meta.sealed {
            return Err(PoolError::NotSealed(id));
        }
        if meta.ref_cnt == 0 {
            self.unqueue(id);
        }
        let meta = &mut self.blocks[id];
        meta.ref_cnt += 1;
        meta.hit_count += 1;
        meta.hits_since_seal += 1;
        Ok(())
    }

    /// Decrement each block; blocks reaching zero go to the queue tail in the given order.
    pub fn release(&mut self, ids: &[BlockId]) -> Result<(), PoolError> {
        for &id in ids {
            let meta = self.meta_mut(id)?;
            if meta.ref_cnt == 0 {
                return Err(PoolError::NotReferenced(id));
            }
            meta.ref_cnt -= 1;
            if meta.ref_cnt == 0 {
                let stamp = self.next_stamp;
                self.next_stamp += 1;
                self.free_queue.insert(stamp, id);
                self.queue_stamp[id] = Some(stamp);
            }
        }
        Ok(())
    }

    /// Take a block for a new request: never-used blocks first, then the
    /// least recently released one, whose hash and digest are dropped.
    pub fn allocate_block(&mut self) -> Result<BlockId, PoolError> {
        let id = if let Some(id) = self.fresh.pop_front() {
            id
        } else {
            let (_, id) = self.free_queue.pop_first().ok_or(PoolError::Exhausted)?;
            self.queue_stamp[id] = None;
            id
        };
        self.drop_hash(id);
        let meta = &mut self.blocks[id];
        meta.forget();
        meta.ref_cnt = 1;
        meta.allocated_once = true;
        Ok(id)
    }

    /// Register a fully written block under `hash`. When another block holds
    /// the same hash it is unregistered; the newest copy wins.
    pub fn seal_block(&mut self, id: BlockId, hash: BlockHash) -> Result<(), PoolError> {
        let meta = self.meta(id)?;
        if meta.sealed {
            return Err(PoolError::AlreadySealed(id));
        }
        if let Some(old) = self.hash_map.insert(hash, id) {
            self.blocks[old].forget();
        }
        let meta = &mut self.blocks[id];
        meta.chain_hash = Some(hash);
        meta.sealed = true;
        meta.hits_since_seal = 0;
        Ok(())
    }

    /// Remove a block from the hash map so no later lookup can hit it.
    /// A referenced block stays with its current holders.
    pub fn invalidate(&mut self, id: BlockId) -> Result<(), PoolError> {
        self.meta(id)?;
        self.drop_hash(id);
        self.blocks[id].forget();
        Ok(())
    }

    fn drop_hash(&mut self, id: BlockId) {
        if let Some(h) = self.blocks[id].chain_hash {
            if self.hash_map.get(&h) == Some(&id) {
                self.hash_map.remove(&h);
            }
        }
    }

    fn unqueue(&mut self, id: BlockId) {
        if let Some(stamp) = self.queue_stamp[id].take() {
            self.free_queue.remove(&stamp);
        }
    }

    pub fn snapshot(&self) -> Vec<BlockState> {
        let positions: HashMap<BlockId, usize> = self
            .free_queue
            .values()
            .enumerate()
            .map(|(pos, &id)| (id, pos))
            .collect();
        self.blocks
            .iter()
            .map(|m| BlockState {
                block_id: m.block_id,
                ref_cnt: m.ref_cnt,
                hash: m.chain_hash,
                sealed: m.sealed,
                queue_position: positions.get(&m.block_id).copied(),
            })
            .collect()
    }

    pub fn snapshot_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("pool state serializes")
    }

    /// Check the structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for m in &self.blocks {
            let queued = self.in_free_queue(m.block_id);
            let expect_queued = m.ref_cnt == 0 && m.allocated_once;
            if queued != expect_queued {
                return Err(format!(
                    "block {} queued={queued} ref_cnt={} allocated_once={}",
                    m.block_id, m.ref_cnt, m.allocated_once
                ));
            }
            if !m.sealed && m.chain_hash.is_some() {
                return Err(format!("unsealed block {} carries a hash", m.block_id));
            }
            if let Some(h) = m.chain_hash {
                if self.hash_map.get(&h) != Some(&m.block_id) {
                    return Err(format!("block {} hash not mapped back", m.block_id));
                }
            }
        }
        for (h, &id) in &self.hash_map {
            if self.blocks[id].chain_hash != Some(*h) || !self.blocks[id].sealed {
                return Err(format!("hash map entry for block {id} is stale"));
            }
        }
        Ok(())
    }
}
