//! Property tests of the prefix-caching block pool.

use std::collections::BTreeMap;

use kvguard::block_pool::{chain_hashes, BlockHash, BlockId, BlockPool, ExtraKeys, TokenId};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Allocate,
    Seal(usize, u8),
    Hit(u8),
    Release(usize),
    Invalidate(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => Just(Op::Allocate),
        2 => (any::<usize>(), 0u8..6).prop_map(|(i, h)| Op::Seal(i, h)),
        2 => (0u8..6).prop_map(Op::Hit),
        3 => any::<usize>().prop_map(Op::Release),
        1 => any::<usize>().prop_map(Op::Invalidate),
    ]
}

fn hash(h: u8) -> BlockHash {
    BlockHash([h; 32])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Reference counts follow a model of outstanding handles, a block is in
    /// the free queue exactly when nobody holds it, and allocation never
    /// takes a held block.
    #[test]
    fn refcounts_queue_and_pinning(n_blocks in 1usize..8, ops in prop::collection::vec(op(), 1..80)) {
        let mut pool = BlockPool::new(n_blocks, 4);
        let mut held: Vec<BlockId> = Vec::new();
        for op in ops {
            match op {
                Op::Allocate => {
                    let free = pool.num_free();
                    match pool.allocate_block() {
                        Ok(id) => {
                            prop_assert!(!held.contains(&id), "allocated pinned block {id}");
                            held.push(id);
                            prop_assert_eq!(pool.num_free(), free - 1);
                        }
                        Err(_) => prop_assert_eq!(free, 0),
                    }
                }
                Op::Seal(i, h) if !held.is_empty() => {
                    let id = held[i % held.len()];
                    if !pool.meta(id).unwrap().sealed {
                        pool.seal_block(id, hash(h)).unwrap();
                        prop_assert_eq!(pool.lookup(&hash(h)), Some(id));
                    }
                }
                Op::Hit(h) => {
                    if let Some(id) = pool.lookup(&hash(h)) {
                        pool.touch(id).unwrap();
                        held.push(id);
                        prop_assert!(!pool.in_free_queue(id));
                    }
                }
                Op::Release(i) if !held.is_empty() => {
                    let id = held.swap_remove(i % held.len());
                    pool.release(&[id]).unwrap();
                }
                Op::Invalidate(i) => {
                    let id = i % n_blocks;
                    pool.invalidate(id).unwrap();
                    prop_assert!(pool.meta(id).unwrap().chain_hash.is_none());
                }
                _ => {}
            }
            pool.check_invariants().map_err(TestCaseError::fail)?;
            let mut counts: BTreeMap<BlockId, u32> = BTreeMap::new();
            for &id in &held {
                *counts.entry(id).or_default() += 1;
            }
            for id in 0..n_blocks {
                let m = pool.meta(id).unwrap();
                prop_assert_eq!(m.ref_cnt, counts.get(&id).copied().unwrap_or(0));
                if m.ref_cnt > 0 {
                    prop_assert!(!pool.in_free_queue(id));
                }
            }
            let free = (0..n_blocks).filter(|&id| pool.meta(id).unwrap().ref_cnt == 0).count();
            prop_assert_eq!(pool.num_free(), free);
        }
    }

    /// A block's hash depends on every earlier token and on nothing later.
    #[test]
    fn chain_hash_covers_exact_prefix(
        tokens in prop::collection::vec(0u32..50, 8..64),
        pos in any::<usize>(),
        delta in 1u32..50,
    ) {
        let b = 4;
        let base = chain_hashes(&tokens, b, &ExtraKeys::default());
        prop_assert_eq!(base.len(), tokens.len() / b);
        let pos = pos % tokens.len();
        let mut changed: Vec<TokenId> = tokens.clone();
        changed[pos] = (changed[pos] + delta) % 50;
        let other = chain_hashes(&changed, b, &ExtraKeys::default());
        for (i, (x, y)) in base.iter().zip(&other).enumerate() {
            if (i + 1) * b <= pos {
                prop_assert_eq!(x, y, "block {} before the change", i);
            } else {
                prop_assert_ne!(x, y, "block {} at or after the change", i);
            }
        }
    }

    /// Different salts never share a block hash; a lookup under one salt
    /// never hits blocks registered under another.
    #[test]
    fn salts_isolate(tokens in prop::collection::vec(0u32..50, 4..40), a in any::<u8>(), b in any::<u8>()) {
        prop_assume!(a != b);
        let sa = ExtraKeys::salted(vec![a]);
        let sb = ExtraKeys::salted(vec![b]);
        let ha = chain_hashes(&tokens, 4, &sa);
        let hb = chain_hashes(&tokens, 4, &sb);
        let hn = chain_hashes(&tokens, 4, &ExtraKeys::default());
        for h in &ha {
            prop_assert!(!hb.contains(h));
            prop_assert!(!hn.contains(h));
        }
        let mut pool = BlockPool::new(16, 4);
        for h in ha {
            let id = pool.allocate_block().unwrap();
            pool.seal_block(id, h).unwrap();
        }
        prop_assert!(pool.find_longest_cached_prefix(&tokens, &sb).hit_blocks.is_empty());
        prop_assert!(pool.find_longest_cached_prefix(&tokens, &ExtraKeys::default()).hit_blocks.is_empty());
        prop_assert_eq!(pool.find_longest_cached_prefix(&tokens, &sa).hit_blocks.len(), tokens.len() / 4);
    }
}
