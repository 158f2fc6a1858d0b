use std::collections::HashSet;
use std::sync::Arc;
use std::thread;

use debra::block::{BlockBag, BlockChain, BlockDepot, BlockPool, SharedBag};
use debra::Record;
use proptest::prelude::*;

fn rec(i: usize) -> *mut Record<u64> {
    // Bags never dereference records, so distinct fake addresses suffice.
    ((i + 1) * 64) as *mut Record<u64>
}

fn id(r: *mut Record<u64>) -> usize {
    r as usize / 64 - 1
}

fn pool(b: usize) -> BlockPool<u64> {
    BlockPool::new(Arc::new(BlockDepot::new(b, 1)), 0, 16)
}

#[test]
fn add_b_plus_one_records() {
    let mut p = pool(256);
    let mut bag = BlockBag::new(&mut p);
    for i in 0..257 {
        bag.add(rec(i), &mut p);
    }
    assert_eq!(bag.size_in_blocks(), 2);
    assert_eq!(bag.head_len(), 1);
    let mut out = Vec::new();
    bag.drain_into(&mut p, &mut out);
    bag.dispose(&mut p);
}

#[test]
fn move_full_blocks_keeps_head() {
    let mut p = pool(4);
    let mut bag = BlockBag::new(&mut p);
    for i in 0..10 {
        bag.add(rec(i), &mut p);
    }
    let chain = bag.take_full_blocks();
    assert_eq!(chain.blocks(), 2);
    assert_eq!(bag.len(), 2);
    assert_eq!(bag.to_vec(), vec![rec(9), rec(8)]);
    assert_eq!(bag.take_full_blocks().blocks(), 0);
    let mut out = Vec::new();
    chain.drain_into(&mut p, &mut out);
    bag.drain_into(&mut p, &mut out);
    bag.dispose(&mut p);
    assert_eq!(out.len(), 10);
}

/// Plain-vector model of the two-cursor pass: stable partition of the
/// newest-first sequence, then everything past the block boundary that
/// follows the last kept position is released.
fn partition_oracle(seq: &[usize], keep: &HashSet<usize>, b: usize) -> (Vec<usize>, usize) {
    let head = seq.len() % b;
    let kept: Vec<usize> = seq.iter().copied().filter(|x| keep.contains(x)).collect();
    let kept_full = if kept.len() <= head { 0 } else { (kept.len() - head).div_ceil(b) };
    let full = seq.len() / b;
    let released = full.saturating_sub(kept_full);
    (kept, released)
}

#[test]
fn partition_b4_two_protected_in_last_block() {
    let mut p = pool(4);
    let mut bag = BlockBag::new(&mut p);
    for i in 0..16 {
        bag.add(rec(i), &mut p);
    }
    assert_eq!((bag.size_in_blocks(), bag.head_len()), (5, 0));
    // The oldest block holds records 0..4; protect two of them.
    let protected: HashSet<usize> = [1, 2].into();
    let seq: Vec<usize> = bag.to_vec().into_iter().map(id).collect();
    let (kept, released) = partition_oracle(&seq, &protected, 4);
    let chain = bag.partition_front(|r| protected.contains(&id(r)));
    assert_eq!(chain.blocks(), released);
    assert!(chain.blocks() >= (16 - 2 - 4) / 4);
    let front: Vec<usize> = bag.to_vec().into_iter().map(id).take(kept.len()).collect();
    assert_eq!(front, kept);
    let mut freed = Vec::new();
    chain.drain_into(&mut p, &mut freed);
    assert!(freed.iter().all(|&r| !protected.contains(&id(r))));
    let mut rest = Vec::new();
    bag.drain_into(&mut p, &mut rest);
    bag.dispose(&mut p);
    assert_eq!(freed.len() + rest.len(), 16);
}

#[derive(Debug, Clone)]
enum Op {
    Add,
    Remove,
    TakeFull,
    Partition(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => Just(Op::Add),
        2 => Just(Op::Remove),
        1 => Just(Op::TakeFull),
        1 => any::<u64>().prop_map(Op::Partition),
    ]
}

proptest! {
    #[test]
    fn bag_conserves_records(b in 1usize..6, ops in proptest::collection::vec(op(), 0..300)) {
        let mut p = pool(b);
        let mut bag = BlockBag::new(&mut p);
        let mut model: Vec<usize> = Vec::new();
        let mut out: Vec<usize> = Vec::new();
        let mut next = 0;
        for o in ops {
            match o {
                Op::Add => {
                    bag.add(rec(next), &mut p);
                    model.insert(0, next);
                    next += 1;
                }
                Op::Remove => {
                    let got = bag.remove(&mut p).map(id);
                    let want = if model.is_empty() { None } else { Some(model.remove(0)) };
                    prop_assert_eq!(got, want);
                    out.extend(got);
                }
                Op::TakeFull => {
                    let chain = bag.take_full_blocks();
                    let head = model.len() % b;
                    prop_assert_eq!(chain.blocks(), model.len() / b);
                    let mut v = Vec::new();
                    chain.drain_into(&mut p, &mut v);
                    out.extend(v.into_iter().map(id));
                    model.truncate(head);
                }
                Op::Partition(mask) => {
                    let keep: HashSet<usize> =
                        model.iter().copied().filter(|x| mask >> (x % 64) & 1 == 1).collect();
                    let (kept, released) = partition_oracle(&model, &keep, b);
                    let chain = bag.partition_front(|r| keep.contains(&id(r)));
                    prop_assert_eq!(chain.blocks(), released);
                    let mut v = Vec::new();
                    chain.drain_into(&mut p, &mut v);
                    for r in &v {
                        prop_assert!(!keep.contains(&id(*r)));
                    }
                    out.extend(v.into_iter().map(id));
                    model = bag.to_vec().into_iter().map(id).collect();
                    prop_assert_eq!(&model[..kept.len()], &kept[..]);
                }
            }
            prop_assert!(bag.head_len() < b);
            prop_assert_eq!(bag.len(), model.len());
            prop_assert_eq!(bag.size_in_blocks(), 1 + model.len() / b);
            let now: Vec<usize> = bag.to_vec().into_iter().map(id).collect();
            prop_assert_eq!(&now, &model);
        }
        let mut all: Vec<usize> = out;
        all.extend(model.iter().copied());
        all.sort_unstable();
        prop_assert_eq!(all, (0..next).collect::<Vec<_>>());
        let mut v = Vec::new();
        bag.drain_into(&mut p, &mut v);
        bag.dispose(&mut p);
    }

    #[test]
    fn shared_bag_is_sequential_lifo(ops in proptest::collection::vec(any::<bool>(), 0..200)) {
        let depot = Arc::new(BlockDepot::<u64>::new(1, 1));
        let mut p = BlockPool::new(depot, 0, 4);
        let shared = SharedBag::new();
        let mut model = Vec::new();
        for (i, push) in ops.into_iter().enumerate() {
            if push {
                let b = full_block(&mut p, i);
                shared.push(b);
                model.push(b);
            } else {
                prop_assert_eq!(shared.pop(), model.pop());
            }
            prop_assert_eq!(shared.len_blocks(), model.len());
        }
        while let Some(b) = shared.pop() {
            let mut v = Vec::new();
            BlockChain::single(b).drain_into(&mut p, &mut v);
        }
    }
}

fn full_block(p: &mut BlockPool<u64>, i: usize) -> *mut debra::block::Block<u64> {
    let mut bag = BlockBag::new(p);
    for j in 0..p.block_size() {
        bag.add(rec(i * p.block_size() + j), p);
    }
    let mut chain = bag.take_full_blocks();
    bag.dispose(p);
    chain.pop_block().unwrap()
}

#[test]
fn shared_bag_push_pop_and_empty() {
    let mut p = pool(2);
    let shared = SharedBag::new();
    assert!(shared.pop().is_none());
    let b = full_block(&mut p, 0);
    shared.push(b);
    assert_eq!(shared.pop(), Some(b));
    assert!(shared.is_empty());
    let mut v = Vec::new();
    BlockChain::single(b).drain_into(&mut p, &mut v);
}

#[test]
fn shared_bag_multiset_under_contention() {
    const THREADS: usize = 4;
    const PER: usize = 2000;
    let b = 2;
    let depot = Arc::new(BlockDepot::<u64>::new(b, THREADS));
    let shared = Arc::new(SharedBag::new());
    // Each thread pushes its own blocks while popping and re-pushing others',
    // so tags and stale next pointers are exercised.
    let handles: Vec<_> = (0..THREADS)
        .map(|t| {
            let depot = depot.clone();
            let shared = shared.clone();
            thread::spawn(move || {
                let mut p = BlockPool::new(depot, t, 16);
                for i in 0..PER {
                    let blk = full_block(&mut p, t * PER + i);
                    shared.push(blk);
                    if i % 3 == 0 {
                        if let Some(x) = shared.pop() {
                            shared.push(x);
                        }
                    }
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(shared.len_blocks(), THREADS * PER);
    let mut p = BlockPool::new(depot, 0, 16);
    let mut seen = HashSet::new();
    let mut blocks = 0;
    while let Some(blk) = shared.pop() {
        blocks += 1;
        let mut v = Vec::new();
        BlockChain::single(blk).drain_into(&mut p, &mut v);
        for r in v {
            assert!(seen.insert(id(r)), "record {} recovered twice", id(r));
        }
    }
    assert_eq!(blocks, THREADS * PER);
    assert_eq!(seen.len(), THREADS * PER * b);
}
