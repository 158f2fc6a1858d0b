use std::collections::BTreeMap;

use debra::{Allocator, Pool, Reclaimer, SmrConfig, SystemAllocator, NoPool};
use debra_bst::{Bst, DebraBst, DebraPlusBst, EbrBst, HpBst, LeakyBst, Node};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Clone, Copy, Debug)]
enum Op {
    Insert(u64, u64),
    Delete(u64),
    Search(u64),
}

fn random_trace(seed: u64, len: usize, keys: u64) -> Vec<Op> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..len)
        .map(|i| {
            let k = rng.random_range(0..keys);
            match rng.random_range(0..3) {
                0 => Op::Insert(k, i as u64),
                1 => Op::Delete(k),
                _ => Op::Search(k),
            }
        })
        .collect()
}

fn small() -> SmrConfig {
    SmrConfig { block_size: 8, bump_bytes_per_process: 64 << 20, ..SmrConfig::default() }
}

/// Runs `ops` against the tree and a `BTreeMap`, comparing every result,
/// then checks shape, contents and record accounting.
fn check_against_map<R, P, A>(mut tree: Bst<R, P, A>, ops: &[Op]) -> Result<(), String>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    let mut map = BTreeMap::new();
    {
        let mut h = tree.handle(0);
        for (i, &op) in ops.iter().enumerate() {
            let (got, want) = match op {
                Op::Insert(k, v) => {
                    let want = !map.contains_key(&k);
                    if want {
                        map.insert(k, v);
                    }
                    (h.insert(k, v).unwrap() as u64, want as u64)
                }
                Op::Delete(k) => (h.delete(k).unwrap() as u64, map.remove(&k).is_some() as u64),
                Op::Search(k) => (
                    h.search(k).unwrap().map_or(u64::MAX, |v| v),
                    map.get(&k).copied().map_or(u64::MAX, |v| v),
                ),
            };
            if got != want {
                return Err(format!("op {i} {op:?}: tree {got}, map {want}"));
            }
        }
        let validations = h.stats().validations;
        if !R::USES_HAZARD_POINTERS {
            assert_eq!(validations, 0);
        } else if ops.len() >= 100 {
            assert!(validations > 0);
        }
    }
    let audit = tree.audit()?;
    let keys: Vec<u64> = map.keys().copied().collect();
    if audit.keys != keys {
        return Err(format!("tree keys {:?}, map keys {keys:?}", audit.keys));
    }
    let census = tree.census();
    if census.outstanding() != audit.reachable() as i64 {
        return Err(format!("census {census:?} vs {} reachable", audit.reachable()));
    }
    if tree.manager().faults().count() != 0 {
        return Err(format!("poison fault {:?}", tree.manager().faults().first()));
    }
    Ok(())
}

#[test]
fn basics() {
    let tree = DebraBst::new(1, small()).unwrap();
    let mut h = tree.handle(0);
    assert_eq!(h.search(5).unwrap(), None);
    assert!(!h.delete(5).unwrap());
    assert_eq!(h.smr().stats().retired, 0, "a delete of an absent key retired something");
    assert!(h.insert(5, 50).unwrap());
    assert!(h.insert(3, 30).unwrap());
    assert!(h.insert(0, 0).unwrap());
    assert!(h.insert(debra_bst::MAX_KEY, 1).unwrap());
    assert!(!h.insert(5, 51).unwrap());
    assert_eq!(h.search(5).unwrap(), Some(50));
    assert_eq!(h.search(debra_bst::MAX_KEY).unwrap(), Some(1));
    assert!(h.delete(5).unwrap());
    assert!(!h.delete(5).unwrap());
    assert_eq!(h.search(3).unwrap(), Some(30));
    // Successful insert retires the replaced leaf and its descriptor; a
    // successful delete retires parent, leaf and descriptor.
    assert_eq!(h.smr().stats().retired, 4 * 2 + 3);
}

#[test]
#[should_panic(expected = "reserved")]
fn sentinel_keys_are_rejected() {
    let tree = DebraBst::new(1, small()).unwrap();
    let mut h = tree.handle(0);
    let _ = h.insert(u64::MAX, 0);
}

#[test]
fn long_trace_debra() {
    check_against_map(DebraBst::new(1, small()).unwrap(), &random_trace(1, 10_000, 200)).unwrap();
}

#[test]
fn long_trace_debra_plus() {
    check_against_map(DebraPlusBst::new(1, small()).unwrap(), &random_trace(2, 10_000, 200)).unwrap();
}

#[test]
fn long_trace_ebr() {
    check_against_map(EbrBst::new(1, small()).unwrap(), &random_trace(3, 10_000, 200)).unwrap();
}

#[test]
fn long_trace_hp() {
    check_against_map(HpBst::new(1, small()).unwrap(), &random_trace(4, 10_000, 200)).unwrap();
}

#[test]
fn long_trace_leaky() {
    check_against_map(LeakyBst::new(1, small()).unwrap(), &random_trace(5, 10_000, 200)).unwrap();
}

#[test]
fn long_trace_poisoned() {
    let cfg = SmrConfig { poison: true, ..small() };
    check_against_map(DebraBst::new(1, cfg.clone()).unwrap(), &random_trace(6, 10_000, 100)).unwrap();
    check_against_map(HpBst::new(1, cfg).unwrap(), &random_trace(7, 10_000, 100)).unwrap();
}

#[test]
fn system_allocator_without_pool() {
    let tree = Bst::<debra::Debra<Node>, NoPool, SystemAllocator<Node>>::new(1, small()).unwrap();
    check_against_map(tree, &random_trace(8, 5_000, 50)).unwrap();
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u64..32, any::<u64>()).prop_map(|(k, v)| Op::Insert(k, v)),
        (0u64..32).prop_map(Op::Delete),
        (0u64..32).prop_map(Op::Search),
    ]
}

proptest! {
    #[test]
    fn matches_map(ops in proptest::collection::vec(op(), 0..400)) {
        let r = check_against_map(DebraBst::new(1, small()).unwrap(), &ops);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    #[test]
    fn matches_map_hp(ops in proptest::collection::vec(op(), 0..400)) {
        let r = check_against_map(HpBst::new(1, small()).unwrap(), &ops);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }
}
