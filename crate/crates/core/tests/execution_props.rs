//! Properties of batch execution, certificates and the account tree.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;

use teerollup_core::crypto::{gen_keypair, Digest, KeyPair, BURN_ADDRESS};
use teerollup_core::merkle::{Account, AccountTree};
use teerollup_core::oracle::Oracle;
use teerollup_core::rollup::{
    aggregate_qc, execute, verify_chain, verify_qc, Batch, BatchItem, IssueRecord, QuorumCertificate, RollupState,
    RollupTx, Vote,
};

fn keys() -> &'static [KeyPair] {
    static KEYS: OnceLock<Vec<KeyPair>> = OnceLock::new();
    KEYS.get_or_init(|| (0..6u8).map(|i| gen_keypair([i + 1; 32])).collect())
}

#[derive(Clone, Debug)]
enum Op {
    Issue { id: u8, to: usize, value: u64 },
    Transfer { from: usize, to: Option<usize>, value: u64, nonce: u64, tamper: bool },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..12, 0usize..6, 0u64..1000).prop_map(|(id, to, value)| Op::Issue { id, to, value }),
        (0usize..6, proptest::option::weighted(0.85, 0usize..6), 0u64..400, 0u64..4, proptest::bool::weighted(0.1))
            .prop_map(|(from, to, value, nonce, tamper)| Op::Transfer { from, to, value, nonce, tamper }),
    ]
}

fn item(op: &Op) -> BatchItem {
    let k = keys();
    match *op {
        Op::Issue { id, to, value } => BatchItem::Issue(IssueRecord {
            deposit_id: Digest([id; 32]),
            recipient: k[to].address(),
            value,
        }),
        Op::Transfer { from, to, value, nonce, tamper } => {
            let receiver = to.map_or(BURN_ADDRESS, |i| k[i].address());
            let mut tx = RollupTx::signed(&k[from], receiver, value, nonce);
            if tamper {
                tx.value += 1;
            }
            BatchItem::Transfer(tx)
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn execution_agrees_with_the_reference_interpreter(
        depth in prop_oneof![Just(3u8), Just(8u8), Just(32u8)],
        batches in proptest::collection::vec(proptest::collection::vec(op(), 0..24), 1..5),
    ) {
        let mut oracle = Oracle::new(depth);
        let mut state = RollupState::genesis(depth);
        let mut tree = AccountTree::with_depth(depth);
        prop_assert_eq!(oracle.last_hash(), state.hash());
        let mut states = Vec::new();
        for ops in &batches {
            let batch = Batch::new(ops.iter().map(item).collect());
            let out = execute(&state, &tree, &batch).unwrap();
            let step = oracle.apply(&batch);
            prop_assert_eq!(step.state_hash, out.state.hash());
            prop_assert_eq!(step.account_root, out.state.account_root);
            prop_assert_eq!(step.txs_hash, out.state.txs_hash);
            prop_assert_eq!(step.effects_hash, out.effects.hash());
            prop_assert_eq!(step.rejected, out.rejected.len());
            prop_assert_eq!(out.state.prev_hash, state.hash());
            // Supply changes only by issues and burns.
            let issued: u128 = out.effects.lock_total();
            let burned: u128 = out.effects.refund_total();
            prop_assert_eq!(
                out.tree.total_balance() - out.tree.balance(&BURN_ADDRESS) as u128 + burned,
                tree.total_balance() - tree.balance(&BURN_ADDRESS) as u128 + issued
            );
            state = out.state;
            tree = out.tree;
            states.push(state);
        }
        prop_assert!(verify_chain(&RollupState::genesis(depth), &states));
    }

    #[test]
    fn qc_needs_f_plus_one_distinct_registered_signers(
        n in 2usize..8,
        f_frac in 0.0f64..1.0,
        signers in proptest::collection::vec(0usize..10, 0..10),
        corrupt in proptest::collection::vec(any::<bool>(), 10),
    ) {
        let f = ((n - 1) as f64 * f_frac) as usize;
        let pool: Vec<KeyPair> = (0..10u8).map(|i| gen_keypair([100 + i; 32])).collect();
        let registry: Vec<_> = pool[..n].iter().map(|k| k.public_key).collect();
        let (sh, eh) = (Digest([1; 32]), Digest([2; 32]));
        let mut votes = Vec::new();
        let mut good = BTreeSet::new();
        for (j, &i) in signers.iter().enumerate() {
            let mut v = Vote::sign(sh, eh, &pool[i]);
            if corrupt[j] {
                v.signature.value.0[0] ^= 1;
            } else if i < n {
                good.insert(i);
            }
            votes.push(v);
        }
        let qc = QuorumCertificate { state_hash: sh, effects_hash: eh, votes: votes.clone() };
        prop_assert_eq!(verify_qc(&qc, f, &registry), good.len() > f);
        match aggregate_qc(&votes, f, &registry) {
            Ok(agg) => {
                prop_assert!(good.len() > f);
                prop_assert!(verify_qc(&agg, f, &registry));
                prop_assert_eq!(agg.votes.len(), good.len());
            }
            Err(_) => prop_assert!(votes.is_empty() || good.len() <= f),
        }
        // Votes over a different state never count.
        if let Some(v) = votes.first_mut() {
            v.state_hash = Digest([9; 32]);
            let mixed = QuorumCertificate { state_hash: sh, effects_hash: eh, votes };
            prop_assert!(!verify_qc(&mixed, f, &registry));
        }
    }

    #[test]
    fn tree_root_depends_only_on_the_entry_set(
        entries in proptest::collection::vec((0usize..6, 0u64..50, 0u64..3), 0..12),
        seed in any::<u64>(),
    ) {
        let k = keys();
        let mut forward = AccountTree::with_depth(32);
        for &(i, balance, nonce) in &entries {
            forward.set_account(k[i].address(), Account { balance, nonce }).unwrap();
        }
        let last: std::collections::BTreeMap<usize, Account> =
            entries.iter().map(|&(i, balance, nonce)| (i, Account { balance, nonce })).collect();
        let mut order: Vec<_> = last.iter().collect();
        let r = seed as usize % (order.len().max(1));
        order.rotate_left(r);
        let mut shuffled = AccountTree::with_depth(32);
        for (&i, &a) in order {
            shuffled.set_account(k[i].address(), a).unwrap();
        }
        prop_assert_eq!(forward.root(), shuffled.root());
        for (i, key) in k.iter().enumerate() {
            let want = last.get(&i).copied().unwrap_or_default();
            prop_assert_eq!(forward.account(&key.address()), want);
            let p = forward.prove(&key.address());
            prop_assert!(p.verify());
            prop_assert_eq!((p.balance, p.nonce), (want.balance, want.nonce));
        }
    }

    #[test]
    fn transaction_identity_covers_every_field(
        value in 1u64..1000,
        nonce in 0u64..100,
        field in 0usize..4,
    ) {
        let k = keys();
        let tx = RollupTx::signed(&k[0], k[1].address(), value, nonce);
        prop_assert!(tx.signature_valid());
        let mut other = tx.clone();
        match field {
            0 => other.value += 1,
            1 => other.nonce += 1,
            2 => other.receiver = k[2].address(),
            _ => other.sender = k[3].address(),
        }
        prop_assert_ne!(tx.hash(), other.hash());
        prop_assert!(!other.signature_valid());
    }
}
