use otr_core::contract::{OffenseKey, OffenseKind, StakeLedger};
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum Op {
    Deposit(usize, f64),
    Lock(usize, f64),
    Unlock(usize, f64),
    Slash(usize, f64, u64),
    Pay(usize, f64),
}

fn op() -> impl Strategy<Value = Op> {
    let who = 0usize..4;
    let amt = 0.0..500.0f64;
    prop_oneof![
        (who.clone(), amt.clone()).prop_map(|(w, a)| Op::Deposit(w, a)),
        (who.clone(), amt.clone()).prop_map(|(w, a)| Op::Lock(w, a)),
        (who.clone(), amt.clone()).prop_map(|(w, a)| Op::Unlock(w, a)),
        (who.clone(), amt.clone(), 0u64..6).prop_map(|(w, a, b)| Op::Slash(w, a, b)),
        (who, amt).prop_map(|(w, a)| Op::Pay(w, a)),
    ]
}

proptest! {
    #[test]
    fn supply_is_conserved(ops in proptest::collection::vec(op(), 1..80)) {
        let names = ["a", "b", "c", "d"];
        let mut l = StakeLedger::new();
        let mut deposited = 0.0;
        for o in ops {
            match o {
                Op::Deposit(w, a) => {
                    l.deposit(names[w], a);
                    deposited += a;
                }
                Op::Lock(w, a) => {
                    let free = l.free_balance(names[w]);
                    prop_assert_eq!(l.lock(names[w], a).is_ok(), a <= free);
                }
                Op::Unlock(w, a) => l.unlock(names[w], a),
                Op::Slash(w, a, b) => {
                    let key = OffenseKey { batch_id: b, tuple_index: 0, kind: OffenseKind::InvalidExecution };
                    let before = l.balance(names[w]);
                    if let Ok(e) = l.slash(names[w], a, key, "t", 0.0) {
                        prop_assert!((e.amount + e.shortfall - a).abs() < 1e-9);
                        prop_assert!(e.amount <= before + 1e-9);
                    }
                    prop_assert!(l.slash(names[w], a, key, "t", 0.0).is_err());
                }
                Op::Pay(w, a) => {
                    let t = l.treasury();
                    prop_assert!(l.pay_from_treasury(names[w], a) <= t + 1e-9);
                }
            }
            for n in names {
                prop_assert!(l.balance(n) >= -1e-9);
                prop_assert!(l.locked(n) <= l.balance(n) + 1e-9);
            }
            prop_assert!(l.treasury() >= -1e-9);
            prop_assert!((l.total_supply() - deposited).abs() < 1e-6);
            prop_assert!((l.minted() - deposited).abs() < 1e-6);
        }
    }
}
