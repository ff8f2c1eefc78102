use fex_core::expr::{InputLayout, OperatorSequence, OperatorSet, TreeTemplate};
use fex_core::search::{score_from_loss, CandidatePool, Insertion, Score};
use proptest::prelude::*;

fn op_seq(t: &TreeTemplate, idx: &[usize]) -> OperatorSequence {
    OperatorSequence::from_indices(t, &OperatorSet::standard(), idx).unwrap()
}

// small alphabets so duplicates and score ties are common
fn insertion() -> impl Strategy<Value = (Vec<usize>, f64)> {
    (
        prop::collection::vec(0usize..2, 4),
        prop_oneof![(0u32..6).prop_map(|k| k as f64 / 8.0), (0.0f64..1.0)],
    )
        .prop_map(|(mut idx, s)| {
            idx[1] %= 4;
            (idx, s)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn pool_keeps_capacity_and_evicts_the_minimum(
        capacity in 1usize..6,
        seq in prop::collection::vec(insertion(), 1..40),
    ) {
        let t = TreeTemplate::with_depth(3, InputLayout::spatial(1)).unwrap();
        let mut pool = CandidatePool::new(capacity);
        let mut full_min: Option<f64> = None;
        for (idx, s) in seq {
            let before = pool.entries().to_vec();
            let dup = before.iter().find(|e| e.indices == idx).map(|e| e.score.value);
            let out = pool.insert(idx.clone(), op_seq(&t, &idx), Score { value: s, loss: 1.0 / s - 1.0, params: vec![] });
            prop_assert!(pool.len() <= capacity);
            let entries = pool.entries();
            prop_assert!(entries.windows(2).all(|w| w[0].score.value >= w[1].score.value));
            match (dup, out) {
                (Some(old), Insertion::Improved) => prop_assert!(s > old),
                (Some(old), Insertion::Rejected) => prop_assert!(s <= old),
                (Some(_), o) => prop_assert!(false, "duplicate gave {o:?}"),
                (None, Insertion::Added) => prop_assert!(before.len() < capacity),
                (None, Insertion::Replaced(victim)) => {
                    prop_assert_eq!(before.len(), capacity);
                    let min = before.iter().map(|e| e.score.value).fold(f64::INFINITY, f64::min);
                    prop_assert!(s > min);
                    let oldest_min = before.iter().filter(|e| e.score.value == min).map(|e| e.inserted).min().unwrap();
                    prop_assert_eq!(victim, oldest_min);
                    prop_assert!(entries.iter().all(|e| e.inserted != victim));
                }
                (None, Insertion::Rejected) => {
                    prop_assert_eq!(before.len(), capacity);
                    let min = before.iter().map(|e| e.score.value).fold(f64::INFINITY, f64::min);
                    prop_assert!(s <= min);
                }
                (None, o) => prop_assert!(false, "new sequence gave {o:?}"),
            }
            prop_assert!(entries.iter().any(|e| e.indices == idx) || out == Insertion::Rejected);
            if pool.len() == capacity {
                let m = pool.min_score().unwrap();
                if let Some(prev) = full_min {
                    prop_assert!(m >= prev, "pool minimum fell from {prev} to {m}");
                }
                full_min = Some(m);
            }
        }
    }

    #[test]
    fn score_lies_in_unit_interval(loss in prop_oneof![0.0f64..1e-6, 0.0f64..1e3, 0.0f64..1e300]) {
        let s = score_from_loss(loss);
        prop_assert!(s > 0.0 && s <= 1.0, "S({loss}) = {s}");
        prop_assert_eq!(s, 1.0 / (1.0 + loss));
    }

    #[test]
    fn score_decreases_with_loss(a in 0.0f64..1e6, b in 0.0f64..1e6) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(score_from_loss(lo) >= score_from_loss(hi));
        if 1.0 + lo < 1.0 + hi {
            prop_assert!(score_from_loss(lo) > score_from_loss(hi));
        }
    }
}
