use jolt_core::metrics::{link_metrics, pr_auc, precision_recall, roc_auc, Averaging, Confusion};
use proptest::prelude::*;

fn brute_roc(s: &[f64], l: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] == 1 && l[j] == 0 {
                pairs += 1;
                twice += if s[i] > s[j] { 2 } else if s[i] == s[j] { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn brute_ap(s: &[f64], l: &[u8]) -> f64 {
    let n = s.len();
    let mut order: Vec<usize> = (0..n).collect();
    // insertion sort: descending score, then index
    for i in 1..n {
        let mut j = i;
        while j > 0 && (s[order[j]] > s[order[j - 1]] || (s[order[j]] == s[order[j - 1]] && order[j] < order[j - 1])) {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let pos = l.iter().filter(|&&x| x == 1).count();
    let mut sum = 0.0;
    for cut in 1..=n {
        if l[order[cut - 1]] == 1 {
            let hits = order[..cut].iter().filter(|&&i| l[i] == 1).count();
            sum += hits as f64 / cut as f64;
        }
    }
    sum / pos as f64
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=50, prop_oneof![Just(4u32), Just(1000u32)]).prop_flat_map(|(n, levels)| {
        (prop::collection::vec((0..levels).prop_map(move |v| v as f64 / levels as f64), n), prop::collection::vec(0u8..2, n - 2))
            .prop_map(|(s, mut l)| {
                l.insert(0, 1);
                l.insert(1, 0);
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn auc_matches_enumeration((s, l) in instance()) {
        prop_assert_eq!(roc_auc(&s, &l).unwrap(), brute_roc(&s, &l));
        prop_assert_eq!(pr_auc(&s, &l).unwrap(), brute_ap(&s, &l));
    }

    #[test]
    fn roc_invariant_under_monotone_maps((s, l) in instance()) {
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() + 1.0).collect();
        prop_assert_eq!(roc_auc(&s, &l).unwrap(), roc_auc(&t, &l).unwrap());
        let flipped: Vec<u8> = l.iter().map(|x| 1 - x).collect();
        let a = roc_auc(&s, &l).unwrap() + roc_auc(&s, &flipped).unwrap();
        prop_assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_non_increasing_in_threshold((s, l) in instance(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let r_lo = precision_recall(&s, &l, lo).unwrap().1;
        let r_hi = precision_recall(&s, &l, hi).unwrap().1;
        prop_assert!(r_hi <= r_lo);
        let c = Confusion::at(&s, &l, lo);
        prop_assert_eq!(c.tp + c.fp + c.fn_ + c.tn, s.len());
    }
}

#[test]
fn micro_pools_macro_averages() {
    let ex = vec![(vec![0.9, 0.1], vec![1u8, 0]), (vec![0.9, 0.8, 0.7, 0.1], vec![1u8, 1, 1, 1])];
    let micro = link_metrics(&ex, 0.5, Averaging::Micro).unwrap();
    let mac = link_metrics(&ex, 0.5, Averaging::Macro).unwrap();
    // micro: 4 of 5 positives above 0.5
    assert!((micro.recall - 0.8).abs() < 1e-12);
    // macro: mean of 1.0 and 0.75
    assert!((mac.recall - 0.875).abs() < 1e-12);
}
