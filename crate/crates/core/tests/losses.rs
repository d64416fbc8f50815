mod common;

use common::*;
use proptest::prelude::*;
use selhn::losses::{kink_distance, Branch, Direction, LossHyper, LossKind, SimMatrix};

fn sim_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=8).prop_flat_map(|b| prop::collection::vec(prop::collection::vec(-1.0f64..1.0, b), b))
}

#[test]
fn matches_naive_enumeration() {
    let h = LossHyper::<f64>::default();
    let mut rng = rng(1);
    for b in 2..=8 {
        for _ in 0..100 {
            let rows = random_square(&mut rng, b);
            let s = SimMatrix::from_rows(&rows).unwrap();
            let want = [
                naive_triplet(&rows, h.margin),
                naive_hn(&rows, h.margin),
                naive_shn(&rows, h.margin),
                naive_sct(&rows, h.margin),
                naive_selhn(&rows, h.margin, h.threshold),
            ];
            for (kind, w) in LossKind::ALL.into_iter().zip(want) {
                let got = kind.evaluate(&s, &h).unwrap().value;
                assert!((got - w).abs() <= 1e-12, "{kind} B={b}: {got} vs {w}");
            }
        }
    }
}

#[test]
fn selhn_eps_zero_is_hn_and_large_eps_is_scaled_triplet() {
    let mut rng = rng(2);
    for b in 2..=8 {
        for _ in 0..50 {
            let s = SimMatrix::from_rows(&random_square(&mut rng, b)).unwrap();
            let hn = LossKind::Hn.evaluate(&s, &LossHyper::new(0.2, 0.0).unwrap()).unwrap();
            let sel0 = LossKind::SelHn.evaluate(&s, &LossHyper::new(0.2, 0.0).unwrap()).unwrap();
            assert!((hn.value - sel0.value).abs() <= 1e-12);
            assert!(hn.d_s.max_abs_diff(&sel0.d_s).unwrap() <= 1e-12);

            // |Δs| <= 2 for scores in [-1, 1]
            let sel2 = LossKind::SelHn.evaluate(&s, &LossHyper::new(0.2, 2.0).unwrap()).unwrap();
            let tri = LossKind::Triplet.evaluate(&s, &LossHyper::default()).unwrap();
            for (a, t) in sel2.mining.iter().zip(tri.mining.iter()) {
                assert!((a.value - t.value / b as f64).abs() <= 1e-12);
                assert_eq!(a.branch, Branch::Triplet);
            }
        }
    }
}

#[test]
fn hinge_exactly_at_zero_is_inactive() {
    // s_hn - s_p + margin == 0 for anchor 0 in both directions
    let s = SimMatrix::from_rows(&[[0.5, 0.25], [0.25, 0.5]]).unwrap();
    let r = LossKind::Hn.evaluate(&s, &LossHyper::new(0.25, 0.01).unwrap()).unwrap();
    assert_eq!(r.value, 0.0);
    assert!(r.d_s.as_slice().iter().all(|&g| g == 0.0));
}

proptest! {
    #[test]
    fn values_nonnegative_and_finite(rows in sim_strategy()) {
        let s = SimMatrix::from_rows(&rows).unwrap();
        let h = LossHyper::default();
        for kind in [LossKind::Triplet, LossKind::Hn, LossKind::Shn, LossKind::SelHn] {
            let r = kind.evaluate(&s, &h).unwrap();
            prop_assert!(r.value >= 0.0 && r.value.is_finite());
        }
    }

    #[test]
    fn hard_negative_hinge_bounds(rows in sim_strategy()) {
        let s = SimMatrix::from_rows(&rows).unwrap();
        let h = LossHyper::default();
        let tri = LossKind::Triplet.evaluate(&s, &h).unwrap().value;
        let hn = LossKind::Hn.evaluate(&s, &h).unwrap().value;
        let shn = LossKind::Shn.evaluate(&s, &h).unwrap().value;
        prop_assert!(shn <= hn + 1e-12);
        prop_assert!(hn <= tri + 1e-12);
    }

    #[test]
    fn per_anchor_values_sum_to_loss(rows in sim_strategy()) {
        let s = SimMatrix::from_rows(&rows).unwrap();
        for kind in LossKind::ALL {
            let r = kind.evaluate(&s, &LossHyper::default()).unwrap();
            let total: f64 = r.mining.iter().map(|a| a.value).sum();
            prop_assert!((total - r.value).abs() <= 1e-12);
            prop_assert_eq!(r.mining.direction(Direction::ImageToText).len(), rows.len());
        }
    }

    #[test]
    fn gradient_matches_finite_difference(rows in sim_strategy()) {
        let h = LossHyper::default();
        let s = SimMatrix::from_rows(&rows).unwrap();
        let step = 1e-7;
        for kind in LossKind::ALL {
            if kink_distance(&s, kind, &h) < 1e-4 {
                continue;
            }
            let d = kind.evaluate(&s, &h).unwrap().d_s;
            for i in 0..rows.len() {
                for j in 0..rows.len() {
                    let mut up = rows.clone();
                    let mut dn = rows.clone();
                    up[i][j] += step;
                    dn[i][j] -= step;
                    let f = |m: &Vec<Vec<f64>>| kind.evaluate(&SimMatrix::from_rows(m).unwrap(), &h).unwrap().value;
                    let fd = (f(&up) - f(&dn)) / (2.0 * step);
                    prop_assert!((fd - d[(i, j)]).abs() < 1e-6, "{} ({},{}) fd {} analytic {}", kind, i, j, fd, d[(i, j)]);
                }
            }
        }
    }
}
