mod common;

use common::sorted_first_hit;
use proptest::prelude::*;
use selhn::evalmetrics::{recall_at_k, rsum, PairingMap};
use selhn::losses::Direction;
use selhn::numerics::Matrix;

fn table() -> impl Strategy<Value = Matrix<f64>> {
    (10usize..=30).prop_flat_map(|n| {
        prop::collection::vec(prop::sample::select(vec![-0.5, 0.0, 0.25, 0.5, 1.0]), n * n)
            .prop_map(move |v| Matrix::from_vec(n, n, v).unwrap())
    })
}

proptest! {
    #[test]
    fn agrees_with_full_sort(s in table()) {
        let n = s.rows();
        let p = PairingMap::diagonal(n);
        for k in [1, 5, 10, n] {
            let hits = (0..n).filter(|&q| sorted_first_hit(s.row(q), &[q]) < k).count();
            prop_assert_eq!(recall_at_k(&s, &p, k, Direction::ImageToText).unwrap(), 100.0 * hits as f64 / n as f64);
        }
    }

    #[test]
    fn recall_is_monotone_and_bounded(s in table()) {
        let p = PairingMap::diagonal(s.rows());
        let r = rsum(&s, &p).unwrap();
        for x in [r.i2t, r.t2i] {
            prop_assert!(x[0] <= x[1] && x[1] <= x[2] && x[2] <= 100.0 && x[0] >= 0.0);
        }
        prop_assert_eq!(recall_at_k(&s, &p, s.rows(), Direction::TextToImage).unwrap(), 100.0);
    }

    #[test]
    fn transposing_swaps_directions(s in table()) {
        let p = PairingMap::diagonal(s.rows());
        let a = rsum(&s, &p).unwrap();
        let b = rsum(&s.transpose(), &p).unwrap();
        prop_assert_eq!(a.i2t, b.t2i);
        prop_assert_eq!(a.t2i, b.i2t);
    }
}

#[test]
fn five_captions_per_image() {
    // image i scores its own captions at 1.0 except one decoy per image
    let n = 10;
    let p = PairingMap::grouped(n, 5).unwrap();
    let mut s = Matrix::<f64>::zeros(n, 5 * n);
    for i in 0..n {
        for c in 0..5 {
            s[(i, 5 * i + c)] = 0.5;
        }
        s[(i, (5 * i + 7) % (5 * n))] = 0.9;
    }
    assert_eq!(recall_at_k(&s, &p, 1, Direction::ImageToText).unwrap(), 0.0);
    assert_eq!(recall_at_k(&s, &p, 2, Direction::ImageToText).unwrap(), 100.0);
}
