use kgcrs::align::{align_loss, contrast_mask, AlignSettings, MaskMode};
use kgcrs::autograd::Mat;
use kgcrs::gradcheck;
use kgcrs::kg::EntityId;
use kgcrs::reference;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ids(v: &[usize]) -> Vec<EntityId> {
    v.iter().copied().map(EntityId).collect()
}

#[test]
fn distinct_sequences_give_identity_mask() {
    let seqs = vec![ids(&[1]), ids(&[2, 3]), ids(&[]), ids(&[4])];
    assert_eq!(contrast_mask(&seqs, MaskMode::Ordered), Mat::eye(4));
}

#[test]
fn repeated_sequence_marks_crossing_pairs() {
    let seqs = vec![ids(&[1, 2]), ids(&[3]), ids(&[1, 2])];
    let m = contrast_mask(&seqs, MaskMode::Ordered);
    assert_eq!((m[[0, 2]], m[[2, 0]], m[[0, 1]]), (1.0, 1.0, 0.0));
    assert_eq!(m.sum(), 5.0);
}

#[test]
fn order_matters_only_in_ordered_mode() {
    let seqs = vec![ids(&[7, 8]), ids(&[8, 7])];
    assert_eq!(contrast_mask(&seqs, MaskMode::Ordered), Mat::eye(2));
    assert_eq!(contrast_mask(&seqs, MaskMode::Set), Mat::ones((2, 2)));
}

#[test]
fn random_batches_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let b = rng.gen_range(2..7);
        let e = reference::random_mat(&mut rng, b, 5, 1.0);
        let t = reference::random_mat(&mut rng, b, 5, 1.0);
        let seqs: Vec<_> = (0..b).map(|_| ids(&[rng.gen_range(0..3)])).collect();
        let mask = contrast_mask(&seqs, MaskMode::Ordered);
        for (normalize, literal) in [(true, false), (false, false), (true, true)] {
            let s = AlignSettings { tau: 0.5, normalize, literal, mask: MaskMode::Ordered };
            let got = align_loss(&e, &t, &mask, &s).unwrap();
            let want = reference::infonce(&e, &t, &mask, 0.5, normalize, literal);
            if want.is_finite() {
                assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
            }
        }
    }
}

#[test]
fn no_positive_pairs_give_zero() {
    let e = Mat::ones((2, 3));
    assert_eq!(align_loss(&e, &e, &Mat::zeros((2, 2)), &AlignSettings::default()).unwrap(), 0.0);
}

#[test]
fn bad_temperature_is_rejected() {
    let e = Mat::ones((2, 3));
    let s = AlignSettings { tau: 0.0, ..AlignSettings::default() };
    assert!(align_loss(&e, &e, &Mat::eye(2), &s).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    for literal in [false, true] {
        let r = gradcheck::align_loss(3, literal).unwrap();
        assert!(r.rel_error < 1e-4, "{r:?}");
    }
}

proptest! {
    #[test]
    fn loss_is_non_negative(seed in 0u64..10_000, b in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = reference::random_mat(&mut rng, b, 4, 1.0);
        let t = reference::random_mat(&mut rng, b, 4, 1.0);
        let l = align_loss(&e, &t, &Mat::eye(b), &AlignSettings::default()).unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn raising_positive_similarity_lowers_loss(seed in 0u64..10_000, bump in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 4;
        let e = reference::random_mat(&mut rng, b, b, 1.0);
        // Orthonormal targets: moving e_0 along t_0 changes only s_00.
        let t = Mat::eye(b);
        let s = AlignSettings { tau: 0.3, normalize: false, ..AlignSettings::default() };
        let mut e2 = e.clone();
        e2[[0, 0]] += bump;
        let (a, c) = (align_loss(&e, &t, &Mat::eye(b), &s).unwrap(), align_loss(&e2, &t, &Mat::eye(b), &s).unwrap());
        prop_assert!(c < a);
    }

    #[test]
    fn normalised_loss_ignores_row_scale(seed in 0u64..10_000, k in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = reference::random_mat(&mut rng, 3, 4, 1.0);
        let t = reference::random_mat(&mut rng, 3, 4, 1.0);
        let s = AlignSettings::default();
        let a = align_loss(&e, &t, &Mat::eye(3), &s).unwrap();
        let c = align_loss(&(&e * k), &t, &Mat::eye(3), &s).unwrap();
        prop_assert!((a - c).abs() < 1e-8 * a.max(1.0));
    }
}
