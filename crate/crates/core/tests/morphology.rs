#[path = "common/morph_oracle.rs"]
mod oracle;

use priorpath::mask::{self, StructuringElement};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn operators_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut bad = 0;
    for _ in 0..100 {
        let m = oracle::random_mask(32, 32, &mut rng);
        let (w, h) = (rng.random_range(1..=11), rng.random_range(1..=11));
        let se = StructuringElement::new(w, h).unwrap();
        bad += oracle::mismatches(&mask::erode(&m, &se).unwrap(), &oracle::erode(&m, w, h));
        bad += oracle::mismatches(&mask::dilate(&m, &se).unwrap(), &oracle::dilate(&m, w, h));
        bad += oracle::mismatches(&mask::open(&m, &se).unwrap(), &oracle::open(&m, w, h));
        bad += oracle::mismatches(&mask::close(&m, &se).unwrap(), &oracle::close(&m, w, h));
        bad += oracle::mismatches(&mask::coarsen(&m).unwrap(), &oracle::coarsen(&m));
    }
    assert_eq!(bad, 0);
}

#[test]
fn non_square_masks_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..30 {
        let (mw, mh) = (rng.random_range(10..40), rng.random_range(10..40));
        let m = oracle::random_mask(mw, mh, &mut rng);
        let (w, h) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let se = StructuringElement::new(w, h).unwrap();
        assert_eq!(mask::erode(&m, &se).unwrap(), oracle::erode(&m, w, h));
        assert_eq!(mask::dilate(&m, &se).unwrap(), oracle::dilate(&m, w, h));
        assert_eq!(mask::coarsen(&m).unwrap(), oracle::coarsen(&m));
    }
}
