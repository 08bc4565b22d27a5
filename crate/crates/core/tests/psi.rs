mod common;

use npag_core::error::NpagError;
use npag_core::filtering::{subject_log_likelihood, Subject};
use npag_core::psi::{build_psi, PsiCache, UNDERFLOW_CLAMP};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn subjects(n: usize, seed: u64) -> Vec<Subject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| common::random_pk_subject(&mut rng, &format!("s{i}"))).collect()
}

#[test]
fn entries_match_pointwise_filter_calls() {
    let model = common::pk_model(1.0);
    let subs = subjects(3, 1);
    let grid = vec![vec![0.5, 1.0], vec![1.5, 0.8], vec![1.0, 1.9], vec![2.0, 0.4]];
    let psi = build_psi(&model, &subs, &grid).unwrap();
    for (i, s) in subs.iter().enumerate() {
        for (k, theta) in grid.iter().enumerate() {
            let direct = subject_log_likelihood(&model.instantiate(theta, s).unwrap(), s).unwrap();
            if psi.values[(i, k)] == 0.0 {
                // entries this far below the row maximum are clamped to zero
                assert!(direct - psi.row_log_scale[i] < UNDERFLOW_CLAMP.ln());
            } else {
                assert!((psi.log_entry(i, k) - direct).abs() < 1e-12, "{} vs {direct}", psi.log_entry(i, k));
            }
        }
        assert_eq!(psi.values.row(i).max(), 1.0);
    }
}

#[test]
fn duplicate_point_duplicates_column() {
    let model = common::pk_model(0.0);
    let subs = subjects(4, 2);
    let psi = build_psi(&model, &subs, &[vec![1.0, 1.0], vec![0.7, 1.3], vec![1.0, 1.0]]).unwrap();
    assert_eq!(psi.values.column(0), psi.values.column(2));
}

#[test]
fn scaled_log_likelihood_matches_direct_sum() {
    let model = common::pk_model(1.0);
    let subs = subjects(5, 3);
    let grid = vec![vec![0.5, 1.0], vec![1.5, 0.8], vec![1.0, 1.9]];
    let psi = build_psi(&model, &subs, &grid).unwrap();
    let w = [0.2, 0.5, 0.3];
    let direct: f64 = subs
        .iter()
        .map(|s| {
            let mix: f64 = grid
                .iter()
                .zip(w)
                .map(|(t, wk)| wk * subject_log_likelihood(&model.instantiate(t, s).unwrap(), s).unwrap().exp())
                .sum();
            mix.ln()
        })
        .sum();
    assert!((psi.log_likelihood(&w) - direct).abs() < 1e-12);
}

#[test]
fn cache_reuses_columns_and_matches_fresh_build() {
    let model = common::pk_model(1.0);
    let subs = subjects(6, 4);
    let mut cache = PsiCache::new();
    let g1 = vec![vec![0.5, 1.0], vec![1.5, 0.8]];
    cache.build(&model, &subs, &g1).unwrap();
    let g2 = vec![vec![1.5, 0.8], vec![0.9, 0.9]];
    let cached = cache.build(&model, &subs, &g2).unwrap();
    assert_eq!(cache.len(), 3);
    assert_eq!(cached, build_psi(&model, &subs, &g2).unwrap());
    cache.retain(&g2);
    assert_eq!(cache.len(), 2);
}

#[test]
fn degenerate_subject_is_named() {
    let model = common::pk_model(0.0);
    let mut subs = subjects(2, 5);
    subs.push(Subject::scalar("far", vec![0.2], &[1e200]).unwrap());
    match build_psi(&model, &subs, &[vec![1.0, 1.0]]) {
        Err(NpagError::DegenerateSubject { id }) => assert_eq!(id, "far"),
        other => panic!("expected degenerate subject, got {other:?}"),
    }
}

#[test]
fn grid_outside_box_is_rejected() {
    let model = common::pk_model(0.0);
    assert!(matches!(build_psi(&model, &subjects(1, 6), &[vec![3.0, 1.0]]), Err(NpagError::OutsideBox { .. })));
}
