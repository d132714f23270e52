//! Library results against brute-force oracles on many random instances.

mod common;

use common::checks;
use common::*;
use satret::eval::rank;

#[test]
fn segment_pipeline_matches_predicate_oracle() {
    checks::segment_pipeline_vs_predicate(500).unwrap();
}

#[test]
fn rank_matches_exhaustive_selection() {
    checks::rank_vs_exhaustive_selection(200).unwrap();
}

#[test]
fn five_by_seven_ranking() {
    let mut r = rng_for(5, "oracle/5x7");
    let queries: Vec<Vec<f64>> = (0..5).map(|_| unit_vec(&mut r, 4)).collect();
    let gallery: Vec<Vec<f64>> = (0..7).map(|_| unit_vec(&mut r, 4)).collect();
    let got = rank(&queries, &gallery).unwrap();
    assert_eq!(got.len(), 5);
    for (q, row) in queries.iter().zip(&got) {
        // full sort of the similarity list
        let mut by_sim: Vec<(f64, usize)> = gallery.iter().enumerate().map(|(j, g)| (-cosine(q, g), j)).collect();
        by_sim.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(row, &by_sim.iter().map(|&(_, j)| j).collect::<Vec<_>>());
    }
}

#[test]
fn recall_matches_set_membership_oracle() {
    checks::recall_vs_set_membership(200).unwrap();
}

#[test]
fn recall_report_matches_oracle_both_directions() {
    checks::recall_report_both_directions(200).unwrap();
}

#[test]
fn w1_and_w2_entries_match_cosine_oracle() {
    checks::w1_w2_vs_cosine(200).unwrap();
}

#[test]
fn pca_projections_match_covariance_eigensolve() {
    checks::pca_vs_covariance_eigensolve(200).unwrap();
}
