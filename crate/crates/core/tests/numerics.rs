mod common;

use common::*;

fn check(c: Check) {
    match c {
        Ok(detail) => println!("{detail}"),
        Err(detail) => panic!("{detail}"),
    }
}

#[test]
fn ncc_fft_agrees_with_direct_evaluation() {
    check(ncc_fft_matches_direct());
}

#[test]
fn consistent_trees_embed_exactly() {
    check(tree_embedding_is_exact());
}

#[test]
fn embedding_cannot_be_improved_locally() {
    check(embedding_is_global_minimum());
}

#[test]
fn ransac_recovers_planted_clusters() {
    check(ransac_recall());
}

#[test]
fn bar_edges_collapse_to_bar_count() {
    check(bars_edge_correction());
}

#[test]
fn svm_solution_is_locally_optimal() {
    check(svm_local_optimality());
}

#[test]
fn margin_updates_follow_the_rules() {
    check(delta_transcripts());
}
