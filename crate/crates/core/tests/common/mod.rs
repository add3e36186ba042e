//! Checks shared by the numerical tests and the acceptance run. Each returns
//! a short description of what was measured, or why it failed.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recurdet::classifier::{primal_objective, train_soft_svm, Session, SessionConfig, SvmConfig, Zone};
use recurdet::detection::{ransac_cluster, RansacConfig, Vote};
use recurdet::imaging::{ncc_map, ncc_map_direct, non_max_suppress, GrayImage, Point};
use recurdet::structure::*;

pub type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
    GrayImage::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
}

pub fn ncc_fft_matches_direct() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for trial in 0..6 {
        let (w, h) = (40 + 7 * trial, 33 + 5 * trial);
        let img = random_image(&mut rng, w, h);
        let side = [3, 5, 9][trial % 3];
        let patch = img.patch(rng.random_range(side..w - side), rng.random_range(side..h - side), side).unwrap();
        let fast = ncc_map(&img, &patch).unwrap();
        let slow = ncc_map_direct(&img, &patch).unwrap();
        for (a, b) in fast.data().iter().zip(slow.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-6, format!("max |fft - direct| = {worst:.2e}"))
}

/// A random tree whose offsets are exactly consistent with planted coordinates.
pub fn consistent_tree(rng: &mut ChaCha8Rng, n: usize) -> PatchGraph {
    let mut pos = vec![Point::new(0.0, 0.0)];
    let mut edges = Vec::new();
    for v in 1..n {
        let parent = rng.random_range(0..v);
        pos.push(pos[parent] + Point::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)));
        edges.push(PatchPairEdge { i: parent, j: v, offset: pos[v] - pos[parent], peak_ratio: 3.0 });
    }
    PatchGraph::new((0..n).collect(), edges)
}

pub fn tree_embedding_is_exact() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    for n in [2, 5, 17, 40] {
        let g = consistent_tree(&mut rng, n);
        let m = embed(&g).map_err(|e| e.to_string())?;
        for e in &g.edges {
            worst = worst.max((m.coord(e.j).unwrap() - m.coord(e.i).unwrap() - e.offset).norm());
        }
    }
    ensure(worst <= 1e-8, format!("max edge misfit {worst:.2e}"))
}

pub fn embedding_is_global_minimum() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut probes = 0;
    for n in [4, 9, 20] {
        let mut g = consistent_tree(&mut rng, n);
        // Extra inconsistent edges make the objective strictly positive.
        for _ in 0..n {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a < b && g.edge(a, b).is_none() {
                g.edges.push(PatchPairEdge {
                    i: a,
                    j: b,
                    offset: Point::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)),
                    peak_ratio: 3.0,
                });
            }
        }
        let m = embed(&g).map_err(|e| e.to_string())?;
        let residual = normal_equation_residual(&g, &m);
        if residual > 1e-8 {
            return Err(format!("normal-equation residual {residual:.2e}"));
        }
        let best = embedding_objective(&g, &m);
        for k in 0..m.vertices.len() {
            for step in [Point::new(0.1, 0.0), Point::new(-0.1, 0.0), Point::new(0.0, 0.1), Point::new(0.0, -0.1)] {
                let mut moved = m.clone();
                moved.vertices[k].coord = moved.vertices[k].coord + step;
                probes += 1;
                if embedding_objective(&g, &moved) < best - 1e-9 {
                    return Err(format!("moving vertex {k} by {step:?} lowers the objective"));
                }
            }
        }
    }
    ensure(true, format!("{probes} perturbations, none improves"))
}

pub fn ransac_recall() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut votes = Vec::new();
    let mut planted = Vec::new();
    for gy in 0..10 {
        for gx in 0..10 {
            let c = Point::new(50.0 + 45.0 * gx as f64, 50.0 + 45.0 * gy as f64);
            planted.push(c);
            for patch in 0..rng.random_range(3..8) {
                let p = c + Point::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                votes.push(Vote { patch, center: p, hit: p });
            }
        }
    }
    for _ in 0..60 {
        let p = Point::new(rng.random_range(0.0..520.0), rng.random_range(0.0..520.0));
        votes.push(Vote { patch: rng.random_range(0..8), center: p, hit: p });
    }
    let clusters = ransac_cluster(&votes, &RansacConfig::default());
    // Brute force: every planted centre against every cluster. Background
    // votes inside the inlier radius pull refined centres by a few pixels.
    let found = planted.iter().filter(|c| clusters.iter().any(|k| k.center().dist(**c) <= 5.0)).count();
    let recall = found as f64 / planted.len() as f64;
    ensure(recall >= 0.95, format!("recall {recall:.3} ({found}/100, {} clusters)", clusters.len()))
}

pub fn bars_edge_correction() -> Check {
    let length = 45;
    let mut lefts = Vec::new();
    for r in 0..4 {
        for c in 0..5 {
            lefts.push((20 + 30 * c, 10 + (length + 20) * r));
        }
    }
    let img = GrayImage::from_fn(180, 4 * (length + 20) + 20, |x, y| {
        let on = lefts.iter().any(|&(x0, y0)| x >= x0 && x < x0 + 5 && y >= y0 && y < y0 + length);
        if on {
            0.8
        } else {
            0.1
        }
    });
    let cfg = StructureConfig::default();
    let patch = img.patch(lefts[0].0, lefts[0].1 + 22, 9).unwrap();
    let rho = ncc_map(&img, &patch).unwrap();
    let raw = non_max_suppress(&rho, 1.0 - cfg.epsilon, cfg.peak_window).count();
    let fixed = correct_edge_patch(&rho, &cfg).map_err(|e| e.to_string())?.count();
    ensure((fixed as f64 - 20.0).abs() <= 2.0, format!("20 bars: {raw} raw occurrences, {fixed} after correction"))
}

pub fn svm_local_optimality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let pts: Vec<Vec<f64>> = (0..80).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let labels: Vec<bool> = pts.iter().map(|p| p[0] - 0.5 * p[2] + rng.random_range(-0.7..0.7) > 0.0).collect();
    let cfg = SvmConfig { c: 1.0, tolerance: 1e-9, max_iterations: 500_000 };
    let sep = train_soft_svm(&pts, &labels, &cfg).map_err(|e| e.to_string())?;
    let best = primal_objective(&sep, &pts, &labels, cfg.c);
    for _ in 0..200 {
        let mut p = sep.clone();
        p.w.iter_mut().for_each(|w| *w += rng.random_range(-1e-2..1e-2));
        p.b += rng.random_range(-1e-2..1e-2);
        let v = primal_objective(&p, &pts, &labels, cfg.c);
        if v < best - 1e-6 {
            return Err(format!("perturbation lowers the objective {best:.6} -> {v:.6}"));
        }
    }
    ensure(true, format!("objective {best:.4}, 200 perturbations, none improves"))
}

fn ramp_session() -> (Vec<f64>, Session) {
    let scores: Vec<f64> = (0..100).map(|k| k as f64 / 10.0).collect();
    let features = scores.iter().map(|&s| vec![s, 0.0]).collect();
    let mut s = Session::new(features, SessionConfig::default()).unwrap();
    s.set_bias(5.0).unwrap();
    (scores, s)
}

/// Scripted rounds for the margin update rules.
pub fn delta_transcripts() -> Check {
    // Round without corrections: converged, both margins halved.
    let (scores, mut s) = ramp_session();
    let d = s.state().delta_plus;
    let resp: BTreeMap<usize, bool> =
        s.pending().unwrap().entries.iter().map(|e| (e.cluster, scores[e.cluster] > 5.0)).collect();
    let out = s.apply_corrections(&resp).map_err(|e| e.to_string())?;
    let st = s.state();
    if !(out.converged && (st.delta_plus - d / 2.0).abs() < 1e-9 && (st.delta_minus - d / 2.0).abs() < 1e-9) {
        return Err(format!("no corrections: converged {} delta {} {}", out.converged, st.delta_plus, st.delta_minus));
    }

    // A correction in the far positive zone doubles delta+ and halves delta-.
    let (scores, mut s) = ramp_session();
    let d = s.state().delta_plus;
    let batch = s.pending().unwrap().clone();
    let mut resp: BTreeMap<usize, bool> = batch.entries.iter().map(|e| (e.cluster, scores[e.cluster] > 5.0)).collect();
    let flip = batch.entries.iter().find(|e| e.zone == Zone::FarPlus).unwrap().cluster;
    resp.insert(flip, false);
    s.apply_corrections(&resp).map_err(|e| e.to_string())?;
    let st = s.state();
    let want_plus = (2.0 * d).min(st.b_max - st.separator.b);
    let want_minus = (d / 2.0).min(st.separator.b - st.b_min);
    if (st.delta_plus - want_plus).abs() > 1e-9 || (st.delta_minus - want_minus).abs() > 1e-9 {
        return Err(format!(
            "far+ correction: delta {} {} want {want_plus} {want_minus}",
            st.delta_plus, st.delta_minus
        ));
    }

    // A near-zone correction alone halves both.
    let (scores, mut s) = ramp_session();
    let d = s.state().delta_plus;
    let batch = s.pending().unwrap().clone();
    let mut resp: BTreeMap<usize, bool> = batch.entries.iter().map(|e| (e.cluster, scores[e.cluster] > 5.0)).collect();
    let flip = batch.entries.iter().find(|e| e.zone == Zone::NearMinus).unwrap().cluster;
    resp.insert(flip, true);
    s.apply_corrections(&resp).map_err(|e| e.to_string())?;
    let st = s.state();
    let (wp, wm) = ((d / 2.0).min(st.b_max - st.separator.b), (d / 2.0).min(st.separator.b - st.b_min));
    ensure(
        (st.delta_plus - wp).abs() < 1e-9 && (st.delta_minus - wm).abs() < 1e-9,
        format!("3 transcripts; near-only correction gives delta {:.3} {:.3}", st.delta_plus, st.delta_minus),
    )
}

pub fn numerical_suite() -> Vec<(&'static str, Check)> {
    vec![
        ("ncc fft vs direct", ncc_fft_matches_direct()),
        ("tree embedding exact", tree_embedding_is_exact()),
        ("embedding global minimum", embedding_is_global_minimum()),
        ("ransac planted recall", ransac_recall()),
        ("bars edge correction", bars_edge_correction()),
        ("svm local optimality", svm_local_optimality()),
        ("margin update transcripts", delta_transcripts()),
    ]
}
