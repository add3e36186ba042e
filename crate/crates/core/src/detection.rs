//! Vote shifting and greedy multi-model RANSAC clustering of object centres.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMap, Point};
use crate::structure::EmbeddedModel;

/// One patch occurrence shifted to the object centre it implies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub patch: usize,
    pub center: Point,
    pub hit: Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub patch: usize,
    pub x: f64,
    pub y: f64,
}

impl Member {
    pub fn hit(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// A candidate object occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub cx: f64,
    pub cy: f64,
    /// Sorted by patch id, one per patch.
    pub members: Vec<Member>,
}

impl Cluster {
    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn patch_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().map(|m| m.patch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    /// Inlier radius in canonical pixels.
    pub sigma: f64,
    pub min_support: usize,
    /// Above this many live votes, hypotheses are sampled instead of
    /// enumerated.
    pub max_hypotheses: usize,
    pub refinements: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { sigma: 20.0, min_support: 2, max_hypotheses: 5000, refinements: 2, rng_seed: 0 }
    }
}

impl RansacConfig {
    /// Inlier radius for a canonical object size: 20 px at the default size
    /// of 27, about three quarters of the size otherwise.
    pub fn sigma_for(object_size: usize) -> f64 {
        if object_size == 27 {
            20.0
        } else {
            (0.74 * object_size as f64).ceil()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || self.min_support < 1 || self.max_hypotheses < 1 {
            return Err(Error::InvalidConfig("ransac needs sigma > 0, min_support >= 1, max_hypotheses >= 1".into()));
        }
        Ok(())
    }
}

/// Every set pixel of every modelled patch, shifted by minus the patch's
/// embedded coordinate. Patches missing from the model contribute nothing.
pub fn collect_votes<'a>(
    model: &EmbeddedModel,
    occurrences: impl IntoIterator<Item = (usize, &'a BinaryMap)>,
) -> Vec<Vote> {
    let mut votes = Vec::new();
    for (patch, z) in occurrences {
        let Some(offset) = model.coord(patch) else { continue };
        for (x, y) in z.points() {
            let hit = Point::new(x as f64, y as f64);
            votes.push(Vote { patch, center: hit - offset, hit });
        }
    }
    votes
}

struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(votes: &[Vote], cell: f64) -> Grid {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, v) in votes.iter().enumerate() {
            cells.entry(Self::key(v.center, cell)).or_default().push(i);
        }
        Grid { cell, cells }
    }

    fn key(p: Point, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    fn near(&self, p: Point, radius: f64) -> impl Iterator<Item = usize> + '_ {
        let r = (radius / self.cell).ceil() as i64;
        let (kx, ky) = Self::key(p, self.cell);
        (ky - r..=ky + r)
            .flat_map(move |y| (kx - r..=kx + r).map(move |x| (x, y)))
            .filter_map(|k| self.cells.get(&k))
            .flatten()
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Hypothesis {
    center: Point,
    members: Vec<usize>,
    spread: f64,
}

impl Hypothesis {
    fn better_than(&self, other: &Hypothesis) -> bool {
        self.members.len() > other.members.len()
            || (self.members.len() == other.members.len() && self.spread < other.spread)
    }
}

struct Clusterer<'a> {
    votes: &'a [Vote],
    live: Vec<bool>,
    grid: Grid,
    cfg: &'a RansacConfig,
}

impl Clusterer<'_> {
    /// Live votes within sigma of `c`, keeping the nearest vote per patch.
    fn members_at(&self, c: Point) -> (Vec<usize>, f64) {
        let mut best: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for i in self.grid.near(c, self.cfg.sigma) {
            if !self.live[i] {
                continue;
            }
            let d = self.votes[i].center.dist(c);
            if d > self.cfg.sigma {
                continue;
            }
            let e = best.entry(self.votes[i].patch).or_insert((d, i));
            if d < e.0 || (d == e.0 && i < e.1) {
                *e = (d, i);
            }
        }
        let spread = best.values().map(|(d, _)| d).sum();
        (best.into_values().map(|(_, i)| i).collect(), spread)
    }

    fn hypothesis(&self, start: usize) -> Hypothesis {
        let mut center = self.votes[start].center;
        let (mut members, mut spread) = self.members_at(center);
        for _ in 0..self.cfg.refinements {
            if members.is_empty() {
                break;
            }
            let sum = members.iter().fold(Point::default(), |acc, &i| acc + self.votes[i].center);
            center = sum * (1.0 / members.len() as f64);
            (members, spread) = self.members_at(center);
        }
        Hypothesis { center, members, spread }
    }
}

/// Greedy sequential RANSAC over vote centres.
///
/// Each round scores every live vote as a starting hypothesis (or a seeded
/// sample of them when there are many), refines each by mean shift within
/// `sigma`, and accepts the one with most distinct patches (ties: smallest
/// total distance, then earliest vote). Accepted members leave the pool;
/// other votes of the same patches stay available to neighbouring objects.
pub fn ransac_cluster(votes: &[Vote], cfg: &RansacConfig) -> Vec<Cluster> {
    let mut state = Clusterer { votes, live: vec![true; votes.len()], grid: Grid::new(votes, cfg.sigma), cfg };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    // Scores of exhaustively enumerated starts stay valid until a vote within
    // reach of their refinement path is removed.
    let mut cache: Vec<Option<Hypothesis>> = vec![None; votes.len()];
    let reach = cfg.sigma * (cfg.refinements as f64 + 1.0);
    let mut clusters = Vec::new();
    loop {
        let live: Vec<usize> = (0..votes.len()).filter(|&i| state.live[i]).collect();
        if live.len() < cfg.min_support.max(1) {
            break;
        }
        let exhaustive = live.len() <= cfg.max_hypotheses;
        let starts: Vec<usize> = if exhaustive {
            live
        } else {
            let mut s: Vec<usize> =
                index::sample(&mut rng, live.len(), cfg.max_hypotheses).into_iter().map(|k| live[k]).collect();
            s.sort_unstable();
            s
        };
        let fresh: Vec<(usize, Hypothesis)> = starts
            .par_iter()
            .filter(|&&s| !exhaustive || cache[s].is_none())
            .map(|&s| (s, state.hypothesis(s)))
            .collect();
        let mut scored: Vec<(usize, Hypothesis)> = Vec::with_capacity(starts.len());
        if exhaustive {
            for (s, h) in fresh {
                cache[s] = Some(h);
            }
            scored.extend(starts.iter().map(|&s| (s, cache[s].clone().expect("scored above"))));
        } else {
            scored = fresh;
        }
        let Some((_, best)) = scored.into_iter().reduce(|a, b| if b.1.better_than(&a.1) { b } else { a }) else {
            break;
        };
        if best.members.len() < cfg.min_support {
            break;
        }
        for &m in &best.members {
            state.live[m] = false;
            cache[m] = None;
        }
        for i in 0..votes.len() {
            if cache[i].is_some()
                && best.members.iter().any(|&m| votes[m].center.dist(votes[i].center) <= reach + cfg.sigma)
            {
                cache[i] = None;
            }
        }
        let mut members: Vec<Member> = best
            .members
            .iter()
            .map(|&i| Member { patch: votes[i].patch, x: votes[i].hit.x, y: votes[i].hit.y })
            .collect();
        members.sort_by_key(|m| m.patch);
        clusters.push(Cluster { id: clusters.len(), cx: best.center.x, cy: best.center.y, members });
    }
    clusters
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::{EmbeddedModel, EmbeddedVertex};
    use rand::Rng;

    fn model(coords: &[(f64, f64)]) -> EmbeddedModel {
        EmbeddedModel {
            vertices: coords
                .iter()
                .enumerate()
                .map(|(id, &(x, y))| EmbeddedVertex { id, coord: Point::new(x, y), component: 0 })
                .collect(),
            n_components: 1,
        }
    }

    #[test]
    fn votes_shift_by_embedding() {
        let m = model(&[(-5.0, 0.0), (5.0, 2.0)]);
        let z0 = BinaryMap::from_points(100, 100, &[(45, 50)]);
        let z1 = BinaryMap::from_points(100, 100, &[(55, 52), (10, 10)]);
        let empty = BinaryMap::new(100, 100);
        let votes = collect_votes(&m, [(0, &z0), (1, &z1), (7, &empty)]);
        assert_eq!(votes.len(), 3);
        assert_eq!(votes[0].center, Point::new(50.0, 50.0));
        assert_eq!(votes[1].center, Point::new(5.0, 8.0));
        assert_eq!(votes[2].center, Point::new(50.0, 50.0));
    }

    #[test]
    fn off_frame_votes_are_kept() {
        let m = model(&[(10.0, 10.0)]);
        let z = BinaryMap::from_points(20, 20, &[(2, 3)]);
        let votes = collect_votes(&m, [(0, &z)]);
        assert_eq!(votes[0].center, Point::new(-8.0, -7.0));
    }

    #[test]
    fn planted_centres_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut votes = Vec::new();
        let mut truth = Vec::new();
        for gy in 0..5 {
            for gx in 0..5 {
                let c = Point::new(40.0 + 30.0 * gx as f64, 40.0 + 30.0 * gy as f64);
                truth.push(c);
                for patch in 0..5 {
                    let j = Point::new(rng.random_range(-3.0..=3.0), rng.random_range(-3.0..=3.0));
                    votes.push(Vote { patch, center: c + j, hit: c + j });
                }
            }
        }
        let clusters = ransac_cluster(&votes, &RansacConfig::default());
        assert_eq!(clusters.len(), 25);
        for t in truth {
            let d = clusters.iter().map(|c| c.center().dist(t)).fold(f64::INFINITY, f64::min);
            assert!(d <= 2.0, "centre off by {d}");
        }
    }

    #[test]
    fn single_vote_yields_nothing() {
        let votes = [Vote { patch: 0, center: Point::new(1.0, 1.0), hit: Point::new(1.0, 1.0) }];
        assert!(ransac_cluster(&votes, &RansacConfig::default()).is_empty());
    }

    #[test]
    fn close_centres_merge() {
        let mut votes = Vec::new();
        for patch in 0..3 {
            votes.push(Vote { patch, center: Point::new(50.0, 50.0), hit: Point::default() });
            votes.push(Vote { patch: patch + 3, center: Point::new(60.0, 50.0), hit: Point::default() });
        }
        let clusters = ransac_cluster(&votes, &RansacConfig::default());
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].members.len(), 6);
        assert!((clusters[0].cx - 55.0).abs() < 1e-9);
    }

    #[test]
    fn one_member_per_patch_nearest_wins() {
        let votes = [
            Vote { patch: 0, center: Point::new(50.0, 50.0), hit: Point::new(1.0, 0.0) },
            Vote { patch: 1, center: Point::new(50.0, 50.0), hit: Point::new(2.0, 0.0) },
            Vote { patch: 0, center: Point::new(58.0, 50.0), hit: Point::new(3.0, 0.0) },
        ];
        let clusters = ransac_cluster(&votes, &RansacConfig { refinements: 0, ..Default::default() });
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].members.len(), 2);
        assert_eq!(clusters[0].members[0].hit(), Point::new(1.0, 0.0));
    }

    #[test]
    fn sampled_hypotheses_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let votes: Vec<Vote> = (0..400)
            .map(|i| {
                let c = Point::new(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0));
                Vote { patch: i % 7, center: c, hit: c }
            })
            .collect();
        let cfg = RansacConfig { max_hypotheses: 50, rng_seed: 3, ..Default::default() };
        assert_eq!(ransac_cluster(&votes, &cfg), ransac_cluster(&votes, &cfg));
    }
}
