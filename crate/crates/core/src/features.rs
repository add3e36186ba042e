//! Per-cluster occurrence descriptors.
//!
//! Nine base features describe how well a cluster matches the part model;
//! nine more sample the same features from neighbouring clusters along rays
//! through the cluster's empty angular sectors, so that occluded objects can
//! be told apart from partial false matches.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::detection::Cluster;
use crate::error::{Error, Result};
use crate::imaging::{CorrelationMap, Point};
use crate::structure::PatchGraph;

pub const BASE_FEATURES: usize = 9;
pub const FEATURE_DIM: usize = 2 * BASE_FEATURES;
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "count",
    "correlation",
    "deformation",
    "centroid_offset",
    "border",
    "occupancy",
    "pca1",
    "pca2",
    "pca3",
    "occl_count",
    "occl_correlation",
    "occl_deformation",
    "occl_centroid_offset",
    "occl_border",
    "occl_occupancy",
    "occl_pca1",
    "occl_pca2",
    "occl_pca3",
];

pub type FeatureVector = [f64; FEATURE_DIM];
pub type BaseFeatures = [f64; BASE_FEATURES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub bins: usize,
    /// Diameter of the circle an object occupies, canonical pixels.
    pub object_size: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { bins: 8, object_size: 27.0 }
    }
}

/// Average of `||y_b - y_a - o_ab||` over member pairs joined by a graph
/// edge; 0 when no such pair exists.
pub fn mean_deformation(cluster: &Cluster, g: &PatchGraph) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (k, a) in cluster.members.iter().enumerate() {
        for b in &cluster.members[k + 1..] {
            if let Some(e) = g.edge(a.patch, b.patch) {
                total += (b.hit() - a.hit() - e.offset_from(a.patch)).norm();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Distance between the centroid of the member hits and the cluster centre.
pub fn centroid_offset(cluster: &Cluster) -> Result<f64> {
    if cluster.members.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let sum = cluster.members.iter().fold(Point::default(), |acc, m| acc + m.hit());
    Ok((sum * (1.0 / cluster.members.len() as f64)).dist(cluster.center()))
}

/// Angular sector of `p` around `c`, sector 0 starting at the +x axis and
/// increasing with the angle. A point at the centre falls in sector 0.
pub fn angular_bin(c: Point, p: Point, bins: usize) -> usize {
    let d = p - c;
    if d.norm() < 1e-9 {
        return 0;
    }
    let a = d.y.atan2(d.x).rem_euclid(TAU);
    ((a / TAU * bins as f64).floor() as usize).min(bins - 1)
}

/// Number of occupied sectors and the ids of the empty ones.
pub fn angular_occupancy(cluster: &Cluster, bins: usize) -> Result<(usize, Vec<usize>)> {
    if cluster.members.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let mut occupied = vec![false; bins];
    for m in &cluster.members {
        occupied[angular_bin(cluster.center(), m.hit(), bins)] = true;
    }
    let empty: Vec<usize> = (0..bins).filter(|&b| !occupied[b]).collect();
    Ok((bins - empty.len(), empty))
}

/// How far an object of the given radius centred at `c` sticks out of the
/// image: `radius - distance to the nearest border`, clamped to `[0, radius]`.
pub fn border_proximity(c: Point, width: usize, height: usize, radius: f64) -> f64 {
    let d = c.x.min(c.y).min(width as f64 - 1.0 - c.x).min(height as f64 - 1.0 - c.y);
    (radius - d.max(0.0)).clamp(0.0, radius)
}

/// Leading principal directions of the patch-membership indicator vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionBasis {
    /// Patch ids indexing the vector components.
    pub patches: Vec<usize>,
    pub mean: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    /// True when there were too few clusters and the basis is zero-padded.
    pub degenerate: bool,
}

impl CompositionBasis {
    pub fn indicator(&self, cluster: &Cluster) -> Vec<f64> {
        let mut v = vec![0.0; self.patches.len()];
        for p in cluster.patch_ids() {
            if let Ok(k) = self.patches.binary_search(&p) {
                v[k] = 1.0;
            }
        }
        v
    }

    pub fn project(&self, cluster: &Cluster) -> [f64; 3] {
        let v = self.indicator(cluster);
        let mut out = [0.0; 3];
        for (o, axis) in out.iter_mut().zip(&self.axes) {
            *o = axis.iter().zip(&v).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum();
        }
        out
    }
}

/// PCA of the mean-centred membership vectors of all clusters.
///
/// Axes are ordered by decreasing variance and signed so that their largest
/// component is positive. Fewer than three clusters (or patches) give zero
/// axes and `degenerate = true`.
pub fn composition_basis(clusters: &[Cluster], patches: &[usize]) -> CompositionBasis {
    let mut ids = patches.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let n = ids.len();
    let mut basis =
        CompositionBasis { patches: ids, mean: vec![0.0; n], axes: vec![vec![0.0; n]; 3], degenerate: true };
    if clusters.len() < 3 || n == 0 {
        return basis;
    }
    let rows: Vec<Vec<f64>> = clusters.iter().map(|c| basis.indicator(c)).collect();
    for r in &rows {
        for (m, x) in basis.mean.iter_mut().zip(r) {
            *m += x / rows.len() as f64;
        }
    }
    let centred = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j] - basis.mean[j]);
    let cov = centred.transpose() * &centred / rows.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    for (slot, &k) in order.iter().take(3).enumerate() {
        let col = eig.eigenvectors.column(k);
        let pivot = (0..n).fold(0, |best, i| if col[i].abs() > col[best].abs() + 1e-12 { i } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        basis.axes[slot] = col.iter().map(|v| v * sign).collect();
    }
    basis.degenerate = n < 3;
    basis
}

/// Rasterized ownership of the object discs around cluster centres: for each
/// pixel the nearest covering cluster and the runner-up, so the maps seen by
/// one cluster can exclude its own disc.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    width: usize,
    height: usize,
    owners: Vec<[Option<u32>; 2]>,
    values: Vec<BaseFeatures>,
}

impl FeatureMaps {
    pub fn render(clusters: &[Cluster], base: &[BaseFeatures], width: usize, height: usize, diameter: f64) -> Self {
        let r = diameter / 2.0;
        let mut owners = vec![[None; 2]; width * height];
        let mut dist = vec![[f64::INFINITY; 2]; width * height];
        for (k, c) in clusters.iter().enumerate() {
            let x0 = (c.cx - r).floor().max(0.0) as usize;
            let y0 = (c.cy - r).floor().max(0.0) as usize;
            let x1 = ((c.cx + r).ceil().max(-1.0) as i64).min(width as i64 - 1);
            let y1 = ((c.cy + r).ceil().max(-1.0) as i64).min(height as i64 - 1);
            for y in y0 as i64..=y1 {
                for x in x0 as i64..=x1 {
                    let d = Point::new(x as f64, y as f64).dist(c.center());
                    if d > r {
                        continue;
                    }
                    let i = y as usize * width + x as usize;
                    if d < dist[i][0] {
                        dist[i] = [d, dist[i][0]];
                        owners[i] = [Some(k as u32), owners[i][0]];
                    } else if d < dist[i][1] {
                        dist[i][1] = d;
                        owners[i][1] = Some(k as u32);
                    }
                }
            }
        }
        FeatureMaps { width, height, owners, values: base.to_vec() }
    }

    /// Feature values at a pixel as rendered without cluster `exclude`.
    pub fn sample(&self, p: Point, exclude: usize) -> BaseFeatures {
        let (x, y) = (p.x.round(), p.y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return [0.0; BASE_FEATURES];
        }
        let [first, second] = self.owners[y as usize * self.width + x as usize];
        let owner = match first {
            Some(k) if k as usize == exclude => second,
            other => other,
        };
        owner.map_or([0.0; BASE_FEATURES], |k| self.values[k as usize])
    }

    /// One feature plane as a raster, rendered from all clusters.
    pub fn plane(&self, feature: usize) -> CorrelationMap {
        CorrelationMap::new(
            self.width,
            self.height,
            self.owners.iter().map(|o| o[0].map_or(0.0, |k| self.values[k as usize][feature])).collect(),
        )
    }
}

/// Sum of the neighbour features sampled at distance `length` along the
/// bisector of each empty sector.
pub fn occlusion_features(
    cluster_index: usize,
    center: Point,
    maps: &FeatureMaps,
    empty_bins: &[usize],
    bins: usize,
    length: f64,
) -> BaseFeatures {
    let mut out = [0.0; BASE_FEATURES];
    for &b in empty_bins {
        let a = (b as f64 + 0.5) * TAU / bins as f64;
        let p = center + Point::new(a.cos(), a.sin()) * length;
        for (o, v) in out.iter_mut().zip(maps.sample(p, cluster_index)) {
            *o += v;
        }
    }
    out
}

/// Everything the descriptors depend on besides the clusters themselves.
pub struct FeatureContext<'a> {
    pub graph: &'a PatchGraph,
    /// Correlation maps by patch id.
    pub responses: BTreeMap<usize, &'a CorrelationMap>,
    pub width: usize,
    pub height: usize,
    pub config: &'a FeatureConfig,
}

fn mean_correlation(cluster: &Cluster, ctx: &FeatureContext) -> f64 {
    let values: Vec<f64> = cluster
        .members
        .iter()
        .filter_map(|m| {
            let rho = ctx.responses.get(&m.patch)?;
            let (x, y) = (m.x.round() as usize, m.y.round() as usize);
            (x < rho.width() && y < rho.height()).then(|| rho.get(x, y).clamp(0.0, 1.0))
        })
        .collect();
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// The 18-dimensional descriptors of all clusters, unnormalized, along with
/// the composition basis used.
pub fn build_feature_vectors(
    clusters: &[Cluster],
    ctx: &FeatureContext,
) -> Result<(Vec<FeatureVector>, CompositionBasis)> {
    use rayon::prelude::*;
    let bins = ctx.config.bins;
    let basis = composition_basis(clusters, &ctx.graph.vertices);
    let partial: Vec<(BaseFeatures, Vec<usize>)> = clusters
        .par_iter()
        .map(|c| {
            let (occupied, empty) = angular_occupancy(c, bins)?;
            let pca = basis.project(c);
            let base = [
                c.members.len() as f64,
                mean_correlation(c, ctx),
                mean_deformation(c, ctx.graph),
                centroid_offset(c)?,
                border_proximity(c.center(), ctx.width, ctx.height, ctx.config.object_size / 2.0),
                occupied as f64,
                pca[0],
                pca[1],
                pca[2],
            ];
            Ok((base, empty))
        })
        .collect::<Result<_>>()?;
    let base: Vec<BaseFeatures> = partial.iter().map(|(b, _)| *b).collect();
    let maps = FeatureMaps::render(clusters, &base, ctx.width, ctx.height, ctx.config.object_size);
    let vectors = clusters
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let occl = occlusion_features(k, c.center(), &maps, &partial[k].1, bins, ctx.config.object_size);
            let mut f = [0.0; FEATURE_DIM];
            f[..BASE_FEATURES].copy_from_slice(&base[k]);
            f[BASE_FEATURES..].copy_from_slice(&occl);
            f
        })
        .collect();
    Ok((vectors, basis))
}

/// Per-feature mean and standard deviation over a set of vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(vectors: &[FeatureVector]) -> Standardizer {
        let n = vectors.len().max(1) as f64;
        let mut mean = vec![0.0; FEATURE_DIM];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        let mut std = vec![0.0; FEATURE_DIM];
        for v in vectors {
            for ((s, x), m) in std.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m) / n;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
        Standardizer { mean, std }
    }

    /// Z-scores; constant features map to 0.
    pub fn apply(&self, v: &FeatureVector) -> FeatureVector {
        let mut out = [0.0; FEATURE_DIM];
        for (k, o) in out.iter_mut().enumerate() {
            if self.std[k] > 1e-12 {
                *o = (v[k] - self.mean[k]) / self.std[k];
            }
        }
        out
    }
}

/// Z-score all vectors, then zero the listed feature indices.
pub fn normalize(vectors: &[FeatureVector], disabled: &[usize]) -> Vec<FeatureVector> {
    let s = Standardizer::fit(vectors);
    vectors
        .iter()
        .map(|v| {
            let mut z = s.apply(v);
            for &k in disabled {
                if k < FEATURE_DIM {
                    z[k] = 0.0;
                }
            }
            z
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::Member;
    use crate::structure::PatchPairEdge;

    fn cluster(id: usize, c: (f64, f64), hits: &[(usize, f64, f64)]) -> Cluster {
        Cluster { id, cx: c.0, cy: c.1, members: hits.iter().map(|&(patch, x, y)| Member { patch, x, y }).collect() }
    }

    #[test]
    fn deformation_cases() {
        let g =
            PatchGraph::new(vec![0, 1], [PatchPairEdge { i: 0, j: 1, offset: Point::new(10.0, 0.0), peak_ratio: 3.0 }]);
        let exact = cluster(0, (0.0, 0.0), &[(0, 0.0, 0.0), (1, 10.0, 0.0)]);
        assert_eq!(mean_deformation(&exact, &g), 0.0);
        let off = cluster(0, (0.0, 0.0), &[(0, 0.0, 0.0), (1, 10.0, 3.0)]);
        assert!((mean_deformation(&off, &g) - 3.0).abs() < 1e-12);
        let unrelated = cluster(0, (0.0, 0.0), &[(0, 0.0, 0.0), (5, 1.0, 1.0)]);
        assert_eq!(mean_deformation(&unrelated, &g), 0.0);
    }

    #[test]
    fn centroid_cases() {
        let ring: Vec<(usize, f64, f64)> = (0..8)
            .map(|k| (k, 50.0 + 10.0 * (k as f64 * TAU / 8.0).cos(), 50.0 + 10.0 * (k as f64 * TAU / 8.0).sin()))
            .collect();
        assert!(centroid_offset(&cluster(0, (50.0, 50.0), &ring)).unwrap() < 1e-9);
        let side = cluster(0, (0.0, 0.0), &[(0, 6.0, 1.0), (1, 6.0, -1.0)]);
        assert!((centroid_offset(&side).unwrap() - 6.0).abs() < 1e-12);
        assert!(matches!(centroid_offset(&cluster(0, (0.0, 0.0), &[])), Err(Error::EmptyCluster)));
    }

    #[test]
    fn occupancy_cases() {
        let ring: Vec<(usize, f64, f64)> = (0..8)
            .map(|k| {
                let a = (k as f64 + 0.5) * TAU / 8.0;
                (k, 10.0 * a.cos(), 10.0 * a.sin())
            })
            .collect();
        assert_eq!(angular_occupancy(&cluster(0, (0.0, 0.0), &ring), 8).unwrap(), (8, vec![]));
        let quadrant = cluster(0, (0.0, 0.0), &[(0, 5.0, 1.0), (1, 1.0, 5.0), (2, 3.0, 3.5)]);
        assert_eq!(angular_occupancy(&quadrant, 8).unwrap(), (2, vec![2, 3, 4, 5, 6, 7]));
        let centre = cluster(0, (3.0, 3.0), &[(0, 3.0, 3.0)]);
        assert_eq!(angular_occupancy(&centre, 8).unwrap().0, 1);
        assert_eq!(angular_bin(Point::new(3.0, 3.0), Point::new(3.0, 3.0), 8), 0);
    }

    #[test]
    fn border_cases() {
        assert_eq!(border_proximity(Point::new(50.0, 50.0), 101, 101, 13.0), 0.0);
        assert_eq!(border_proximity(Point::new(0.0, 50.0), 101, 101, 13.0), 13.0);
        assert_eq!(border_proximity(Point::new(50.0, 5.0), 101, 101, 13.0), 8.0);
        assert_eq!(border_proximity(Point::new(-4.0, 50.0), 101, 101, 13.0), 13.0);
    }

    #[test]
    fn pca_separates_two_populations() {
        let mut clusters = Vec::new();
        for k in 0..10 {
            let patches: &[usize] = if k % 2 == 0 { &[0, 1, 2] } else { &[3, 4, 5] };
            let hits: Vec<(usize, f64, f64)> = patches.iter().map(|&p| (p, 0.0, 0.0)).collect();
            clusters.push(cluster(k, (0.0, 0.0), &hits));
        }
        let basis = composition_basis(&clusters, &[0, 1, 2, 3, 4, 5]);
        assert!(!basis.degenerate);
        let a: Vec<f64> = clusters.iter().map(|c| basis.project(c)[0]).collect();
        let (even, odd): (Vec<_>, Vec<_>) = a.iter().enumerate().partition(|(k, _)| k % 2 == 0);
        let emax = even.iter().map(|(_, v)| **v).fold(f64::MIN, f64::max);
        let emin = even.iter().map(|(_, v)| **v).fold(f64::MAX, f64::min);
        let omax = odd.iter().map(|(_, v)| **v).fold(f64::MIN, f64::max);
        let omin = odd.iter().map(|(_, v)| **v).fold(f64::MAX, f64::min);
        assert!(emin > omax + 1.0 || omin > emax + 1.0);
        for i in 0..3 {
            let ni: f64 = basis.axes[i].iter().map(|v| v * v).sum();
            assert!((ni - 1.0).abs() < 1e-9);
            for j in i + 1..3 {
                let d: f64 = basis.axes[i].iter().zip(&basis.axes[j]).map(|(a, b)| a * b).sum();
                assert!(d.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_with_identical_compositions_projects_equally() {
        let clusters: Vec<Cluster> = (0..4).map(|k| cluster(k, (0.0, 0.0), &[(0, 0.0, 0.0), (1, 0.0, 0.0)])).collect();
        let basis = composition_basis(&clusters, &[0, 1, 2]);
        let p: Vec<[f64; 3]> = clusters.iter().map(|c| basis.project(c)).collect();
        assert!(p.iter().all(|v| v == &p[0]));
    }

    #[test]
    fn too_few_clusters_flags_basis() {
        let clusters = vec![cluster(0, (0.0, 0.0), &[(0, 0.0, 0.0)])];
        let basis = composition_basis(&clusters, &[0, 1, 2]);
        assert!(basis.degenerate);
        assert_eq!(basis.project(&clusters[0]), [0.0; 3]);
    }

    #[test]
    fn occlusion_sampling() {
        let a = cluster(0, (50.0, 50.0), &[(0, 45.0, 50.0)]);
        let b = cluster(1, (77.0, 50.0), &[(0, 77.0, 50.0)]);
        let mut fb = [0.0; BASE_FEATURES];
        fb.iter_mut().enumerate().for_each(|(k, v)| *v = k as f64 + 1.0);
        let maps = FeatureMaps::render(&[a.clone(), b], &[[9.0; BASE_FEATURES], fb], 120, 100, 27.0);
        // Sector 0 points along +x, 27 px out: straight at b's centre.
        let toward = occlusion_features(0, a.center(), &maps, &[0], 8, 27.0);
        let sector0 = Point::new(50.0 + 27.0 * (TAU / 16.0).cos(), 50.0 + 27.0 * (TAU / 16.0).sin());
        assert!(sector0.dist(Point::new(77.0, 50.0)) < 13.5);
        assert_eq!(toward, fb);
        assert_eq!(occlusion_features(0, a.center(), &maps, &[4], 8, 27.0), [0.0; BASE_FEATURES]);
        assert_eq!(occlusion_features(0, a.center(), &maps, &[], 8, 27.0), [0.0; BASE_FEATURES]);
        // A cluster never samples its own disc.
        assert_eq!(maps.sample(Point::new(50.0, 50.0), 0), [0.0; BASE_FEATURES]);
        assert_eq!(maps.sample(Point::new(50.0, 50.0), 1), [9.0; BASE_FEATURES]);
    }

    #[test]
    fn standardizer_zero_mean_unit_variance() {
        let vs: Vec<FeatureVector> = (0..5)
            .map(|k| {
                let mut v = [1.0; FEATURE_DIM];
                v[0] = k as f64;
                v
            })
            .collect();
        let z = normalize(&vs, &[2]);
        let m: f64 = z.iter().map(|v| v[0]).sum::<f64>() / 5.0;
        let var: f64 = z.iter().map(|v| v[0] * v[0]).sum::<f64>() / 5.0;
        assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert!(z.iter().all(|v| v[1] == 0.0 && v[2] == 0.0));
    }
}
