//! Spatial structure of the part model from occurrence-map correlations:
//! patch pairing, straight-edge correction, outlier pruning and the planar
//! least-squares embedding of the pairwise offsets.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    auto_correlation, cross_correlate_sparse, fast_len, non_max_suppress, BinaryMap, CorrelationMap, Fft2, LagMap,
    Point,
};
use crate::mining::RecurrentPatch;

/// Variance of a unit pixel footprint, added to raster moments.
const PIXEL_VARIANCE: f64 = 1.0 / 12.0;
/// Lag-map cells below this fraction of the zero-lag value are not part of
/// the central lobe.
const LOBE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureConfig {
    /// Minimum ratio between the main and the runner-up correlation peak.
    pub ratio_threshold: f64,
    /// Largest offset searched between paired patches, per axis.
    pub max_lag: usize,
    /// Window around the main peak ignored when looking for the runner-up.
    pub peak_window: usize,
    /// Gaussian smoothing of coincidence counts before the peak scan
    /// (0 scans the raw counts).
    pub pair_smoothing: f64,
    /// Patches whose correlation structure is more eccentric than this get
    /// their occurrence map re-derived.
    pub eccentricity_gate: f64,
    /// Correlation level below which a response is ignored by the
    /// eccentricity analysis.
    pub edge_floor: f64,
    /// Occurrence threshold tolerance (same role as in mining).
    pub epsilon: f64,
    pub patch_side: usize,
}

impl Default for StructureConfig {
    fn default() -> Self {
        StructureConfig {
            ratio_threshold: 2.0,
            max_lag: 54,
            peak_window: 9,
            pair_smoothing: 0.0,
            eccentricity_gate: 2.0,
            edge_floor: 0.9,
            epsilon: 1.0 / 20.0,
            patch_side: 9,
        }
    }
}

impl StructureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_threshold >= 1.0) {
            return Err(Error::InvalidConfig("ratio_threshold must be >= 1".into()));
        }
        if self.peak_window < 1 || self.peak_window.is_multiple_of(2) || self.patch_side.is_multiple_of(2) {
            return Err(Error::InvalidConfig("peak_window and patch_side must be odd".into()));
        }
        if self.max_lag == 0 || self.pair_smoothing < 0.0 {
            return Err(Error::InvalidConfig("max_lag must be positive, pair_smoothing non-negative".into()));
        }
        Ok(())
    }
}

/// Two patches whose occurrences co-occur at a characteristic offset:
/// occurrences of `j` sit at `offset` relative to occurrences of `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchPairEdge {
    pub i: usize,
    pub j: usize,
    pub offset: Point,
    pub peak_ratio: f64,
}

impl PatchPairEdge {
    pub fn reversed(&self) -> PatchPairEdge {
        PatchPairEdge { i: self.j, j: self.i, offset: self.offset * -1.0, peak_ratio: self.peak_ratio }
    }

    /// Offset from patch `from` to the other endpoint.
    pub fn offset_from(&self, from: usize) -> Point {
        if from == self.i {
            self.offset
        } else {
            self.offset * -1.0
        }
    }
}

fn gaussian_smooth_lag(m: &LagMap, sigma: f64) -> LagMap {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let horiz = LagMap::from_fn(m.half_width(), m.half_height(), |dx, dy| {
        (-r..=r).map(|t| k[(t + r) as usize] * m.get(dx + t, dy)).sum::<f64>() / norm
    });
    LagMap::from_fn(m.half_width(), m.half_height(), |dx, dy| {
        (-r..=r).map(|t| k[(t + r) as usize] * horiz.get(dx, dy + t)).sum::<f64>() / norm
    })
}

/// Argmax of a lag map (first in row-major lag order on ties) and the ratio
/// between it and the best strict 8-neighbourhood local maximum outside the
/// `window` around it. `None` when the map has no positive value.
pub fn peak_ratio(tau: &LagMap, window: usize) -> Option<((i64, i64), f64)> {
    let mut best: Option<(i64, i64, f64)> = None;
    for (dx, dy, v) in tau.iter() {
        if best.is_none_or(|b| v > b.2) {
            best = Some((dx, dy, v));
        }
    }
    let (bx, by, bv) = best?;
    if bv <= 0.0 {
        return None;
    }
    let r = (window / 2) as i64;
    let mut second = 0.0f64;
    for (dx, dy, v) in tau.iter() {
        if v <= 0.0 || ((dx - bx).abs() <= r && (dy - by).abs() <= r) {
            continue;
        }
        let strict = (-1..=1)
            .flat_map(|oy| (-1..=1).map(move |ox| (ox, oy)))
            .filter(|&(ox, oy)| (ox, oy) != (0, 0))
            .all(|(ox, oy)| tau.get(dx + ox, dy + oy) < v);
        if strict {
            second = second.max(v);
        }
    }
    let ratio = if second > 0.0 { bv / second } else { f64::INFINITY };
    Some(((bx, by), ratio))
}

/// Decide whether two occurrence maps are structurally paired. Returns the
/// edge `i -> j` when the main coincidence peak dominates the runner-up by
/// more than the configured ratio.
pub fn detect_pair(
    i: usize,
    j: usize,
    z_i: &BinaryMap,
    z_j: &BinaryMap,
    cfg: &StructureConfig,
) -> Result<Option<PatchPairEdge>> {
    let tau = cross_correlate_sparse(z_i, z_j, cfg.max_lag)?;
    if z_i.count() == 0 || z_j.count() == 0 {
        return Ok(None);
    }
    let tau = if cfg.pair_smoothing > 0.0 { gaussian_smooth_lag(&tau, cfg.pair_smoothing) } else { tau };
    Ok(peak_ratio(&tau, cfg.peak_window).and_then(|((dx, dy), ratio)| {
        (ratio > cfg.ratio_threshold).then_some(PatchPairEdge {
            i,
            j,
            offset: Point::new(dx as f64, dy as f64),
            peak_ratio: ratio,
        })
    }))
}

/// Gaussian approximation of a lag map's central lobe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    /// `[[xx, xy], [xy, yy]]` in squared pixels.
    pub covariance: [[f64; 2]; 2],
    pub eccentricity: f64,
}

impl GaussianFit {
    /// Eigenvalues `(max, min)` with the unit eigenvector of the larger one.
    pub fn principal_axes(&self) -> (f64, f64, Point) {
        let [[a, b], [_, d]] = self.covariance;
        let mean = 0.5 * (a + d);
        let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        let (l1, l2) = (mean + disc, mean - disc);
        let v = if b.abs() > 1e-15 {
            Point::new(l1 - d, b)
        } else if a >= d {
            Point::new(1.0, 0.0)
        } else {
            Point::new(0.0, 1.0)
        };
        let n = v.norm();
        (l1, l2, v * (1.0 / n))
    }
}

/// Second moments of the non-negative central lobe of `r` about zero lag.
///
/// The lobe is the set of lags reachable from the origin along 8-connected
/// paths on which `r` never increases and stays above a small fraction of
/// its zero-lag value, so side lobes from neighbouring repetitions are left
/// out. Negative values count as zero. The
/// unit-pixel variance is added on the diagonal, so an impulse yields an
/// isotropic fit of eccentricity 1.
pub fn fit_gaussian(r: &LagMap) -> Result<GaussianFit> {
    let r0 = r.get(0, 0).max(0.0);
    let peak = r.data().iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) || !(r0 > 0.0) {
        return Err(Error::ZeroMass);
    }
    let floor = LOBE_FLOOR * r0;
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([(0i64, 0i64)]);
    seen.insert((0i64, 0i64));
    let (mut m, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0);
    while let Some((dx, dy)) = queue.pop_front() {
        let v = r.get(dx, dy).max(0.0);
        m += v;
        sxx += v * (dx * dx) as f64;
        sxy += v * (dx * dy) as f64;
        syy += v * (dy * dy) as f64;
        for oy in -1..=1 {
            for ox in -1..=1 {
                let n = (dx + ox, dy + oy);
                if !r.contains(n.0, n.1) || seen.contains(&n) {
                    continue;
                }
                let rn = r.get(n.0, n.1);
                if rn > floor && rn <= r.get(dx, dy) {
                    seen.insert(n);
                    queue.push_back(n);
                }
            }
        }
    }
    let cov = [[sxx / m + PIXEL_VARIANCE, sxy / m], [sxy / m, syy / m + PIXEL_VARIANCE]];
    let mut fit = GaussianFit { covariance: cov, eccentricity: 1.0 };
    let (l1, l2, _) = fit.principal_axes();
    fit.eccentricity = (l1 / l2.max(f64::MIN_POSITIVE)).sqrt().max(1.0);
    Ok(fit)
}

/// Eccentricity analysis of a correlation map: the auto-correlation of its
/// strong responses, approximated by a Gaussian.
pub fn response_shape(rho: &CorrelationMap, cfg: &StructureConfig) -> Result<GaussianFit> {
    let strong = CorrelationMap::new(
        rho.width(),
        rho.height(),
        rho.data().iter().map(|v| (v - cfg.edge_floor).max(0.0)).collect(),
    );
    let r = auto_correlation(&strong).map_err(|e| match e {
        Error::ConstantMap => Error::ZeroMass,
        other => other,
    })?;
    fit_gaussian(&r)
}

/// Convolve `m` with the normalized Gaussian of the given covariance.
fn gaussian_filter(m: &CorrelationMap, cov: [[f64; 2]; 2]) -> CorrelationMap {
    let [[a, b], [_, d]] = cov;
    let det = a * d - b * b;
    let (inv_a, inv_b, inv_d) = (d / det, -b / det, a / det);
    let rx = (3.0 * a.sqrt()).ceil() as i64;
    let ry = (3.0 * d.sqrt()).ceil() as i64;
    let (w, h) = (m.width(), m.height());
    let fft = Fft2::new(fast_len(w + 2 * rx as usize), fast_len(h + 2 * ry as usize));
    let (fw, fh) = (fft.width() as i64, fft.height() as i64);
    let mut kernel = vec![Complex::new(0.0, 0.0); (fw * fh) as usize];
    let mut total = 0.0;
    for ky in -ry..=ry {
        for kx in -rx..=rx {
            let (x, y) = (kx as f64, ky as f64);
            let v = (-0.5 * (inv_a * x * x + 2.0 * inv_b * x * y + inv_d * y * y)).exp();
            let idx = (ky.rem_euclid(fh) * fw + kx.rem_euclid(fw)) as usize;
            kernel[idx].re = v;
            total += v;
        }
    }
    let mut img = fft.load_real(w, h, |x, y| m.get(x, y));
    fft.forward(&mut img);
    fft.forward(&mut kernel);
    for (p, k) in img.iter_mut().zip(&kernel) {
        *p *= k / total;
    }
    fft.inverse(&mut img);
    CorrelationMap::new(
        w,
        h,
        (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| img[y * fw as usize + x].re).collect(),
    )
}

/// Re-derive the occurrence map of a patch whose correlation map shows
/// linear features instead of isolated peaks.
///
/// The map is filtered with the convolution square root of the fitted
/// Gaussian (half its covariance) and local maxima within `1 - epsilon` of
/// the filtered maximum are kept.
pub fn correct_edge_patch(rho: &CorrelationMap, cfg: &StructureConfig) -> Result<BinaryMap> {
    let fit = response_shape(rho, cfg)?;
    let half = [
        [fit.covariance[0][0] / 2.0, fit.covariance[0][1] / 2.0],
        [fit.covariance[1][0] / 2.0, fit.covariance[1][1] / 2.0],
    ];
    // The undefined border band would bleed into the interior.
    let cleaned = CorrelationMap::new(rho.width(), rho.height(), rho.data().iter().map(|v| v.max(0.0)).collect());
    let filtered = gaussian_filter(&cleaned, half);
    let threshold = (1.0 - cfg.epsilon) * filtered.max();
    Ok(non_max_suppress(&filtered, threshold, cfg.patch_side.max(3)))
}

/// Patches as vertices, strongly paired patches as edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGraph {
    pub vertices: Vec<usize>,
    /// Stored with `i < j`.
    pub edges: Vec<PatchPairEdge>,
}

impl PatchGraph {
    /// Builds the graph, normalizing every edge to `i < j` and dropping
    /// self-edges and duplicates.
    pub fn new(mut vertices: Vec<usize>, edges: impl IntoIterator<Item = PatchPairEdge>) -> Self {
        vertices.sort_unstable();
        vertices.dedup();
        let mut by_pair: BTreeMap<(usize, usize), PatchPairEdge> = BTreeMap::new();
        for e in edges {
            if e.i == e.j {
                continue;
            }
            let e = if e.i < e.j { e } else { e.reversed() };
            by_pair.entry((e.i, e.j)).or_insert(e);
        }
        PatchGraph { vertices, edges: by_pair.into_values().collect() }
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|e| e.i == v || e.j == v).count()
    }

    pub fn edge(&self, a: usize, b: usize) -> Option<&PatchPairEdge> {
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        self.edges.iter().find(|e| e.i == i && e.j == j)
    }

    /// Vertex sets of the connected components, each sorted, ordered by
    /// their smallest vertex.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut adj: BTreeMap<usize, Vec<usize>> = self.vertices.iter().map(|v| (*v, Vec::new())).collect();
        for e in &self.edges {
            adj.entry(e.i).or_default().push(e.j);
            adj.entry(e.j).or_default().push(e.i);
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &start in adj.keys() {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &n in &adj[&v] {
                    if seen.insert(n) {
                        comp.push(n);
                        queue.push_back(n);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Pair every two patches; `None` entries are skipped.
pub fn build_graph(patches: &[RecurrentPatch], cfg: &StructureConfig) -> Result<PatchGraph> {
    use rayon::prelude::*;
    let pairs: Vec<(usize, usize)> =
        (0..patches.len()).flat_map(|a| (a + 1..patches.len()).map(move |b| (a, b))).collect();
    let edges: Vec<Option<PatchPairEdge>> = pairs
        .par_iter()
        .map(|&(a, b)| detect_pair(patches[a].id, patches[b].id, &patches[a].occurrence, &patches[b].occurrence, cfg))
        .collect::<Result<_>>()?;
    Ok(PatchGraph::new(patches.iter().map(|p| p.id).collect(), edges.into_iter().flatten()))
}

/// Drop vertices with fewer than `ceil(n / 10)` incident edges, in a single
/// pass, together with their edges.
pub fn prune_graph(g: &PatchGraph, n: usize) -> Result<PatchGraph> {
    let min_degree = n.div_ceil(10);
    let keep: BTreeSet<usize> = g.vertices.iter().copied().filter(|v| g.degree(*v) >= min_degree).collect();
    if keep.is_empty() {
        return Err(Error::EmptyGraph);
    }
    Ok(PatchGraph {
        vertices: keep.iter().copied().collect(),
        edges: g.edges.iter().filter(|e| keep.contains(&e.i) && keep.contains(&e.j)).copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedVertex {
    pub id: usize,
    pub coord: Point,
    pub component: usize,
}

/// Planar coordinates for the graph vertices, zero-mean per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedModel {
    pub vertices: Vec<EmbeddedVertex>,
    pub n_components: usize,
}

impl EmbeddedModel {
    pub fn vertex(&self, id: usize) -> Option<&EmbeddedVertex> {
        self.vertices.iter().find(|v| v.id == id)
    }

    pub fn coord(&self, id: usize) -> Option<Point> {
        self.vertex(id).map(|v| v.coord)
    }
}

/// Least-squares coordinates `x` minimizing `sum ||x_j - x_i - o_ij||^2` over
/// the edges, solved per connected component with a zero-mean gauge.
pub fn embed(g: &PatchGraph) -> Result<EmbeddedModel> {
    if g.vertices.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let mut vertices = Vec::with_capacity(g.vertices.len());
    let components = g.components();
    for (c, comp) in components.iter().enumerate() {
        let k = comp.len();
        let index: BTreeMap<usize, usize> = comp.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        // Laplacian plus the rank-one gauge term 11^T / k.
        let mut lap = DMatrix::from_element(k, k, 1.0 / k as f64);
        let mut bx = DVector::zeros(k);
        let mut by = DVector::zeros(k);
        for e in g.edges.iter().filter(|e| index.contains_key(&e.i)) {
            let (a, b) = (index[&e.i], index[&e.j]);
            lap[(a, a)] += 1.0;
            lap[(b, b)] += 1.0;
            lap[(a, b)] -= 1.0;
            lap[(b, a)] -= 1.0;
            bx[b] += e.offset.x;
            bx[a] -= e.offset.x;
            by[b] += e.offset.y;
            by[a] -= e.offset.y;
        }
        let chol = lap.cholesky().ok_or_else(|| Error::InvalidConfig("singular embedding system".into()))?;
        let xs = chol.solve(&bx);
        let ys = chol.solve(&by);
        for (i, v) in comp.iter().enumerate() {
            vertices.push(EmbeddedVertex { id: *v, coord: Point::new(xs[i], ys[i]), component: c });
        }
    }
    vertices.sort_by_key(|v| v.id);
    Ok(EmbeddedModel { vertices, n_components: components.len() })
}

/// The embedding objective `sum ||x_j - x_i - o_ij||^2`.
pub fn embedding_objective(g: &PatchGraph, model: &EmbeddedModel) -> f64 {
    g.edges
        .iter()
        .map(|e| {
            let d = model.coord(e.j).unwrap_or_default() - model.coord(e.i).unwrap_or_default() - e.offset;
            d.x * d.x + d.y * d.y
        })
        .sum()
}

/// Largest absolute component of the normal-equation residual `L x - b`.
pub fn normal_equation_residual(g: &PatchGraph, model: &EmbeddedModel) -> f64 {
    let mut grad: BTreeMap<usize, Point> = g.vertices.iter().map(|v| (*v, Point::default())).collect();
    for e in &g.edges {
        let r = model.coord(e.j).unwrap_or_default() - model.coord(e.i).unwrap_or_default() - e.offset;
        *grad.get_mut(&e.j).unwrap() = grad[&e.j] + r;
        *grad.get_mut(&e.i).unwrap() = grad[&e.i] - r;
    }
    grad.values().map(|p| p.x.abs().max(p.y.abs())).fold(0.0, f64::max)
}

/// Serializable record of one model part, for caching a recovered model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub patch: usize,
    pub side: usize,
    pub pixels: Vec<f64>,
    pub x: f64,
    pub y: f64,
    pub component: usize,
}

pub fn model_records(model: &EmbeddedModel, patches: &[RecurrentPatch]) -> Vec<ModelRecord> {
    model
        .vertices
        .iter()
        .filter_map(|v| {
            let p = patches.iter().find(|p| p.id == v.id)?;
            Some(ModelRecord {
                patch: v.id,
                side: p.patch.side(),
                pixels: p.patch.data().to_vec(),
                x: v.coord.x,
                y: v.coord.y,
                component: v.component,
            })
        })
        .collect()
}

impl EmbeddedModel {
    pub fn from_records(records: &[ModelRecord]) -> EmbeddedModel {
        let mut vertices: Vec<EmbeddedVertex> = records
            .iter()
            .map(|r| EmbeddedVertex { id: r.patch, coord: Point::new(r.x, r.y), component: r.component })
            .collect();
        vertices.sort_by_key(|v| v.id);
        let n_components = vertices.iter().map(|v| v.component + 1).max().unwrap_or(0);
        EmbeddedModel { vertices, n_components }
    }
}
