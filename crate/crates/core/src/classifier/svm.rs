use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear decision rule `sign(<f, w> - b)`; a score equal to `b` is negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separator {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Separator {
    pub fn score(&self, f: &[f64]) -> f64 {
        self.w.iter().zip(f).map(|(w, x)| w * x).sum()
    }

    pub fn decide(&self, f: &[f64]) -> bool {
        self.score(f) - self.b > 0.0
    }

    /// Same decisions with `||w|| = 1`.
    pub fn normalized(&self) -> Separator {
        let n = self.w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            Separator { w: self.w.iter().map(|v| v / n).collect(), b: self.b / n }
        } else {
            self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    /// Hinge-loss weight.
    pub c: f64,
    /// Largest tolerated violation of the optimality conditions.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { c: 10.0, tolerance: 1e-5, max_iterations: 10_000 }
    }
}

/// `1/2 ||w||^2 + C * sum max(0, 1 - y (<w, f> - b))`.
pub fn primal_objective(sep: &Separator, points: &[Vec<f64>], labels: &[bool], c: f64) -> f64 {
    0.5 * sep.w.iter().map(|v| v * v).sum::<f64>() + c * hinge_loss(sep, points, labels)
}

pub fn hinge_loss(sep: &Separator, points: &[Vec<f64>], labels: &[bool]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(f, &l)| {
            let y = if l { 1.0 } else { -1.0 };
            (1.0 - y * (sep.score(f) - sep.b)).max(0.0)
        })
        .sum()
}

/// Soft-margin linear SVM by sequential minimal optimization of the dual,
/// choosing the maximal-violating pair at every step. Deterministic.
pub fn train_soft_svm(points: &[Vec<f64>], labels: &[bool], cfg: &SvmConfig) -> Result<Separator> {
    assert_eq!(points.len(), labels.len());
    if !labels.iter().any(|&l| l) || !labels.iter().any(|&l| !l) {
        return Err(Error::SingleClass);
    }
    let n = points.len();
    let dim = points[0].len();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let k: Vec<Vec<f64>> =
        points.iter().map(|a| points.iter().map(|b| a.iter().zip(b).map(|(x, z)| x * z).sum()).collect()).collect();
    let c = cfg.c;
    let mut alpha = vec![0.0; n];
    // Gradient of the dual objective 1/2 a'Qa - 1'a.
    let mut grad = vec![-1.0; n];
    let in_up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let in_low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);
    for _ in 0..cfg.max_iterations {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        for t in 0..n {
            if in_up(alpha[t], y[t]) && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            if in_low(alpha[t], y[t]) && -y[t] * grad[t] < gmin {
                gmin = -y[t] * grad[t];
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < cfg.tolerance {
            break;
        }
        let eta = (k[i][i] + k[j][j] - 2.0 * k[i][j]).max(1e-12);
        // Move along y_i e_i - y_j e_j, keeping sum a y fixed.
        let mut step = (gmax - gmin) / eta;
        let bound = |a: f64, y: f64, dir: f64| if y * dir > 0.0 { c - a } else { a };
        step = step.min(bound(alpha[i], y[i], 1.0)).min(bound(alpha[j], y[j], -1.0));
        let di = y[i] * step;
        let dj = -y[j] * step;
        alpha[i] += di;
        alpha[j] += dj;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k[t][i] * di + y[j] * k[t][j] * dj);
        }
    }
    let mut w = vec![0.0; dim];
    for t in 0..n {
        if alpha[t] > 0.0 {
            for (wd, x) in w.iter_mut().zip(&points[t]) {
                *wd += alpha[t] * y[t] * x;
            }
        }
    }
    // Bias from free vectors, else the midpoint of the feasible interval.
    let scores: Vec<f64> = points.iter().map(|f| w.iter().zip(f).map(|(a, b)| a * b).sum()).collect();
    let eps = 1e-9 * c;
    let free: Vec<f64> = (0..n).filter(|&t| alpha[t] > eps && alpha[t] < c - eps).map(|t| scores[t] - y[t]).collect();
    let b = if free.is_empty() {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for t in 0..n {
            let v = scores[t] - y[t];
            // y (s - b) >= 1 at alpha = 0; <= 1 at alpha = C.
            let upper_side = (alpha[t] <= eps) == (y[t] > 0.0);
            if upper_side {
                hi = hi.min(v);
            } else {
                lo = lo.max(v);
            }
        }
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo,
            (false, true) => hi,
            _ => 0.0,
        }
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    if w.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateSeparator);
    }
    Ok(Separator { w, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pad(x: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; 18];
        v[..x.len()].copy_from_slice(x);
        v
    }

    #[test]
    fn two_point_boundary_at_midpoint() {
        let pts = vec![pad(&[0.0, 0.0]), pad(&[2.0, 0.0])];
        let s = train_soft_svm(&pts, &[false, true], &SvmConfig::default()).unwrap();
        assert!((s.b / s.w[0] - 1.0).abs() < 1e-6);
        assert!(s.w[1].abs() < 1e-12);
        assert!(!s.decide(&pts[0]) && s.decide(&pts[1]));
    }

    #[test]
    fn single_class_rejected() {
        let pts = vec![pad(&[0.0]), pad(&[1.0])];
        assert!(matches!(train_soft_svm(&pts, &[true, true], &SvmConfig::default()), Err(Error::SingleClass)));
    }

    #[test]
    fn label_flip_flips_decisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<bool> = pts.iter().map(|p| p[0] + 0.3 * p[1] > 0.1).collect();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let cfg = SvmConfig { max_iterations: 100_000, ..Default::default() };
        let a = train_soft_svm(&pts, &labels, &cfg).unwrap();
        let b = train_soft_svm(&pts, &flipped, &cfg).unwrap();
        for p in &pts {
            let (sa, sb) = (a.score(p) - a.b, b.score(p) - b.b);
            if sa.abs() > 1e-6 {
                assert_eq!(sa > 0.0, sb < 0.0);
            }
        }
    }

    #[test]
    fn perturbations_never_improve_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        // Overlapping classes so the hinge term is active.
        let labels: Vec<bool> = pts.iter().map(|p| p[0] + rng.random_range(-0.8..0.8) > 0.0).collect();
        let cfg = SvmConfig { c: 1.0, max_iterations: 200_000, tolerance: 1e-9 };
        let s = train_soft_svm(&pts, &labels, &cfg).unwrap();
        let best = primal_objective(&s, &pts, &labels, cfg.c);
        for _ in 0..100 {
            let mut p = s.clone();
            p.w.iter_mut().for_each(|w| *w += rng.random_range(-1e-2..1e-2));
            p.b += rng.random_range(-1e-2..1e-2);
            assert!(primal_objective(&p, &pts, &labels, cfg.c) >= best - 1e-6);
        }
    }
}
