use rustfft::num_complex::Complex;

use super::fft::{fast_len, Fft2};
use super::{BinaryMap, CorrelationMap, LagMap};
use crate::error::{Error, Result};

/// Full linear cross-correlation `out(d) = sum_y a(y) b(y + d)` over all lags
/// `|dx| < w`, `|dy| < h`, computed with a zero-padded FFT.
fn full_correlation(w: usize, h: usize, a: impl Fn(usize, usize) -> f64, b: impl Fn(usize, usize) -> f64) -> LagMap {
    let fft = Fft2::new(fast_len(2 * w - 1), fast_len(2 * h - 1));
    let mut fa = fft.load_real(w, h, a);
    let mut fb = fft.load_real(w, h, b);
    fft.forward(&mut fa);
    fft.forward(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x = x.conj() * y;
    }
    fft.inverse(&mut fa);
    let (fw, fh) = (fft.width() as i64, fft.height() as i64);
    let at = |buf: &[Complex<f64>], dx: i64, dy: i64| {
        let x = dx.rem_euclid(fw) as usize;
        let y = dy.rem_euclid(fh) as usize;
        buf[y * fw as usize + x].re
    };
    LagMap::from_fn(w - 1, h - 1, |dx, dy| at(&fa, dx, dy))
}

/// Auto-correlation `R(d) = sum_y m(y) m(y + d)` of a map, centred at zero lag.
///
/// The result is symmetrized so that `R(-d) == R(d)` holds bit-for-bit.
pub fn auto_correlation(m: &CorrelationMap) -> Result<LagMap> {
    let first = m.data()[0];
    if m.data().iter().all(|v| *v == first) {
        return Err(Error::ConstantMap);
    }
    let raw = full_correlation(m.width(), m.height(), |x, y| m.get(x, y), |x, y| m.get(x, y));
    Ok(LagMap::from_fn(raw.half_width(), raw.half_height(), |dx, dy| 0.5 * (raw.get(dx, dy) + raw.get(-dx, -dy))))
}

/// Coincidence counts `tau(d) = #{y : z_i(y) and z_j(y + d)}` over all lags.
pub fn cross_correlate_binary(z_i: &BinaryMap, z_j: &BinaryMap) -> Result<LagMap> {
    if z_i.width() != z_j.width() || z_i.height() != z_j.height() {
        return Err(Error::DimensionMismatch(z_i.width(), z_i.height(), z_j.width(), z_j.height()));
    }
    let raw = full_correlation(
        z_i.width(),
        z_i.height(),
        |x, y| z_i.get(x, y) as u8 as f64,
        |x, y| z_j.get(x, y) as u8 as f64,
    );
    Ok(LagMap::from_fn(raw.half_width(), raw.half_height(), |dx, dy| raw.get(dx, dy).round()))
}

/// Same counts as [`cross_correlate_binary`], restricted to
/// `|dx|, |dy| <= max_lag` and computed from the set pixels directly.
pub fn cross_correlate_sparse(z_i: &BinaryMap, z_j: &BinaryMap, max_lag: usize) -> Result<LagMap> {
    if z_i.width() != z_j.width() || z_i.height() != z_j.height() {
        return Err(Error::DimensionMismatch(z_i.width(), z_i.height(), z_j.width(), z_j.height()));
    }
    let mut out = LagMap::zeros(max_lag, max_lag);
    let pj = z_j.points();
    for (xi, yi) in z_i.points() {
        for &(xj, yj) in &pj {
            let dx = xj as i64 - xi as i64;
            let dy = yj as i64 - yi as i64;
            if out.contains(dx, dy) {
                out.add(dx, dy, 1.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn impulses(w: usize, h: usize, pts: &[(usize, usize)]) -> CorrelationMap {
        let mut m = CorrelationMap::filled(w, h, 0.0);
        for &(x, y) in pts {
            m.set(x, y, 1.0);
        }
        m
    }

    #[test]
    fn single_impulse_peaks_at_zero_lag() {
        let r = auto_correlation(&impulses(16, 12, &[(5, 7)])).unwrap();
        for (dx, dy, v) in r.iter() {
            let expect = if dx == 0 && dy == 0 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-9, "({dx},{dy}) = {v}");
        }
    }

    #[test]
    fn two_impulses_give_side_peaks_at_half_height() {
        let r = auto_correlation(&impulses(20, 20, &[(4, 5), (10, 8)])).unwrap();
        assert!((r.get(0, 0) - 2.0).abs() < 1e-9);
        assert!((r.get(6, 3) - 1.0).abs() < 1e-9);
        assert!((r.get(-6, -3) - 1.0).abs() < 1e-9);
        let others: f64 = r
            .iter()
            .filter(|(dx, dy, _)| !matches!((dx, dy), (0, 0) | (6, 3) | (-6, -3)))
            .map(|(_, _, v)| v.abs())
            .fold(0.0, f64::max);
        assert!(others < 1e-9);
    }

    #[test]
    fn constant_map_rejected() {
        let m = CorrelationMap::filled(8, 8, 0.3);
        assert!(matches!(auto_correlation(&m), Err(Error::ConstantMap)));
    }

    #[test]
    fn autocorrelation_is_symmetric_with_max_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..24 * 17).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = auto_correlation(&CorrelationMap::new(24, 17, data)).unwrap();
        let r0 = r.get(0, 0);
        for (dx, dy, v) in r.iter() {
            assert!((v - r.get(-dx, -dy)).abs() <= 1e-9);
            assert!(v <= r0 + 1e-9);
        }
    }

    fn brute_tau(a: &BinaryMap, b: &BinaryMap, dx: i64, dy: i64) -> f64 {
        let mut n = 0;
        for y in 0..a.height() as i64 {
            for x in 0..a.width() as i64 {
                let (x2, y2) = (x + dx, y + dy);
                if x2 < 0 || y2 < 0 || x2 >= a.width() as i64 || y2 >= a.height() as i64 {
                    continue;
                }
                if a.get(x as usize, y as usize) && b.get(x2 as usize, y2 as usize) {
                    n += 1;
                }
            }
        }
        n as f64
    }

    fn random_binary(w: usize, h: usize, density: f64, rng: &mut ChaCha8Rng) -> BinaryMap {
        let mut m = BinaryMap::new(w, h);
        for y in 0..h {
            for x in 0..w {
                if rng.random::<f64>() < density {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    #[test]
    fn binary_cross_correlation_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_binary(18, 14, 0.1, &mut rng);
        let b = random_binary(18, 14, 0.1, &mut rng);
        let tau = cross_correlate_binary(&a, &b).unwrap();
        let sparse = cross_correlate_sparse(&a, &b, 6).unwrap();
        for (dx, dy, v) in tau.iter() {
            assert_eq!(v, brute_tau(&a, &b, dx, dy), "lag ({dx},{dy})");
        }
        for (dx, dy, v) in sparse.iter() {
            assert_eq!(v, tau.get(dx, dy));
        }
    }

    #[test]
    fn identical_and_translated_maps_peak_at_their_offset() {
        let pts = [(3, 4), (9, 2), (12, 11), (5, 13), (15, 7)];
        let a = BinaryMap::from_points(24, 20, &pts);
        let tau = cross_correlate_binary(&a, &a).unwrap();
        assert_eq!(tau.get(0, 0), 5.0);
        let b = a.translated(3, 2);
        let tau = cross_correlate_binary(&a, &b).unwrap();
        assert_eq!(tau.get(3, 2), 5.0);
        let max = tau.data().iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 5.0);
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let a = BinaryMap::new(5, 5);
        let b = BinaryMap::new(6, 5);
        assert!(matches!(cross_correlate_binary(&a, &b), Err(Error::DimensionMismatch(..))));
        assert!(matches!(cross_correlate_sparse(&a, &b, 2), Err(Error::DimensionMismatch(..))));
    }
}
