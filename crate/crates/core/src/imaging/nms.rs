use super::{BinaryMap, CorrelationMap};

/// Mark pixels whose score exceeds `threshold` and that are the maximum of
/// their `window x window` neighbourhood.
///
/// Equal scores are ordered by row-major pixel index, so on a plateau only the
/// first pixel (smallest row, then column) survives. Two marked pixels are
/// therefore never within one window of each other.
pub fn non_max_suppress(m: &CorrelationMap, threshold: f64, window: usize) -> BinaryMap {
    assert!(window >= 3 && window % 2 == 1, "window must be odd and >= 3");
    let (w, h) = (m.width(), m.height());
    let r = window / 2;
    let mut out = BinaryMap::new(w, h);
    let data = m.data();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = data[i];
            if !(v > threshold) {
                continue;
            }
            let mut keep = true;
            'scan: for ny in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for nx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    let j = ny * w + nx;
                    if j == i {
                        continue;
                    }
                    let u = data[j];
                    if u > v || (u == v && j < i) {
                        keep = false;
                        break 'scan;
                    }
                }
            }
            if keep {
                out.set(x, y, true);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn below_threshold_is_empty() {
        let m = CorrelationMap::new(5, 5, (0..25).map(|i| i as f64 / 100.0).collect());
        assert_eq!(non_max_suppress(&m, 0.5, 3).count(), 0);
    }

    #[test]
    fn single_peak() {
        let mut m = CorrelationMap::filled(9, 7, 0.1);
        m.set(4, 3, 0.99);
        let z = non_max_suppress(&m, 0.9, 3);
        assert_eq!(z.points(), vec![(4, 3)]);
    }

    #[test]
    fn plateau_keeps_lexicographic_first() {
        let mut m = CorrelationMap::filled(10, 10, 0.0);
        for y in 3..6 {
            for x in 4..7 {
                m.set(x, y, 0.97);
            }
        }
        let z = non_max_suppress(&m, 0.95, 5);
        assert_eq!(z.points(), vec![(4, 3)]);
    }

    proptest! {
        #[test]
        fn marks_are_separated(data in proptest::collection::vec(0.0f64..1.0, 20 * 16), win in prop::sample::select(vec![3usize, 5, 9])) {
            // Coarse quantization produces plenty of ties.
            let q: Vec<f64> = data.iter().map(|v| (v * 8.0).floor() / 8.0).collect();
            let m = CorrelationMap::new(20, 16, q);
            let pts = non_max_suppress(&m, 0.3, win).points();
            let r = (win / 2) as i64;
            for (a, &(x1, y1)) in pts.iter().enumerate() {
                prop_assert!(m.get(x1, y1) > 0.3);
                for &(x2, y2) in &pts[a + 1..] {
                    let d = (x1 as i64 - x2 as i64).abs().max((y1 as i64 - y2 as i64).abs());
                    prop_assert!(d > r);
                }
            }
        }
    }
}
