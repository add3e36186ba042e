use rustfft::num_complex::Complex;

use super::fft::{fast_len, Fft2};
use super::{CorrelationMap, GrayImage, Patch};
use crate::error::{Error, Result};

/// Windows whose summed squared deviation falls below this are treated as
/// flat; their correlation is undefined and reported as 0.
const FLAT_WINDOW: f64 = 1e-10;

/// Score for centres whose window leaves the image.
pub(crate) const BORDER_SCORE: f64 = -1.0;

fn check(img: &GrayImage, p: &Patch) -> Result<()> {
    if p.deviation() <= 0.0 || p.deviation() * p.deviation() <= FLAT_WINDOW {
        return Err(Error::ZeroVariancePatch);
    }
    if img.width() < p.side() || img.height() < p.side() {
        return Err(Error::ImageTooSmall { width: img.width(), height: img.height(), min: p.side() });
    }
    Ok(())
}

#[inline]
fn finish(num: f64, p_dev: f64, q_dev_sq: f64) -> f64 {
    if q_dev_sq <= FLAT_WINDOW {
        0.0
    } else {
        (num / (p_dev * q_dev_sq.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Normalized cross-correlation of `p` against every fully contained window
/// of `img`, computed through the FFT.
pub fn ncc_map(img: &GrayImage, p: &Patch) -> Result<CorrelationMap> {
    check(img, p)?;
    NccEngine::new(img, p.side())?.correlate(p)
}

/// Brute-force reference for [`ncc_map`]: one explicit window loop per pixel.
pub fn ncc_map_direct(img: &GrayImage, p: &Patch) -> Result<CorrelationMap> {
    check(img, p)?;
    let s = p.side();
    let h = s / 2;
    let n = (s * s) as f64;
    let (w, ht) = (img.width(), img.height());
    let pd = p.data();
    let pm = p.mean();
    let mut out = CorrelationMap::filled(w, ht, BORDER_SCORE);
    for cy in h..ht - h {
        for cx in h..w - h {
            let mut sum = 0.0;
            for v in 0..s {
                let row = (cy - h + v) * w + cx - h;
                sum += img.data()[row..row + s].iter().sum::<f64>();
            }
            let qm = sum / n;
            let mut num = 0.0;
            let mut qq = 0.0;
            for v in 0..s {
                let row = (cy - h + v) * w + cx - h;
                for u in 0..s {
                    let q = img.data()[row + u] - qm;
                    num += (pd[v * s + u] - pm) * q;
                    qq += q * q;
                }
            }
            out.set(cx, cy, finish(num, p.deviation(), qq));
        }
    }
    Ok(out)
}

/// Reusable correlation context for one image and patch size: the image
/// spectrum and per-window deviations are computed once and shared by
/// every patch correlated against the image.
pub struct NccEngine {
    width: usize,
    height: usize,
    side: usize,
    fft: Fft2,
    spectrum: Vec<Complex<f64>>,
    /// Summed squared deviation of each window, indexed by its top-left corner.
    window_dev_sq: Vec<f64>,
}

impl NccEngine {
    pub fn new(img: &GrayImage, side: usize) -> Result<Self> {
        if side == 0 || side.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("patch side {side} must be odd")));
        }
        if img.width() < side || img.height() < side {
            return Err(Error::ImageTooSmall { width: img.width(), height: img.height(), min: side });
        }
        let (w, h) = (img.width(), img.height());
        let fft = Fft2::new(fast_len(w), fast_len(h));
        let mut spectrum = fft.load_real(w, h, |x, y| img.get(x, y));
        fft.forward(&mut spectrum);
        Ok(NccEngine { width: w, height: h, side, fft, spectrum, window_dev_sq: window_dev_sq(img, side) })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Summed squared deviation of the window centred at `(cx, cy)`, or
    /// `None` if the window leaves the image.
    pub fn window_dev_sq(&self, cx: usize, cy: usize) -> Option<f64> {
        let h = self.side / 2;
        if cx < h || cy < h || cx + h >= self.width || cy + h >= self.height {
            return None;
        }
        let vw = self.width - self.side + 1;
        Some(self.window_dev_sq[(cy - h) * vw + (cx - h)])
    }

    fn check_patch(&self, p: &Patch) -> Result<()> {
        if p.side() != self.side {
            return Err(Error::InvalidConfig(format!(
                "engine built for side {}, got patch of side {}",
                self.side,
                p.side()
            )));
        }
        if p.deviation() * p.deviation() <= FLAT_WINDOW {
            return Err(Error::ZeroVariancePatch);
        }
        Ok(())
    }

    pub fn correlate(&self, p: &Patch) -> Result<CorrelationMap> {
        self.check_patch(p)?;
        let buf = self.raw_correlation(p, None);
        Ok(self.normalize(&buf, p, |c| c.re))
    }

    /// Correlate two patches with a single pair of transforms: the second
    /// patch rides in the imaginary channel.
    pub fn correlate_pair(&self, a: &Patch, b: &Patch) -> Result<(CorrelationMap, CorrelationMap)> {
        self.check_patch(a)?;
        self.check_patch(b)?;
        let buf = self.raw_correlation(a, Some(b));
        Ok((self.normalize(&buf, a, |c| c.re), self.normalize(&buf, b, |c| -c.im)))
    }

    fn raw_correlation(&self, a: &Patch, b: Option<&Patch>) -> Vec<Complex<f64>> {
        let s = self.side;
        let (am, ad) = (a.mean(), a.data());
        let mut kernel = self.fft.load_real(s, s, |x, y| ad[y * s + x] - am);
        if let Some(b) = b {
            let (bm, bd) = (b.mean(), b.data());
            for y in 0..s {
                for x in 0..s {
                    kernel[y * self.fft.width() + x].im = bd[y * s + x] - bm;
                }
            }
        }
        self.fft.forward(&mut kernel);
        for (k, i) in kernel.iter_mut().zip(&self.spectrum) {
            *k = i * k.conj();
        }
        self.fft.inverse(&mut kernel);
        kernel
    }

    fn normalize(&self, buf: &[Complex<f64>], p: &Patch, pick: impl Fn(&Complex<f64>) -> f64) -> CorrelationMap {
        let s = self.side;
        let h = s / 2;
        let vw = self.width - s + 1;
        let vh = self.height - s + 1;
        let stride = self.fft.width();
        let mut out = CorrelationMap::filled(self.width, self.height, BORDER_SCORE);
        for ty in 0..vh {
            for tx in 0..vw {
                let num = pick(&buf[ty * stride + tx]);
                let score = finish(num, p.deviation(), self.window_dev_sq[ty * vw + tx]);
                out.set(tx + h, ty + h, score);
            }
        }
        out
    }
}

/// Per-window `sum (q - mean)^2` by separable box sums (no running
/// accumulators, so no drift across large images).
fn window_dev_sq(img: &GrayImage, s: usize) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let vw = w - s + 1;
    let vh = h - s + 1;
    let mut row_sum = vec![0.0; vw * h];
    let mut row_sq = vec![0.0; vw * h];
    for y in 0..h {
        let row = &img.data()[y * w..(y + 1) * w];
        for x in 0..vw {
            let win = &row[x..x + s];
            row_sum[y * vw + x] = win.iter().sum();
            row_sq[y * vw + x] = win.iter().map(|v| v * v).sum();
        }
    }
    let n = (s * s) as f64;
    let mut out = vec![0.0; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for v in 0..s {
                s1 += row_sum[(y + v) * vw + x];
                s2 += row_sq[(y + v) * vw + x];
            }
            out[y * vw + x] = (s2 - s1 * s1 / n).max(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random::<f64>())
    }

    #[test]
    fn self_correlation_is_one() {
        let img = random_image(40, 30, 1);
        let p = img.patch(17, 12, 9).unwrap();
        let m = ncc_map(&img, &p).unwrap();
        assert!((m.get(17, 12) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn negated_window_scores_minus_one() {
        let img = random_image(32, 32, 2);
        let p = img.patch(10, 10, 9).unwrap();
        let neg = Patch::new(9, p.data().iter().map(|v| 1.0 - v).collect());
        let m = ncc_map(&img, &neg).unwrap();
        assert!((m.get(10, 10) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn border_band_is_minus_one() {
        let img = random_image(20, 20, 3);
        let p = img.patch(10, 10, 9).unwrap();
        let m = ncc_map(&img, &p).unwrap();
        for i in 0..4 {
            assert_eq!(m.get(i, 10), -1.0);
            assert_eq!(m.get(19 - i, 10), -1.0);
            assert_eq!(m.get(10, i), -1.0);
            assert_eq!(m.get(10, 19 - i), -1.0);
        }
        assert!(m.get(4, 4) > -1.0 - 1e-12);
    }

    #[test]
    fn fft_matches_direct_on_random_input() {
        let img = random_image(32, 32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Patch::new(9, (0..81).map(|_| rng.random()).collect());
        let a = ncc_map(&img, &p).unwrap();
        let b = ncc_map_direct(&img, &p).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn paired_correlation_matches_single() {
        let img = random_image(37, 29, 6);
        let a = img.patch(10, 9, 9).unwrap();
        let b = img.patch(25, 20, 9).unwrap();
        let eng = NccEngine::new(&img, 9).unwrap();
        let (ma, mb) = eng.correlate_pair(&a, &b).unwrap();
        let sa = eng.correlate(&a).unwrap();
        let sb = eng.correlate(&b).unwrap();
        for (x, y) in ma.data().iter().zip(sa.data()) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in mb.data().iter().zip(sb.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_variance_patch_rejected() {
        let img = random_image(20, 20, 7);
        let p = Patch::new(9, vec![0.5; 81]);
        assert!(matches!(ncc_map(&img, &p), Err(Error::ZeroVariancePatch)));
    }

    #[test]
    fn too_small_image_rejected() {
        let img = random_image(8, 20, 8);
        let p = Patch::new(9, (0..81).map(|i| i as f64 / 81.0).collect());
        assert!(matches!(ncc_map(&img, &p), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn flat_windows_score_zero() {
        let img = GrayImage::from_fn(30, 30, |x, _| if x < 15 { 0.2 } else { 0.8 });
        let p = img.patch(15, 15, 9).unwrap();
        let m = ncc_map(&img, &p).unwrap();
        assert_eq!(m.get(6, 15), 0.0);
        assert!((m.get(15, 15) - 1.0).abs() < 1e-9);
    }
}
