//! Greedy extraction of recurrent patches.
//!
//! Each round samples random admissible windows, correlates them against the
//! whole image and keeps the one with the most occurrences. Pixels near
//! occurrences of already accepted patches are excluded from later rounds.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{non_max_suppress, BinaryMap, CorrelationMap, GrayImage, NccEngine, Patch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    /// Occurrences need a correlation above `1 - epsilon`.
    pub epsilon: f64,
    pub patch_side: usize,
    pub candidates_per_round: usize,
    /// Mining stops once a round's best frequency drops below this fraction
    /// of the best frequency seen so far.
    pub stop_fraction: f64,
    /// Candidate windows with a per-pixel variance below this are skipped.
    pub variance_floor: f64,
    /// The floor is raised to `(noise_factor * sigma)^2` for an estimated
    /// noise level `sigma`, so that flat but noisy background is skipped too.
    pub noise_factor: f64,
    pub rng_seed: u64,
    pub max_rounds: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            epsilon: 1.0 / 20.0,
            patch_side: 9,
            candidates_per_round: 30,
            stop_fraction: 0.30,
            variance_floor: 1e-4,
            noise_factor: 2.0,
            rng_seed: 0,
            max_rounds: 64,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("epsilon {} not in (0, 1)", self.epsilon)));
        }
        if !(self.stop_fraction > 0.0 && self.stop_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!("stop_fraction {} not in (0, 1)", self.stop_fraction)));
        }
        if self.patch_side < 3 || self.patch_side.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("patch_side {} must be odd and >= 3", self.patch_side)));
        }
        if self.candidates_per_round == 0 || self.max_rounds == 0 {
            return Err(Error::InvalidConfig("candidates_per_round and max_rounds must be positive".into()));
        }
        if !(self.variance_floor >= 0.0 && self.noise_factor >= 0.0) {
            return Err(Error::InvalidConfig("variance_floor and noise_factor must be non-negative".into()));
        }
        Ok(())
    }

    /// Expected object diameter in canonical pixels.
    pub fn object_size(&self) -> usize {
        3 * self.patch_side
    }

    pub fn threshold(&self) -> f64 {
        1.0 - self.epsilon
    }
}

/// Axis-aligned box in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    /// Parse `x,y,w,h`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::DegenerateBox(format!("cannot parse {s:?}: {e}")))?;
        match parts.as_slice() {
            [x, y, w, h] => Ok(BoundingBox::new(*x, *y, *w, *h)),
            _ => Err(Error::DegenerateBox(format!("expected x,y,w,h, got {s:?}"))),
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let vals = [self.x, self.y, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateBox("non-finite coordinates".into()));
        }
        if self.w.min(self.h) < 4.0 {
            return Err(Error::DegenerateBox(format!("box {}x{} smaller than 4 px", self.w, self.h)));
        }
        if self.x < 0.0 || self.y < 0.0 || self.x + self.w > width as f64 || self.y + self.h > height as f64 {
            return Err(Error::DegenerateBox(format!("box leaves the {width}x{height} image")));
        }
        Ok(())
    }
}

/// An image rescaled to the canonical object size.
#[derive(Debug, Clone)]
pub struct Rescaled {
    pub image: GrayImage,
    /// Canonical pixels per original pixel.
    pub scale: f64,
}

impl Rescaled {
    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.scale, y / self.scale)
    }
}

/// Rescale so that the longer side of `bbox` spans `3 * patch_side` pixels.
pub fn rescale_to_canonical(img: &GrayImage, bbox: &BoundingBox, cfg: &MiningConfig) -> Result<Rescaled> {
    bbox.validate(img.width(), img.height())?;
    let scale = cfg.object_size() as f64 / bbox.w.max(bbox.h);
    let w = ((img.width() as f64 * scale).round() as usize).max(1);
    let h = ((img.height() as f64 * scale).round() as usize).max(1);
    Ok(Rescaled { image: img.resize_bilinear(w, h), scale })
}

#[derive(Debug, Clone)]
pub struct RecurrentPatch {
    pub id: usize,
    pub patch: Patch,
    pub occurrence: BinaryMap,
    /// Correlation of the patch against the image.
    pub response: CorrelationMap,
    pub frequency: usize,
    /// Centre of the window the patch was cut from.
    pub source: (usize, usize),
}

struct Candidate {
    centre: (usize, usize),
    patch: Patch,
    response: CorrelationMap,
    occurrence: BinaryMap,
}

/// Chebyshev dilation of `z` by `r` pixels, or-ed into `mask`.
fn dilate_into(mask: &mut [bool], z: &BinaryMap, r: usize) {
    let (w, h) = (z.width(), z.height());
    for (x, y) in z.points() {
        for ny in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for nx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                mask[ny * w + nx] = true;
            }
        }
    }
}

/// Iteratively extract recurrent patches; see the module docs.
pub fn mine_recurrent_patches(img: &GrayImage, cfg: &MiningConfig) -> Result<Vec<RecurrentPatch>> {
    cfg.validate()?;
    let side = cfg.patch_side;
    let half = side / 2;
    let min = cfg.object_size();
    if img.width() < min || img.height() < min {
        return Err(Error::ImageTooSmall { width: img.width(), height: img.height(), min });
    }
    let (w, h) = (img.width(), img.height());
    let engine = NccEngine::new(img, side)?;
    let n_px = (side * side) as f64;
    let mut excluded = vec![false; w * h];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut accepted: Vec<RecurrentPatch> = Vec::new();
    let mut max_freq = 0usize;
    let floor = cfg.variance_floor.max((cfg.noise_factor * img.noise_sigma()).powi(2));

    for round in 0..cfg.max_rounds {
        let admissible: Vec<(usize, usize)> = (half..h - half)
            .flat_map(|y| (half..w - half).map(move |x| (x, y)))
            .filter(|&(x, y)| !excluded[y * w + x] && engine.window_dev_sq(x, y).is_some_and(|d| d / n_px >= floor))
            .collect();
        if admissible.is_empty() {
            if round == 0 {
                return Err(Error::NoRecurrence(0));
            }
            break;
        }
        let k = cfg.candidates_per_round.min(admissible.len());
        let picks: Vec<(usize, usize)> =
            index::sample(&mut rng, admissible.len(), k).into_iter().map(|i| admissible[i]).collect();

        let candidates = evaluate(img, &engine, &picks, cfg, &excluded)?;
        // Earliest sampled candidate wins ties.
        let best = candidates
            .into_iter()
            .reduce(|a, b| if b.occurrence.count() > a.occurrence.count() { b } else { a })
            .expect("at least one candidate");
        let freq = best.occurrence.count();
        if round == 0 && freq < 2 {
            return Err(Error::NoRecurrence(freq));
        }
        if (freq as f64) < cfg.stop_fraction * max_freq as f64 {
            tracing::debug!(round, freq, max_freq, "mining stopped");
            break;
        }
        max_freq = max_freq.max(freq);
        dilate_into(&mut excluded, &best.occurrence, half);
        tracing::debug!(round, freq, centre = ?best.centre, "accepted patch");
        accepted.push(RecurrentPatch {
            id: accepted.len(),
            patch: best.patch,
            frequency: freq,
            occurrence: best.occurrence,
            response: best.response,
            source: best.centre,
        });
    }
    Ok(accepted)
}

fn evaluate(
    img: &GrayImage,
    engine: &NccEngine,
    picks: &[(usize, usize)],
    cfg: &MiningConfig,
    excluded: &[bool],
) -> Result<Vec<Candidate>> {
    let side = cfg.patch_side;
    let finish = |centre: (usize, usize), patch: Patch, response: CorrelationMap| {
        let mut occurrence = non_max_suppress(&response, cfg.threshold(), side);
        for (x, y) in occurrence.points() {
            if excluded[y * img.width() + x] {
                occurrence.set(x, y, false);
            }
        }
        Candidate { centre, patch, response, occurrence }
    };
    let chunks: Vec<Result<Vec<Candidate>>> = picks
        .par_chunks(2)
        .map(|pair| {
            let a = img.patch(pair[0].0, pair[0].1, side)?;
            match pair.get(1) {
                Some(&cb) => {
                    let b = img.patch(cb.0, cb.1, side)?;
                    let (ra, rb) = engine.correlate_pair(&a, &b)?;
                    Ok(vec![finish(pair[0], a, ra), finish(cb, b, rb)])
                }
                None => {
                    let ra = engine.correlate(&a)?;
                    Ok(vec![finish(pair[0], a, ra)])
                }
            }
        })
        .collect();
    let mut out = Vec::with_capacity(picks.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}
