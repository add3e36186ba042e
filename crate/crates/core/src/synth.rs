//! Procedural scenes of repeated composite objects with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Point};

const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Disc { radius: f64 },
    Ring { radius: f64, thickness: f64 },
    Rect { half_w: f64, half_h: f64 },
    Cross { arm: f64, half_thickness: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Disc { radius } => dx * dx + dy * dy <= radius * radius,
            Shape::Ring { radius, thickness } => {
                let r = dx.hypot(dy);
                (r - radius).abs() <= thickness / 2.0
            }
            Shape::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            Shape::Cross { arm, half_thickness } => {
                (dx.abs() <= arm && dy.abs() <= half_thickness) || (dy.abs() <= arm && dx.abs() <= half_thickness)
            }
        }
    }

    fn extent(&self) -> f64 {
        match *self {
            Shape::Disc { radius } => radius,
            Shape::Ring { radius, thickness } => radius + thickness / 2.0,
            Shape::Rect { half_w, half_h } => half_w.max(half_h),
            Shape::Cross { arm, half_thickness } => arm.max(half_thickness),
        }
    }
}

/// One stamp of a composite object, positioned relative to the object centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub shape: Shape,
    pub offset: [f64; 2],
    pub intensity: f64,
    /// Whether the per-instance jitter displaces this part.
    #[serde(default = "yes")]
    pub jitters: bool,
}

fn yes() -> bool {
    true
}

/// A composite object: parts painted in order, later parts on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub parts: Vec<Part>,
}

impl Template {
    fn body(radius: f64) -> Part {
        Part { shape: Shape::Disc { radius }, offset: [0.0, 0.0], intensity: 0.45, jitters: false }
    }

    /// 27 px disc carrying four distinct, asymmetrically placed interior marks.
    pub fn default_target() -> Self {
        Template {
            parts: vec![
                Template::body(13.0),
                Part { shape: Shape::Disc { radius: 2.2 }, offset: [-5.0, -4.0], intensity: 0.95, jitters: true },
                Part {
                    shape: Shape::Rect { half_w: 2.0, half_h: 2.0 },
                    offset: [5.0, -5.0],
                    intensity: 0.05,
                    jitters: true,
                },
                Part {
                    shape: Shape::Ring { radius: 2.6, thickness: 1.2 },
                    offset: [4.0, 5.0],
                    intensity: 0.95,
                    jitters: true,
                },
                Part {
                    shape: Shape::Rect { half_w: 3.0, half_h: 1.0 },
                    offset: [-5.0, 5.0],
                    intensity: 0.05,
                    jitters: true,
                },
            ],
        }
    }

    /// Same body as [`Template::default_target`] with a different set of marks.
    pub fn default_distractor() -> Self {
        Template {
            parts: vec![
                Template::body(13.0),
                Part {
                    shape: Shape::Cross { arm: 2.5, half_thickness: 0.8 },
                    offset: [-5.0, -5.0],
                    intensity: 0.95,
                    jitters: true,
                },
                Part {
                    shape: Shape::Ring { radius: 2.2, thickness: 1.0 },
                    offset: [5.0, -4.0],
                    intensity: 0.05,
                    jitters: true,
                },
                Part {
                    shape: Shape::Rect { half_w: 1.0, half_h: 3.0 },
                    offset: [5.0, 5.0],
                    intensity: 0.95,
                    jitters: true,
                },
                Part { shape: Shape::Disc { radius: 2.0 }, offset: [-4.0, 5.0], intensity: 0.05, jitters: true },
            ],
        }
    }

    /// Copy with the half facing `side` painted over with `background`,
    /// leaving an isolated fragment that looks like an occluded instance.
    pub fn fragment(&self, background: f64, side: Side) -> Template {
        let (half_w, half_h, offset) = match side {
            Side::Top => (15.0, 7.5, [0.0, -8.0]),
            Side::Bottom => (15.0, 7.5, [0.0, 8.0]),
            Side::Left => (7.5, 15.0, [-8.0, 0.0]),
            Side::Right => (7.5, 15.0, [8.0, 0.0]),
        };
        let mut parts = self.parts.clone();
        parts.push(Part { shape: Shape::Rect { half_w, half_h }, offset, intensity: background, jitters: false });
        Template { parts }
    }

    /// Copy keeping only the parts at the given indices (in order).
    pub fn subset(&self, keep: &[usize]) -> Template {
        Template { parts: keep.iter().filter_map(|i| self.parts.get(*i).cloned()).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Top,
    Bottom,
    Left,
    Right,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Top, Side::Bottom, Side::Left, Side::Right];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub template: Template,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub template: Template,
    /// Number of target instances.
    pub count: usize,
    /// Maximum per-part displacement in pixels.
    pub jitter: f64,
    /// Standard deviation of additive Gaussian intensity noise.
    pub noise: f64,
    /// Fraction of target instances that are partly covered by a neighbour.
    pub occlusion_rate: f64,
    /// Non-target populations, each with its own template.
    #[serde(default)]
    pub distractors: Vec<DistractorSpec>,
    /// Minimum centre distance between instances not involved in an
    /// occlusion, in pixels.
    pub min_spacing: f64,
    /// Centre distance between an occluded instance and its occluder.
    pub occlusion_distance: f64,
    pub background: f64,
    pub object_size: f64,
    pub rng_seed: u64,
}

impl SceneSpec {
    /// Canvas sized so that `count` default targets fill roughly a third of it.
    pub fn with_count(count: usize, rng_seed: u64) -> Self {
        let object_size = 27.0;
        let side = ((count as f64) * object_size * object_size * 2.6).sqrt().ceil().max(120.0) as usize;
        SceneSpec {
            width: side,
            height: side,
            template: Template::default_target(),
            count,
            jitter: 0.0,
            noise: 0.0,
            occlusion_rate: 0.0,
            distractors: Vec::new(),
            min_spacing: 1.05 * object_size,
            occlusion_distance: 0.8 * object_size,
            background: 0.1,
            object_size,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.count == 0 {
            return bad("scene needs at least one target".into());
        }
        if !(0.0..10.0).contains(&self.jitter) {
            return bad(format!("jitter {} must be in [0, 10)", self.jitter));
        }
        if self.min_spacing < 0.8 * self.object_size || self.occlusion_distance < 0.8 * self.object_size {
            return bad("instance spacing must be at least 0.8 x object size".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) || self.noise < 0.0 {
            return bad("occlusion_rate must be in [0, 1] and noise non-negative".into());
        }
        if self.template.parts.is_empty() {
            return bad("template has no parts".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectLabel {
    Target,
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthObject {
    pub x: f64,
    pub y: f64,
    pub label: ObjectLabel,
    #[serde(default)]
    pub occluded: bool,
}

impl TruthObject {
    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub object_size: f64,
    pub objects: Vec<TruthObject>,
}

impl GroundTruth {
    pub fn targets(&self) -> impl Iterator<Item = &TruthObject> {
        self.objects.iter().filter(|o| o.label == ObjectLabel::Target)
    }

    pub fn target_points(&self) -> Vec<Point> {
        self.targets().map(TruthObject::point).collect()
    }

    /// Ground truth expressed in a rescaled frame (`scale` new px per old px).
    pub fn scaled(&self, scale: f64) -> GroundTruth {
        GroundTruth {
            width: (self.width as f64 * scale).round() as usize,
            height: (self.height as f64 * scale).round() as usize,
            object_size: self.object_size * scale,
            objects: self.objects.iter().map(|o| TruthObject { x: o.x * scale, y: o.y * scale, ..o.clone() }).collect(),
        }
    }
}

struct Placed {
    centre: (i64, i64),
    template: usize,
    occluded: bool,
}

/// Named scene families used by the benchmarks and the acceptance run. All
/// use 3 px part jitter and noise of standard deviation 0.02.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 100 targets.
    Desk,
    /// 25 targets.
    Sparse,
    /// 80 targets and 40 instances of a template with the same body but
    /// different interior marks.
    Distractors,
    /// 100 targets, 15% of them partly covered by a neighbour.
    Occlusion,
    /// The occlusion scene plus 20 isolated half-object fragments cut on
    /// all four sides.
    Fragments,
}

impl Preset {
    pub const ALL: [Preset; 5] =
        [Preset::Desk, Preset::Sparse, Preset::Distractors, Preset::Occlusion, Preset::Fragments];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Sparse => "sparse",
            Preset::Distractors => "distractors",
            Preset::Occlusion => "occlusion",
            Preset::Fragments => "fragments",
        }
    }

    pub fn spec(self, rng_seed: u64) -> SceneSpec {
        let mut s = match self {
            Preset::Desk => SceneSpec::with_count(100, rng_seed),
            Preset::Sparse => SceneSpec::with_count(25, rng_seed),
            Preset::Distractors => {
                let mut s = SceneSpec::with_count(120, rng_seed);
                s.count = 80;
                s.distractors = vec![DistractorSpec { template: Template::default_distractor(), count: 40 }];
                s
            }
            Preset::Occlusion | Preset::Fragments => {
                let mut s = SceneSpec::with_count(if self == Preset::Fragments { 120 } else { 100 }, rng_seed);
                s.count = 100;
                s.occlusion_rate = 0.15;
                if self == Preset::Fragments {
                    let bg = s.background;
                    s.distractors = Side::ALL
                        .iter()
                        .map(|&side| DistractorSpec {
                            template: Template::default_target().fragment(bg, side),
                            count: 5,
                        })
                        .collect();
                }
                s
            }
        };
        s.jitter = 3.0;
        s.noise = 0.02;
        s
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scene preset {s:?}")))
    }
}

/// Render a scene and its ground truth. Deterministic in `spec.rng_seed`.
pub fn generate(spec: &SceneSpec) -> Result<(GrayImage, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let templates: Vec<&Template> =
        std::iter::once(&spec.template).chain(spec.distractors.iter().map(|d| &d.template)).collect();
    let n_occluded = (spec.occlusion_rate * spec.count as f64).round() as usize;
    let margin = spec.object_size / 2.0 + 1.0;
    let (w, h) = (spec.width as f64, spec.height as f64);
    if w <= 2.0 * margin || h <= 2.0 * margin {
        return Err(Error::InvalidConfig("canvas smaller than one object".into()));
    }

    let mut placed: Vec<Placed> = Vec::new();
    let mut attempts = 0usize;
    let far_enough = |placed: &[Placed], c: (i64, i64), skip: Option<usize>| {
        placed.iter().enumerate().all(|(i, p)| {
            Some(i) == skip
                || (((p.centre.0 - c.0).pow(2) + (p.centre.1 - c.1).pow(2)) as f64).sqrt() >= spec.min_spacing
        })
    };

    let mut free: Vec<(usize, bool)> = vec![(0, false); spec.count - n_occluded];
    for (k, d) in spec.distractors.iter().enumerate() {
        free.extend(std::iter::repeat_n((k + 1, false), d.count));
    }
    for (template, _) in free {
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::PlacementFailure(MAX_PLACEMENT_ATTEMPTS));
            }
            let c = (
                rng.random_range(margin..w - margin).round() as i64,
                rng.random_range(margin..h - margin).round() as i64,
            );
            if far_enough(&placed, c, None) {
                placed.push(Placed { centre: c, template, occluded: false });
                break;
            }
        }
    }
    let n_free_targets = spec.count - n_occluded;
    if n_occluded > 0 && n_free_targets == 0 {
        return Err(Error::InvalidConfig("occlusion needs at least one unoccluded target".into()));
    }
    for _ in 0..n_occluded {
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::PlacementFailure(MAX_PLACEMENT_ATTEMPTS));
            }
            let host = rng.random_range(0..n_free_targets);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let hc = placed[host].centre;
            let c = (
                (hc.0 as f64 + spec.occlusion_distance * angle.cos()).round() as i64,
                (hc.1 as f64 + spec.occlusion_distance * angle.sin()).round() as i64,
            );
            let inside =
                c.0 as f64 >= margin && c.1 as f64 >= margin && c.0 as f64 <= w - margin && c.1 as f64 <= h - margin;
            let host_dist = (((hc.0 - c.0).pow(2) + (hc.1 - c.1).pow(2)) as f64).sqrt();
            if inside && host_dist >= 0.8 * spec.object_size - 0.5 && far_enough(&placed, c, Some(host)) {
                placed.push(Placed { centre: c, template: 0, occluded: true });
                break;
            }
        }
    }

    let mut canvas = vec![spec.background; spec.width * spec.height];
    // Occluded instances first so their hosts paint over them.
    let order: Vec<usize> = (0..placed.len())
        .filter(|&i| placed[i].occluded)
        .chain((0..placed.len()).filter(|&i| !placed[i].occluded))
        .collect();
    let jitters: Vec<Vec<(i64, i64)>> = placed
        .iter()
        .map(|p| {
            templates[p.template].parts.iter().map(|part| sample_jitter(&mut rng, spec.jitter, part.jitters)).collect()
        })
        .collect();
    for i in order {
        let p = &placed[i];
        paint(&mut canvas, spec.width, spec.height, templates[p.template], p.centre, &jitters[i]);
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for v in canvas.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let image = GrayImage::new(spec.width, spec.height, canvas)?;
    let truth = GroundTruth {
        width: spec.width,
        height: spec.height,
        object_size: spec.object_size,
        objects: placed
            .iter()
            .map(|p| TruthObject {
                x: p.centre.0 as f64,
                y: p.centre.1 as f64,
                label: if p.template == 0 { ObjectLabel::Target } else { ObjectLabel::Distractor },
                occluded: p.occluded,
            })
            .collect(),
    };
    Ok((image, truth))
}

/// Integer displacement drawn uniformly from the lattice points of a disc.
fn sample_jitter(rng: &mut ChaCha8Rng, radius: f64, enabled: bool) -> (i64, i64) {
    let r = radius.floor() as i64;
    if !enabled || r == 0 {
        return (0, 0);
    }
    loop {
        let dx = rng.random_range(-r..=r);
        let dy = rng.random_range(-r..=r);
        if ((dx * dx + dy * dy) as f64) <= radius * radius {
            return (dx, dy);
        }
    }
}

fn paint(canvas: &mut [f64], w: usize, h: usize, t: &Template, centre: (i64, i64), jitter: &[(i64, i64)]) {
    let ss = SUPERSAMPLE as f64;
    for (part, &(jx, jy)) in t.parts.iter().zip(jitter) {
        let cx = centre.0 as f64 + part.offset[0] + jx as f64;
        let cy = centre.1 as f64 + part.offset[1] + jy as f64;
        let e = part.shape.extent() + 1.0;
        let x0 = ((cx - e).floor().max(0.0)) as usize;
        let y0 = ((cy - e).floor().max(0.0)) as usize;
        let x1 = ((cx + e).ceil() as i64).min(w as i64 - 1);
        let y1 = ((cy + e).ceil() as i64).min(h as i64 - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 - 0.5 + (sx as f64 + 0.5) / ss;
                        let py = y as f64 - 0.5 + (sy as f64 + 0.5) / ss;
                        if part.shape.contains(px - cx, py - cy) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let a = hits as f64 / (ss * ss);
                    let v = &mut canvas[y * w + x];
                    *v = *v * (1.0 - a) + part.intensity * a;
                }
            }
        }
    }
}

/// Detection quality against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    /// `detections - truth`.
    pub count_error: i64,
    /// Unmatched detections (H1).
    pub false_positives: usize,
    /// Unmatched truth objects (H0).
    pub false_negatives: usize,
    pub f1: f64,
}

/// Distance-greedy one-to-one matching of detections to truth within `tol`.
/// Returns, for each truth point, the index of its matched detection.
pub fn match_points(detections: &[Point], truth: &[Point], tol: f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, t) in truth.iter().enumerate() {
        for (di, d) in detections.iter().enumerate() {
            let dist = t.dist(*d);
            if dist <= tol {
                pairs.push((dist, ti, di));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut truth_match = vec![None; truth.len()];
    let mut det_used = vec![false; detections.len()];
    for (_, ti, di) in pairs {
        if truth_match[ti].is_none() && !det_used[di] {
            truth_match[ti] = Some(di);
            det_used[di] = true;
        }
    }
    truth_match
}

pub fn score_detections(detections: &[Point], truth: &[Point], tol: f64) -> DetectionScore {
    assert!(tol > 0.0, "matching tolerance must be positive");
    let matched = match_points(detections, truth, tol).iter().filter(|m| m.is_some()).count();
    let fp = detections.len() - matched;
    let fn_ = truth.len() - matched;
    let denom = 2 * matched + fp + fn_;
    DetectionScore {
        count_error: detections.len() as i64 - truth.len() as i64,
        false_positives: fp,
        false_negatives: fn_,
        f1: if denom == 0 { 1.0 } else { 2.0 * matched as f64 / denom as f64 },
    }
}

/// Detections matched one-to-one against every truth object, targets and
/// distractors alike, split by category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Breakdown {
    pub free_targets: usize,
    pub free_missed: usize,
    pub occluded_targets: usize,
    pub occluded_missed: usize,
    pub distractors: usize,
    pub distractors_counted: usize,
    /// Detections matching no object at all.
    pub unmatched: usize,
}

impl Breakdown {
    pub fn free_miss_rate(&self) -> f64 {
        ratio(self.free_missed, self.free_targets)
    }

    pub fn occluded_miss_rate(&self) -> f64 {
        ratio(self.occluded_missed, self.occluded_targets)
    }

    pub fn distractor_rate(&self) -> f64 {
        ratio(self.distractors_counted, self.distractors)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn breakdown(detections: &[Point], truth: &GroundTruth, tol: f64) -> Breakdown {
    let all: Vec<Point> = truth.objects.iter().map(TruthObject::point).collect();
    let matches = match_points(detections, &all, tol);
    let mut b = Breakdown::default();
    for (o, m) in truth.objects.iter().zip(&matches) {
        match (o.label, o.occluded) {
            (ObjectLabel::Distractor, _) => {
                b.distractors += 1;
                b.distractors_counted += m.is_some() as usize;
            }
            (ObjectLabel::Target, true) => {
                b.occluded_targets += 1;
                b.occluded_missed += m.is_none() as usize;
            }
            (ObjectLabel::Target, false) => {
                b.free_targets += 1;
                b.free_missed += m.is_none() as usize;
            }
        }
    }
    b.unmatched = detections.len() - matches.iter().flatten().count();
    b
}
