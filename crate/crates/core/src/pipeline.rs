//! End-to-end orchestration: mining, structure, detection, description and
//! classification of one image, plus benchmark runs over scene manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{run_oracle_session, Classification, Oracle, OracleSummary, Session, SessionConfig};
use crate::detection::{collect_votes, ransac_cluster, Cluster, RansacConfig};
use crate::error::{AtStage, Error, Result, Stage, StageError};
use crate::features::{build_feature_vectors, normalize, FeatureConfig, FeatureContext, FeatureVector};
use crate::imaging::{load_image, BinaryMap, GrayImage, Point};
use crate::mining::{
    mine_recurrent_patches, rescale_to_canonical, BoundingBox, MiningConfig, RecurrentPatch, Rescaled,
};
use crate::structure::{
    build_graph, correct_edge_patch, embed, prune_graph, response_shape, EmbeddedModel, PatchGraph, StructureConfig,
};
use crate::synth::{score_detections, GroundTruth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mining: MiningConfig,
    pub structure: StructureConfig,
    /// Re-derive occurrence maps of patches with elongated responses.
    pub edge_correction: bool,
    /// RANSAC inlier radius; derived from the object size when absent.
    pub sigma_ransac: Option<f64>,
    pub min_support: usize,
    pub max_hypotheses: usize,
    pub bins: usize,
    pub session: SessionConfig,
    /// Feature indices zeroed after normalization (ablations).
    pub disabled_features: Vec<usize>,
    /// Oracle matching radius in canonical pixels.
    pub oracle_tolerance: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            mining: MiningConfig::default(),
            structure: StructureConfig::default(),
            edge_correction: true,
            sigma_ransac: None,
            min_support: 2,
            max_hypotheses: 5000,
            bins: 8,
            session: SessionConfig::default(),
            disabled_features: Vec::new(),
            oracle_tolerance: 13.0,
        }
    }
}

/// Independent stream of the run seed for one stage.
pub fn derive_seed(seed: u64, stage: Stage) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng.next_u64()
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.mining.validate()?;
        self.structure_config().validate()?;
        self.ransac_config().validate()?;
        if self.bins < 2 {
            return Err(Error::InvalidConfig("bins must be at least 2".into()));
        }
        if !(self.session.svm.c > 0.0) || self.session.svm.max_iterations == 0 {
            return Err(Error::InvalidConfig("svm needs c > 0 and a positive iteration budget".into()));
        }
        if !(self.oracle_tolerance > 0.0) {
            return Err(Error::InvalidConfig("oracle_tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn object_size(&self) -> usize {
        self.mining.object_size()
    }

    pub fn mining_config(&self) -> MiningConfig {
        MiningConfig { rng_seed: derive_seed(self.seed, Stage::Mining), ..self.mining.clone() }
    }

    pub fn structure_config(&self) -> StructureConfig {
        StructureConfig { epsilon: self.mining.epsilon, patch_side: self.mining.patch_side, ..self.structure.clone() }
    }

    pub fn ransac_config(&self) -> RansacConfig {
        RansacConfig {
            sigma: self.sigma_ransac.unwrap_or_else(|| RansacConfig::sigma_for(self.object_size())),
            min_support: self.min_support,
            max_hypotheses: self.max_hypotheses,
            refinements: 2,
            rng_seed: derive_seed(self.seed, Stage::Detection),
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig { bins: self.bins, object_size: self.object_size() as f64 }
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig { rng_seed: derive_seed(self.seed, Stage::Classification), ..self.session.clone() }
    }
}

/// Wall-clock seconds per stage. Kept out of the report so that reports
/// are reproducible byte for byte.
pub type Timings = BTreeMap<Stage, f64>;

/// Everything computed before classification.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub rescaled: Rescaled,
    pub patches: Vec<RecurrentPatch>,
    /// Patches whose occurrence maps were re-derived.
    pub edge_corrected: Vec<usize>,
    pub graph: PatchGraph,
    pub model: EmbeddedModel,
    pub clusters: Vec<Cluster>,
    pub raw_features: Vec<FeatureVector>,
    pub features: Vec<FeatureVector>,
}

impl Analysis {
    /// Cluster centres in original image coordinates.
    pub fn centers(&self) -> Vec<Point> {
        self.clusters
            .iter()
            .map(|c| {
                let (x, y) = self.rescaled.to_original(c.cx, c.cy);
                Point::new(x, y)
            })
            .collect()
    }

    pub fn session(&self, cfg: &PipelineConfig) -> Result<Session> {
        Session::new(self.features.iter().map(|f| f.to_vec()).collect(), cfg.session_config())
    }
}

fn timed<T>(timings: &mut Timings, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T, StageError> {
    let start = Instant::now();
    let out = f().at(stage);
    *timings.entry(stage).or_default() += start.elapsed().as_secs_f64();
    out
}

/// Run every stage up to and including feature extraction.
pub fn analyze(
    img: &GrayImage,
    bbox: &BoundingBox,
    cfg: &PipelineConfig,
    timings: &mut Timings,
) -> Result<Analysis, StageError> {
    cfg.validate().at(Stage::Load)?;
    let rescaled = timed(timings, Stage::Rescale, || rescale_to_canonical(img, bbox, &cfg.mining))?;
    let mut patches = timed(timings, Stage::Mining, || mine_recurrent_patches(&rescaled.image, &cfg.mining_config()))?;
    let scfg = cfg.structure_config();
    let (edge_corrected, graph, model) = timed(timings, Stage::Structure, || {
        let mut corrected = Vec::new();
        if cfg.edge_correction {
            let fixes: Vec<Option<BinaryMap>> = patches
                .par_iter()
                .map(|p| match response_shape(&p.response, &scfg) {
                    Ok(fit) if fit.eccentricity > scfg.eccentricity_gate => {
                        correct_edge_patch(&p.response, &scfg).map(Some)
                    }
                    Ok(_) | Err(Error::ZeroMass) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<_>>()?;
            for (p, fix) in patches.iter_mut().zip(fixes) {
                if let Some(z) = fix {
                    p.occurrence = z;
                    corrected.push(p.id);
                }
            }
        }
        let full = build_graph(&patches, &scfg)?;
        let graph = prune_graph(&full, patches.len())?;
        let model = embed(&graph)?;
        tracing::info!(patches = patches.len(), edges = full.edges.len(), kept = graph.vertices.len(), "structure");
        Ok((corrected, graph, model))
    })?;
    let clusters = timed(timings, Stage::Detection, || {
        let votes = collect_votes(&model, patches.iter().map(|p| (p.id, &p.occurrence)));
        let clusters = ransac_cluster(&votes, &cfg.ransac_config());
        tracing::info!(votes = votes.len(), clusters = clusters.len(), "detection");
        Ok(clusters)
    })?;
    let (raw_features, features) = timed(timings, Stage::Features, || {
        let fcfg = cfg.feature_config();
        let ctx = FeatureContext {
            graph: &graph,
            responses: patches.iter().map(|p| (p.id, &p.response)).collect(),
            width: rescaled.image.width(),
            height: rescaled.image.height(),
            config: &fcfg,
        };
        let (raw, _) = build_feature_vectors(&clusters, &ctx)?;
        let normalized = normalize(&raw, &cfg.disabled_features);
        Ok((raw, normalized))
    })?;
    Ok(Analysis { rescaled, patches, edge_corrected, graph, model, clusters, raw_features, features })
}

/// Threshold splitting a set of scores into two groups with the largest
/// between-class variance. Used when nobody is available to pick the bias.
pub fn otsu_threshold(scores: &[f64]) -> f64 {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let total: f64 = s.iter().sum();
    let (mut best, mut best_t) = (f64::NEG_INFINITY, s.first().copied().unwrap_or(0.0));
    let mut sum_lo = 0.0;
    for k in 1..s.len() {
        sum_lo += s[k - 1];
        if s[k] == s[k - 1] {
            continue;
        }
        let (n_lo, n_hi) = (k as f64, n - k as f64);
        let (m_lo, m_hi) = (sum_lo / n_lo, (total - sum_lo) / n_hi);
        let between = n_lo * n_hi * (m_lo - m_hi).powi(2);
        if between > best {
            best = between;
            best_t = 0.5 * (s[k - 1] + s[k]);
        }
    }
    best_t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub mined_patches: usize,
    pub edge_corrected: Vec<usize>,
    pub parts: usize,
    pub edges: usize,
    pub components: usize,
    /// Part coordinates in original image pixels relative to the object
    /// centre, by patch id.
    pub coordinates: BTreeMap<usize, [f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    /// "oracle" or "automatic".
    pub mode: String,
    pub rounds: usize,
    pub clicks: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub count: usize,
    pub image: [usize; 2],
    pub bbox: BoundingBox,
    pub scale: f64,
    pub seed: u64,
    pub model: ModelSummary,
    pub clusters: usize,
    pub session: SessionSummary,
    /// Every candidate occurrence with its final label.
    pub detections: Vec<Detection>,
}

impl DetectionReport {
    pub fn positives(&self) -> Vec<Point> {
        self.detections.iter().filter(|d| d.label).map(|d| Point::new(d.x, d.y)).collect()
    }
}

/// Outcome of a full run: report, the finished session and stage timings.
#[derive(Debug, Clone)]
pub struct DetectOutput {
    pub report: DetectionReport,
    pub analysis: Analysis,
    pub session: Session,
    pub timings: Timings,
}

/// Compose the report from an analysis and a finished session.
pub fn build_report(
    analysis: &Analysis,
    session: &Session,
    summary: SessionSummary,
    img: &GrayImage,
    bbox: &BoundingBox,
    cfg: &PipelineConfig,
) -> DetectionReport {
    let Classification { labels, scores, count, .. } = session.classify_all();
    let b = session.state().separator.b;
    let scale = analysis.rescaled.scale;
    let detections = analysis
        .centers()
        .iter()
        .zip(labels.iter().zip(&scores))
        .map(|(p, (&label, &s))| Detection { x: p.x, y: p.y, score: s - b, label })
        .collect();
    DetectionReport {
        count,
        image: [img.width(), img.height()],
        bbox: *bbox,
        scale,
        seed: cfg.seed,
        model: ModelSummary {
            mined_patches: analysis.patches.len(),
            edge_corrected: analysis.edge_corrected.clone(),
            parts: analysis.model.vertices.len(),
            edges: analysis.graph.edges.len(),
            components: analysis.model.n_components,
            coordinates: analysis
                .model
                .vertices
                .iter()
                .map(|v| (v.id, [v.coord.x / scale, v.coord.y / scale]))
                .collect(),
        },
        clusters: analysis.clusters.len(),
        session: summary,
        detections,
    }
}

/// Detect and count the objects resembling the one in `bbox`.
///
/// With ground truth the classifier session is driven by an oracle;
/// without, the bias is set by an Otsu split of the initial scores and no
/// queries are made.
pub fn run_detect(
    img: &GrayImage,
    bbox: &BoundingBox,
    cfg: &PipelineConfig,
    truth: Option<&GroundTruth>,
) -> Result<DetectOutput, StageError> {
    let mut timings = Timings::new();
    let analysis = analyze(img, bbox, cfg, &mut timings)?;
    let start = Instant::now();
    let mut session = analysis.session(cfg).at(Stage::Classification)?;
    let summary = match truth {
        Some(t) => {
            let scale = analysis.rescaled.scale;
            let canonical: Vec<Point> = t.target_points().iter().map(|p| *p * scale).collect();
            let centers: Vec<Point> = analysis.clusters.iter().map(Cluster::center).collect();
            let oracle = Oracle::from_truth(&centers, &canonical, cfg.oracle_tolerance);
            let OracleSummary { rounds, clicks, converged } =
                run_oracle_session(&mut session, &oracle).at(Stage::Classification)?;
            SessionSummary { mode: "oracle".into(), rounds, clicks, converged }
        }
        None => {
            let b = otsu_threshold(&session.scores());
            session.set_bias(b).at(Stage::Classification)?;
            session.finish();
            SessionSummary { mode: "automatic".into(), rounds: 0, clicks: 0, converged: true }
        }
    };
    timings.insert(Stage::Classification, start.elapsed().as_secs_f64());
    let report = build_report(&analysis, &session, summary, img, bbox, cfg);
    Ok(DetectOutput { report, analysis, session, timings })
}

/// Pretty JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestScene {
    pub name: String,
    pub image: PathBuf,
    pub truth: PathBuf,
    /// Example object; defaults to the box around the first target.
    #[serde(default)]
    pub bbox: Option<BoundingBox>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scenes: Vec<ManifestScene>,
}

impl Manifest {
    /// Reads a manifest; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.scenes {
            if s.image.is_relative() {
                s.image = base.join(&s.image);
            }
            if s.truth.is_relative() {
                s.truth = base.join(&s.truth);
            }
        }
        Ok(m)
    }
}

/// Box of one object size around the first target of a scene.
pub fn example_box(truth: &GroundTruth) -> Option<BoundingBox> {
    let t = truth.targets().next()?;
    let s = truth.object_size;
    Some(BoundingBox::new(t.x - s / 2.0, t.y - s / 2.0, s, s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub name: String,
    pub truth_count: usize,
    pub count: Option<usize>,
    pub count_error: Option<i64>,
    pub false_positives: Option<usize>,
    pub false_negatives: Option<usize>,
    pub f1: Option<f64>,
    pub rounds: Option<usize>,
    pub clicks: Option<usize>,
    pub converged: Option<bool>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub scenes: usize,
    pub failures: usize,
    pub mean_abs_error: f64,
    pub std_abs_error: f64,
    pub mean_f1: f64,
    pub mean_clicks: f64,
    pub max_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub summary: BenchmarkSummary,
    pub results: Vec<SceneResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl BenchmarkReport {
    pub fn from_results(results: Vec<SceneResult>) -> BenchmarkReport {
        let ok: Vec<&SceneResult> = results.iter().filter(|r| r.error.is_none()).collect();
        let abs: Vec<f64> = ok.iter().filter_map(|r| r.count_error).map(|e| e.abs() as f64).collect();
        let (mean_abs_error, std_abs_error) = mean_std(&abs);
        let f1: Vec<f64> = ok.iter().filter_map(|r| r.f1).collect();
        let clicks: Vec<f64> = ok.iter().filter_map(|r| r.clicks).map(|c| c as f64).collect();
        BenchmarkReport {
            summary: BenchmarkSummary {
                scenes: results.len(),
                failures: results.len() - ok.len(),
                mean_abs_error,
                std_abs_error,
                mean_f1: mean_std(&f1).0,
                mean_clicks: mean_std(&clicks).0,
                max_seconds: results.iter().map(|r| r.seconds).fold(0.0, f64::max),
            },
            results,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "name,truth_count,count,count_error,false_positives,false_negatives,f1,rounds,clicks,converged,seconds,error\n",
        );
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.results {
            out += &format!(
                "{},{},{},{},{},{},{},{},{},{},{:.3},{}\n",
                r.name,
                r.truth_count,
                opt(r.count.map(|v| v.to_string())),
                opt(r.count_error.map(|v| v.to_string())),
                opt(r.false_positives.map(|v| v.to_string())),
                opt(r.false_negatives.map(|v| v.to_string())),
                opt(r.f1.map(|v| format!("{v:.4}"))),
                opt(r.rounds.map(|v| v.to_string())),
                opt(r.clicks.map(|v| v.to_string())),
                opt(r.converged.map(|v| v.to_string())),
                r.seconds,
                opt(r.error.as_ref().map(|e| e.replace(',', ";"))),
            );
        }
        out
    }
}

/// Run one scene with its ground truth as the oracle.
pub fn run_scene(
    name: &str,
    img: &GrayImage,
    truth: &GroundTruth,
    bbox: Option<BoundingBox>,
    cfg: &PipelineConfig,
) -> SceneResult {
    let start = Instant::now();
    let truth_count = truth.targets().count();
    let mut result = SceneResult {
        name: name.to_string(),
        truth_count,
        count: None,
        count_error: None,
        false_positives: None,
        false_negatives: None,
        f1: None,
        rounds: None,
        clicks: None,
        converged: None,
        seconds: 0.0,
        error: None,
    };
    let Some(bbox) = bbox.or_else(|| example_box(truth)) else {
        result.error = Some("scene has no target to use as example".into());
        return result;
    };
    match run_detect(img, &bbox, cfg, Some(truth)) {
        Ok(out) => {
            let r = &out.report;
            let score = score_detections(&r.positives(), &truth.target_points(), truth.object_size / 2.0);
            result.count = Some(r.count);
            result.count_error = Some(score.count_error);
            result.false_positives = Some(score.false_positives);
            result.false_negatives = Some(score.false_negatives);
            result.f1 = Some(score.f1);
            result.rounds = Some(r.session.rounds);
            result.clicks = Some(r.session.clicks);
            result.converged = Some(r.session.converged);
        }
        Err(e) => result.error = Some(format!("{}: {}", e.stage, e.source.kind())),
    }
    result.seconds = start.elapsed().as_secs_f64();
    result
}

/// Run every manifest scene (in parallel); failures are recorded per scene.
pub fn run_benchmark(manifest: &Manifest, cfg: &PipelineConfig) -> BenchmarkReport {
    let results = manifest
        .scenes
        .par_iter()
        .map(|s| {
            let loaded = load_image(&s.image).and_then(|img| {
                let truth: GroundTruth = serde_json::from_str(&std::fs::read_to_string(&s.truth)?)?;
                Ok((img, truth))
            });
            match loaded {
                Ok((img, truth)) => run_scene(&s.name, &img, &truth, s.bbox, cfg),
                Err(e) => SceneResult {
                    name: s.name.clone(),
                    truth_count: 0,
                    count: None,
                    count_error: None,
                    false_positives: None,
                    false_negatives: None,
                    f1: None,
                    rounds: None,
                    clicks: None,
                    converged: None,
                    seconds: 0.0,
                    error: Some(format!("load: {e}")),
                },
            }
        })
        .collect();
    BenchmarkReport::from_results(results)
}
