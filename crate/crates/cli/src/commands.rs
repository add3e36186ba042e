use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use recurdet::imaging::{load_image, save_png};
use recurdet::mining::BoundingBox;
use recurdet::pipeline::{run_benchmark, run_detect, to_json_pretty, Manifest, ManifestScene, PipelineConfig};
use recurdet::synth::{generate, GroundTruth, Preset, SceneSpec};
use recurdet::{Stage, StageError};

use crate::service::{serve, ServiceConfig};

/// Exit status when a pipeline stage fails.
pub const STAGE_FAILURE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "recurdet", version, about = "Detect and count repeating objects from one example")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect and count the objects resembling the boxed example.
    Detect(DetectArgs),
    /// Run every scene of a manifest with its ground truth as the oracle.
    Bench(BenchArgs),
    /// Start the HTTP labelling service.
    Serve(ServeArgs),
    /// Render synthetic scenes with ground truth and a manifest.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Example object as x,y,w,h in image pixels.
    #[arg(long)]
    pub bbox: String,
    /// Pipeline configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ground truth JSON; answers the classifier queries when given.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Report path; stdout when absent. Stage timings go to a
    /// `.timings.json` file next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for bench.csv and bench.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Write a JSON snapshot of each session here after every change.
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Scene preset: desk, sparse, distractors, occlusion or fragments.
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    /// Scene specification (JSON); replaces the preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub scenes: u64,
    /// Seed of the first scene; scene k uses seed + k.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Detect(a) => detect(&a),
        Command::Bench(a) => bench(&a),
        Command::Serve(a) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve((a.host, a.port).into(), ServiceConfig { state_dir: a.state_dir }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate(a) => generate_scenes(&a),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> recurdet::Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_stage_error(e: &StageError) -> ExitCode {
    let body = serde_json::json!({ "stage": e.stage, "error": e.source.kind(), "message": e.to_string() });
    eprintln!("{body}");
    ExitCode::from(STAGE_FAILURE)
}

fn write_or_print(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn detect(a: &DetectArgs) -> anyhow::Result<ExitCode> {
    let load = || -> recurdet::Result<_> {
        let cfg = load_config(a.config.as_deref(), a.seed)?;
        let img = load_image(&a.image)?;
        let bbox = BoundingBox::parse(&a.bbox)?;
        let truth: Option<GroundTruth> = match &a.oracle {
            Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
            None => None,
        };
        Ok((cfg, img, bbox, truth))
    };
    let (cfg, img, bbox, truth) = match load() {
        Ok(v) => v,
        Err(e) => return Ok(report_stage_error(&StageError::new(Stage::Load, e))),
    };
    let out = match run_detect(&img, &bbox, &cfg, truth.as_ref()) {
        Ok(out) => out,
        Err(e) => return Ok(report_stage_error(&e)),
    };
    write_or_print(a.out.as_deref(), &to_json_pretty(&out.report))?;
    match &a.out {
        Some(p) => std::fs::write(p.with_extension("timings.json"), to_json_pretty(&out.timings))?,
        None => tracing::info!(timings = ?out.timings, "stage timings"),
    }
    tracing::info!(count = out.report.count, clusters = out.report.clusters, "done");
    Ok(ExitCode::SUCCESS)
}

pub fn bench(a: &BenchArgs) -> anyhow::Result<ExitCode> {
    let cfg = match load_config(a.config.as_deref(), a.seed) {
        Ok(c) => c,
        Err(e) => return Ok(report_stage_error(&StageError::new(Stage::Load, e))),
    };
    let manifest = Manifest::load(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let report = run_benchmark(&manifest, &cfg);
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("bench.csv"), report.to_csv())?;
    std::fs::write(a.out.join("bench.json"), to_json_pretty(&report))?;
    let s = &report.summary;
    println!(
        "scenes {} failures {} mean |error| {:.3} std {:.3} mean F1 {:.4} mean clicks {:.1} max seconds {:.1}",
        s.scenes, s.failures, s.mean_abs_error, s.std_abs_error, s.mean_f1, s.mean_clicks, s.max_seconds
    );
    Ok(if s.failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(STAGE_FAILURE) })
}

pub fn generate_scenes(a: &GenerateArgs) -> anyhow::Result<ExitCode> {
    let base: Option<SceneSpec> = match &a.spec {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let name = if a.spec.is_some() { "scene" } else { a.preset.name() };
    std::fs::create_dir_all(&a.out)?;
    let mut manifest = Manifest::default();
    for k in 0..a.scenes {
        let seed = a.seed + k;
        let spec = match &base {
            Some(s) => SceneSpec { rng_seed: seed, ..s.clone() },
            None => a.preset.spec(seed),
        };
        let (img, truth) = generate(&spec)?;
        let stem = format!("{name}-{seed:03}");
        save_png(&img, a.out.join(format!("{stem}.png")))?;
        std::fs::write(a.out.join(format!("{stem}.truth.json")), to_json_pretty(&truth))?;
        manifest.scenes.push(ManifestScene {
            name: stem.clone(),
            image: format!("{stem}.png").into(),
            truth: format!("{stem}.truth.json").into(),
            bbox: None,
        });
    }
    std::fs::write(a.out.join("manifest.json"), to_json_pretty(&manifest))?;
    println!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(ExitCode::SUCCESS)
}
