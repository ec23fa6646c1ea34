//! Command-line front end: one subcommand per stage plus `run-all`, each
//! reading the previous stage's artifacts from the output directory so a
//! run can be resumed or re-entered anywhere.
//!
//! Exit codes: 0 on success, 1 on a fatal error, 2 when the run finished
//! but had to skip instances.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use scenecomp::bundle::{load_scene, SceneBundle};
use scenecomp::discovery::{CategoryRegistry, TranscriptLabelProvider};
use scenecomp::pipeline::{
    embed_eval_in_report, load_scene_meshes, read_groups, read_views, run_alignment, run_dedup,
    run_discovery, run_evaluation, run_pipeline, run_refinement, run_view_selection, write_eval,
    Ablations, EvalScores, PipelineConfig, ProviderSet, StageFailure, DRAFT_SCENE_FILE, EVAL_FILE,
    FINAL_SCENE_FILE, GROUPS_FILE, VIEWS_FILE,
};
use scenecomp::synth::{
    generate_scene, load_synth_dir, oracle_providers, write_synth_dir, OracleConfig,
    PerturbationSpec, SceneSpec, SynthDir,
};

#[derive(Parser)]
#[command(
    name = "scenecomp",
    version,
    about = "Assembles compositional 3D scenes from per-frame depth, masks, and camera poses"
)]
struct Cli {
    /// More log detail on stderr (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic capture with ground truth and oracle transcripts.
    Synth(SynthArgs),
    /// Stage 1: discover the categories present in the capture.
    Discover(StageArgs),
    /// Stage 2: merge instance tracks that show the same physical object.
    Dedup(DedupArgs),
    /// Stage 3: pick the most informative view per instance.
    SelectViews(SelectViewsArgs),
    /// Stages 3-4: generate assets at the selected views and align poses.
    Align(AlignArgs),
    /// Stage 5: infer support relations and settle the scene.
    Refine(RefineArgs),
    /// Score a composed scene against the capture's ground truth.
    Evaluate(EvaluateArgs),
    /// Run every stage in order and write the report.
    RunAll(RunAllArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Scene directory produced by `synth` (capture + ground truth).
    #[arg(long)]
    input: PathBuf,
    /// Directory stage artifacts are written to and read back from.
    #[arg(long)]
    out: PathBuf,
    /// Config file of `key value` lines overriding the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl StageArgs {
    fn pipeline_config(&self) -> scenecomp::Result<PipelineConfig> {
        match &self.config {
            Some(path) => PipelineConfig::from_file(path),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Directory the scene is written to.
    #[arg(long)]
    out: PathBuf,
    /// Number of objects to place.
    #[arg(long, default_value_t = 4)]
    objects: usize,
    /// Categories to cycle through, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "box,can,ball,block")]
    categories: Vec<String>,
    /// Layout and appearance seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Camera orbit length in frames.
    #[arg(long, default_value_t = 12)]
    frames: usize,
    /// Rendered image width in pixels.
    #[arg(long, default_value_t = 128)]
    width: u32,
    /// Rendered image height in pixels.
    #[arg(long, default_value_t = 128)]
    height: u32,
    /// Stack every other object onto a previous one where it fits.
    #[arg(long)]
    stacking: bool,
    /// Number of instances whose tracks are split in two (tests dedup).
    #[arg(long, default_value_t = 0)]
    fragments: usize,
}

#[derive(Args)]
struct DedupArgs {
    #[command(flatten)]
    io: StageArgs,
    /// Keep every track as its own instance.
    #[arg(long)]
    no_dedup: bool,
}

#[derive(Args)]
struct SelectViewsArgs {
    #[command(flatten)]
    io: StageArgs,
    /// Named stage substitution (`max-pixel-view` applies here).
    #[arg(long, value_name = "NAME")]
    ablate: Vec<String>,
}

/// Knobs of the built-in oracle providers: how far initial poses start from
/// the truth and how degraded the correspondences are.
#[derive(Args)]
struct OracleArgs {
    /// Scale factor baked into initial asset poses (or its reciprocal).
    #[arg(long, default_value_t = 1.0)]
    perturb_scale: f64,
    /// Rotation baked into initial asset poses, degrees.
    #[arg(long, default_value_t = 0.0)]
    perturb_rotation: f64,
    /// Translation offset baked into initial asset poses, meters.
    #[arg(long, default_value_t = 0.0)]
    perturb_translation: f64,
    /// Gaussian pixel noise on oracle correspondences.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Fraction of oracle correspondences replaced by outliers.
    #[arg(long, default_value_t = 0.0)]
    outlier_fraction: f64,
    /// Systematic per-instance pixel drift of oracle correspondences.
    #[arg(long, default_value_t = 0.0)]
    drift_pixels: f64,
    /// Seed of oracle perturbation directions and noise.
    #[arg(long, default_value_t = 0)]
    oracle_seed: u64,
}

impl OracleArgs {
    fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            perturbation: PerturbationSpec {
                scale_factor: self.perturb_scale,
                rotation: self.perturb_rotation.to_radians(),
                translation: self.perturb_translation,
            },
            noise_sigma: self.noise_sigma,
            outlier_fraction: self.outlier_fraction,
            drift_pixels: self.drift_pixels,
            seed: self.oracle_seed,
        }
    }
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    io: StageArgs,
    #[command(flatten)]
    oracle: OracleArgs,
    /// Worker threads for per-instance work (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Keep the initial transforms unrefined.
    #[arg(long)]
    no_align: bool,
    /// Named stage substitution (`icp-align` applies here).
    #[arg(long, value_name = "NAME")]
    ablate: Vec<String>,
}

#[derive(Args)]
struct RefineArgs {
    #[command(flatten)]
    io: StageArgs,
    /// Ship the draft scene without pose corrections.
    #[arg(long)]
    no_refine: bool,
    /// Named stage substitution (`sg-only-refine` applies here).
    #[arg(long, value_name = "NAME")]
    ablate: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    io: StageArgs,
    /// Override the config's evaluation sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunAllArgs {
    #[command(flatten)]
    io: StageArgs,
    #[command(flatten)]
    oracle: OracleArgs,
    /// Worker threads for per-instance work (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Override the config's evaluation sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep every track as its own instance.
    #[arg(long)]
    no_dedup: bool,
    /// Keep the initial transforms unrefined.
    #[arg(long)]
    no_align: bool,
    /// Ship the draft scene without pose corrections.
    #[arg(long)]
    no_refine: bool,
    /// Named stage substitution: max-pixel-view, icp-align, or
    /// sg-only-refine. Repeatable.
    #[arg(long, value_name = "NAME")]
    ablate: Vec<String>,
}

fn ablations_from(
    no_dedup: bool,
    no_align: bool,
    no_refine: bool,
    named: &[String],
) -> scenecomp::Result<Ablations> {
    let mut ablations = Ablations { no_dedup, no_align, no_refine, ..Ablations::default() };
    for name in named {
        ablations.set_named(name)?;
    }
    Ok(ablations)
}

/// Runs `f` on a fixed-size worker pool when one was requested. Artifacts
/// are identical either way; the pool only bounds parallelism.
fn with_pool<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> scenecomp::Result<T> + Send,
) -> scenecomp::Result<T> {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| scenecomp::Error::Config(format!("building worker pool: {e}")))?
            .install(f),
    }
}

fn report_failures(failures: &[StageFailure]) {
    for f in failures {
        warn!("instance {} dropped at {}: {}", f.instance, f.stage, f.detail);
    }
}

/// What a subcommand reports back to `main`: whether instances were lost.
struct RunStatus {
    partial: bool,
}

impl RunStatus {
    fn complete() -> Self {
        Self { partial: false }
    }
}

fn cmd_synth(args: &SynthArgs) -> scenecomp::Result<RunStatus> {
    let spec = SceneSpec {
        objects: args.objects,
        categories: args.categories.clone(),
        seed: args.seed,
        frames: args.frames,
        width: args.width,
        height: args.height,
        stacking: args.stacking,
        fragments: args.fragments,
    };
    let synth = generate_scene(&spec)?;
    write_synth_dir(&synth, &args.out)?;
    info!(
        "wrote {} objects over {} frames to {}",
        synth.scene.objects.len(),
        synth.bundle.frames.len(),
        args.out.display()
    );
    Ok(RunStatus::complete())
}

fn load_capture(input: &Path) -> scenecomp::Result<SynthDir> {
    let dir = load_synth_dir(input)?;
    info!(
        "loaded {} frames, {} ground-truth objects from {}",
        dir.bundle.frames.len(),
        dir.gt.objects.len(),
        input.display()
    );
    Ok(dir)
}

fn cmd_discover(args: &StageArgs) -> scenecomp::Result<RunStatus> {
    let config = args.pipeline_config()?;
    let dir = load_capture(&args.input)?;
    let labels = TranscriptLabelProvider::from_file(&args.input.join("labels.txt"))?;
    let outcome = run_discovery(&dir.bundle, &labels, &config, &args.out)?;
    info!("discovered {} categories", outcome.registry.len());
    Ok(RunStatus::complete())
}

fn cmd_dedup(args: &DedupArgs) -> scenecomp::Result<RunStatus> {
    let config = args.io.pipeline_config()?;
    let ablations = ablations_from(args.no_dedup, false, false, &[])?;
    let dir = load_capture(&args.io.input)?;
    let outcome = run_dedup(&dir.bundle, &config, ablations, &args.io.out)?;
    info!("{} instance groups", outcome.groups.len());
    Ok(RunStatus::complete())
}

fn groups_for(bundle: &SceneBundle, out: &Path) -> scenecomp::Result<Vec<scenecomp::dedup::InstanceGroup>> {
    read_groups(&out.join(GROUPS_FILE), bundle)
}

fn cmd_select_views(args: &SelectViewsArgs) -> scenecomp::Result<RunStatus> {
    let _ = args.io.pipeline_config()?;
    let ablations = ablations_from(false, false, false, &args.ablate)?;
    let dir = load_capture(&args.io.input)?;
    let groups = groups_for(&dir.bundle, &args.io.out)?;
    let (views, failures) = run_view_selection(&dir.bundle, &groups, ablations, &args.io.out)?;
    info!("selected views for {} of {} groups", views.len(), groups.len());
    report_failures(&failures);
    Ok(RunStatus { partial: !failures.is_empty() })
}

fn cmd_align(args: &AlignArgs) -> scenecomp::Result<RunStatus> {
    let config = args.io.pipeline_config()?;
    let ablations = ablations_from(false, args.no_align, false, &args.ablate)?;
    let dir = load_capture(&args.io.input)?;
    let oracles = oracle_providers(&dir.gt, &dir.gt_meshes, &args.oracle.oracle_config())?;
    let providers = ProviderSet {
        labels: &oracles.labels,
        assets: &oracles.assets,
        matches: &oracles.matches,
        relations: &oracles.relations,
    };
    let groups = groups_for(&dir.bundle, &args.io.out)?;
    let views = read_views(&args.io.out.join(VIEWS_FILE))?;
    let (draft, _, failures) = with_pool(args.workers, || {
        run_alignment(&dir.bundle, &groups, &views, &providers, &config, ablations, &args.io.out)
    })?;
    info!("placed {} objects in the draft scene", draft.objects.len());
    report_failures(&failures);
    Ok(RunStatus { partial: !failures.is_empty() })
}

fn cmd_refine(args: &RefineArgs) -> scenecomp::Result<RunStatus> {
    let _ = args.io.pipeline_config()?;
    let ablations = ablations_from(false, false, args.no_refine, &args.ablate)?;
    let dir = load_capture(&args.io.input)?;
    let oracles = oracle_providers(&dir.gt, &dir.gt_meshes, &OracleConfig::default())?;
    let draft = load_scene(&args.io.out.join(DRAFT_SCENE_FILE))?;
    let meshes = load_scene_meshes(&draft, &args.io.out)?;
    let outcome =
        run_refinement(&dir.bundle, &draft, &meshes, &oracles.relations, ablations, &args.io.out)?;
    for w in &outcome.warnings {
        warn!("{w}");
    }
    info!("settled {} objects", outcome.scene.objects.len());
    Ok(RunStatus::complete())
}

fn print_scores(scores: &EvalScores) {
    println!("chamfer {}", scores.geometry.chamfer);
    println!("f_score {}", scores.geometry.f_score);
    println!("normal_consistency {}", scores.geometry.normal_consistency);
    println!("category_recall {}", scores.categories.recall);
    println!("instance_f1 {}", scores.categories.f1);
}

fn evaluate_against_gt(
    dir: &SynthDir,
    out: &Path,
    config: &PipelineConfig,
) -> scenecomp::Result<EvalScores> {
    let pred = load_scene(&out.join(FINAL_SCENE_FILE))?;
    let pred_meshes = load_scene_meshes(&pred, out)?;
    let scores = run_evaluation(
        &pred,
        &pred_meshes,
        &dir.gt,
        &dir.gt_meshes,
        config,
        &CategoryRegistry::new(),
    )?;
    write_eval(&scores, &out.join(EVAL_FILE))?;
    Ok(scores)
}

fn cmd_evaluate(args: &EvaluateArgs) -> scenecomp::Result<RunStatus> {
    let mut config = args.io.pipeline_config()?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let dir = load_capture(&args.io.input)?;
    let scores = evaluate_against_gt(&dir, &args.io.out, &config)?;
    print_scores(&scores);
    Ok(RunStatus::complete())
}

fn cmd_run_all(args: &RunAllArgs) -> scenecomp::Result<RunStatus> {
    let mut config = args.io.pipeline_config()?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let ablations = ablations_from(args.no_dedup, args.no_align, args.no_refine, &args.ablate)?;
    let dir = load_capture(&args.io.input)?;
    let oracles = oracle_providers(&dir.gt, &dir.gt_meshes, &args.oracle.oracle_config())?;
    let providers = ProviderSet {
        labels: &oracles.labels,
        assets: &oracles.assets,
        matches: &oracles.matches,
        relations: &oracles.relations,
    };
    let outcome = with_pool(args.workers, || {
        run_pipeline(&dir.bundle, &providers, &config, ablations, &args.io.out)
    })?;
    for w in &outcome.warnings {
        warn!("{w}");
    }
    report_failures(&outcome.failures);
    info!(
        "assembled {} objects ({} categories)",
        outcome.scene.objects.len(),
        outcome.registry.len()
    );

    let scores = evaluate_against_gt(&dir, &args.io.out, &config)?;
    embed_eval_in_report(&scores, &args.io.out)?;
    print_scores(&scores);
    Ok(RunStatus { partial: outcome.is_partial() })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Discover(args) => cmd_discover(args),
        Command::Dedup(args) => cmd_dedup(args),
        Command::SelectViews(args) => cmd_select_views(args),
        Command::Align(args) => cmd_align(args),
        Command::Refine(args) => cmd_refine(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::RunAll(args) => cmd_run_all(args),
    };
    match result {
        Ok(RunStatus { partial: false }) => ExitCode::SUCCESS,
        Ok(RunStatus { partial: true }) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
