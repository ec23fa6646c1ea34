//! Staged orchestration of the full cascade.
//!
//! Each stage writes its result to the output directory in a plain text
//! format, so a run can stop after any stage and a later invocation can pick
//! up from the artifacts alone: `registry.txt` (discovery), `groups.txt`
//! (deduplication), `views.txt` (view selection), `assets/` + `poses/` +
//! `draft_scene.txt` (asset generation and alignment), and `scene.txt`
//! (refinement) plus `report.txt`.
//!
//! Instances are processed independently: one instance failing view
//! selection or alignment is recorded and skipped, and the run completes as
//! a partial success. Alignment fans out across instances with rayon, but
//! every artifact is assembled in instance order from content-seeded
//! computations, so outputs are byte-identical no matter how many workers
//! run — which is also why neither the report nor any artifact mentions a
//! worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::align::{
    iterative_align, AlignmentConfig, CorrespondenceProvider, NearestNeighborProvider,
};
use crate::bundle::{
    fmt_f64, load_mesh, safe_join, save_mesh, save_scene, split_token, PlacedObject,
    SceneBundle, SceneDescription,
};
use crate::dedup::{build_tracks, merge_instances, DedupConfig, DedupOutcome, InstanceGroup};
use crate::discovery::{discover_categories, CategoryRegistry, DiscoveryOutcome, LabelProvider};
use crate::geom::{Mask, SimilarityTransform, TriMesh};
use crate::metrics::{
    category_scores, scene_geometry_score_with, CategoryScores, GeometryScore,
};
use crate::refine::{refine_scene_with, RefineOptions, RefineOutcome, RelationProvider};
use crate::viewsel::{generate_asset, select_optimal_view, AssetProvider, ViewCriterion};
use crate::{Error, FrameId, InstanceId, Result};

pub const REGISTRY_FILE: &str = "registry.txt";
pub const GROUPS_FILE: &str = "groups.txt";
pub const VIEWS_FILE: &str = "views.txt";
pub const DRAFT_SCENE_FILE: &str = "draft_scene.txt";
pub const FINAL_SCENE_FILE: &str = "scene.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const EVAL_FILE: &str = "eval.txt";
pub const ASSETS_DIR: &str = "assets";
pub const POSES_DIR: &str = "poses";

/// Resolved knobs for every stage. The file format is one `key value` pair
/// per line (`#` starts a comment); unknown keys are errors so typos cannot
/// silently fall back to defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Frames visited during category discovery (farthest-point sample).
    pub discovery_frames: usize,
    /// Deduplication: voxel edge for cloud aggregation, in meters.
    pub voxel_size: f64,
    /// Deduplication: per-track point budget after voxelization.
    pub max_points: usize,
    /// Deduplication: overlap ratio at which two tracks merge.
    pub merge_threshold: f64,
    /// Deduplication: overlap tolerance as a multiple of the voxel size.
    pub tau_factor: f64,
    /// Alignment: observations on each side of the anchor used for matching
    /// and scoring.
    pub temporal_radius: usize,
    /// Alignment: correction iterations after the initializer.
    pub align_iterations: usize,
    /// Alignment: matches below this confidence are dropped.
    pub confidence_floor: f64,
    /// Alignment: residual multiple of the median beyond which a pair is an
    /// outlier.
    pub outlier_factor: f64,
    /// Evaluation: distance threshold of the surface f-score, in meters.
    pub f_score_threshold: f64,
    /// Evaluation: surface samples per scene.
    pub eval_samples: usize,
    /// Seed forwarded to evaluation sampling.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            discovery_frames: 20,
            voxel_size: 0.01,
            max_points: 50_000,
            merge_threshold: 0.5,
            tau_factor: 3.0,
            temporal_radius: 2,
            align_iterations: 5,
            confidence_floor: 0.5,
            outlier_factor: 3.0,
            f_score_threshold: 0.05,
            eval_samples: 10_000,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.discovery_frames == 0 {
            return Err(Error::Config("discovery_frames must be at least 1".into()));
        }
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::Config(format!("voxel_size must be positive, got {}", self.voxel_size)));
        }
        if self.max_points == 0 {
            return Err(Error::Config("max_points must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.merge_threshold) {
            return Err(Error::Config(format!(
                "merge_threshold must be in [0, 1], got {}",
                self.merge_threshold
            )));
        }
        if !(self.tau_factor.is_finite() && self.tau_factor > 0.0) {
            return Err(Error::Config(format!("tau_factor must be positive, got {}", self.tau_factor)));
        }
        if self.align_iterations == 0 {
            return Err(Error::Config("align_iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(Error::Config(format!(
                "confidence_floor must be in [0, 1], got {}",
                self.confidence_floor
            )));
        }
        if !(self.outlier_factor.is_finite() && self.outlier_factor > 0.0) {
            return Err(Error::Config(format!(
                "outlier_factor must be positive, got {}",
                self.outlier_factor
            )));
        }
        if !(self.f_score_threshold.is_finite() && self.f_score_threshold > 0.0) {
            return Err(Error::Config(format!(
                "f_score_threshold must be positive, got {}",
                self.f_score_threshold
            )));
        }
        if self.eval_samples < 1000 {
            return Err(Error::Config("eval_samples must be at least 1000".into()));
        }
        Ok(())
    }

    /// Sets one knob from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parsed<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "discovery_frames" => self.discovery_frames = parsed(key, value)?,
            "voxel_size" => self.voxel_size = parsed(key, value)?,
            "max_points" => self.max_points = parsed(key, value)?,
            "merge_threshold" => self.merge_threshold = parsed(key, value)?,
            "tau_factor" => self.tau_factor = parsed(key, value)?,
            "temporal_radius" => self.temporal_radius = parsed(key, value)?,
            "align_iterations" => self.align_iterations = parsed(key, value)?,
            "confidence_floor" => self.confidence_floor = parsed(key, value)?,
            "outlier_factor" => self.outlier_factor = parsed(key, value)?,
            "f_score_threshold" => self.f_score_threshold = parsed(key, value)?,
            "eval_samples" => self.eval_samples = parsed(key, value)?,
            "seed" => self.seed = parsed(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Defaults overridden by the `key value` lines of `path`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut config = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = split_token(line);
            config
                .set(key, value)
                .map_err(|e| Error::parse(path, no + 1, e.to_string()))?;
        }
        config.validate()?;
        Ok(config)
    }

    /// All knobs as `key value` lines, in a fixed order. Parsing this text
    /// back recovers the exact config; the report embeds it verbatim.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "align_iterations {}", self.align_iterations);
        let _ = writeln!(out, "confidence_floor {}", fmt_f64(self.confidence_floor));
        let _ = writeln!(out, "discovery_frames {}", self.discovery_frames);
        let _ = writeln!(out, "eval_samples {}", self.eval_samples);
        let _ = writeln!(out, "f_score_threshold {}", fmt_f64(self.f_score_threshold));
        let _ = writeln!(out, "max_points {}", self.max_points);
        let _ = writeln!(out, "merge_threshold {}", fmt_f64(self.merge_threshold));
        let _ = writeln!(out, "outlier_factor {}", fmt_f64(self.outlier_factor));
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "tau_factor {}", fmt_f64(self.tau_factor));
        let _ = writeln!(out, "temporal_radius {}", self.temporal_radius);
        let _ = writeln!(out, "voxel_size {}", fmt_f64(self.voxel_size));
        out
    }

    pub fn dedup(&self) -> DedupConfig {
        DedupConfig {
            voxel_size: self.voxel_size,
            max_points: self.max_points,
            merge_threshold: self.merge_threshold,
            tau_factor: self.tau_factor,
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            temporal_radius: self.temporal_radius,
            iterations: self.align_iterations,
            confidence_floor: self.confidence_floor,
            outlier_factor: self.outlier_factor,
        }
    }
}

/// Stage substitutions for controlled comparisons. `no_*` switches skip a
/// stage outright; the others swap in a degraded rule at the same place in
/// the cascade.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Keep every track as its own instance.
    pub no_dedup: bool,
    /// Use the initial transforms unrefined.
    pub no_align: bool,
    /// Ship the draft scene without pose corrections.
    pub no_refine: bool,
    /// Pick views by raw pixel count instead of visible surface area.
    pub max_pixel_view: bool,
    /// Match by nearest neighbor in 3D instead of the learned matcher.
    pub icp_align: bool,
    /// Refine with relation-driven snapping only, skipping the gravity
    /// correction.
    pub sg_only_refine: bool,
}

impl Ablations {
    /// Enables one substitution ablation by its flag name.
    pub fn set_named(&mut self, name: &str) -> Result<()> {
        match name {
            "max-pixel-view" => self.max_pixel_view = true,
            "icp-align" => self.icp_align = true,
            "sg-only-refine" => self.sg_only_refine = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{other}' (expected max-pixel-view, icp-align, \
                     or sg-only-refine)"
                )))
            }
        }
        Ok(())
    }

    /// Active switches as a stable comma list, or `none`.
    pub fn summary(&self) -> String {
        let named = [
            (self.no_dedup, "no-dedup"),
            (self.no_align, "no-align"),
            (self.no_refine, "no-refine"),
            (self.max_pixel_view, "max-pixel-view"),
            (self.icp_align, "icp-align"),
            (self.sg_only_refine, "sg-only-refine"),
        ];
        let active: Vec<&str> =
            named.iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect();
        if active.is_empty() {
            "none".to_string()
        } else {
            active.join(",")
        }
    }
}

/// The four model integrations a run needs, as trait objects. Alignment
/// fans out across instances and the whole set crosses into the worker
/// pool, so every provider must be `Sync`.
pub struct ProviderSet<'a> {
    pub labels: &'a (dyn LabelProvider + Sync),
    pub assets: &'a (dyn AssetProvider + Sync),
    pub matches: &'a (dyn CorrespondenceProvider + Sync),
    pub relations: &'a (dyn RelationProvider + Sync),
}

/// One instance that could not be carried through a stage. The run
/// continues without it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageFailure {
    pub instance: InstanceId,
    pub stage: &'static str,
    pub detail: String,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Stage 1: category discovery. Writes `registry.txt` (one canonical
/// category per line, in discovery order).
pub fn run_discovery(
    bundle: &SceneBundle,
    labels: &dyn LabelProvider,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<DiscoveryOutcome> {
    let outcome =
        discover_categories(bundle, labels, config.discovery_frames, CategoryRegistry::new())?;
    let mut text = String::from("# discovered categories, in discovery order\n");
    for category in outcome.registry.entries() {
        let _ = writeln!(text, "{category}");
    }
    write_text(&out_dir.join(REGISTRY_FILE), &text)?;
    Ok(outcome)
}

/// Stage 2: spatial deduplication of instance tracks. With `no_dedup` every
/// track stays its own group. Writes `groups.txt`.
pub fn run_dedup(
    bundle: &SceneBundle,
    config: &PipelineConfig,
    ablations: Ablations,
    out_dir: &Path,
) -> Result<DedupOutcome> {
    let tracks = build_tracks(bundle);
    let outcome = if ablations.no_dedup {
        DedupOutcome {
            groups: tracks
                .iter()
                .map(|t| InstanceGroup {
                    id: t.id,
                    category: t.category.clone(),
                    members: vec![t.id],
                    observations: t.observations.clone(),
                })
                .collect(),
            assignment: tracks.iter().map(|t| (t.id, t.id)).collect(),
            warnings: Vec::new(),
        }
    } else {
        merge_instances(&tracks, bundle, &config.dedup())?
    };
    write_groups(&outcome.groups, &out_dir.join(GROUPS_FILE))?;
    Ok(outcome)
}

pub fn write_groups(groups: &[InstanceGroup], path: &Path) -> Result<()> {
    let mut text = String::from("groups_version 1\n");
    for g in groups {
        let _ = writeln!(text, "group {}", g.id);
        let _ = writeln!(text, "category {}", g.category);
        text.push_str("members");
        for m in &g.members {
            let _ = write!(text, " {m}");
        }
        text.push_str("\nend_group\n");
    }
    write_text(path, &text)
}

/// Reads `groups.txt` back, reassembling each group's per-frame mask unions
/// from the bundle's tracks.
pub fn read_groups(path: &Path, bundle: &SceneBundle) -> Result<Vec<InstanceGroup>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let tracks = build_tracks(bundle);
    let by_id: BTreeMap<u32, &crate::dedup::InstanceTrack> =
        tracks.iter().map(|t| (t.id, t)).collect();

    struct Partial {
        id: InstanceId,
        category: Option<String>,
        members: Option<Vec<u32>>,
    }
    let mut groups = Vec::new();
    let mut current: Option<Partial> = None;
    let mut version_seen = false;
    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = split_token(line);
        match (key, &mut current) {
            ("groups_version", None) => {
                if rest != "1" {
                    return Err(Error::parse(path, line_no, format!("unsupported version {rest}")));
                }
                version_seen = true;
            }
            ("group", None) => {
                let id = rest
                    .parse()
                    .map_err(|_| Error::parse(path, line_no, format!("bad group id '{rest}'")))?;
                current = Some(Partial { id, category: None, members: None });
            }
            ("category", Some(p)) => {
                if rest.is_empty() {
                    return Err(Error::parse(path, line_no, "empty category"));
                }
                p.category = Some(rest.to_string());
            }
            ("members", Some(p)) => {
                let mut members = Vec::new();
                for tok in rest.split_whitespace() {
                    members.push(tok.parse().map_err(|_| {
                        Error::parse(path, line_no, format!("bad track id '{tok}'"))
                    })?);
                }
                if members.is_empty() {
                    return Err(Error::parse(path, line_no, "group without members"));
                }
                p.members = Some(members);
            }
            ("end_group", Some(_)) => {
                let p = current.take().expect("matched Some");
                let category = p
                    .category
                    .ok_or_else(|| Error::parse(path, line_no, "group without category"))?;
                let members = p
                    .members
                    .ok_or_else(|| Error::parse(path, line_no, "group without members"))?;
                let mut by_frame: BTreeMap<FrameId, Mask> = BTreeMap::new();
                for m in &members {
                    let track = by_id.get(m).ok_or_else(|| Error::UnknownReference {
                        kind: "track",
                        name: m.to_string(),
                    })?;
                    for (fid, mask) in &track.observations {
                        match by_frame.entry(*fid) {
                            std::collections::btree_map::Entry::Occupied(mut e) => {
                                e.get_mut().union_with(mask)?;
                            }
                            std::collections::btree_map::Entry::Vacant(e) => {
                                e.insert(mask.clone());
                            }
                        }
                    }
                }
                groups.push(InstanceGroup {
                    id: p.id,
                    category,
                    members,
                    observations: by_frame.into_iter().collect(),
                });
            }
            (other, _) => {
                return Err(Error::parse(path, line_no, format!("unexpected line '{other}'")));
            }
        }
    }
    if !version_seen {
        return Err(Error::file_format(path, "missing groups_version header"));
    }
    if current.is_some() {
        return Err(Error::file_format(path, "unterminated group"));
    }
    Ok(groups)
}

/// Stage 3a: optimal-view selection per group. Groups without any viable
/// view are recorded as failures and dropped from the rest of the run.
/// Writes `views.txt`.
pub fn run_view_selection(
    bundle: &SceneBundle,
    groups: &[InstanceGroup],
    ablations: Ablations,
    out_dir: &Path,
) -> Result<(BTreeMap<InstanceId, FrameId>, Vec<StageFailure>)> {
    let criterion = if ablations.max_pixel_view {
        ViewCriterion::PixelArea
    } else {
        ViewCriterion::SurfaceArea
    };
    let mut views = BTreeMap::new();
    let mut failures = Vec::new();
    for group in groups {
        match select_optimal_view(group, bundle, criterion) {
            Ok(frame) => {
                views.insert(group.id, frame);
            }
            Err(e) => failures.push(StageFailure {
                instance: group.id,
                stage: "select-views",
                detail: e.to_string(),
            }),
        }
    }
    write_views(&views, &out_dir.join(VIEWS_FILE))?;
    Ok((views, failures))
}

pub fn write_views(views: &BTreeMap<InstanceId, FrameId>, path: &Path) -> Result<()> {
    let mut text = String::from("views_version 1\n");
    for (instance, frame) in views {
        let _ = writeln!(text, "view {instance} {frame}");
    }
    write_text(path, &text)
}

pub fn read_views(path: &Path) -> Result<BTreeMap<InstanceId, FrameId>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut views = BTreeMap::new();
    let mut version_seen = false;
    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = split_token(line);
        match key {
            "views_version" => {
                if rest != "1" {
                    return Err(Error::parse(path, line_no, format!("unsupported version {rest}")));
                }
                version_seen = true;
            }
            "view" => {
                let (id_tok, frame_tok) = split_token(rest);
                let instance: InstanceId = id_tok.parse().map_err(|_| {
                    Error::parse(path, line_no, format!("bad instance id '{id_tok}'"))
                })?;
                let frame: FrameId = frame_tok.trim().parse().map_err(|_| {
                    Error::parse(path, line_no, format!("bad frame id '{frame_tok}'"))
                })?;
                views.insert(instance, frame);
            }
            other => {
                return Err(Error::parse(path, line_no, format!("unexpected line '{other}'")));
            }
        }
    }
    if !version_seen {
        return Err(Error::file_format(path, "missing views_version header"));
    }
    Ok(views)
}

/// Everything alignment produced for one instance.
struct AlignedInstance {
    mesh: TriMesh,
    initial: SimilarityTransform,
    pose: SimilarityTransform,
    best_iteration: usize,
    mean_iou: Option<f64>,
}

fn mesh_file(instance: InstanceId) -> String {
    format!("{ASSETS_DIR}/{instance:03}.obj")
}

/// Stage 3b + 4: asset generation at each group's selected view, then
/// iterative pose alignment (skipped under `no_align`; nearest-neighbor
/// matching under `icp_align`). Instances run in parallel; artifacts are
/// written serially in id order. Produces `assets/`, `poses/`, and the
/// draft scene.
pub fn run_alignment(
    bundle: &SceneBundle,
    groups: &[InstanceGroup],
    views: &BTreeMap<InstanceId, FrameId>,
    providers: &ProviderSet,
    config: &PipelineConfig,
    ablations: Ablations,
    out_dir: &Path,
) -> Result<(SceneDescription, BTreeMap<InstanceId, TriMesh>, Vec<StageFailure>)> {
    let icp = NearestNeighborProvider::default();
    let matcher: &(dyn CorrespondenceProvider + Sync) =
        if ablations.icp_align { &icp } else { providers.matches };
    let align_cfg = config.alignment();

    let work: Vec<&InstanceGroup> =
        groups.iter().filter(|g| views.contains_key(&g.id)).collect();
    let results: Vec<(InstanceId, Result<AlignedInstance>)> = work
        .par_iter()
        .map(|group| {
            let anchor = views[&group.id];
            let run = || -> Result<AlignedInstance> {
                let asset = generate_asset(group, anchor, bundle, providers.assets)?;
                if ablations.no_align {
                    return Ok(AlignedInstance {
                        mesh: asset.mesh,
                        initial: asset.initial_transform.clone(),
                        pose: asset.initial_transform,
                        best_iteration: 0,
                        mean_iou: None,
                    });
                }
                let outcome = iterative_align(
                    &asset.mesh,
                    &asset.initial_transform,
                    anchor,
                    group,
                    bundle,
                    matcher,
                    &align_cfg,
                )?;
                let mean_iou = outcome.iterates[outcome.best_iteration].mean_iou;
                Ok(AlignedInstance {
                    mesh: asset.mesh,
                    initial: asset.initial_transform,
                    pose: outcome.best,
                    best_iteration: outcome.best_iteration,
                    mean_iou,
                })
            };
            (group.id, run())
        })
        .collect();

    let assets_dir = out_dir.join(ASSETS_DIR);
    fs::create_dir_all(&assets_dir)
        .map_err(|e| Error::io(format!("creating {}", assets_dir.display()), e))?;
    let mut objects = Vec::new();
    let mut meshes = BTreeMap::new();
    let mut failures = Vec::new();
    for (group, (instance, result)) in work.iter().zip(results) {
        debug_assert_eq!(group.id, instance);
        match result {
            Ok(aligned) => {
                save_mesh(&aligned.mesh, &out_dir.join(mesh_file(instance)))?;
                write_pose_trace(&aligned, instance, out_dir)?;
                objects.push(PlacedObject {
                    id: instance,
                    category: group.category.clone(),
                    mesh_ref: mesh_file(instance),
                    transform: aligned.pose.clone(),
                    relations: Vec::new(),
                });
                meshes.insert(instance, aligned.mesh);
            }
            Err(e) => failures.push(StageFailure {
                instance,
                stage: "align",
                detail: e.to_string(),
            }),
        }
    }

    let draft = SceneDescription {
        gravity: bundle.gravity,
        walls: Vec::new(),
        objects,
    };
    save_scene(&draft, &out_dir.join(DRAFT_SCENE_FILE))?;
    Ok((draft, meshes, failures))
}

fn write_pose_trace(
    aligned: &AlignedInstance,
    instance: InstanceId,
    out_dir: &Path,
) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "instance {instance}");
    for (label, t) in [("initial", &aligned.initial), ("final", &aligned.pose)] {
        let _ = writeln!(text, "{label}_scale {}", fmt_f64(t.scale));
        let _ = write!(text, "{label}_rotation");
        for r in 0..3 {
            for c in 0..3 {
                let _ = write!(text, " {}", fmt_f64(t.rotation[(r, c)]));
            }
        }
        text.push('\n');
        let _ = writeln!(
            text,
            "{label}_translation {} {} {}",
            fmt_f64(t.translation.x),
            fmt_f64(t.translation.y),
            fmt_f64(t.translation.z)
        );
    }
    let _ = writeln!(text, "best_iteration {}", aligned.best_iteration);
    match aligned.mean_iou {
        Some(iou) => {
            let _ = writeln!(text, "mean_iou {}", fmt_f64(iou));
        }
        None => {
            let _ = writeln!(text, "mean_iou none");
        }
    }
    write_text(&out_dir.join(POSES_DIR).join(format!("{instance:03}.txt")), &text)
}

/// Stage 5: relation inference and pose correction. Writes the final scene.
pub fn run_refinement(
    bundle: &SceneBundle,
    draft: &SceneDescription,
    meshes: &BTreeMap<InstanceId, TriMesh>,
    relations: &dyn RelationProvider,
    ablations: Ablations,
    out_dir: &Path,
) -> Result<RefineOutcome> {
    let outcome = if ablations.no_refine {
        RefineOutcome { scene: draft.clone(), warnings: Vec::new() }
    } else {
        let rels = relations.relations(draft, bundle).map_err(|e| Error::Provider {
            provider: "relations",
            detail: format!("{}: {e}", relations.name()),
        })?;
        let options = RefineOptions { gravity: !ablations.sg_only_refine };
        refine_scene_with(draft, meshes, &rels, options)?
    };
    save_scene(&outcome.scene, &out_dir.join(FINAL_SCENE_FILE))?;
    Ok(outcome)
}

/// Loads the meshes a scene references, resolved relative to `dir`.
pub fn load_scene_meshes(
    scene: &SceneDescription,
    dir: &Path,
) -> Result<BTreeMap<InstanceId, TriMesh>> {
    let mut meshes = BTreeMap::new();
    for obj in &scene.objects {
        meshes.insert(obj.id, load_mesh(&safe_join(dir, &obj.mesh_ref)?)?);
    }
    Ok(meshes)
}

/// Geometric and semantic comparison of a composed scene against ground
/// truth.
#[derive(Debug, Clone, Copy)]
pub struct EvalScores {
    pub geometry: GeometryScore,
    pub categories: CategoryScores,
}

pub fn run_evaluation(
    pred: &SceneDescription,
    pred_meshes: &BTreeMap<InstanceId, TriMesh>,
    gt: &SceneDescription,
    gt_meshes: &BTreeMap<InstanceId, TriMesh>,
    config: &PipelineConfig,
    synonyms: &CategoryRegistry,
) -> Result<EvalScores> {
    let geometry = scene_geometry_score_with(
        pred,
        pred_meshes,
        gt,
        gt_meshes,
        config.eval_samples,
        config.seed,
        config.f_score_threshold,
    )?;
    let categories = category_scores(pred, gt, synonyms)?;
    Ok(EvalScores { geometry, categories })
}

fn render_eval(scores: &EvalScores) -> String {
    let mut text = String::new();
    let _ = writeln!(text, "chamfer {}", fmt_f64(scores.geometry.chamfer));
    let _ = writeln!(text, "f_score {}", fmt_f64(scores.geometry.f_score));
    let _ = writeln!(
        text,
        "normal_consistency {}",
        fmt_f64(scores.geometry.normal_consistency)
    );
    let _ = writeln!(text, "sample_spacing {}", fmt_f64(scores.geometry.sample_spacing));
    let _ = writeln!(text, "category_recall {}", fmt_f64(scores.categories.recall));
    let _ = writeln!(text, "instance_precision {}", fmt_f64(scores.categories.precision));
    let _ = writeln!(text, "instance_recall {}", fmt_f64(scores.categories.instance_recall));
    let _ = writeln!(text, "instance_f1 {}", fmt_f64(scores.categories.f1));
    let _ = writeln!(text, "instances_matched {}", scores.categories.matched);
    text
}

pub fn write_eval(scores: &EvalScores, path: &Path) -> Result<()> {
    write_text(path, &render_eval(scores))
}

/// Splices the evaluation block into an already-written report, just before
/// its closing line.
pub fn embed_eval_in_report(scores: &EvalScores, out_dir: &Path) -> Result<()> {
    let path = out_dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let Some(body) = text.strip_suffix("end_report\n") else {
        return Err(Error::file_format(&path, "missing end_report trailer"));
    };
    let mut out = String::from(body);
    out.push_str("evaluation\n");
    out.push_str(&render_eval(scores));
    out.push_str("end_evaluation\nend_report\n");
    write_text(&path, &out)
}

/// Result of a full run.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub scene: SceneDescription,
    pub meshes: BTreeMap<InstanceId, TriMesh>,
    pub registry: CategoryRegistry,
    pub failures: Vec<StageFailure>,
    pub warnings: Vec<String>,
}

impl PipelineOutcome {
    /// True when some instances were dropped along the way; the scene is
    /// still usable but incomplete.
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Runs every stage in order, isolating per-instance failures, and writes
/// `report.txt` describing the run. Fatal configuration, input, or I/O
/// problems return an error; instances that fail view selection or
/// alignment are skipped and reported in the outcome instead.
pub fn run_pipeline(
    bundle: &SceneBundle,
    providers: &ProviderSet,
    config: &PipelineConfig,
    ablations: Ablations,
    out_dir: &Path,
) -> Result<PipelineOutcome> {
    config.validate()?;
    bundle.validate()?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let discovery = run_discovery(bundle, providers.labels, config, out_dir)?;
    let dedup = run_dedup(bundle, config, ablations, out_dir)?;
    let (views, mut failures) = run_view_selection(bundle, &dedup.groups, ablations, out_dir)?;
    let (draft, meshes, align_failures) =
        run_alignment(bundle, &dedup.groups, &views, providers, config, ablations, out_dir)?;
    failures.extend(align_failures);
    let refined = run_refinement(bundle, &draft, &meshes, providers.relations, ablations, out_dir)?;

    let mut warnings = Vec::new();
    warnings.extend(discovery.warnings.iter().cloned());
    warnings.extend(dedup.warnings.iter().cloned());
    warnings.extend(refined.warnings.iter().cloned());

    let outcome = PipelineOutcome {
        scene: refined.scene,
        meshes,
        registry: discovery.registry,
        failures,
        warnings,
    };
    write_report(&outcome, config, ablations, &dedup.groups, &views, out_dir)?;
    Ok(outcome)
}

fn write_report(
    outcome: &PipelineOutcome,
    config: &PipelineConfig,
    ablations: Ablations,
    groups: &[InstanceGroup],
    views: &BTreeMap<InstanceId, FrameId>,
    out_dir: &Path,
) -> Result<()> {
    let mut text = String::from("scene_assembly_report\n");
    let _ = writeln!(
        text,
        "status {}",
        if outcome.is_partial() { "partial" } else { "complete" }
    );
    let _ = writeln!(text, "ablations {}", ablations.summary());
    text.push_str("configuration\n");
    text.push_str(&config.render());
    text.push_str("end_configuration\n");

    let _ = writeln!(text, "categories {}", outcome.registry.len());
    for category in outcome.registry.entries() {
        let _ = writeln!(text, "category {category}");
    }
    let _ = writeln!(text, "groups {}", groups.len());
    for g in groups {
        let members: Vec<String> = g.members.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(
            text,
            "group {} members {} category {}",
            g.id,
            members.join(","),
            g.category
        );
    }
    let _ = writeln!(text, "views {}", views.len());
    for (instance, frame) in views {
        let _ = writeln!(text, "view {instance} {frame}");
    }
    let _ = writeln!(text, "objects {}", outcome.scene.objects.len());
    for obj in &outcome.scene.objects {
        let _ = writeln!(text, "object {} category {}", obj.id, obj.category);
    }
    let _ = writeln!(text, "failures {}", outcome.failures.len());
    for f in &outcome.failures {
        let _ = writeln!(text, "failure {} {} {}", f.instance, f.stage, f.detail);
    }
    let _ = writeln!(text, "warnings {}", outcome.warnings.len());
    for w in &outcome.warnings {
        let _ = writeln!(text, "warning {w}");
    }
    text.push_str("end_report\n");
    write_text(&out_dir.join(REPORT_FILE), &text)
}
