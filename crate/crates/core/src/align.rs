//! Stage 4: render-match-optimize pose alignment.
//!
//! Starting from the asset provider's initial pose, each iteration renders
//! the asset into a small window of nearby views, asks a correspondence
//! provider for pixel matches between the real and rendered images, lifts
//! both sides to 3D through the shared per-frame camera, and fits an
//! incremental similarity correction. After all iterations the pose with the
//! best mean mask IoU across the window wins — the initializer competes too,
//! so a matcher that only makes things worse cannot degrade the result.

use crate::bundle::SceneBundle;
use crate::dedup::InstanceGroup;
use crate::geom::{
    umeyama_fit, CameraModel, DepthMap, KdTree, Mask, SimilarityTransform, TriMesh, Vec3,
};
use crate::raster::{mask_iou, render_depth_mask};
use crate::{Error, FrameId, InstanceId, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    /// Views on each side of the anchor observation used for matching and
    /// IoU scoring; the window is clamped at the ends of the observation
    /// list, so it holds at most `2 * temporal_radius + 1` views.
    pub temporal_radius: usize,
    /// Number of correction iterations after the initializer.
    pub iterations: usize,
    /// Matches below this confidence are discarded before lifting.
    pub confidence_floor: f64,
    /// A pair survives outlier rejection when its residual under the
    /// provisional fit is at most this factor times the median residual.
    pub outlier_factor: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            temporal_radius: 2,
            iterations: 5,
            confidence_floor: 0.5,
            outlier_factor: 3.0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("alignment needs at least one iteration".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(Error::Config(format!(
                "confidence floor {} outside [0, 1]",
                self.confidence_floor
            )));
        }
        if !self.outlier_factor.is_finite() || self.outlier_factor <= 0.0 {
            return Err(Error::Config(format!(
                "outlier factor {} must be positive",
                self.outlier_factor
            )));
        }
        Ok(())
    }
}

/// One pixel correspondence between the real image and the rendered image of
/// the same frame. Coordinates are continuous; depth lookups round to the
/// nearest pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMatch {
    pub real: (f64, f64),
    pub rendered: (f64, f64),
    /// In `[0, 1]`; matches below the configured floor are dropped.
    pub confidence: f64,
}

/// Everything a matcher gets to see for one view: the captured depth and
/// instance mask, the render of the asset under the pose being refined, and
/// enough identity (instance, frame, iteration) for deterministic seeding.
#[derive(Debug)]
pub struct MatchRequest<'a> {
    pub instance: InstanceId,
    pub frame: FrameId,
    /// 1-based correction iteration this request belongs to.
    pub iteration: usize,
    pub camera: &'a CameraModel,
    pub real_depth: &'a DepthMap,
    pub real_mask: &'a Mask,
    pub rendered_depth: &'a DepthMap,
    pub rendered_mask: &'a Mask,
    /// Pose the rendered view was produced under.
    pub pose: &'a SimilarityTransform,
}

/// Produces pixel matches between a real view and a rendered view.
pub trait CorrespondenceProvider {
    fn name(&self) -> &'static str;
    /// Returned pixel coordinates must lie within the request's raster.
    fn matches(&self, request: &MatchRequest) -> Result<Vec<PixelMatch>>;
}

/// One view the alignment loop matches and scores against: the frame's
/// camera and depth plus the instance's observed mask in that frame.
#[derive(Debug, Clone, Copy)]
pub struct AlignView<'a> {
    pub frame: FrameId,
    pub camera: &'a CameraModel,
    pub real_depth: &'a DepthMap,
    pub real_mask: &'a Mask,
}

/// Rounds a continuous pixel coordinate to the raster cell it falls in, or
/// `None` outside the raster.
pub(crate) fn nearest_pixel(u: f64, v: f64, width: u32, height: u32) -> Option<(u32, u32)> {
    if !u.is_finite() || !v.is_finite() {
        return None;
    }
    let x = u.round();
    let y = v.round();
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
        return None;
    }
    Some((x as u32, y as u32))
}

/// Lifts pixel matches to paired 3D world points: the real coordinate with
/// the captured depth, the rendered coordinate with the rendered depth, both
/// through the same camera. Depth is sampled at the nearest pixel but the
/// ray goes through the exact match coordinates, so a provider that reports
/// sub-pixel positions loses nothing to quantization. Matches with an
/// invalid depth or out-of-raster coordinate on either side are dropped;
/// survivors stay paired index-wise (`real[i]` corresponds to `rendered[i]`).
pub fn lift_correspondences(
    pairs: &[PixelMatch],
    real_depth: &DepthMap,
    rendered_depth: &DepthMap,
    cam: &CameraModel,
) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut real = Vec::new();
    let mut rendered = Vec::new();
    for pair in pairs {
        let Some((rx, ry)) = nearest_pixel(pair.real.0, pair.real.1, cam.width, cam.height) else {
            continue;
        };
        let Some((qx, qy)) =
            nearest_pixel(pair.rendered.0, pair.rendered.1, cam.width, cam.height)
        else {
            continue;
        };
        let (Some(rz), Some(qz)) = (real_depth.get(rx, ry), rendered_depth.get(qx, qy)) else {
            continue;
        };
        let (Ok(p), Ok(q)) = (
            cam.backproject(pair.real.0, pair.real.1, rz),
            cam.backproject(pair.rendered.0, pair.rendered.1, qz),
        ) else {
            continue;
        };
        real.push(p);
        rendered.push(q);
    }
    (real, rendered)
}

/// Result of one correction step.
#[derive(Debug, Clone)]
pub struct IterationStep {
    /// The corrected pose, or the previous pose unchanged when stalled.
    pub transform: SimilarityTransform,
    /// Fewer than three usable pairs survived (or the survivors were
    /// degenerate); the previous pose was carried forward.
    pub stalled: bool,
    /// Pairs that entered the final fit (survivors after confidence,
    /// lifting, and outlier rejection).
    pub pairs_used: usize,
}

fn stalled_step(t_prev: &SimilarityTransform, pairs: usize, why: &str) -> IterationStep {
    log::debug!("alignment iteration stalled ({why}); keeping previous pose");
    IterationStep { transform: t_prev.clone(), stalled: true, pairs_used: pairs }
}

/// One render-match-fit step. Renders the asset under `t_prev` into every
/// view, gathers matches (in view order, preserving each provider's pair
/// order, so aggregation is deterministic), lifts them, and fits the
/// incremental similarity `rendered -> real`. A provisional fit screens
/// outliers: pairs whose residual exceeds `outlier_factor` times the median
/// residual are dropped and the fit is repeated on the survivors. The screen
/// re-runs against each refit until the survivor set and the pose stop
/// changing (bounded rounds) — a heavily contaminated provisional fit can
/// leave the first threshold too loose to catch everything. The correction
/// composes onto the previous pose. Fewer than three usable pairs stall the
/// step rather than failing the instance.
pub fn align_iteration(
    asset: &TriMesh,
    instance: InstanceId,
    t_prev: &SimilarityTransform,
    views: &[AlignView],
    provider: &dyn CorrespondenceProvider,
    cfg: &AlignmentConfig,
    iteration: usize,
) -> Result<IterationStep> {
    cfg.validate()?;
    let mut real_pts = Vec::new();
    let mut ren_pts = Vec::new();
    for view in views {
        let (ren_depth, ren_mask) = render_depth_mask(asset, t_prev, view.camera);
        let request = MatchRequest {
            instance,
            frame: view.frame,
            iteration,
            camera: view.camera,
            real_depth: view.real_depth,
            real_mask: view.real_mask,
            rendered_depth: &ren_depth,
            rendered_mask: &ren_mask,
            pose: t_prev,
        };
        let mut pairs = provider.matches(&request)?;
        pairs.retain(|p| p.confidence >= cfg.confidence_floor);
        let (real, rendered) =
            lift_correspondences(&pairs, view.real_depth, &ren_depth, view.camera);
        real_pts.extend(real);
        ren_pts.extend(rendered);
    }

    if ren_pts.len() < 3 {
        return Ok(stalled_step(t_prev, ren_pts.len(), "fewer than 3 lifted pairs"));
    }

    let fit = |idx: &[usize]| -> Result<Option<SimilarityTransform>> {
        let src: Vec<Vec3> = idx.iter().map(|&j| ren_pts[j]).collect();
        let dst: Vec<Vec3> = idx.iter().map(|&j| real_pts[j]).collect();
        match umeyama_fit(&src, &dst) {
            Ok(t) => Ok(Some(t)),
            Err(Error::DegenerateGeometry(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };

    const SCREEN_ROUNDS: usize = 4;
    let mut active: Vec<usize> = (0..ren_pts.len()).collect();
    let Some(mut delta) = fit(&active)? else {
        return Ok(stalled_step(t_prev, active.len(), "degenerate pair geometry"));
    };
    for _ in 0..SCREEN_ROUNDS {
        let residuals: Vec<f64> = active
            .iter()
            .map(|&j| (real_pts[j] - delta.apply(&ren_pts[j])).norm())
            .collect();
        let mut sorted = residuals.clone();
        sorted.sort_by(f64::total_cmp);
        let threshold = cfg.outlier_factor * sorted[sorted.len() / 2];
        let keep: Vec<usize> = active
            .iter()
            .zip(&residuals)
            .filter(|(_, r)| **r <= threshold)
            .map(|(&j, _)| j)
            .collect();
        if keep.len() == active.len() {
            break;
        }
        if keep.len() < 3 {
            return Ok(stalled_step(t_prev, keep.len(), "fewer than 3 inliers"));
        }
        let Some(refit) = fit(&keep)? else {
            return Ok(stalled_step(t_prev, keep.len(), "degenerate inlier geometry"));
        };
        let settled = (refit.scale - delta.scale).abs() <= 1e-9
            && crate::geom::rotation_angle_between(&refit.rotation, &delta.rotation) <= 1e-9
            && (refit.translation - delta.translation).norm() <= 1e-9;
        active = keep;
        delta = refit;
        if settled {
            break;
        }
    }
    Ok(IterationStep { transform: delta.compose(t_prev), stalled: false, pairs_used: active.len() })
}

/// Mean mask IoU of the asset rendered under `transform` against the
/// observed masks, skipping views where both masks are empty. `None` when
/// every view was skipped.
pub(crate) fn mean_mask_iou(
    asset: &TriMesh,
    transform: &SimilarityTransform,
    views: &[AlignView],
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for view in views {
        let (_, ren_mask) = render_depth_mask(asset, transform, view.camera);
        let overlap = mask_iou(view.real_mask, &ren_mask)?;
        if !overlap.both_empty {
            sum += overlap.iou;
            n += 1;
        }
    }
    Ok(if n == 0 { None } else { Some(sum / n as f64) })
}

/// One entry in the alignment trace: the pose after `iteration` corrections
/// (entry 0 is the initializer) and how it scored.
#[derive(Debug, Clone)]
pub struct IterateRecord {
    pub iteration: usize,
    pub transform: SimilarityTransform,
    /// Mean mask IoU over the comparison window; `None` when every view had
    /// both masks empty.
    pub mean_iou: Option<f64>,
    pub stalled: bool,
    pub pairs_used: usize,
}

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    /// The iterate with the highest mean IoU (earliest on ties).
    pub best: SimilarityTransform,
    pub best_iteration: usize,
    /// All `iterations + 1` iterates, in order, starting with the
    /// initializer.
    pub iterates: Vec<IterateRecord>,
}

/// Frames the alignment loop will match and score against: the instance's
/// observations at positions within `radius` of the anchor observation,
/// clamped to the ends of the observation list. Windowing by observation
/// position rather than raw frame id keeps the window meaningful when the
/// instance is visible in a non-contiguous set of frames.
pub fn comparison_window(
    group: &InstanceGroup,
    anchor: FrameId,
    radius: usize,
) -> Result<Vec<FrameId>> {
    let pos = group
        .observations
        .iter()
        .position(|(f, _)| *f == anchor)
        .ok_or_else(|| Error::AlignmentFailed {
            instance: group.id,
            detail: format!("anchor frame {anchor} is not an observation of this instance"),
        })?;
    let lo = pos.saturating_sub(radius);
    let hi = (pos + radius).min(group.observations.len() - 1);
    Ok(group.observations[lo..=hi].iter().map(|(f, _)| *f).collect())
}

/// Runs the full alignment loop for one instance: `iterations` correction
/// steps from `t0`, scoring every iterate (the initializer included) by mean
/// mask IoU over the comparison window around `anchor`, and returning the
/// best-scoring pose. Stalled steps carry the previous pose and stay in the
/// trace. Fails only when no iterate could be scored at all, i.e. the asset
/// never rendered into any view that also observed the instance.
pub fn iterative_align(
    asset: &TriMesh,
    t0: &SimilarityTransform,
    anchor: FrameId,
    group: &InstanceGroup,
    bundle: &SceneBundle,
    provider: &dyn CorrespondenceProvider,
    cfg: &AlignmentConfig,
) -> Result<AlignOutcome> {
    cfg.validate()?;
    let window = comparison_window(group, anchor, cfg.temporal_radius)?;
    let mut views = Vec::with_capacity(window.len());
    for frame_id in window {
        let frame = bundle.frame(frame_id).ok_or_else(|| Error::AlignmentFailed {
            instance: group.id,
            detail: format!("observation frame {frame_id} is missing from the bundle"),
        })?;
        let (_, mask) = group
            .observations
            .iter()
            .find(|(f, _)| *f == frame_id)
            .expect("window frames come from the observation list");
        views.push(AlignView {
            frame: frame_id,
            camera: &frame.camera,
            real_depth: &frame.depth,
            real_mask: mask,
        });
    }

    let mut records = Vec::with_capacity(cfg.iterations + 1);
    records.push(IterateRecord {
        iteration: 0,
        transform: t0.clone(),
        mean_iou: mean_mask_iou(asset, t0, &views)?,
        stalled: false,
        pairs_used: 0,
    });
    let mut current = t0.clone();
    for i in 1..=cfg.iterations {
        let step = align_iteration(asset, group.id, &current, &views, provider, cfg, i)?;
        current = step.transform.clone();
        records.push(IterateRecord {
            iteration: i,
            transform: step.transform,
            mean_iou: mean_mask_iou(asset, &current, &views)?,
            stalled: step.stalled,
            pairs_used: step.pairs_used,
        });
    }

    let mut best: Option<(usize, f64)> = None;
    for rec in &records {
        if let Some(iou) = rec.mean_iou {
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((rec.iteration, iou));
            }
        }
    }
    let Some((best_iteration, _)) = best else {
        return Err(Error::AlignmentFailed {
            instance: group.id,
            detail: "no iterate produced a scoreable render in any comparison view".into(),
        });
    };
    Ok(AlignOutcome {
        best: records[best_iteration].transform.clone(),
        best_iteration,
        iterates: records,
    })
}

/// Classical ICP-style matcher: lifts both masks to 3D point sets and pairs
/// every rendered point with its geometrically nearest real point. No
/// learned matching, no descriptors — this is the baseline the learned
/// provider is compared against, wired through the same interface.
#[derive(Debug, Clone)]
pub struct NearestNeighborProvider {
    /// Upper bound on emitted pairs; the rendered points are strided down to
    /// fit. Keeps the kd-tree queries bounded on large masks.
    pub max_pairs: usize,
}

impl Default for NearestNeighborProvider {
    fn default() -> Self {
        NearestNeighborProvider { max_pairs: 2000 }
    }
}

fn mask_points(mask: &Mask, depth: &DepthMap, cam: &CameraModel) -> Vec<(u32, u32, Vec3)> {
    mask.iter_set()
        .filter_map(|(x, y)| {
            let z = depth.get(x, y)?;
            cam.backproject(x as f64, y as f64, z).ok().map(|p| (x, y, p))
        })
        .collect()
}

impl CorrespondenceProvider for NearestNeighborProvider {
    fn name(&self) -> &'static str {
        "nearest-neighbor"
    }

    fn matches(&self, request: &MatchRequest) -> Result<Vec<PixelMatch>> {
        let real = mask_points(request.real_mask, request.real_depth, request.camera);
        let rendered = mask_points(request.rendered_mask, request.rendered_depth, request.camera);
        if real.is_empty() || rendered.is_empty() {
            return Ok(Vec::new());
        }
        let real_cloud: Vec<Vec3> = real.iter().map(|&(_, _, p)| p).collect();
        let tree = KdTree::build(&real_cloud);
        let stride = rendered.len().div_ceil(self.max_pairs.max(1));
        let mut out = Vec::new();
        for &(qx, qy, q) in rendered.iter().step_by(stride) {
            let Some((idx, _)) = tree.nearest(&q) else { continue };
            let (rx, ry, _) = real[idx];
            out.push(PixelMatch {
                real: (rx as f64, ry as f64),
                rendered: (qx as f64, qy as f64),
                confidence: 1.0,
            });
        }
        Ok(out)
    }
}
