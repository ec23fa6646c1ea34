//! Stage 3: per instance, pick the observation whose mask lifts to the
//! largest 3D surface, then hand that observation to an asset provider.
//!
//! Lifting triangulates the mask's pixel grid: every 2×2 quad that is fully
//! masked with valid depth contributes two triangles over the backprojected
//! corners, split along the top-left-to-bottom-right diagonal. Triangles that
//! bridge a depth discontinuity are dropped; the discontinuity threshold
//! adapts to the local depth noise (see [`lift_mask_surface`]). Surface area
//! is a rigid invariant, so the selection is stable under re-orientation of
//! the world frame — unlike pixel counting, which favors close-ups that crop
//! the object. Pixel counting stays available as [`ViewCriterion::PixelArea`]
//! for ablation runs.

use crate::bundle::SceneBundle;
use crate::dedup::InstanceGroup;
use crate::geom::{CameraModel, DepthMap, Mask, SimilarityTransform, TriMesh};
use crate::{Error, FrameId, InstanceId, Result};

/// Floor for the depth-discontinuity threshold, meters.
const DELTA_FLOOR: f64 = 0.05;
/// The adaptive threshold is this multiple of the median 4-neighbor depth
/// difference inside the mask.
const DELTA_MEDIAN_FACTOR: f64 = 5.0;

/// Depth-discontinuity threshold: `max(0.05 m, 5 × median |Δz|)` over
/// 4-neighbor pixel pairs that are both masked and valid. Upper median for
/// even-length lists. No pairs → the floor.
fn discontinuity_threshold(mask: &Mask, depth: &DepthMap) -> f64 {
    let mut diffs = Vec::new();
    for (x, y) in mask.iter_set() {
        let Some(z) = depth.get(x, y) else { continue };
        // Right and down neighbors cover each unordered pair once.
        if x + 1 < mask.width() && mask.get(x + 1, y) {
            if let Some(zr) = depth.get(x + 1, y) {
                diffs.push((z - zr).abs());
            }
        }
        if y + 1 < mask.height() && mask.get(x, y + 1) {
            if let Some(zd) = depth.get(x, y + 1) {
                diffs.push((z - zd).abs());
            }
        }
    }
    if diffs.is_empty() {
        return DELTA_FLOOR;
    }
    diffs.sort_by(f64::total_cmp);
    DELTA_FLOOR.max(DELTA_MEDIAN_FACTOR * diffs[diffs.len() / 2])
}

/// Lifts the masked depth pixels into a world-space triangle mesh.
///
/// `frame` is only used to label errors. Fails when no masked pixel has valid
/// depth; a lift with valid pixels but no completable quad yields a mesh with
/// vertices and zero triangles.
pub fn lift_mask_surface(
    mask: &Mask,
    depth: &DepthMap,
    cam: &CameraModel,
    frame: FrameId,
) -> Result<TriMesh> {
    if mask.width() != cam.width
        || mask.height() != cam.height
        || depth.width() != cam.width
        || depth.height() != cam.height
    {
        return Err(Error::RasterSizeMismatch {
            expected_w: cam.width,
            expected_h: cam.height,
            got_w: mask.width(),
            got_h: mask.height(),
        });
    }

    let delta = discontinuity_threshold(mask, depth);
    let w = mask.width();
    let h = mask.height();

    let mut vertices = Vec::new();
    let mut depths = Vec::new();
    let mut index = vec![u32::MAX; (w as usize) * (h as usize)];
    for (x, y) in mask.iter_set() {
        let Some(z) = depth.get(x, y) else { continue };
        index[(y * w + x) as usize] = vertices.len() as u32;
        vertices.push(cam.backproject(x as f64, y as f64, z)?);
        depths.push(z);
    }
    if vertices.is_empty() {
        return Err(Error::EmptySurface { frame });
    }

    let mut triangles = Vec::new();
    let mut push_if_smooth = |i: u32, j: u32, k: u32| {
        let (zi, zj, zk) = (depths[i as usize], depths[j as usize], depths[k as usize]);
        let step = (zi - zj).abs().max((zj - zk).abs()).max((zi - zk).abs());
        if step <= delta {
            triangles.push([i, j, k]);
        }
    };
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let a = index[(y * w + x) as usize];
            let b = index[(y * w + x + 1) as usize];
            let c = index[((y + 1) * w + x) as usize];
            let d = index[((y + 1) * w + x + 1) as usize];
            if a == u32::MAX || b == u32::MAX || c == u32::MAX || d == u32::MAX {
                continue;
            }
            push_if_smooth(a, b, d);
            push_if_smooth(a, d, c);
        }
    }

    let mesh = TriMesh { vertices, triangles, colors: None };
    mesh.validate()?;
    Ok(mesh)
}

/// Total mesh area: sum of `|cross| / 2` per triangle. Empty mesh → 0.
pub fn surface_area(mesh: &TriMesh) -> f64 {
    (0..mesh.triangles.len())
        .map(|t| {
            let [a, b, c] = mesh.triangle_corners(t);
            0.5 * (b - a).cross(&(c - a)).norm()
        })
        .sum()
}

/// What to maximize when ranking a group's observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ViewCriterion {
    /// Lifted 3D surface area (the default).
    #[default]
    SurfaceArea,
    /// Raw mask pixel count (ablation baseline; favors crops).
    PixelArea,
}

/// Score of every observation of the group, in ascending frame order.
/// Observations whose lift fails outright score zero.
pub fn view_scores(
    group: &InstanceGroup,
    bundle: &SceneBundle,
    criterion: ViewCriterion,
) -> Result<Vec<(FrameId, f64)>> {
    let mut scores = Vec::with_capacity(group.observations.len());
    for (fid, mask) in &group.observations {
        let frame = bundle
            .frame(*fid)
            .ok_or_else(|| Error::UnknownReference { kind: "frame", name: fid.to_string() })?;
        let score = match criterion {
            ViewCriterion::SurfaceArea => {
                match lift_mask_surface(mask, &frame.depth, &frame.camera, *fid) {
                    Ok(mesh) => surface_area(&mesh),
                    Err(Error::EmptySurface { .. }) => 0.0,
                    Err(e) => return Err(e),
                }
            }
            ViewCriterion::PixelArea => mask.count() as f64,
        };
        scores.push((*fid, score));
    }
    Ok(scores)
}

/// The frame whose observation maximizes the criterion, ties resolved toward
/// the lowest frame id. Errors with [`Error::NoViableView`] when every
/// observation scores zero.
pub fn select_optimal_view(
    group: &InstanceGroup,
    bundle: &SceneBundle,
    criterion: ViewCriterion,
) -> Result<FrameId> {
    let scores = view_scores(group, bundle, criterion)?;
    let mut best: Option<(FrameId, f64)> = None;
    for (fid, score) in scores {
        if score <= 0.0 {
            continue;
        }
        match best {
            // Scores are listed in ascending frame order, so strict >
            // keeps the earliest frame on ties.
            Some((_, s)) if score <= s => {}
            _ => best = Some((fid, score)),
        }
    }
    best.map(|(fid, _)| fid).ok_or(Error::NoViableView(group.id))
}

/// Input handed to an asset provider: the chosen observation of one instance.
#[derive(Debug)]
pub struct AssetRequest<'a> {
    pub instance: InstanceId,
    pub category: &'a str,
    pub frame: FrameId,
    pub mask: &'a Mask,
    pub depth: &'a DepthMap,
    pub camera: &'a CameraModel,
}

/// Provider output: a mesh in the object's canonical frame (+z vertical,
/// +x forward) and an initial similarity transform into world space.
#[derive(Debug, Clone)]
pub struct AssetResponse {
    pub mesh: TriMesh,
    pub initial_transform: SimilarityTransform,
}

/// Single-view asset generator (in production a generative model; in tests a
/// ground-truth oracle).
pub trait AssetProvider {
    fn name(&self) -> &'static str;
    fn generate(&self, request: &AssetRequest) -> Result<AssetResponse>;
}

/// Runs the provider on the group's optimal observation and validates the
/// response. All failures are reported as [`Error::AssetRejected`] so the
/// pipeline can isolate them per instance.
pub fn generate_asset(
    group: &InstanceGroup,
    k_star: FrameId,
    bundle: &SceneBundle,
    provider: &dyn AssetProvider,
) -> Result<AssetResponse> {
    let reject = |detail: String| Error::AssetRejected { instance: group.id, detail };
    let (_, mask) = group
        .observations
        .iter()
        .find(|(fid, _)| *fid == k_star)
        .ok_or_else(|| reject(format!("group has no observation in frame {k_star}")))?;
    let frame = bundle
        .frame(k_star)
        .ok_or_else(|| reject(format!("bundle has no frame {k_star}")))?;

    let request = AssetRequest {
        instance: group.id,
        category: &group.category,
        frame: k_star,
        mask,
        depth: &frame.depth,
        camera: &frame.camera,
    };
    let response = provider
        .generate(&request)
        .map_err(|e| reject(format!("{} provider: {e}", provider.name())))?;

    if response.mesh.is_empty() {
        return Err(reject("provider returned an empty mesh".into()));
    }
    response.mesh.validate().map_err(|e| reject(format!("invalid mesh: {e}")))?;
    response
        .initial_transform
        .validate()
        .map_err(|e| reject(format!("invalid initial transform: {e}")))?;
    Ok(response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{Frame, MaskEntry};
    use crate::geom::{Mat3, Vec3};
    use crate::raster::render_depth_mask;
    use approx::assert_relative_eq;

    fn camera(f: f64, w: u32, h: u32) -> CameraModel {
        CameraModel {
            fx: f,
            fy: f,
            cx: (w - 1) as f64 / 2.0,
            cy: (h - 1) as f64 / 2.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            width: w,
            height: h,
        }
    }

    fn flat_observation(
        cam: &CameraModel,
        x0: u32,
        y0: u32,
        n: u32,
        z: f64,
    ) -> (Mask, DepthMap) {
        let mut mask = Mask::new(cam.width, cam.height);
        let mut depth = DepthMap::new(cam.width, cam.height);
        for x in x0..x0 + n {
            for y in y0..y0 + n {
                mask.set(x, y, true);
                depth.set(x, y, z as f32);
            }
        }
        (mask, depth)
    }

    #[test]
    fn two_by_two_quad_gives_two_triangles() {
        let cam = camera(100.0, 16, 16);
        let (mask, depth) = flat_observation(&cam, 4, 4, 2, 1.0);
        let mesh = lift_mask_surface(&mask, &depth, &cam, 0).unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        assert_eq!(mesh.triangles.len(), 2);
    }

    #[test]
    fn fronto_parallel_square_area_is_analytic() {
        let f = 100.0;
        let n = 9u32;
        let z = 2.0;
        let cam = camera(f, 32, 32);
        let (mask, depth) = flat_observation(&cam, 3, 3, n, z);
        let mesh = lift_mask_surface(&mask, &depth, &cam, 0).unwrap();
        let expected = ((n - 1) as f64 * z / f).powi(2);
        assert_relative_eq!(surface_area(&mesh), expected, epsilon = 1e-9);
    }

    #[test]
    fn depth_step_is_not_bridged() {
        let f = 100.0;
        let cam = camera(f, 16, 16);
        let mut mask = Mask::new(16, 16);
        let mut depth = DepthMap::new(16, 16);
        // 8 columns at z = 1, then 8 columns at z = 2.
        for x in 4..12u32 {
            for y in 4..12u32 {
                mask.set(x, y, true);
                depth.set(x, y, if x < 8 { 1.0 } else { 2.0 });
            }
        }
        let mesh = lift_mask_surface(&mask, &depth, &cam, 0).unwrap();
        // Smooth halves dominate the neighbor-difference list, so the median
        // is 0 and delta floors at 0.05 m, far below the 1 m step: the two
        // planar parts stay disconnected.
        let quads_per_half = 3 * 7; // 4 columns x 8 rows per half
        let expected = quads_per_half as f64 * (1.0 / f).powi(2)
            + quads_per_half as f64 * (2.0 / f).powi(2);
        assert_relative_eq!(surface_area(&mesh), expected, epsilon = 1e-9);
    }

    #[test]
    fn one_valid_pixel_lifts_to_zero_triangles() {
        let cam = camera(100.0, 8, 8);
        let mut mask = Mask::new(8, 8);
        let mut depth = DepthMap::new(8, 8);
        mask.set(3, 3, true);
        depth.set(3, 3, 1.0);
        let mesh = lift_mask_surface(&mask, &depth, &cam, 0).unwrap();
        assert_eq!(mesh.vertices.len(), 1);
        assert!(mesh.triangles.is_empty());
        assert_eq!(surface_area(&mesh), 0.0);
    }

    #[test]
    fn no_valid_pixels_is_an_empty_surface() {
        let cam = camera(100.0, 8, 8);
        let mut mask = Mask::new(8, 8);
        mask.set(3, 3, true); // depth stays invalid
        let depth = DepthMap::new(8, 8);
        let err = lift_mask_surface(&mask, &depth, &cam, 5).unwrap_err();
        assert!(matches!(err, Error::EmptySurface { frame: 5 }));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let cam = camera(100.0, 8, 8);
        let mask = Mask::new(4, 4);
        let depth = DepthMap::new(8, 8);
        assert!(matches!(
            lift_mask_surface(&mask, &depth, &cam, 0),
            Err(Error::RasterSizeMismatch { .. })
        ));
    }

    #[test]
    fn area_of_right_triangle_and_empty_mesh() {
        let mesh = TriMesh {
            vertices: vec![Vec3::zeros(), Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.0, 4.0, 0.0)],
            triangles: vec![[0, 1, 2]],
            colors: None,
        };
        assert_eq!(surface_area(&mesh), 6.0);
        let empty = TriMesh { vertices: vec![], triangles: vec![], colors: None };
        assert_eq!(surface_area(&empty), 0.0);
    }

    #[test]
    fn area_is_invariant_under_vertex_permutation() {
        let mesh = |t: [u32; 3]| TriMesh {
            vertices: vec![
                Vec3::new(0.1, 0.2, 0.3),
                Vec3::new(1.0, -0.5, 0.7),
                Vec3::new(-0.3, 0.9, 1.4),
            ],
            triangles: vec![t],
            colors: None,
        };
        let base = surface_area(&mesh([0, 1, 2]));
        for t in [[1, 2, 0], [2, 0, 1], [0, 2, 1], [2, 1, 0], [1, 0, 2]] {
            assert_eq!(surface_area(&mesh(t)), base);
        }
    }

    fn group_of(observations: Vec<(FrameId, Mask)>) -> InstanceGroup {
        InstanceGroup {
            id: 0,
            category: "chair".into(),
            members: vec![0],
            observations,
        }
    }

    fn bundle_of(frames: Vec<Frame>) -> SceneBundle {
        SceneBundle { gravity: Vec3::new(0.0, 0.0, -1.0), frames }
    }

    fn frame(id: FrameId, cam: CameraModel, depth: DepthMap, mask: &Mask) -> Frame {
        Frame {
            id,
            camera: cam,
            depth,
            masks: vec![MaskEntry { track: 0, category: "chair".into(), mask: mask.clone() }],
            image: None,
        }
    }

    #[test]
    fn single_observation_wins_by_default() {
        let cam = camera(100.0, 16, 16);
        let (mask, depth) = flat_observation(&cam, 4, 4, 3, 1.0);
        let bundle = bundle_of(vec![frame(7, cam, depth, &mask)]);
        let group = group_of(vec![(7, mask)]);
        assert_eq!(select_optimal_view(&group, &bundle, ViewCriterion::SurfaceArea).unwrap(), 7);
    }

    #[test]
    fn equal_physical_area_ties_break_to_lower_frame_id() {
        // Same physical square observed at z = 1 (11x11 mask) and z = 2
        // (6x6 mask). With a power-of-two focal length both lifted areas are
        // exact and identical: (10/f)^2 = (5*2/f)^2.
        let f = 128.0;
        let cam = camera(f, 32, 32);
        let (mask_a, depth_a) = flat_observation(&cam, 2, 2, 11, 1.0);
        let (mask_b, depth_b) = flat_observation(&cam, 20, 20, 6, 2.0);
        let area_a =
            surface_area(&lift_mask_surface(&mask_a, &depth_a, &cam, 0).unwrap());
        let area_b =
            surface_area(&lift_mask_surface(&mask_b, &depth_b, &cam, 1).unwrap());
        assert_eq!(area_a.to_bits(), area_b.to_bits(), "tie must be exact");

        let bundle = bundle_of(vec![
            frame(0, cam.clone(), depth_a.clone(), &mask_a),
            frame(1, cam.clone(), depth_b.clone(), &mask_b),
        ]);
        let group = group_of(vec![(0, mask_a.clone()), (1, mask_b.clone())]);
        assert_eq!(select_optimal_view(&group, &bundle, ViewCriterion::SurfaceArea).unwrap(), 0);

        // Swap the frame ids: the tie must follow the lower id, not the order
        // of construction.
        let bundle = bundle_of(vec![
            frame(0, cam.clone(), depth_b, &mask_b),
            frame(1, cam, depth_a, &mask_a),
        ]);
        let group = group_of(vec![(0, mask_b), (1, mask_a)]);
        assert_eq!(select_optimal_view(&group, &bundle, ViewCriterion::SurfaceArea).unwrap(), 0);
    }

    /// Renders a unit square fronto-parallel and at a slant; the criteria
    /// disagree on purpose-built cases like the close-up crop below.
    fn square_mesh() -> TriMesh {
        TriMesh {
            vertices: vec![
                Vec3::new(-0.5, -0.5, 0.0),
                Vec3::new(0.5, -0.5, 0.0),
                Vec3::new(0.5, 0.5, 0.0),
                Vec3::new(-0.5, 0.5, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            colors: None,
        }
    }

    #[test]
    fn slanted_view_loses_to_fronto_parallel() {
        let square = square_mesh();
        let w = 64;
        let fronto = CameraModel::look_at(
            Vec3::new(0.0, 0.0, -2.0),
            Vec3::zeros(),
            Vec3::new(0.0, 1.0, 0.0),
            80.0,
            80.0,
            w,
            w,
        )
        .unwrap();
        // 60 degrees off the normal, same distance.
        let slant_pos = Vec3::new(2.0 * (60f64).to_radians().sin(), 0.0, -2.0 * (60f64).to_radians().cos());
        let slant = CameraModel::look_at(
            slant_pos,
            Vec3::zeros(),
            Vec3::new(0.0, 1.0, 0.0),
            80.0,
            80.0,
            w,
            w,
        )
        .unwrap();
        let (depth_f, mask_f) = render_depth_mask(&square, &SimilarityTransform::identity(), &fronto);
        let (depth_s, mask_s) = render_depth_mask(&square, &SimilarityTransform::identity(), &slant);
        assert!(mask_s.count() < mask_f.count(), "slant must foreshorten");

        let bundle = bundle_of(vec![
            frame(0, fronto, depth_f, &mask_f),
            frame(1, slant, depth_s, &mask_s),
        ]);
        let group = group_of(vec![(0, mask_f), (1, mask_s)]);
        let winner = select_optimal_view(&group, &bundle, ViewCriterion::SurfaceArea).unwrap();

        // Brute-force oracle over both frames.
        let scores = view_scores(&group, &bundle, ViewCriterion::SurfaceArea).unwrap();
        let oracle = scores
            .iter()
            .fold(None::<(FrameId, f64)>, |acc, &(fid, s)| match acc {
                Some((_, best)) if s <= best => acc,
                _ => Some((fid, s)),
            })
            .unwrap()
            .0;
        assert_eq!(winner, oracle);
        assert_eq!(winner, 0);
    }

    #[test]
    fn pixel_criterion_prefers_the_cropped_closeup() {
        // Close-up camera sees only part of the square but in many pixels;
        // the far camera sees all of it in fewer pixels. The 3D-area
        // criterion picks the far view, pixel counting picks the close-up.
        let square = square_mesh();
        let w = 64;
        let close = CameraModel::look_at(
            Vec3::new(0.25, 0.0, -0.4),
            Vec3::new(0.25, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            80.0,
            80.0,
            w,
            w,
        )
        .unwrap();
        let far = CameraModel::look_at(
            Vec3::new(0.0, 0.0, -2.0),
            Vec3::zeros(),
            Vec3::new(0.0, 1.0, 0.0),
            80.0,
            80.0,
            w,
            w,
        )
        .unwrap();
        let (depth_c, mask_c) = render_depth_mask(&square, &SimilarityTransform::identity(), &close);
        let (depth_f, mask_f) = render_depth_mask(&square, &SimilarityTransform::identity(), &far);
        assert!(mask_c.count() > mask_f.count());

        let bundle = bundle_of(vec![
            frame(0, close, depth_c, &mask_c),
            frame(1, far, depth_f, &mask_f),
        ]);
        let group = group_of(vec![(0, mask_c), (1, mask_f)]);
        assert_eq!(select_optimal_view(&group, &bundle, ViewCriterion::SurfaceArea).unwrap(), 1);
        assert_eq!(select_optimal_view(&group, &bundle, ViewCriterion::PixelArea).unwrap(), 0);
    }

    #[test]
    fn selection_is_invariant_under_world_reorientation() {
        let square = square_mesh();
        let w = 64;
        let make_bundle = |q: Mat3, shift: Vec3| {
            let mut frames = Vec::new();
            for (i, pos) in [Vec3::new(0.3, 0.1, -1.2), Vec3::new(1.4, 0.2, -1.4)]
                .iter()
                .enumerate()
            {
                let cam = CameraModel::look_at(
                    *pos,
                    Vec3::zeros(),
                    Vec3::new(0.0, 1.0, 0.0),
                    80.0,
                    80.0,
                    w,
                    w,
                )
                .unwrap();
                // Rotate the whole world: x' = q x + shift, so the camera
                // extrinsics pick up q^T and the rendered geometry moves too.
                let cam = CameraModel {
                    rotation: cam.rotation * q.transpose(),
                    translation: cam.translation - cam.rotation * q.transpose() * shift,
                    ..cam
                };
                let world_mesh = TriMesh {
                    vertices: square.vertices.iter().map(|v| q * v + shift).collect(),
                    ..square.clone()
                };
                let (depth, mask) =
                    render_depth_mask(&world_mesh, &SimilarityTransform::identity(), &cam);
                frames.push(frame(i as FrameId, cam, depth, &mask));
            }
            let group = group_of(
                frames.iter().map(|f| (f.id, f.masks[0].mask.clone())).collect(),
            );
            (bundle_of(frames), group)
        };

        let (bundle_a, group_a) = make_bundle(Mat3::identity(), Vec3::zeros());
        let q = *nalgebra::Rotation3::from_euler_angles(0.4, -0.8, 1.9).matrix();
        let (bundle_b, group_b) = make_bundle(q, Vec3::new(3.0, -2.0, 1.0));

        let pick_a = select_optimal_view(&group_a, &bundle_a, ViewCriterion::SurfaceArea).unwrap();
        let pick_b = select_optimal_view(&group_b, &bundle_b, ViewCriterion::SurfaceArea).unwrap();
        assert_eq!(pick_a, pick_b);
    }

    #[test]
    fn all_zero_surfaces_mean_no_viable_view() {
        let cam = camera(100.0, 8, 8);
        let mut mask = Mask::new(8, 8);
        mask.set(2, 2, true);
        let mut depth = DepthMap::new(8, 8);
        depth.set(2, 2, 1.0); // single vertex, no quad -> zero area
        let bundle = bundle_of(vec![frame(0, cam, depth, &mask)]);
        let group = group_of(vec![(0, mask)]);
        assert!(matches!(
            select_optimal_view(&group, &bundle, ViewCriterion::SurfaceArea),
            Err(Error::NoViableView(0))
        ));
    }

    struct ScriptedAssetProvider {
        response: std::result::Result<AssetResponse, String>,
    }

    impl AssetProvider for ScriptedAssetProvider {
        fn name(&self) -> &'static str {
            "scripted"
        }
        fn generate(&self, _request: &AssetRequest) -> Result<AssetResponse> {
            self.response
                .clone()
                .map_err(|detail| Error::Provider { provider: "scripted", detail })
        }
    }

    fn viable_setup() -> (InstanceGroup, SceneBundle) {
        let cam = camera(100.0, 16, 16);
        let (mask, depth) = flat_observation(&cam, 4, 4, 4, 1.0);
        let bundle = bundle_of(vec![frame(0, cam, depth, &mask)]);
        (group_of(vec![(0, mask)]), bundle)
    }

    #[test]
    fn asset_pass_through_keeps_provider_output() {
        let (group, bundle) = viable_setup();
        let response = AssetResponse {
            mesh: square_mesh(),
            initial_transform: SimilarityTransform::new(
                1.2,
                *nalgebra::Rotation3::from_euler_angles(0.0, 0.0, 0.5).matrix(),
                Vec3::new(1.0, 2.0, 3.0),
            ),
        };
        let provider = ScriptedAssetProvider { response: Ok(response.clone()) };
        let got = generate_asset(&group, 0, &bundle, &provider).unwrap();
        assert_eq!(got.mesh.vertices, response.mesh.vertices);
        assert_eq!(got.initial_transform, response.initial_transform);
    }

    #[test]
    fn empty_mesh_and_reflection_are_rejected() {
        let (group, bundle) = viable_setup();
        let empty = ScriptedAssetProvider {
            response: Ok(AssetResponse {
                mesh: TriMesh { vertices: vec![], triangles: vec![], colors: None },
                initial_transform: SimilarityTransform::identity(),
            }),
        };
        assert!(matches!(
            generate_asset(&group, 0, &bundle, &empty),
            Err(Error::AssetRejected { instance: 0, .. })
        ));

        let mut reflection = Mat3::identity();
        reflection[(0, 0)] = -1.0;
        let reflected = ScriptedAssetProvider {
            response: Ok(AssetResponse {
                mesh: square_mesh(),
                initial_transform: SimilarityTransform {
                    scale: 1.0,
                    rotation: reflection,
                    translation: Vec3::zeros(),
                },
            }),
        };
        assert!(matches!(
            generate_asset(&group, 0, &bundle, &reflected),
            Err(Error::AssetRejected { .. })
        ));
    }

    #[test]
    fn provider_failure_is_isolated_to_the_instance() {
        let (group, bundle) = viable_setup();
        let provider = ScriptedAssetProvider { response: Err("model server down".into()) };
        let err = generate_asset(&group, 0, &bundle, &provider).unwrap_err();
        match err {
            Error::AssetRejected { instance, detail } => {
                assert_eq!(instance, 0);
                assert!(detail.contains("model server down"), "{detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
