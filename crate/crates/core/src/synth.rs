//! Deterministic synthetic desk scenes with exact ground truth, plus oracle
//! providers that stand in for the foundation models behind each provider
//! trait.
//!
//! A generated scene is primitives (boxes, cylinders, icospheres with
//! distinct vertex colors) placed on a floor, optionally stacked, observed by
//! a camera orbit, and rasterized into per-frame depth plus per-instance
//! visibility masks. Two knobs feed specific stages: track fragmentation
//! (one instance's masks split across two track ids at a temporal gap)
//! exercises deduplication, and the asset oracle's pose perturbation
//! exercises alignment. Everything is a pure function of the seed: two runs
//! produce byte-identical bundles.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::align::{nearest_pixel, CorrespondenceProvider, MatchRequest, PixelMatch};
use crate::bundle::{
    load_bundle, load_mesh, load_scene, safe_join, save_bundle, save_mesh, save_scene, Frame,
    MaskEntry, PlacedObject, RelationKind, SceneBundle, SceneDescription, SpatialRelation,
    SupportTarget, DEFAULT_GRAVITY,
};
use crate::discovery::{CategoryRegistry, LabelProvider};
use crate::geom::{CameraModel, DepthMap, Mask, Mat3, SimilarityTransform, TriMesh, Vec3};
use crate::raster::{mask_iou, render_depth_mask};
use crate::refine::RelationProvider;
use crate::viewsel::{AssetProvider, AssetRequest, AssetResponse};
use crate::{Error, FrameId, InstanceId, Result};

/// Generation parameters. Objects cycle through the shape roster
/// (box, cylinder, icosphere) and through `categories`.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub objects: usize,
    pub categories: Vec<String>,
    pub seed: u64,
    /// Camera orbit length.
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    /// When set, every odd-indexed object stacks onto the most recent
    /// unoccupied flat-topped object it fits on (shrinking its scale if
    /// needed), falling back to the floor.
    pub stacking: bool,
    /// Number of instances (taken from the lowest ids) whose track is split
    /// in two at the middle of its observation run.
    pub fragments: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            objects: 4,
            categories: vec!["box".into(), "can".into(), "ball".into(), "block".into()],
            seed: 1,
            frames: 12,
            width: 128,
            height: 128,
            stacking: false,
            fragments: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects == 0 || self.objects > 64 {
            return Err(Error::Config(format!(
                "object count must be in 1..=64, got {}",
                self.objects
            )));
        }
        if self.categories.is_empty() || self.categories.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::Config("category list must be nonempty labels".into()));
        }
        if self.frames == 0 || self.frames > 32 {
            return Err(Error::Config(format!(
                "frame count must be in 1..=32, got {}",
                self.frames
            )));
        }
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if !(32..=256).contains(&v) {
                return Err(Error::Config(format!("{name} must be in 32..=256, got {v}")));
            }
        }
        if self.fragments > self.objects {
            return Err(Error::Config(format!(
                "cannot fragment {} of {} instances",
                self.fragments, self.objects
            )));
        }
        Ok(())
    }
}

/// A generated scene: the ground-truth description, the canonical-frame mesh
/// of every instance, and the rendered capture bundle.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub scene: SceneDescription,
    pub meshes: BTreeMap<InstanceId, TriMesh>,
    pub bundle: SceneBundle,
}

const FLOOR_HALF_EXTENT: f64 = 2.5;
const ORBIT_RADIUS: f64 = 2.1;
const ORBIT_HEIGHT: f64 = 1.35;
const ORBIT_TARGET: Vec3 = Vec3::new(0.0, 0.0, 0.2);
/// Focal length as a fraction of the smaller image dimension.
const FOCAL_FACTOR: f64 = 1.05;
const PLACEMENT_RADIUS: f64 = 0.78;
const PLACEMENT_GAP: f64 = 0.06;
const PLACEMENT_ATTEMPTS: usize = 200;
/// A stacked object's footprint may use at most this fraction of the
/// support's top inradius.
const STACK_FIT: f64 = 0.8;
const STACK_MIN_SCALE: f64 = 0.3;
const STACK_MAX_TOP: f64 = 1.1;
/// Every instance must be visible in at least this many frames, or the
/// layout is rejected: later stages need multiple views per object.
const MIN_OBSERVATIONS: usize = 3;

fn rot_z(yaw: f64) -> Mat3 {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i.rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Distinct per-object base hue (golden-ratio sequence) with per-vertex
/// variation, so that no two objects and no two neighboring vertices share
/// a color.
fn paint(mesh: &mut TriMesh, object_index: usize) {
    let base = ((object_index as f64 + 1.0) * 0.618_033_988_749_895).fract();
    let colors = (0..mesh.vertices.len())
        .map(|j| {
            let hue = base + 0.08 * (j as f64 * 0.31).fract();
            let value = 0.55 + 0.4 * (j as f64 * 0.377).fract();
            hsv_to_rgb(hue, 0.7, value)
        })
        .collect();
    mesh.colors = Some(colors);
}

/// Axis-aligned box spanning `[-hx,hx] x [-hy,hy] x [-hz,hz]`, faces wound
/// outward.
pub fn box_mesh(hx: f64, hy: f64, hz: f64) -> TriMesh {
    let mut vertices = Vec::with_capacity(8);
    for &z in &[-hz, hz] {
        vertices.push(Vec3::new(-hx, -hy, z));
        vertices.push(Vec3::new(hx, -hy, z));
        vertices.push(Vec3::new(hx, hy, z));
        vertices.push(Vec3::new(-hx, hy, z));
    }
    let triangles = vec![
        [0, 2, 1],
        [0, 3, 2], // bottom, -z
        [4, 5, 6],
        [4, 6, 7], // top, +z
        [0, 1, 5],
        [0, 5, 4], // -y
        [2, 3, 7],
        [2, 7, 6], // +y
        [0, 4, 7],
        [0, 7, 3], // -x
        [1, 2, 6],
        [1, 6, 5], // +x
    ];
    TriMesh { vertices, triangles, colors: None }
}

/// Closed cylinder around the z axis: radius `r`, height `2 * hh`.
pub fn cylinder_mesh(r: f64, hh: f64, segments: u32) -> TriMesh {
    let s = segments.max(3);
    let mut vertices = Vec::with_capacity(2 * s as usize);
    for &z in &[-hh, hh] {
        for k in 0..s {
            let a = TAU * k as f64 / s as f64;
            vertices.push(Vec3::new(r * a.cos(), r * a.sin(), z));
        }
    }
    let mut triangles = Vec::with_capacity(4 * s as usize);
    for k in 0..s {
        let j = (k + 1) % s;
        let (bk, bj, tk, tj) = (k, j, s + k, s + j);
        triangles.push([bk, bj, tj]);
        triangles.push([bk, tj, tk]);
    }
    for k in 1..s - 1 {
        triangles.push([0, k + 1, k]); // bottom cap, faces -z
        triangles.push([s, s + k, s + k + 1]); // top cap, faces +z
    }
    TriMesh { vertices, triangles, colors: None }
}

/// Sphere of radius `r` by icosahedron midpoint subdivision; `level` 2 gives
/// 320 triangles.
pub fn icosphere_mesh(r: f64, level: u32) -> TriMesh {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let mut vertices: Vec<Vec3> =
        raw.iter().map(|&(x, y, z)| Vec3::new(x, y, z).normalize() * r).collect();
    let mut triangles: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut midpoint: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut mid = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let m = ((vertices[a as usize] + vertices[b as usize]) / 2.0).normalize() * r;
                vertices.push(m);
                (vertices.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for [a, b, c] in triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        triangles = next;
    }
    TriMesh { vertices, triangles, colors: None }
}

fn floor_mesh() -> TriMesh {
    let e = FLOOR_HALF_EXTENT;
    let mut mesh = TriMesh {
        vertices: vec![
            Vec3::new(-e, -e, 0.0),
            Vec3::new(e, -e, 0.0),
            Vec3::new(e, e, 0.0),
            Vec3::new(-e, e, 0.0),
        ],
        triangles: vec![[0, 1, 2], [0, 2, 3]],
        colors: None,
    };
    mesh.colors = Some(vec![[0.5, 0.5, 0.5]; 4]);
    mesh
}

/// Construction-time footprint of one placed object.
struct Placed {
    x: f64,
    y: f64,
    /// World-space circumradius of the xy footprint.
    footprint: f64,
    /// World-space inradius of the flat top, for stackable shapes.
    top_inradius: Option<f64>,
    top_z: f64,
    on_floor: bool,
    occupied: bool,
}

/// Generates the ground-truth scene and its rendered capture bundle.
///
/// Layout is rejection-sampled on a disc; an arrangement that cannot be
/// placed without overlap, or that leaves some instance visible in fewer
/// than three frames, is [`Error::UnsatisfiableLayout`].
pub fn generate_scene(spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut objects: Vec<PlacedObject> = Vec::with_capacity(spec.objects);
    let mut meshes: BTreeMap<InstanceId, TriMesh> = BTreeMap::new();
    let mut placed: Vec<Placed> = Vec::with_capacity(spec.objects);

    for i in 0..spec.objects {
        let category = spec.categories[i % spec.categories.len()].clone();
        // footprint / top_inradius / half-height are canonical (pre-scale).
        let (mut mesh, footprint, top_inradius, half_h) = match i % 3 {
            0 => {
                let hx = rng.random_range(0.09..0.18);
                let hy = rng.random_range(0.09..0.18);
                let hz = rng.random_range(0.06..0.16);
                (box_mesh(hx, hy, hz), hx.hypot(hy), Some(hx.min(hy)), hz)
            }
            1 => {
                let r = rng.random_range(0.06..0.13);
                let hh = rng.random_range(0.07..0.16);
                (cylinder_mesh(r, hh, 24), r, Some(r), hh)
            }
            _ => {
                let r = rng.random_range(0.08..0.15);
                (icosphere_mesh(r, 2), r, None, r)
            }
        };
        paint(&mut mesh, i);
        let yaw = rng.random_range(0.0..TAU);
        let mut scale = rng.random_range(0.8..1.2);

        let mut support: Option<usize> = None;
        if spec.stacking && i % 2 == 1 {
            for j in (0..i).rev() {
                let p = &placed[j];
                if p.occupied {
                    continue;
                }
                let Some(inradius) = p.top_inradius else { continue };
                let fit = (STACK_FIT * inradius / footprint).min(scale);
                if fit < STACK_MIN_SCALE || p.top_z + 2.0 * fit * half_h > STACK_MAX_TOP {
                    continue;
                }
                scale = fit;
                support = Some(j);
                break;
            }
        }

        let (x, y, base_z, relation) = match support {
            Some(j) => {
                let (sx, sy, stop) = (placed[j].x, placed[j].y, placed[j].top_z);
                let room = (placed[j].top_inradius.unwrap() - scale * footprint).max(0.0);
                let rr = 0.3 * room * rng.random::<f64>().sqrt();
                let th = rng.random_range(0.0..TAU);
                placed[j].occupied = true;
                (
                    sx + rr * th.cos(),
                    sy + rr * th.sin(),
                    stop,
                    RelationKind::SupportedBy(SupportTarget::Object(j as InstanceId)),
                )
            }
            None => {
                let foot = scale * footprint;
                let mut spot = None;
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let rr = PLACEMENT_RADIUS * rng.random::<f64>().sqrt();
                    let th = rng.random_range(0.0..TAU);
                    let (x, y) = (rr * th.cos(), rr * th.sin());
                    let clear = placed.iter().all(|p| {
                        !p.on_floor
                            || (x - p.x).hypot(y - p.y) >= foot + p.footprint + PLACEMENT_GAP
                    });
                    if clear {
                        spot = Some((x, y));
                        break;
                    }
                }
                let (x, y) = spot.ok_or_else(|| {
                    Error::UnsatisfiableLayout(format!(
                        "no collision-free spot for object {i} after {PLACEMENT_ATTEMPTS} attempts"
                    ))
                })?;
                (x, y, 0.0, RelationKind::SupportedBy(SupportTarget::Floor))
            }
        };

        let translation = Vec3::new(x, y, base_z + scale * half_h);
        placed.push(Placed {
            x,
            y,
            footprint: scale * footprint,
            top_inradius: top_inradius.map(|v| v * scale),
            top_z: translation.z + scale * half_h,
            on_floor: support.is_none(),
            occupied: false,
        });
        objects.push(PlacedObject {
            id: i as InstanceId,
            category,
            mesh_ref: format!("gt_meshes/{i:03}.obj"),
            transform: SimilarityTransform::new(scale, rot_z(yaw), translation),
            relations: vec![relation],
        });
        meshes.insert(i as InstanceId, mesh);
    }

    let scene =
        SceneDescription { gravity: DEFAULT_GRAVITY, walls: Vec::new(), objects };
    scene.validate()?;

    // Orbit, render, and composite: each pixel belongs to the nearest
    // surface, lowest id on exact ties, floor and background owning none.
    let floor = floor_mesh();
    let floor_pose = SimilarityTransform::identity();
    let focal = FOCAL_FACTOR * spec.width.min(spec.height) as f64;
    let (w, h) = (spec.width as usize, spec.height as usize);

    let mut frames: Vec<Frame> = Vec::with_capacity(spec.frames);
    let mut observations: Vec<Vec<(FrameId, Mask)>> = vec![Vec::new(); spec.objects];
    for k in 0..spec.frames {
        let angle = TAU * k as f64 / spec.frames as f64;
        let center =
            Vec3::new(ORBIT_RADIUS * angle.cos(), ORBIT_RADIUS * angle.sin(), ORBIT_HEIGHT);
        let camera = CameraModel::look_at(
            center,
            ORBIT_TARGET,
            Vec3::z(),
            focal,
            focal,
            spec.width,
            spec.height,
        )?;

        let (floor_depth, _) = render_depth_mask(&floor, &floor_pose, &camera);
        let mut best = vec![f64::INFINITY; w * h];
        let mut owner: Vec<Option<u32>> = vec![None; w * h];
        for y in 0..h {
            for x in 0..w {
                if let Some(z) = floor_depth.get(x as u32, y as u32) {
                    best[y * w + x] = z;
                }
            }
        }
        for obj in &scene.objects {
            let (depth, mask) = render_depth_mask(&meshes[&obj.id], &obj.transform, &camera);
            for (x, y) in mask.iter_set() {
                let z = depth.get(x, y).expect("covered pixels carry depth");
                let at = y as usize * w + x as usize;
                if z < best[at] {
                    best[at] = z;
                    owner[at] = Some(obj.id);
                }
            }
        }

        let mut composite = DepthMap::new(spec.width, spec.height);
        for y in 0..h {
            for x in 0..w {
                let z = best[y * w + x];
                if z.is_finite() {
                    composite.set(x as u32, y as u32, z as f32);
                }
            }
        }
        for obj in &scene.objects {
            let mut mask = Mask::new(spec.width, spec.height);
            for y in 0..h {
                for x in 0..w {
                    if owner[y * w + x] == Some(obj.id) {
                        mask.set(x as u32, y as u32, true);
                    }
                }
            }
            if !mask.is_empty() {
                observations[obj.id as usize].push((k as FrameId, mask));
            }
        }
        frames.push(Frame {
            id: k as FrameId,
            camera,
            depth: composite,
            masks: Vec::new(),
            image: None,
        });
    }

    // Tracks: instance i keeps track id i; a fragmented instance's later
    // observations move to track `objects + i`, so group ids (smallest
    // member) still equal instance ids after a correct merge.
    for (i, obs) in observations.iter().enumerate() {
        if obs.len() < MIN_OBSERVATIONS {
            return Err(Error::UnsatisfiableLayout(format!(
                "object {i} is visible in only {} of {} frames",
                obs.len(),
                spec.frames
            )));
        }
        let split = if i < spec.fragments && obs.len() >= 4 { obs.len() / 2 } else { obs.len() };
        for (n, (fid, mask)) in obs.iter().enumerate() {
            let track =
                if n < split { i as u32 } else { spec.objects as u32 + i as u32 };
            let frame = &mut frames[*fid as usize];
            frame.masks.push(MaskEntry {
                track,
                category: scene.objects[i].category.clone(),
                mask: mask.clone(),
            });
        }
    }
    for frame in &mut frames {
        frame.masks.sort_by_key(|e| e.track);
    }

    let bundle = SceneBundle { gravity: DEFAULT_GRAVITY, frames };
    bundle.validate()?;
    Ok(SynthScene { scene, meshes, bundle })
}

/// Writes a synthetic scene as a self-contained directory: the capture
/// bundle at the root, `gt_scene.txt` + `gt_meshes/` with the ground truth,
/// and `labels.txt`, a per-frame category transcript replayable by
/// [`crate::discovery::TranscriptLabelProvider`].
pub fn write_synth_dir(synth: &SynthScene, dir: &Path) -> Result<()> {
    save_bundle(&synth.bundle, dir)?;
    let mesh_dir = dir.join("gt_meshes");
    fs::create_dir_all(&mesh_dir)
        .map_err(|e| Error::io(format!("creating {}", mesh_dir.display()), e))?;
    for (id, mesh) in &synth.meshes {
        save_mesh(mesh, &mesh_dir.join(format!("{id:03}.obj")))?;
    }
    save_scene(&synth.scene, &dir.join("gt_scene.txt"))?;

    let mut transcript = String::new();
    for frame in &synth.bundle.frames {
        let categories: BTreeSet<&str> =
            frame.masks.iter().map(|m| m.category.as_str()).collect();
        for c in categories {
            let _ = writeln!(transcript, "{} {}", frame.id, c);
        }
    }
    let path = dir.join("labels.txt");
    fs::write(&path, transcript).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// A synthetic scene read back from disk.
#[derive(Debug, Clone)]
pub struct SynthDir {
    pub bundle: SceneBundle,
    pub gt: SceneDescription,
    pub gt_meshes: BTreeMap<InstanceId, TriMesh>,
}

pub fn load_synth_dir(dir: &Path) -> Result<SynthDir> {
    let bundle = load_bundle(dir)?;
    let gt = load_scene(&dir.join("gt_scene.txt"))?;
    let mut gt_meshes = BTreeMap::new();
    for obj in &gt.objects {
        gt_meshes.insert(obj.id, load_mesh(&safe_join(dir, &obj.mesh_ref)?)?);
    }
    Ok(SynthDir { bundle, gt, gt_meshes })
}

/// One deterministic 64-bit value from a list of parts (SplitMix64 steps),
/// used to derive per-request RNG streams that never collide across
/// (instance, frame, iteration).
fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        state ^= state >> 31;
    }
    state
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let theta: f64 = rng.random_range(0.0..TAU);
    let r = (1.0 - z * z).sqrt();
    Vec3::new(r * theta.cos(), r * theta.sin(), z)
}

/// The ground-truth object a mask shows, found by rendering every object
/// into the same camera and taking the best mask overlap. Robust to any
/// track-id scheme the caller uses.
fn identify_by_overlap(
    provider: &'static str,
    gt: &SceneDescription,
    meshes: &BTreeMap<InstanceId, TriMesh>,
    mask: &Mask,
    camera: &CameraModel,
) -> Result<InstanceId> {
    let mut best: Option<(f64, InstanceId)> = None;
    for obj in &gt.objects {
        let mesh = meshes.get(&obj.id).ok_or_else(|| Error::UnknownReference {
            kind: "mesh",
            name: obj.id.to_string(),
        })?;
        let (_, rendered) = render_depth_mask(mesh, &obj.transform, camera);
        let overlap = mask_iou(mask, &rendered)?;
        if overlap.both_empty || overlap.iou <= 0.0 {
            continue;
        }
        if best.is_none_or(|(b, _)| overlap.iou > b) {
            best = Some((overlap.iou, obj.id));
        }
    }
    best.map(|(_, id)| id).ok_or_else(|| Error::Provider {
        provider,
        detail: "mask overlaps no ground-truth object in this view".into(),
    })
}

/// Reads categories straight off the frame's mask entries, reporting only
/// those not yet registered — the ideal open-vocabulary labeler.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleLabelProvider;

impl LabelProvider for OracleLabelProvider {
    fn name(&self) -> &'static str {
        "oracle-labels"
    }

    fn labels_for_frame(&self, frame: &Frame, registry: &CategoryRegistry) -> Result<Vec<String>> {
        let visible: BTreeSet<&str> = frame
            .masks
            .iter()
            .filter(|e| !e.mask.is_empty())
            .map(|e| e.category.as_str())
            .collect();
        Ok(visible
            .into_iter()
            .filter(|c| !registry.contains(c))
            .map(str::to_owned)
            .collect())
    }
}

/// Magnitude of the pose error the asset oracle bakes into its initial
/// transforms. Directions are random per instance; magnitudes are applied
/// exactly, so recovery tests exercise the stated bound, not an average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    /// Multiplicative scale error; each instance gets this factor or its
    /// reciprocal. `1.0` disables.
    pub scale_factor: f64,
    /// Rotation error in radians about a random axis through the object
    /// centroid.
    pub rotation: f64,
    /// Translation error in meters along a random direction.
    pub translation: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self { scale_factor: 1.0, rotation: 0.0, translation: 0.0 }
    }
}

impl PerturbationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor.is_finite() && self.scale_factor > 0.0) {
            return Err(Error::Config(format!(
                "perturbation scale factor must be positive, got {}",
                self.scale_factor
            )));
        }
        for (name, v) in [("rotation", self.rotation), ("translation", self.translation)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "perturbation {name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Returns the ground-truth mesh of whichever object the request's mask
/// shows, with the true pose perturbed per [`PerturbationSpec`].
#[derive(Debug)]
pub struct OracleAssetProvider {
    gt: SceneDescription,
    meshes: BTreeMap<InstanceId, TriMesh>,
    perturbation: PerturbationSpec,
    seed: u64,
}

impl OracleAssetProvider {
    pub fn new(
        gt: &SceneDescription,
        meshes: &BTreeMap<InstanceId, TriMesh>,
        perturbation: PerturbationSpec,
        seed: u64,
    ) -> Result<Self> {
        perturbation.validate()?;
        Ok(Self { gt: gt.clone(), meshes: meshes.clone(), perturbation, seed })
    }
}

impl AssetProvider for OracleAssetProvider {
    fn name(&self) -> &'static str {
        "oracle-assets"
    }

    fn generate(&self, request: &AssetRequest) -> Result<AssetResponse> {
        let gt_id =
            identify_by_overlap(self.name(), &self.gt, &self.meshes, request.mask, request.camera)?;
        let truth = self.gt.object(gt_id).expect("identified ids come from the scene");
        let mesh = &self.meshes[&gt_id];

        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, 0xA55E, request.instance as u64]));
        let p = &self.perturbation;
        let factor =
            if rng.random_bool(0.5) { p.scale_factor } else { 1.0 / p.scale_factor };
        let axis = Unit::new_normalize(random_unit(&mut rng));
        let spin = *Rotation3::from_axis_angle(&axis, p.rotation).matrix();
        let offset = random_unit(&mut rng) * p.translation;
        // Perturb about the placed centroid so the object stays near its
        // true position even under large rotation or scale error.
        let centroid = truth.transform.apply(&mesh.vertex_centroid());
        let delta = SimilarityTransform::new(
            factor,
            spin,
            centroid + offset - (spin * centroid) * factor,
        );
        Ok(AssetResponse {
            mesh: mesh.clone(),
            initial_transform: delta.compose(&truth.transform),
        })
    }
}

/// Projects ground-truth surface points between the real and rendered views
/// — an idealized dense matcher with configurable pixel noise and a
/// configurable fraction of decorrelated outliers.
#[derive(Debug)]
pub struct OracleCorrespondenceProvider {
    gt: SceneDescription,
    meshes: BTreeMap<InstanceId, TriMesh>,
    noise_sigma: f64,
    outlier_fraction: f64,
    drift_pixels: f64,
    max_pairs: usize,
    seed: u64,
    /// instance id -> identified ground-truth id; filled by each instance's
    /// first request, which is deterministic per instance.
    identified: Mutex<BTreeMap<InstanceId, InstanceId>>,
}

/// Matches returned per request are thinned to this many by a deterministic
/// stride.
pub const DEFAULT_MAX_PAIRS: usize = 1500;

impl OracleCorrespondenceProvider {
    pub fn new(
        gt: &SceneDescription,
        meshes: &BTreeMap<InstanceId, TriMesh>,
        noise_sigma: f64,
        outlier_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "match noise sigma must be nonnegative, got {noise_sigma}"
            )));
        }
        if !(0.0..=1.0).contains(&outlier_fraction) {
            return Err(Error::Config(format!(
                "outlier fraction must be in [0, 1], got {outlier_fraction}"
            )));
        }
        Ok(Self {
            gt: gt.clone(),
            meshes: meshes.clone(),
            noise_sigma,
            outlier_fraction,
            drift_pixels: 0.0,
            max_pairs: DEFAULT_MAX_PAIRS,
            seed,
            identified: Mutex::new(BTreeMap::new()),
        })
    }

    /// Adds a systematic per-instance error: every match this provider
    /// returns for one instance has its real-side coordinate shifted by the
    /// same vector of length `drift_pixels`, direction seeded per instance.
    /// Models a matcher's crop-dependent bias (as opposed to per-pixel
    /// jitter), which consistently registers the asset a few centimeters off
    /// the true surface. `0.0` disables.
    pub fn with_drift(mut self, drift_pixels: f64) -> Result<Self> {
        if !(drift_pixels.is_finite() && drift_pixels >= 0.0) {
            return Err(Error::Config(format!(
                "match drift must be nonnegative, got {drift_pixels}"
            )));
        }
        self.drift_pixels = drift_pixels;
        Ok(self)
    }

    fn gt_for(&self, request: &MatchRequest) -> Result<InstanceId> {
        if let Some(&id) = self.identified.lock().unwrap().get(&request.instance) {
            return Ok(id);
        }
        let id = identify_by_overlap(
            "oracle-matches",
            &self.gt,
            &self.meshes,
            request.real_mask,
            request.camera,
        )?;
        self.identified.lock().unwrap().insert(request.instance, id);
        Ok(id)
    }
}

impl CorrespondenceProvider for OracleCorrespondenceProvider {
    fn name(&self) -> &'static str {
        "oracle-matches"
    }

    fn matches(&self, request: &MatchRequest) -> Result<Vec<PixelMatch>> {
        let gt_id = self.gt_for(request)?;
        let truth = &self.gt.object(gt_id).expect("identified ids come from the scene").transform;
        let to_material = truth.inverse();
        let cam = request.camera;
        let (w, h) = (cam.width, cam.height);

        // True correspondences: each observed pixel backprojects onto the
        // ground-truth surface; the same material point projected under the
        // current pose is where the rendered view shows it — kept only if
        // the render actually shows it (not self-occluded, on-raster).
        let mut pairs = Vec::new();
        for (x, y) in request.real_mask.iter_set() {
            let Some(z) = request.real_depth.get(x, y) else { continue };
            let world = cam.backproject(x as f64, y as f64, z)?;
            let moved = request.pose.apply(&to_material.apply(&world));
            let Some(proj) = cam.project(&moved) else { continue };
            let Some((px, py)) = nearest_pixel(proj.u, proj.v, w, h) else { continue };
            let Some(zr) = request.rendered_depth.get(px, py) else { continue };
            if (zr - proj.depth).abs() > 0.01_f64.max(0.01 * proj.depth) {
                continue;
            }
            pairs.push(PixelMatch {
                real: (x as f64, y as f64),
                rendered: (proj.u, proj.v),
                confidence: 1.0,
            });
        }
        if pairs.len() > self.max_pairs {
            let stride = pairs.len().div_ceil(self.max_pairs);
            pairs = pairs.into_iter().step_by(stride).collect();
        }

        if self.drift_pixels > 0.0 {
            // Same shift for every pair of this instance, in every frame and
            // iteration: a bias the fit cannot average away. Shifted
            // coordinates that land off the object lift to junk the outlier
            // screen has to catch, exactly as with a real matcher near
            // silhouette edges.
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                self.seed,
                0xD21F7,
                request.instance as u64,
            ]));
            let angle = rng.random_range(0.0..TAU);
            let (du, dv) = (self.drift_pixels * angle.cos(), self.drift_pixels * angle.sin());
            for p in &mut pairs {
                p.real.0 = (p.real.0 + du).clamp(0.0, (w - 1) as f64);
                p.real.1 = (p.real.1 + dv).clamp(0.0, (h - 1) as f64);
            }
        }

        if self.noise_sigma > 0.0 || self.outlier_fraction > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                self.seed,
                0xC0DE,
                request.instance as u64,
                request.frame as u64,
                request.iteration as u64,
            ]));
            if self.noise_sigma > 0.0 {
                let normal = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
                for p in &mut pairs {
                    p.rendered.0 =
                        (p.rendered.0 + normal.sample(&mut rng)).clamp(0.0, (w - 1) as f64);
                    p.rendered.1 =
                        (p.rendered.1 + normal.sample(&mut rng)).clamp(0.0, (h - 1) as f64);
                }
            }
            let junk = (self.outlier_fraction * pairs.len() as f64).round() as usize;
            if junk > 0 {
                let targets: Vec<(u32, u32)> = request.rendered_mask.iter_set().collect();
                let chosen = rand::seq::index::sample(&mut rng, pairs.len(), junk);
                for i in chosen {
                    pairs[i].rendered = if targets.is_empty() {
                        (
                            rng.random_range(0..w) as f64,
                            rng.random_range(0..h) as f64,
                        )
                    } else {
                        let (tx, ty) = targets[rng.random_range(0..targets.len())];
                        (tx as f64, ty as f64)
                    };
                }
            }
        }
        Ok(pairs)
    }
}

/// Maps the ground-truth relations onto a drafted scene's instances by
/// category + nearest position, translating support targets into draft ids.
#[derive(Debug, Clone)]
pub struct OracleRelationProvider {
    gt: SceneDescription,
}

impl OracleRelationProvider {
    pub fn new(gt: &SceneDescription) -> Self {
        Self { gt: gt.clone() }
    }
}

/// Nearest same-category object of `pool` to `reference`, ties toward the
/// lower id.
fn nearest_same_category<'a>(
    reference: &PlacedObject,
    pool: &'a [PlacedObject],
) -> Option<&'a PlacedObject> {
    let mut best: Option<(f64, &PlacedObject)> = None;
    for candidate in pool {
        if candidate.category != reference.category {
            continue;
        }
        let d = (candidate.transform.translation - reference.transform.translation).norm();
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, candidate));
        }
    }
    best.map(|(_, obj)| obj)
}

impl RelationProvider for OracleRelationProvider {
    fn name(&self) -> &'static str {
        "oracle-relations"
    }

    fn relations(
        &self,
        draft: &SceneDescription,
        _bundle: &SceneBundle,
    ) -> Result<Vec<SpatialRelation>> {
        // Where each ground-truth object ended up in the draft, for
        // rewriting support targets.
        let gt_to_draft: BTreeMap<InstanceId, InstanceId> = self
            .gt
            .objects
            .iter()
            .filter_map(|g| nearest_same_category(g, &draft.objects).map(|d| (g.id, d.id)))
            .collect();

        let mut out = Vec::new();
        for drafted in &draft.objects {
            let mut kinds = Vec::new();
            if let Some(truth) = nearest_same_category(drafted, &self.gt.objects) {
                for kind in &truth.relations {
                    match kind {
                        RelationKind::SupportedBy(SupportTarget::Object(gt_target)) => {
                            match gt_to_draft.get(gt_target) {
                                Some(&target) if target != drafted.id => kinds.push(
                                    RelationKind::SupportedBy(SupportTarget::Object(target)),
                                ),
                                // Target unplaced or resolved to the subject
                                // itself (merged away): no usable support.
                                _ => {}
                            }
                        }
                        other => kinds.push(other.clone()),
                    }
                }
            }
            if kinds.is_empty() {
                kinds.push(RelationKind::FreeStanding);
            }
            out.extend(
                kinds.into_iter().map(|kind| SpatialRelation { subject: drafted.id, kind }),
            );
        }
        Ok(out)
    }
}

/// Knobs for the full oracle set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub perturbation: PerturbationSpec,
    /// Pixel-coordinate noise on rendered match positions.
    pub noise_sigma: f64,
    /// Fraction of matches replaced by decorrelated junk.
    pub outlier_fraction: f64,
    /// Systematic per-instance shift of real-side match coordinates, in
    /// pixels (see [`OracleCorrespondenceProvider::with_drift`]).
    pub drift_pixels: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            perturbation: PerturbationSpec::none(),
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            drift_pixels: 0.0,
            seed: 0,
        }
    }
}

/// The full provider set for one ground-truth scene.
#[derive(Debug)]
pub struct OracleProviders {
    pub labels: OracleLabelProvider,
    pub assets: OracleAssetProvider,
    pub matches: OracleCorrespondenceProvider,
    pub relations: OracleRelationProvider,
}

pub fn oracle_providers(
    gt: &SceneDescription,
    meshes: &BTreeMap<InstanceId, TriMesh>,
    config: &OracleConfig,
) -> Result<OracleProviders> {
    Ok(OracleProviders {
        labels: OracleLabelProvider,
        assets: OracleAssetProvider::new(gt, meshes, config.perturbation, config.seed)?,
        matches: OracleCorrespondenceProvider::new(
            gt,
            meshes,
            config.noise_sigma,
            config.outlier_fraction,
            config.seed,
        )?
        .with_drift(config.drift_pixels)?,
        relations: OracleRelationProvider::new(gt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dedup::{build_tracks, merge_instances, DedupConfig};
    use crate::discovery::{discover_categories, TranscriptLabelProvider};
    use crate::geom::rotation_angle_between;
    use std::path::PathBuf;

    fn spec(objects: usize, seed: u64) -> SceneSpec {
        SceneSpec { objects, seed, ..SceneSpec::default() }
    }

    #[test]
    fn primitives_stay_within_budget_and_face_outward() {
        let b = box_mesh(0.1, 0.15, 0.08);
        let c = cylinder_mesh(0.1, 0.12, 24);
        let s = icosphere_mesh(0.1, 2);
        for mesh in [&b, &c, &s] {
            mesh.validate().unwrap();
            assert!(mesh.triangles.len() <= 5000);
            // Every face normal points away from the centroid (convex,
            // outward winding).
            for t in 0..mesh.triangles.len() {
                let [p, q, r] = mesh.triangle_corners(t);
                let n = (q - p).cross(&(r - p));
                let mid = (p + q + r) / 3.0;
                assert!(n.dot(&mid) > 0.0, "inward-facing triangle {t}");
            }
        }
        assert_eq!(b.triangles.len(), 12);
        assert_eq!(s.triangles.len(), 320);
        for v in &s.vertices {
            assert!((v.norm() - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn default_scene_is_valid_and_fully_observed() {
        let out = generate_scene(&SceneSpec::default()).unwrap();
        assert_eq!(out.bundle.frames.len(), 12);
        assert_eq!(out.scene.objects.len(), 4);
        let tracks = build_tracks(&out.bundle);
        assert_eq!(tracks.len(), 4);
        for t in &tracks {
            assert!(t.observations.len() >= MIN_OBSERVATIONS);
        }
        // Distinct colors across objects.
        let first = |id: u32| out.meshes[&id].colors.as_ref().unwrap()[0];
        assert_ne!(first(0), first(1));
        // Floor contact is exact: bottom of each floor-supported object at 0.
        for obj in &out.scene.objects {
            let mesh = &out.meshes[&obj.id];
            let low = mesh
                .vertices
                .iter()
                .map(|v| obj.transform.apply(v).z)
                .fold(f64::INFINITY, f64::min);
            if obj.relations.contains(&RelationKind::SupportedBy(SupportTarget::Floor)) {
                assert!(low.abs() < 1e-12, "object {} floats at {low}", obj.id);
            }
        }
    }

    #[test]
    fn single_box_orbit_is_tracked_in_every_frame() {
        let out = generate_scene(&SceneSpec {
            objects: 1,
            categories: vec!["box".into()],
            frames: 8,
            ..SceneSpec::default()
        })
        .unwrap();
        assert_eq!(out.bundle.frames.len(), 8);
        for frame in &out.bundle.frames {
            assert_eq!(frame.masks.len(), 1);
            assert_eq!(frame.masks[0].track, 0);
            assert!(!frame.masks[0].mask.is_empty());
        }
    }

    fn dir_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let spec = spec(3, 99);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_synth_dir(&generate_scene(&spec).unwrap(), a.path()).unwrap();
        write_synth_dir(&generate_scene(&spec).unwrap(), b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

        let c = tempfile::tempdir().unwrap();
        write_synth_dir(
            &generate_scene(&SceneSpec { seed: 100, ..spec }).unwrap(),
            c.path(),
        )
        .unwrap();
        assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
    }

    #[test]
    fn synth_dir_round_trips() {
        let out = generate_scene(&spec(3, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synth_dir(&out, dir.path()).unwrap();
        let loaded = load_synth_dir(dir.path()).unwrap();
        assert_eq!(loaded.bundle.frames.len(), out.bundle.frames.len());
        assert_eq!(loaded.gt.objects.len(), out.scene.objects.len());
        assert_eq!(loaded.gt_meshes, out.meshes);
    }

    #[test]
    fn fragmentation_splits_one_instance_into_mergeable_tracks() {
        let whole = generate_scene(&spec(2, 11)).unwrap();
        let split =
            generate_scene(&SceneSpec { fragments: 1, ..spec(2, 11) }).unwrap();

        let tracks = build_tracks(&split.bundle);
        let ids: Vec<u32> = tracks.iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![0, 1, 2], "instance 0 splits into tracks 0 and 2");

        // The fragments partition the unfragmented track's observations.
        let whole_tracks = build_tracks(&whole.bundle);
        let whole_frames: Vec<FrameId> =
            whole_tracks[0].observations.iter().map(|(f, _)| *f).collect();
        let mut joined: Vec<FrameId> = tracks[0]
            .observations
            .iter()
            .chain(&tracks[2].observations)
            .map(|(f, _)| *f)
            .collect();
        joined.sort_unstable();
        assert_eq!(joined, whole_frames);

        // Deduplication must reunite them.
        let outcome =
            merge_instances(&tracks, &split.bundle, &DedupConfig::default()).unwrap();
        assert_eq!(outcome.groups.len(), 2);
        assert_eq!(outcome.groups[0].members, vec![0, 2]);
        assert_eq!(outcome.groups[1].members, vec![1]);
    }

    #[test]
    fn stacking_emits_exact_support_relations() {
        let out = generate_scene(&SceneSpec { stacking: true, ..spec(2, 21) }).unwrap();
        let [base, rider] = &out.scene.objects[..] else { panic!("two objects") };
        assert_eq!(
            base.relations,
            vec![RelationKind::SupportedBy(SupportTarget::Floor)]
        );
        assert_eq!(
            rider.relations,
            vec![RelationKind::SupportedBy(SupportTarget::Object(0))]
        );
        // Exact contact: the rider's lowest point sits on the base's top.
        let top = out.meshes[&0]
            .vertices
            .iter()
            .map(|v| base.transform.apply(v).z)
            .fold(f64::NEG_INFINITY, f64::max);
        let bottom = out.meshes[&1]
            .vertices
            .iter()
            .map(|v| rider.transform.apply(v).z)
            .fold(f64::INFINITY, f64::min);
        assert!((top - bottom).abs() < 1e-12);
    }

    #[test]
    fn impossible_layouts_are_rejected() {
        let err = generate_scene(&SceneSpec {
            objects: 64,
            frames: 2,
            ..SceneSpec::default()
        })
        .unwrap_err();
        assert!(matches!(err, Error::UnsatisfiableLayout(_)), "got {err:?}");
        assert!(generate_scene(&SceneSpec { objects: 0, ..SceneSpec::default() }).is_err());
    }

    #[test]
    fn label_transcript_replays_every_category() {
        let out = generate_scene(&spec(4, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synth_dir(&out, dir.path()).unwrap();
        let provider = TranscriptLabelProvider::from_file(&dir.path().join("labels.txt")).unwrap();
        let run =
            discover_categories(&out.bundle, &provider, 20, CategoryRegistry::new()).unwrap();
        for obj in &out.scene.objects {
            assert!(run.registry.contains(&obj.category), "missing {}", obj.category);
        }
    }

    #[test]
    fn label_oracle_reports_only_novel_categories() {
        let out = generate_scene(&spec(4, 3)).unwrap();
        let frame = &out.bundle.frames[0];
        let mut registry = CategoryRegistry::new();
        let first = OracleLabelProvider.labels_for_frame(frame, &registry).unwrap();
        assert!(!first.is_empty());
        for l in &first {
            registry.register(l);
        }
        assert!(OracleLabelProvider.labels_for_frame(frame, &registry).unwrap().is_empty());
    }

    /// The request an asset provider would receive for instance `id`
    /// observed in its first frame.
    fn asset_request<'a>(out: &'a SynthScene, id: InstanceId) -> AssetRequest<'a> {
        let frame = out
            .bundle
            .frames
            .iter()
            .find(|f| f.masks.iter().any(|m| m.track == id))
            .unwrap();
        let entry = frame.masks.iter().find(|m| m.track == id).unwrap();
        AssetRequest {
            instance: id,
            category: &entry.category,
            frame: frame.id,
            mask: &entry.mask,
            depth: &frame.depth,
            camera: &frame.camera,
        }
    }

    #[test]
    fn zero_perturbation_asset_oracle_returns_the_ground_truth() {
        let out = generate_scene(&spec(3, 17)).unwrap();
        let provider =
            OracleAssetProvider::new(&out.scene, &out.meshes, PerturbationSpec::none(), 9).unwrap();
        for obj in &out.scene.objects {
            let response = provider.generate(&asset_request(&out, obj.id)).unwrap();
            assert_eq!(response.mesh, out.meshes[&obj.id]);
            let t = &response.initial_transform;
            assert_eq!(t.scale, obj.transform.scale);
            assert_eq!(t.rotation, obj.transform.rotation);
            assert_eq!(t.translation, obj.transform.translation);
        }
    }

    #[test]
    fn perturbed_asset_oracle_applies_exact_magnitudes() {
        let out = generate_scene(&spec(3, 17)).unwrap();
        let knobs = PerturbationSpec {
            scale_factor: 1.3,
            rotation: 15f64.to_radians(),
            translation: 0.3,
        };
        let provider = OracleAssetProvider::new(&out.scene, &out.meshes, knobs, 9).unwrap();
        for obj in &out.scene.objects {
            let t0 = provider
                .generate(&asset_request(&out, obj.id))
                .unwrap()
                .initial_transform;
            let ratio = t0.scale / obj.transform.scale;
            assert!(
                (ratio - 1.3).abs() < 1e-12 || (ratio - 1.0 / 1.3).abs() < 1e-12,
                "scale ratio {ratio}"
            );
            let angle = rotation_angle_between(&t0.rotation, &obj.transform.rotation);
            assert!((angle - knobs.rotation).abs() < 1e-9, "angle {angle}");
            // The centroid moves by exactly the translation magnitude.
            let c = obj.transform.apply(&out.meshes[&obj.id].vertex_centroid());
            let moved = t0
                .apply(&out.meshes[&obj.id].vertex_centroid())
                - c;
            assert!((moved.norm() - 0.3).abs() < 1e-9, "offset {}", moved.norm());
        }
    }

    /// Builds a match request for one instance in one frame at the given
    /// pose, rendering the asset the way the alignment loop does.
    fn match_parts(
        out: &SynthScene,
        id: InstanceId,
        pose: &SimilarityTransform,
    ) -> (Frame, DepthMap, Mask) {
        let frame = out
            .bundle
            .frames
            .iter()
            .find(|f| f.masks.iter().any(|m| m.track == id))
            .unwrap()
            .clone();
        let (rd, rm) = render_depth_mask(&out.meshes[&id], pose, &frame.camera);
        (frame, rd, rm)
    }

    #[test]
    fn correspondence_oracle_is_exact_at_the_true_pose() {
        let out = generate_scene(&spec(2, 31)).unwrap();
        let provider =
            OracleCorrespondenceProvider::new(&out.scene, &out.meshes, 0.0, 0.0, 4).unwrap();
        let pose = out.scene.objects[0].transform.clone();
        let (frame, rd, rm) = match_parts(&out, 0, &pose);
        let entry = frame.masks.iter().find(|m| m.track == 0).unwrap();
        let request = MatchRequest {
            instance: 0,
            frame: frame.id,
            iteration: 1,
            camera: &frame.camera,
            real_depth: &frame.depth,
            real_mask: &entry.mask,
            rendered_depth: &rd,
            rendered_mask: &rm,
            pose: &pose,
        };
        let pairs = provider.matches(&request).unwrap();
        assert!(pairs.len() > 50, "only {} pairs", pairs.len());
        for p in &pairs {
            assert!(
                (p.real.0 - p.rendered.0).abs() < 1e-9
                    && (p.real.1 - p.rendered.1).abs() < 1e-9,
                "true-pose match should be the identity map: {p:?}"
            );
        }
    }

    #[test]
    fn correspondence_oracle_noise_and_outliers_have_the_configured_statistics() {
        let out = generate_scene(&spec(2, 31)).unwrap();
        let pose = out.scene.objects[0].transform.clone();
        let (frame, rd, rm) = match_parts(&out, 0, &pose);
        let entry = frame.masks.iter().find(|m| m.track == 0).unwrap();
        let request = |it: usize| MatchRequest {
            instance: 0,
            frame: frame.id,
            iteration: it,
            camera: &frame.camera,
            real_depth: &frame.depth,
            real_mask: &entry.mask,
            rendered_depth: &rd,
            rendered_mask: &rm,
            pose: &pose,
        };

        let noisy =
            OracleCorrespondenceProvider::new(&out.scene, &out.meshes, 0.5, 0.0, 4).unwrap();
        let pairs = noisy.matches(&request(1)).unwrap();
        let n = pairs.len() as f64;
        let var: f64 =
            pairs.iter().map(|p| (p.rendered.0 - p.real.0).powi(2)).sum::<f64>() / n;
        assert!(
            (var.sqrt() - 0.5).abs() < 0.15,
            "noise std {} should be near 0.5",
            var.sqrt()
        );
        // Same request, same stream: deterministic.
        assert_eq!(pairs, noisy.matches(&request(1)).unwrap());
        // Different iteration, different stream.
        assert_ne!(pairs, noisy.matches(&request(2)).unwrap());

        let dirty =
            OracleCorrespondenceProvider::new(&out.scene, &out.meshes, 0.0, 0.25, 4).unwrap();
        let pairs = dirty.matches(&request(1)).unwrap();
        let junk = pairs
            .iter()
            .filter(|p| {
                (p.rendered.0 - p.real.0).hypot(p.rendered.1 - p.real.1) > 1.0
            })
            .count();
        let frac = junk as f64 / pairs.len() as f64;
        assert!((frac - 0.25).abs() < 0.05, "outlier fraction {frac}");
    }

    #[test]
    fn relation_oracle_translates_targets_onto_draft_ids() {
        let out = generate_scene(&SceneSpec { stacking: true, ..spec(2, 21) }).unwrap();
        // Draft with relabeled ids, slightly moved, plus a duplicate rider
        // and an unknown category.
        let mut draft = SceneDescription {
            gravity: DEFAULT_GRAVITY,
            walls: Vec::new(),
            objects: Vec::new(),
        };
        let renamed = |gt_idx: usize, id: u32, nudge: f64| {
            let mut o = out.scene.objects[gt_idx].clone();
            o.id = id;
            o.relations = Vec::new();
            o.transform.translation.x += nudge;
            o
        };
        draft.objects.push(renamed(0, 3, 0.01));
        draft.objects.push(renamed(1, 7, -0.01));
        draft.objects.push(renamed(1, 9, 0.02)); // duplicate of the rider
        let mut stranger = renamed(0, 12, 0.0);
        stranger.category = "gargoyle".into();
        draft.objects.push(stranger);

        let provider = OracleRelationProvider::new(&out.scene);
        let bundle = SceneBundle { gravity: DEFAULT_GRAVITY, frames: Vec::new() };
        let rels = provider.relations(&draft, &bundle).unwrap();
        let of = |id: u32| -> Vec<&RelationKind> {
            rels.iter().filter(|r| r.subject == id).map(|r| &r.kind).collect()
        };
        assert_eq!(of(3), vec![&RelationKind::SupportedBy(SupportTarget::Floor)]);
        assert_eq!(
            of(7),
            vec![&RelationKind::SupportedBy(SupportTarget::Object(3))]
        );
        assert_eq!(
            of(9),
            vec![&RelationKind::SupportedBy(SupportTarget::Object(3))]
        );
        assert_eq!(of(12), vec![&RelationKind::FreeStanding]);
    }

    #[test]
    fn support_relations_always_point_to_earlier_objects() {
        for seed in 0..20 {
            let out = generate_scene(&SceneSpec {
                stacking: true,
                ..spec(5, seed)
            })
            .unwrap();
            for obj in &out.scene.objects {
                for rel in &obj.relations {
                    if let RelationKind::SupportedBy(SupportTarget::Object(t)) = rel {
                        assert!(*t < obj.id, "{} supported by later {t}", obj.id);
                    }
                }
            }
        }
    }
}
