//! Stage 5: relationship-conditioned pose corrections.
//!
//! Aligned poses are usually *almost* right: a chair hovers a centimeter
//! above the floor, a monitor tilts half a degree. This stage removes those
//! residuals deterministically using declared spatial relations — gravity
//! alignment about the asset's canonical up axis, vertical snapping onto the
//! supporting surface, and back-face alignment against walls. Corrections
//! are rule applications, not optimization: they are exactly idempotent and
//! never move a pose further than the violation they remove.
//!
//! Canonical asset axes are +z up and +x forward; "back" is -x.

use std::collections::BTreeMap;

use crate::bundle::{
    PlacedObject, RelationKind, SceneBundle, SceneDescription, SpatialRelation, SupportTarget,
    WallPlane,
};
use crate::geom::{Mat3, SimilarityTransform, TriMesh, Vec3};
use crate::{Error, InstanceId, Result};

/// Produces spatial relations for a draft scene. Implementations range from
/// scripted lists in tests to a reasoning model in production; the pipeline
/// only sees this interface.
pub trait RelationProvider {
    fn name(&self) -> &'static str;
    fn relations(
        &self,
        draft: &SceneDescription,
        bundle: &SceneBundle,
    ) -> Result<Vec<SpatialRelation>>;
}

/// Fixed relation list, ignoring the scene content. The file-based provider
/// and tests both reduce to this.
#[derive(Debug, Clone, Default)]
pub struct ScriptedRelationProvider {
    pub relations: Vec<SpatialRelation>,
}

impl RelationProvider for ScriptedRelationProvider {
    fn name(&self) -> &'static str {
        "scripted-relations"
    }
    fn relations(
        &self,
        _draft: &SceneDescription,
        _bundle: &SceneBundle,
    ) -> Result<Vec<SpatialRelation>> {
        Ok(self.relations.clone())
    }
}

/// The minimal rotation carrying unit vector `from` onto unit vector `to`.
/// Its axis is perpendicular to both, so everything already perpendicular to
/// the `from`-`to` plane is preserved. The anti-parallel case has no unique
/// minimal rotation; `fallback_axis` (assumed unit, perpendicular to `from`)
/// picks the half-turn deterministically and the flag reports that the
/// singular branch was taken.
fn minimal_rotation(from: &Vec3, to: &Vec3, fallback_axis: &Vec3) -> (Mat3, bool) {
    let axis = from.cross(to);
    let sin = axis.norm();
    let cos = from.dot(to);
    if sin < 1e-12 {
        if cos > 0.0 {
            return (Mat3::identity(), false);
        }
        return (rodrigues(fallback_axis, std::f64::consts::PI), true);
    }
    (rodrigues(&(axis / sin), sin.atan2(cos)), false)
}

fn rodrigues(axis: &Vec3, angle: f64) -> Mat3 {
    let k = Mat3::new(
        0.0, -axis.z, axis.y, //
        axis.z, 0.0, -axis.x, //
        -axis.y, axis.x, 0.0,
    );
    Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// A gravity-corrected pose plus whether the 180-degree singularity branch
/// was taken.
#[derive(Debug, Clone)]
pub struct GravityAligned {
    pub transform: SimilarityTransform,
    /// The object's up axis pointed straight down; it was flipped by a
    /// half-turn about its forward axis.
    pub flipped: bool,
}

/// Rotates the pose minimally so the asset's canonical up axis (+z) points
/// against gravity. Scale and translation are untouched; the forward axis
/// moves only as much as the minimal correction forces it to.
pub fn gravity_align(t: &SimilarityTransform, gravity: &Vec3) -> GravityAligned {
    let up_world = -gravity;
    let up_object = t.rotation * Vec3::z();
    let forward = t.rotation * Vec3::x();
    let (q, flipped) = minimal_rotation(&up_object, &up_world, &forward);
    GravityAligned {
        transform: SimilarityTransform::new(t.scale, q * t.rotation, t.translation),
        flipped,
    }
}

/// What a subject can rest on.
#[derive(Debug, Clone, Copy)]
pub enum SupportSurface<'a> {
    /// The plane through the world origin perpendicular to gravity.
    Floor,
    /// Another placed object; its top face is the horizontal plane at the
    /// highest point of its transformed mesh.
    Object { mesh: &'a TriMesh, transform: &'a SimilarityTransform },
}

fn height_extrema(
    mesh: &TriMesh,
    transform: &SimilarityTransform,
    up: &Vec3,
) -> Result<(f64, f64)> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in &mesh.vertices {
        let h = up.dot(&transform.apply(v));
        min = min.min(h);
        max = max.max(h);
    }
    if mesh.vertices.is_empty() {
        return Err(Error::InvalidMesh("no vertices to snap against".into()));
    }
    Ok((min, max))
}

/// Horizontal axis-aligned extent of a transformed mesh, in the two world
/// axes spanning the plane perpendicular to `up`.
fn horizontal_footprint(
    mesh: &TriMesh,
    transform: &SimilarityTransform,
    up: &Vec3,
) -> ([f64; 2], [f64; 2]) {
    // Any orthonormal basis of the horizontal plane works; build one from
    // the least-aligned world axis.
    let seed = if up.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let a = up.cross(&seed).normalize();
    let b = up.cross(&a);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for v in &mesh.vertices {
        let w = transform.apply(v);
        for (i, axis) in [a, b].iter().enumerate() {
            let c = axis.dot(&w);
            lo[i] = lo[i].min(c);
            hi[i] = hi[i].max(c);
        }
    }
    (lo, hi)
}

/// Shifts the pose along gravity until the lowest point of the subject's
/// transformed mesh rests exactly on the support surface. Scale, rotation,
/// and the horizontal translation components never change; the shift equals
/// the signed gap (down for floaters, up for penetration). When the subject
/// and a supporting object do not overlap horizontally, the support's global
/// top height is still used, with a warning — there is no better
/// deterministic answer without mesh-level contact.
pub fn support_snap(
    subject_mesh: &TriMesh,
    subject: &SimilarityTransform,
    surface: SupportSurface,
    gravity: &Vec3,
    warnings: &mut Vec<String>,
) -> Result<SimilarityTransform> {
    let up = -gravity;
    let support_height = match surface {
        SupportSurface::Floor => 0.0,
        SupportSurface::Object { mesh, transform } => {
            let (_, top) = height_extrema(mesh, transform, &up)?;
            let (sub_lo, sub_hi) = horizontal_footprint(subject_mesh, subject, &up);
            let (sup_lo, sup_hi) = horizontal_footprint(mesh, transform, &up);
            let overlaps = (0..2)
                .all(|i| sub_lo[i] <= sup_hi[i] && sup_lo[i] <= sub_hi[i]);
            if !overlaps {
                warnings.push(
                    "support snap: subject and support do not overlap horizontally; \
                     using the support's global top height"
                        .to_string(),
                );
            }
            top
        }
    };
    let (bottom, _) = height_extrema(subject_mesh, subject, &up)?;
    let gap = bottom - support_height;
    Ok(SimilarityTransform::new(
        subject.scale,
        subject.rotation,
        subject.translation - up * gap,
    ))
}

/// Yaws/minimally rotates the pose so the asset's canonical back axis (-x)
/// points along the wall normal, then shifts along the normal until the
/// deepest point of the mesh lies exactly on the wall plane. For a vertical
/// wall and an upright object the rotation is a pure yaw.
pub fn wall_snap(
    subject_mesh: &TriMesh,
    subject: &SimilarityTransform,
    wall: &WallPlane,
) -> Result<(SimilarityTransform, bool)> {
    let back = subject.rotation * -Vec3::x();
    let up_object = subject.rotation * Vec3::z();
    let (q, flipped) = minimal_rotation(&back, &wall.normal, &up_object);
    let rotated =
        SimilarityTransform::new(subject.scale, q * subject.rotation, subject.translation);
    if subject_mesh.vertices.is_empty() {
        return Err(Error::InvalidMesh("no vertices to snap against".into()));
    }
    let depth = subject_mesh
        .vertices
        .iter()
        .map(|v| wall.normal.dot(&(rotated.apply(v) - wall.point)))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((
        SimilarityTransform::new(
            rotated.scale,
            rotated.rotation,
            rotated.translation - wall.normal * depth,
        ),
        flipped,
    ))
}

/// Refinement result: the corrected scene plus everything non-fatal that
/// happened along the way.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub scene: SceneDescription,
    pub warnings: Vec<String>,
}

fn validate_relations(
    draft: &SceneDescription,
    relations: &[SpatialRelation],
) -> Result<BTreeMap<InstanceId, Vec<RelationKind>>> {
    let ids: Vec<InstanceId> = draft.objects.iter().map(|o| o.id).collect();
    let mut by_subject: BTreeMap<InstanceId, Vec<RelationKind>> = BTreeMap::new();
    for rel in relations {
        if !ids.contains(&rel.subject) {
            return Err(Error::UnknownReference {
                kind: "object",
                name: rel.subject.to_string(),
            });
        }
        match &rel.kind {
            RelationKind::SupportedBy(SupportTarget::Object(target)) => {
                if *target == rel.subject {
                    return Err(Error::Config(format!(
                        "object {} cannot support itself",
                        rel.subject
                    )));
                }
                if !ids.contains(target) {
                    return Err(Error::UnknownReference {
                        kind: "object",
                        name: target.to_string(),
                    });
                }
            }
            RelationKind::AttachedToWall(wall) if !draft.walls.iter().any(|w| &w.id == wall) => {
                return Err(Error::UnknownReference { kind: "wall", name: wall.clone() });
            }
            _ => {}
        }
        by_subject.entry(rel.subject).or_default().push(rel.kind.clone());
    }
    Ok(by_subject)
}

/// Orders subjects so every object is processed after everything that
/// supports it (Kahn's algorithm; ties broken by ascending id so the order
/// is deterministic). Objects without relations keep their position in the
/// scene but are never touched. A cycle in the support graph is reported
/// with its member ids.
fn support_order(
    by_subject: &BTreeMap<InstanceId, Vec<RelationKind>>,
) -> Result<Vec<InstanceId>> {
    // Dependencies: subject waits for the objects it is supported by, but
    // only those that are themselves subjects of some relation (others are
    // fixed and act like the floor).
    let mut pending: BTreeMap<InstanceId, Vec<InstanceId>> = BTreeMap::new();
    for (&subject, kinds) in by_subject {
        let deps: Vec<InstanceId> = kinds
            .iter()
            .filter_map(|k| match k {
                RelationKind::SupportedBy(SupportTarget::Object(t))
                    if by_subject.contains_key(t) =>
                {
                    Some(*t)
                }
                _ => None,
            })
            .collect();
        pending.insert(subject, deps);
    }

    let mut order = Vec::with_capacity(pending.len());
    let mut done: Vec<InstanceId> = Vec::new();
    while !pending.is_empty() {
        // BTreeMap iteration is ascending, so the first ready subject is the
        // lowest id.
        let ready = pending
            .iter()
            .find(|(_, deps)| deps.iter().all(|d| done.contains(d)))
            .map(|(&id, _)| id);
        let Some(id) = ready else {
            return Err(Error::SupportCycle(extract_cycle(&pending)));
        };
        pending.remove(&id);
        done.push(id);
        order.push(id);
    }
    Ok(order)
}

/// Walks support edges among the stuck subjects until one repeats; the slice
/// between the two visits is a cycle.
fn extract_cycle(pending: &BTreeMap<InstanceId, Vec<InstanceId>>) -> Vec<InstanceId> {
    let start = *pending.keys().next().expect("cycle extraction needs stuck subjects");
    let mut path = vec![start];
    loop {
        let here = *path.last().expect("path starts nonempty");
        let next = pending[&here]
            .iter()
            .copied()
            .find(|d| pending.contains_key(d))
            .expect("a stuck subject always has a stuck dependency");
        if let Some(pos) = path.iter().position(|&p| p == next) {
            return path[pos..].to_vec();
        }
        path.push(next);
    }
}

/// Which correction rules [`refine_scene_with`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineOptions {
    /// Rotate each subject's canonical up axis against gravity before
    /// snapping. Disabling reduces refinement to pure relation-driven
    /// snapping (support and wall contact only), which leaves tilts in
    /// place — the relations-only ablation.
    pub gravity: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { gravity: true }
    }
}

/// Applies every relation's correction rules and returns the corrected
/// scene. Subjects are processed in support order, so a tower of objects
/// settles from the bottom up in one pass. Rules per relation kind:
/// `supported_by` gravity-aligns then snaps onto the support, `attached_to_wall`
/// aligns the back axis and snaps to the wall plane, `free_standing`
/// gravity-aligns only. A subject's relations apply in their listed order.
/// Relations whose support geometry is unavailable are skipped with a
/// warning; the processed relations are recorded on the output objects.
pub fn refine_scene(
    draft: &SceneDescription,
    meshes: &BTreeMap<InstanceId, TriMesh>,
    relations: &[SpatialRelation],
) -> Result<RefineOutcome> {
    refine_scene_with(draft, meshes, relations, RefineOptions::default())
}

/// [`refine_scene`] with rule selection.
pub fn refine_scene_with(
    draft: &SceneDescription,
    meshes: &BTreeMap<InstanceId, TriMesh>,
    relations: &[SpatialRelation],
    options: RefineOptions,
) -> Result<RefineOutcome> {
    let by_subject = validate_relations(draft, relations)?;
    let order = support_order(&by_subject)?;

    let mut scene = draft.clone();
    let mut warnings = Vec::new();
    for id in order {
        let idx = scene
            .objects
            .iter()
            .position(|o| o.id == id)
            .expect("relation subjects were validated against the draft");
        let mut pose = scene.objects[idx].transform.clone();
        for kind in &by_subject[&id] {
            match kind {
                RelationKind::FreeStanding => {
                    if options.gravity {
                        let aligned = gravity_align(&pose, &scene.gravity);
                        if aligned.flipped {
                            warnings.push(format!("object {id}: up axis was inverted"));
                        }
                        pose = aligned.transform;
                    }
                }
                RelationKind::SupportedBy(target) => {
                    if options.gravity {
                        let aligned = gravity_align(&pose, &scene.gravity);
                        if aligned.flipped {
                            warnings.push(format!("object {id}: up axis was inverted"));
                        }
                        pose = aligned.transform;
                    }
                    let Some(subject_mesh) = meshes.get(&id) else {
                        warnings.push(format!(
                            "object {id}: no mesh available; support snap skipped"
                        ));
                        continue;
                    };
                    let snapped = match target {
                        SupportTarget::Floor => support_snap(
                            subject_mesh,
                            &pose,
                            SupportSurface::Floor,
                            &scene.gravity,
                            &mut warnings,
                        ),
                        SupportTarget::Object(support_id) => {
                            let Some(support_mesh) = meshes.get(support_id) else {
                                warnings.push(format!(
                                    "object {id}: support {support_id} has no mesh; \
                                     snap skipped"
                                ));
                                continue;
                            };
                            let support = scene
                                .objects
                                .iter()
                                .find(|o| o.id == *support_id)
                                .expect("relation targets were validated against the draft");
                            support_snap(
                                subject_mesh,
                                &pose,
                                SupportSurface::Object {
                                    mesh: support_mesh,
                                    transform: &support.transform,
                                },
                                &scene.gravity,
                                &mut warnings,
                            )
                        }
                    };
                    match snapped {
                        Ok(t) => pose = t,
                        Err(e) => warnings
                            .push(format!("object {id}: support snap skipped: {e}")),
                    }
                }
                RelationKind::AttachedToWall(wall_id) => {
                    let Some(subject_mesh) = meshes.get(&id) else {
                        warnings.push(format!(
                            "object {id}: no mesh available; wall snap skipped"
                        ));
                        continue;
                    };
                    let wall = scene
                        .walls
                        .iter()
                        .find(|w| &w.id == wall_id)
                        .expect("wall references were validated against the draft");
                    match wall_snap(subject_mesh, &pose, wall) {
                        Ok((t, flipped)) => {
                            if flipped {
                                warnings.push(format!(
                                    "object {id}: back axis was reversed against wall \
                                     {wall_id}"
                                ));
                            }
                            pose = t;
                        }
                        Err(e) => {
                            warnings.push(format!("object {id}: wall snap skipped: {e}"));
                        }
                    }
                }
            }
        }
        let obj: &mut PlacedObject = &mut scene.objects[idx];
        obj.transform = pose;
        obj.relations = by_subject[&id].clone();
    }
    Ok(RefineOutcome { scene, warnings })
}
