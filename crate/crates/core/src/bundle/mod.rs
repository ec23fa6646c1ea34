//! Scene bundles (input) and scene descriptions (output), with their on-disk
//! formats.
//!
//! A bundle is a directory: a `manifest.txt` listing frames plus one depth
//! raster per frame and one PGM mask per (frame, track) observation. A scene
//! description is a single text file referencing per-object OBJ meshes. All
//! formats are plain enough to read and write without third-party parsers,
//! and serialization is deterministic: fixed field order, frames and objects
//! sorted by id, floats rendered with 9 significant digits.

mod manifest;
mod obj;
mod raster_io;

pub use obj::{load_mesh, save_mesh};
pub use raster_io::{load_depth, load_mask, save_depth, save_mask};

use std::collections::BTreeSet;
use std::path::{Component, Path, PathBuf};

use crate::geom::{CameraModel, DepthMap, Mask, SimilarityTransform, Vec3};
use crate::{Error, FrameId, InstanceId, Result, TrackId};

/// Default gravity direction assumed when a bundle does not state one.
pub const DEFAULT_GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -1.0);

/// One instance-mask observation within a frame.
#[derive(Debug, Clone)]
pub struct MaskEntry {
    pub track: TrackId,
    pub category: String,
    pub mask: Mask,
}

/// One posed frame: camera, depth, instance masks, optional image reference.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: FrameId,
    pub camera: CameraModel,
    pub depth: DepthMap,
    pub masks: Vec<MaskEntry>,
    /// Opaque relative path to an RGB image; the pipeline never decodes it.
    pub image: Option<String>,
}

/// Per-scene capture bundle. Frames are sorted by id.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    /// Unit vector pointing down.
    pub gravity: Vec3,
    pub frames: Vec<Frame>,
}

impl SceneBundle {
    /// Structural validation shared by the loader and in-memory producers:
    /// sorted unique frame ids, valid cameras, raster sizes consistent with
    /// the camera, unique track ids per frame, and one category per track.
    pub fn validate(&self) -> Result<()> {
        if (self.gravity.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "gravity {:?} is not a unit vector",
                self.gravity
            )));
        }
        let mut last_id: Option<FrameId> = None;
        let mut track_category: std::collections::BTreeMap<TrackId, &str> =
            std::collections::BTreeMap::new();
        for frame in &self.frames {
            if let Some(last) = last_id {
                if frame.id <= last {
                    return Err(Error::Config(format!(
                        "frame ids must be strictly increasing ({last} then {})",
                        frame.id
                    )));
                }
            }
            last_id = Some(frame.id);
            frame.camera.validate()?;
            if frame.depth.width() != frame.camera.width
                || frame.depth.height() != frame.camera.height
            {
                return Err(Error::RasterSizeMismatch {
                    expected_w: frame.camera.width,
                    expected_h: frame.camera.height,
                    got_w: frame.depth.width(),
                    got_h: frame.depth.height(),
                });
            }
            let mut seen = BTreeSet::new();
            for entry in &frame.masks {
                if entry.mask.width() != frame.camera.width
                    || entry.mask.height() != frame.camera.height
                {
                    return Err(Error::RasterSizeMismatch {
                        expected_w: frame.camera.width,
                        expected_h: frame.camera.height,
                        got_w: entry.mask.width(),
                        got_h: entry.mask.height(),
                    });
                }
                if !seen.insert(entry.track) {
                    return Err(Error::Config(format!(
                        "frame {}: track {} appears twice",
                        frame.id, entry.track
                    )));
                }
                match track_category.get(&entry.track) {
                    Some(cat) if *cat != entry.category => {
                        return Err(Error::Config(format!(
                            "track {} labeled '{}' and '{}'",
                            entry.track, cat, entry.category
                        )));
                    }
                    _ => {
                        track_category.insert(entry.track, &entry.category);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn frame_index(&self, id: FrameId) -> Option<usize> {
        self.frames.binary_search_by_key(&id, |f| f.id).ok()
    }

    pub fn frame(&self, id: FrameId) -> Option<&Frame> {
        self.frame_index(id).map(|i| &self.frames[i])
    }
}

/// Wall plane for `attached_to_wall` relations. The normal is a unit vector
/// pointing from the room into the wall, i.e. the direction an attached
/// object's back faces.
#[derive(Debug, Clone, PartialEq)]
pub struct WallPlane {
    pub id: String,
    pub point: Vec3,
    pub normal: Vec3,
}

/// Spatial relation kinds attached to a subject instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelationKind {
    SupportedBy(SupportTarget),
    AttachedToWall(String),
    FreeStanding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportTarget {
    /// The floor plane: perpendicular to gravity, through the world origin.
    Floor,
    Object(InstanceId),
}

/// A relation with its subject made explicit; the form providers return.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialRelation {
    pub subject: InstanceId,
    pub kind: RelationKind,
}

/// One placed object in a scene description.
#[derive(Debug, Clone)]
pub struct PlacedObject {
    pub id: InstanceId,
    pub category: String,
    /// Mesh path relative to the scene description file.
    pub mesh_ref: String,
    pub transform: SimilarityTransform,
    pub relations: Vec<RelationKind>,
}

/// Composition output: placed objects plus scene-level context.
#[derive(Debug, Clone, Default)]
pub struct SceneDescription {
    /// Unit vector pointing down; mirrors the source bundle.
    pub gravity: Vec3,
    pub walls: Vec<WallPlane>,
    /// Sorted by id; ids unique.
    pub objects: Vec<PlacedObject>,
}

impl SceneDescription {
    pub fn validate(&self) -> Result<()> {
        if (self.gravity.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("scene gravity is not a unit vector".into()));
        }
        let mut ids = BTreeSet::new();
        for wall in &self.walls {
            if (wall.normal.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("wall '{}' normal not unit", wall.id)));
            }
        }
        let mut last: Option<InstanceId> = None;
        for obj in &self.objects {
            if let Some(prev) = last {
                if obj.id <= prev {
                    return Err(Error::Config(format!(
                        "objects must be sorted by unique id ({prev} then {})",
                        obj.id
                    )));
                }
            }
            last = Some(obj.id);
            ids.insert(obj.id);
            obj.transform.validate()?;
        }
        for obj in &self.objects {
            for rel in &obj.relations {
                match rel {
                    RelationKind::SupportedBy(SupportTarget::Object(target)) => {
                        if *target == obj.id {
                            return Err(Error::Config(format!(
                                "object {} cannot support itself",
                                obj.id
                            )));
                        }
                        if !ids.contains(target) {
                            return Err(Error::UnknownReference {
                                kind: "object",
                                name: target.to_string(),
                            });
                        }
                    }
                    RelationKind::AttachedToWall(wall)
                        if !self.walls.iter().any(|w| &w.id == wall) =>
                    {
                        return Err(Error::UnknownReference {
                            kind: "wall",
                            name: wall.clone(),
                        });
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn object(&self, id: InstanceId) -> Option<&PlacedObject> {
        self.objects.binary_search_by_key(&id, |o| o.id).ok().map(|i| &self.objects[i])
    }
}

/// Loads and validates a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<SceneBundle> {
    let bundle = manifest::read_bundle_manifest(dir)?;
    bundle.validate()?;
    Ok(bundle)
}

/// Writes a bundle directory (manifest plus rasters). Raster file names are
/// derived from frame and track ids, so saving is deterministic.
pub fn save_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    manifest::write_bundle(bundle, dir)
}

pub fn load_scene(path: &Path) -> Result<SceneDescription> {
    let scene = manifest::read_scene(path)?;
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &SceneDescription, path: &Path) -> Result<()> {
    scene.validate()?;
    manifest::write_scene(scene, path)
}

/// First whitespace-delimited token of `s` and the trimmed remainder.
pub(crate) fn split_token(s: &str) -> (&str, &str) {
    let s = s.trim_start();
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim_start()),
        None => (s, ""),
    }
}

/// Renders a float in Rust's shortest round-trip form: parsing the result
/// recovers the exact bits, so save/load cycles are lossless and repeated
/// saves are byte-identical.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Rejects path escapes in file references read from manifests.
pub(crate) fn safe_join(dir: &Path, rel: &str) -> Result<PathBuf> {
    let rel_path = Path::new(rel);
    let escapes = rel_path.components().any(|c| {
        matches!(c, Component::ParentDir | Component::RootDir | Component::Prefix(_))
    });
    if escapes || rel.is_empty() {
        return Err(Error::file_format(
            dir.join(rel),
            "file references must be relative paths without '..'",
        ));
    }
    Ok(dir.join(rel_path))
}
