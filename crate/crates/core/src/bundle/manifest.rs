//! Line-oriented text formats for bundle manifests and scene descriptions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::geom::{CameraModel, Mat3, SimilarityTransform, Vec3};
use crate::{Error, Result};

use super::{
    fmt_f64, load_depth, load_mask, safe_join, save_depth, save_mask, Frame, MaskEntry,
    PlacedObject, RelationKind, SceneBundle, SceneDescription, SupportTarget, WallPlane,
    DEFAULT_GRAVITY,
};

use super::split_token;

const BUNDLE_VERSION: u32 = 1;
const SCENE_VERSION: u32 = 1;

fn parse_floats<const N: usize>(rest: &str, path: &Path, line_no: usize) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    let mut it = rest.split_whitespace();
    for slot in out.iter_mut() {
        let tok = it
            .next()
            .ok_or_else(|| Error::parse(path, line_no, format!("expected {N} numbers")))?;
        *slot = tok
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::parse(path, line_no, format!("bad number '{tok}'")))?;
    }
    if it.next().is_some() {
        return Err(Error::parse(path, line_no, format!("expected exactly {N} numbers")));
    }
    Ok(out)
}

fn parse_int<T: std::str::FromStr>(tok: &str, path: &Path, line_no: usize) -> Result<T> {
    tok.parse::<T>().map_err(|_| Error::parse(path, line_no, format!("bad integer '{tok}'")))
}

fn mat3_row_major(v: [f64; 9]) -> Mat3 {
    Mat3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
}

fn push_mat3(out: &mut String, m: &Mat3) {
    for r in 0..3 {
        for c in 0..3 {
            out.push(' ');
            out.push_str(&fmt_f64(m[(r, c)]));
        }
    }
}

fn push_vec3(out: &mut String, v: &Vec3) {
    for c in v.iter() {
        out.push(' ');
        out.push_str(&fmt_f64(*c));
    }
}

pub(super) fn write_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut out = String::new();
    let _ = writeln!(out, "bundle_version {BUNDLE_VERSION}");
    out.push_str("gravity");
    push_vec3(&mut out, &bundle.gravity);
    out.push('\n');
    let _ = writeln!(out, "frame_count {}", bundle.frames.len());

    for frame in &bundle.frames {
        let cam = &frame.camera;
        let _ = writeln!(out, "frame {}", frame.id);
        let _ = writeln!(
            out,
            "intrinsics {} {} {} {}",
            fmt_f64(cam.fx),
            fmt_f64(cam.fy),
            fmt_f64(cam.cx),
            fmt_f64(cam.cy)
        );
        out.push_str("rotation");
        push_mat3(&mut out, &cam.rotation);
        out.push('\n');
        out.push_str("translation");
        push_vec3(&mut out, &cam.translation);
        out.push('\n');
        let _ = writeln!(out, "size {} {}", cam.width, cam.height);

        let depth_name = format!("depth_{:04}.f32", frame.id);
        save_depth(&frame.depth, &dir.join(&depth_name))?;
        let _ = writeln!(out, "depth {depth_name}");
        if let Some(image) = &frame.image {
            let _ = writeln!(out, "image {image}");
        }

        let mut entries: Vec<&MaskEntry> = frame.masks.iter().collect();
        entries.sort_by_key(|e| e.track);
        for entry in entries {
            let mask_name = format!("mask_{:04}_{:03}.pgm", frame.id, entry.track);
            save_mask(&entry.mask, &dir.join(&mask_name))?;
            let _ = writeln!(out, "mask {} {} {}", entry.track, mask_name, entry.category);
        }
        out.push_str("end_frame\n");
    }

    fs::write(dir.join("manifest.txt"), out)
        .map_err(|e| Error::io(format!("writing {}", dir.join("manifest.txt").display()), e))
}

pub(super) fn read_bundle_manifest(dir: &Path) -> Result<SceneBundle> {
    let path = dir.join("manifest.txt");
    let text =
        fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;

    let mut gravity: Option<Vec3> = None;
    let mut declared_count: Option<usize> = None;
    let mut frames: Vec<Frame> = Vec::new();
    let mut version_seen = false;

    struct PartialFrame {
        id: u32,
        line: usize,
        intrinsics: Option<[f64; 4]>,
        rotation: Option<Mat3>,
        translation: Option<Vec3>,
        size: Option<(u32, u32)>,
        depth: Option<String>,
        image: Option<String>,
        masks: Vec<(u32, String, String)>,
    }
    let mut current: Option<PartialFrame> = None;

    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = split_token(line);
        match (key, &mut current) {
            ("bundle_version", None) => {
                let v: u32 = parse_int(rest, &path, line_no)?;
                if v != BUNDLE_VERSION {
                    return Err(Error::parse(
                        &path,
                        line_no,
                        format!("unsupported bundle version {v}"),
                    ));
                }
                version_seen = true;
            }
            ("gravity", None) => {
                let g = parse_floats::<3>(rest, &path, line_no)?;
                gravity = Some(Vec3::new(g[0], g[1], g[2]));
            }
            ("frame_count", None) => {
                declared_count = Some(parse_int(rest, &path, line_no)?);
            }
            ("frame", None) => {
                current = Some(PartialFrame {
                    id: parse_int(split_token(rest).0, &path, line_no)?,
                    line: line_no,
                    intrinsics: None,
                    rotation: None,
                    translation: None,
                    size: None,
                    depth: None,
                    image: None,
                    masks: Vec::new(),
                });
            }
            ("intrinsics", Some(f)) => {
                f.intrinsics = Some(parse_floats::<4>(rest, &path, line_no)?);
            }
            ("rotation", Some(f)) => {
                f.rotation = Some(mat3_row_major(parse_floats::<9>(rest, &path, line_no)?));
            }
            ("translation", Some(f)) => {
                let t = parse_floats::<3>(rest, &path, line_no)?;
                f.translation = Some(Vec3::new(t[0], t[1], t[2]));
            }
            ("size", Some(f)) => {
                let (w_tok, rest) = split_token(rest);
                let (h_tok, extra) = split_token(rest);
                if !extra.is_empty() {
                    return Err(Error::parse(&path, line_no, "size takes two integers"));
                }
                f.size =
                    Some((parse_int(w_tok, &path, line_no)?, parse_int(h_tok, &path, line_no)?));
            }
            ("depth", Some(f)) => {
                f.depth = Some(rest.to_string());
            }
            ("image", Some(f)) => {
                f.image = Some(rest.to_string());
            }
            ("mask", Some(f)) => {
                let (track_tok, rest) = split_token(rest);
                let (file_tok, category) = split_token(rest);
                if category.is_empty() {
                    return Err(Error::parse(
                        &path,
                        line_no,
                        "mask line needs track id, file, and category",
                    ));
                }
                f.masks.push((
                    parse_int(track_tok, &path, line_no)?,
                    file_tok.to_string(),
                    category.to_string(),
                ));
            }
            ("end_frame", Some(_)) => {
                let f = current.take().unwrap();
                let missing = |field: &str, l: usize| Error::parse(
                    &path,
                    l,
                    format!("frame {} is missing its '{field}' line", f.id),
                );
                let intr = f.intrinsics.ok_or_else(|| missing("intrinsics", f.line))?;
                let rotation = f.rotation.ok_or_else(|| missing("rotation", f.line))?;
                let translation = f.translation.ok_or_else(|| missing("translation", f.line))?;
                let (width, height) = f.size.ok_or_else(|| missing("size", f.line))?;
                let depth_file = f.depth.ok_or_else(|| missing("depth", f.line))?;

                let camera = CameraModel {
                    fx: intr[0],
                    fy: intr[1],
                    cx: intr[2],
                    cy: intr[3],
                    rotation,
                    translation,
                    width,
                    height,
                };
                let depth = load_depth(&safe_join(dir, &depth_file)?)?;
                let mut masks = Vec::with_capacity(f.masks.len());
                for (track, file, category) in f.masks {
                    let mask = load_mask(&safe_join(dir, &file)?)?;
                    masks.push(MaskEntry { track, category, mask });
                }
                frames.push(Frame { id: f.id, camera, depth, masks, image: f.image });
            }
            _ => {
                return Err(Error::parse(
                    &path,
                    line_no,
                    format!("unexpected '{key}' {}", if current.is_some() {
                        "inside a frame block"
                    } else {
                        "outside a frame block"
                    }),
                ));
            }
        }
    }

    if let Some(f) = current {
        return Err(Error::parse(&path, f.line, format!("frame {} never ends", f.id)));
    }
    if !version_seen {
        return Err(Error::file_format(&path, "missing bundle_version"));
    }
    if let Some(count) = declared_count {
        if count != frames.len() {
            return Err(Error::file_format(
                &path,
                format!("frame_count says {count} but manifest lists {}", frames.len()),
            ));
        }
    }
    let gravity = match gravity {
        Some(g) => {
            let norm = g.norm();
            if norm < 1e-9 {
                return Err(Error::file_format(&path, "gravity vector has zero length"));
            }
            g / norm
        }
        None => {
            log::warn!("{}: no gravity line; assuming (0, 0, -1)", path.display());
            DEFAULT_GRAVITY
        }
    };
    Ok(SceneBundle { gravity, frames })
}

pub(super) fn write_scene(scene: &SceneDescription, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let mut out = String::new();
    let _ = writeln!(out, "scene_version {SCENE_VERSION}");
    out.push_str("gravity");
    push_vec3(&mut out, &scene.gravity);
    out.push('\n');
    for wall in &scene.walls {
        if wall.id.is_empty() || wall.id.contains(char::is_whitespace) {
            return Err(Error::Config(format!("wall id '{}' must be one token", wall.id)));
        }
        let _ = write!(out, "wall {}", wall.id);
        push_vec3(&mut out, &wall.point);
        push_vec3(&mut out, &wall.normal);
        out.push('\n');
    }
    let _ = writeln!(out, "object_count {}", scene.objects.len());
    for obj in &scene.objects {
        let _ = writeln!(out, "object {}", obj.id);
        let _ = writeln!(out, "category {}", obj.category);
        let _ = writeln!(out, "mesh {}", obj.mesh_ref);
        let _ = writeln!(out, "scale {}", fmt_f64(obj.transform.scale));
        out.push_str("rotation");
        push_mat3(&mut out, &obj.transform.rotation);
        out.push('\n');
        out.push_str("translation");
        push_vec3(&mut out, &obj.transform.translation);
        out.push('\n');
        for rel in &obj.relations {
            match rel {
                RelationKind::SupportedBy(SupportTarget::Floor) => {
                    out.push_str("relation supported_by floor\n");
                }
                RelationKind::SupportedBy(SupportTarget::Object(id)) => {
                    let _ = writeln!(out, "relation supported_by {id}");
                }
                RelationKind::AttachedToWall(wall) => {
                    let _ = writeln!(out, "relation attached_to_wall {wall}");
                }
                RelationKind::FreeStanding => out.push_str("relation free_standing\n"),
            }
        }
        out.push_str("end_object\n");
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(super) fn read_scene(path: &Path) -> Result<SceneDescription> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;

    let mut scene = SceneDescription {
        gravity: DEFAULT_GRAVITY,
        walls: Vec::new(),
        objects: Vec::new(),
    };
    let mut gravity_seen = false;
    let mut version_seen = false;
    let mut declared_count: Option<usize> = None;

    struct PartialObject {
        id: u32,
        line: usize,
        category: Option<String>,
        mesh: Option<String>,
        scale: Option<f64>,
        rotation: Option<Mat3>,
        translation: Option<Vec3>,
        relations: Vec<RelationKind>,
    }
    let mut current: Option<PartialObject> = None;

    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = split_token(line);
        match (key, &mut current) {
            ("scene_version", None) => {
                let v: u32 = parse_int(rest, path, line_no)?;
                if v != SCENE_VERSION {
                    return Err(Error::parse(path, line_no, format!("unsupported scene version {v}")));
                }
                version_seen = true;
            }
            ("gravity", None) => {
                let g = parse_floats::<3>(rest, path, line_no)?;
                scene.gravity = Vec3::new(g[0], g[1], g[2]);
                gravity_seen = true;
            }
            ("wall", None) => {
                let (id, rest) = split_token(rest);
                if id.is_empty() {
                    return Err(Error::parse(path, line_no, "wall needs an id"));
                }
                let v = parse_floats::<6>(rest, path, line_no)?;
                scene.walls.push(WallPlane {
                    id: id.to_string(),
                    point: Vec3::new(v[0], v[1], v[2]),
                    normal: Vec3::new(v[3], v[4], v[5]),
                });
            }
            ("object_count", None) => {
                declared_count = Some(parse_int(rest, path, line_no)?);
            }
            ("object", None) => {
                current = Some(PartialObject {
                    id: parse_int(split_token(rest).0, path, line_no)?,
                    line: line_no,
                    category: None,
                    mesh: None,
                    scale: None,
                    rotation: None,
                    translation: None,
                    relations: Vec::new(),
                });
            }
            ("category", Some(o)) => {
                if rest.is_empty() {
                    return Err(Error::parse(path, line_no, "empty category"));
                }
                o.category = Some(rest.to_string());
            }
            ("mesh", Some(o)) => o.mesh = Some(rest.to_string()),
            ("scale", Some(o)) => o.scale = Some(parse_floats::<1>(rest, path, line_no)?[0]),
            ("rotation", Some(o)) => {
                o.rotation = Some(mat3_row_major(parse_floats::<9>(rest, path, line_no)?));
            }
            ("translation", Some(o)) => {
                let t = parse_floats::<3>(rest, path, line_no)?;
                o.translation = Some(Vec3::new(t[0], t[1], t[2]));
            }
            ("relation", Some(o)) => {
                let (kind, target) = split_token(rest);
                let rel = match kind {
                    "supported_by" => {
                        let (target, extra) = split_token(target);
                        if !extra.is_empty() {
                            return Err(Error::parse(path, line_no, "trailing tokens on relation"));
                        }
                        if target == "floor" {
                            RelationKind::SupportedBy(SupportTarget::Floor)
                        } else {
                            RelationKind::SupportedBy(SupportTarget::Object(parse_int(
                                target, path, line_no,
                            )?))
                        }
                    }
                    "attached_to_wall" => {
                        let (wall, extra) = split_token(target);
                        if wall.is_empty() || !extra.is_empty() {
                            return Err(Error::parse(path, line_no, "attached_to_wall takes one wall id"));
                        }
                        RelationKind::AttachedToWall(wall.to_string())
                    }
                    "free_standing" => {
                        if !target.is_empty() {
                            return Err(Error::parse(path, line_no, "free_standing takes no target"));
                        }
                        RelationKind::FreeStanding
                    }
                    other => {
                        return Err(Error::parse(path, line_no, format!("unknown relation kind '{other}'")));
                    }
                };
                o.relations.push(rel);
            }
            ("end_object", Some(_)) => {
                let o = current.take().unwrap();
                let missing = |field: &str| {
                    Error::parse(path, o.line, format!("object {} is missing '{field}'", o.id))
                };
                scene.objects.push(PlacedObject {
                    id: o.id,
                    category: o.category.ok_or_else(|| missing("category"))?,
                    mesh_ref: o.mesh.ok_or_else(|| missing("mesh"))?,
                    transform: SimilarityTransform {
                        scale: o.scale.ok_or_else(|| missing("scale"))?,
                        rotation: o.rotation.ok_or_else(|| missing("rotation"))?,
                        translation: o.translation.ok_or_else(|| missing("translation"))?,
                    },
                    relations: o.relations,
                });
            }
            _ => {
                return Err(Error::parse(path, line_no, format!("unexpected '{key}'")));
            }
        }
    }

    if let Some(o) = current {
        return Err(Error::parse(path, o.line, format!("object {} never ends", o.id)));
    }
    if !version_seen {
        return Err(Error::file_format(path, "missing scene_version"));
    }
    if !gravity_seen {
        log::warn!("{}: no gravity line; assuming (0, 0, -1)", path.display());
    }
    if let Some(count) = declared_count {
        if count != scene.objects.len() {
            return Err(Error::file_format(
                path,
                format!("object_count says {count} but file lists {}", scene.objects.len()),
            ));
        }
    }
    Ok(scene)
}
