//! ASCII OBJ mesh reader/writer.
//!
//! Written subset: `v x y z` vertex lines, optional `#c r g b` color
//! extension lines (a comment to any other OBJ consumer, bound to the
//! preceding vertex), and 1-based triangle `f` lines. The reader additionally
//! accepts `v/vt/vn` face index syntax and fan-triangulates larger faces so
//! externally produced assets load; unknown statements are skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::geom::{TriMesh, Vec3};
use crate::{Error, Result};

use super::fmt_f64;

pub fn save_mesh(mesh: &TriMesh, path: &Path) -> Result<()> {
    mesh.validate().map_err(|e| Error::file_format(path, e.to_string()))?;
    let mut out = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        let _ = writeln!(out, "v {} {} {}", fmt_f64(v.x), fmt_f64(v.y), fmt_f64(v.z));
        if let Some(colors) = &mesh.colors {
            let c = colors[i];
            let _ = writeln!(
                out,
                "#c {} {} {}",
                fmt_f64(c[0] as f64),
                fmt_f64(c[1] as f64),
                fmt_f64(c[2] as f64)
            );
        }
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut mesh = TriMesh::default();
    let mut colors: Vec<(usize, [f32; 3])> = Vec::new();

    for (no, line) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = line.trim();
        let mut tokens = line.split_whitespace();
        let Some(head) = tokens.next() else { continue };
        match head {
            "v" => {
                let coord = |t: Option<&str>| -> Result<f64> {
                    t.and_then(|s| s.parse::<f64>().ok())
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::parse(path, line_no, "bad vertex coordinate"))
                };
                let x = coord(tokens.next())?;
                let y = coord(tokens.next())?;
                let z = coord(tokens.next())?;
                mesh.vertices.push(Vec3::new(x, y, z));
            }
            "#c" => {
                if mesh.vertices.is_empty() {
                    return Err(Error::parse(path, line_no, "color line before any vertex"));
                }
                let chan = |t: Option<&str>| -> Result<f32> {
                    t.and_then(|s| s.parse::<f32>().ok())
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::parse(path, line_no, "bad color channel"))
                };
                let c = [chan(tokens.next())?, chan(tokens.next())?, chan(tokens.next())?];
                colors.push((mesh.vertices.len() - 1, c));
            }
            "f" => {
                let mut indices = Vec::with_capacity(4);
                for tok in tokens {
                    // "3", "3/1", or "3/1/2"; only the vertex index matters.
                    let vert = tok.split('/').next().unwrap_or("");
                    let idx: i64 = vert
                        .parse()
                        .map_err(|_| Error::parse(path, line_no, format!("bad face index '{tok}'")))?;
                    if idx < 1 {
                        return Err(Error::parse(
                            path,
                            line_no,
                            "face indices must be positive (1-based)",
                        ));
                    }
                    indices.push((idx - 1) as u32);
                }
                if indices.len() < 3 {
                    return Err(Error::parse(path, line_no, "face with fewer than 3 vertices"));
                }
                for k in 1..indices.len() - 1 {
                    mesh.triangles.push([indices[0], indices[k], indices[k + 1]]);
                }
            }
            _ => {} // comments, normals, materials: ignored
        }
    }

    if !colors.is_empty() {
        if colors.len() != mesh.vertices.len()
            || colors.iter().enumerate().any(|(i, (v, _))| *v != i)
        {
            return Err(Error::file_format(
                path,
                "color extension lines must follow every vertex exactly once",
            ));
        }
        mesh.colors = Some(colors.into_iter().map(|(_, c)| c).collect());
    }

    mesh.validate().map_err(|e| Error::file_format(path, e.to_string()))?;
    Ok(mesh)
}
