//! Deterministic z-buffered rasterization of placed meshes.
//!
//! Output feeds three consumers: synthetic depth/mask generation, the IoU
//! objective that scores alignment iterates, and visual evaluation. The same
//! inputs must always produce bit-identical rasters, so the rasterizer is
//! sequential, snaps projected vertices to a fixed 1/256-pixel grid (which
//! makes the edge functions exact in f64 and shared edges watertight), and
//! resolves boundary pixels with a top-left fill rule.

use crate::geom::{CameraModel, DepthMap, Mask, SimilarityTransform, TriMesh, Vec3};
use crate::{Error, Result};

/// Camera-space near plane; triangles are clipped against it before
/// projection so geometry behind the camera never reaches the screen.
const NEAR: f64 = 1e-4;

/// Subpixel snap granularity. Power of two so snapped coordinates, their
/// differences, and edge-function products stay exactly representable.
const SNAP: f64 = 256.0;

/// Renders `mesh` under `transform` into the camera's raster. Returns the
/// nearest-surface depth per covered pixel (camera-space z, perspective
/// correct) and the coverage mask. Pixels without coverage are invalid in the
/// depth map.
pub fn render_depth_mask(
    mesh: &TriMesh,
    transform: &SimilarityTransform,
    cam: &CameraModel,
) -> (DepthMap, Mask) {
    let w = cam.width as usize;
    let h = cam.height as usize;
    let mut zbuf = vec![f64::INFINITY; w * h];

    // World then camera space once per vertex.
    let cam_verts: Vec<Vec3> = mesh
        .vertices
        .iter()
        .map(|v| cam.world_to_camera(&transform.apply(v)))
        .collect();

    let mut clipped = Vec::with_capacity(4);
    for tri in &mesh.triangles {
        let corners = [
            cam_verts[tri[0] as usize],
            cam_verts[tri[1] as usize],
            cam_verts[tri[2] as usize],
        ];
        if corners.iter().any(|c| !c.iter().all(|x| x.is_finite())) {
            continue;
        }
        clip_near(&corners, &mut clipped);
        // Fan-triangulate the clipped polygon (at most 4 vertices).
        for k in 1..clipped.len().saturating_sub(1) {
            raster_triangle(
                [clipped[0], clipped[k], clipped[k + 1]],
                cam,
                &mut zbuf,
            );
        }
    }

    let mut depth = DepthMap::new(cam.width, cam.height);
    let mut mask = Mask::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let z = zbuf[y as usize * w + x as usize];
            if z.is_finite() {
                depth.set(x, y, z as f32);
                mask.set(x, y, true);
            }
        }
    }
    (depth, mask)
}

/// Clips a camera-space triangle against `z >= NEAR` (Sutherland-Hodgman);
/// the result has 0, 3, or 4 vertices.
fn clip_near(tri: &[Vec3; 3], out: &mut Vec<Vec3>) {
    out.clear();
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let a_in = a.z >= NEAR;
        let b_in = b.z >= NEAR;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR - a.z) / (b.z - a.z);
            out.push(a + t * (b - a));
        }
    }
}

/// Projected vertex: snapped screen position plus inverse depth.
#[derive(Clone, Copy)]
struct ScreenVert {
    x: f64,
    y: f64,
    inv_z: f64,
}

fn raster_triangle(tri: [Vec3; 3], cam: &CameraModel, zbuf: &mut [f64]) {
    let mut v: Vec<ScreenVert> = Vec::with_capacity(3);
    for p in tri {
        debug_assert!(p.z >= NEAR * 0.5);
        let u = cam.fx * p.x / p.z + cam.cx;
        let vv = cam.fy * p.y / p.z + cam.cy;
        if !u.is_finite() || !vv.is_finite() {
            return;
        }
        v.push(ScreenVert {
            x: (u * SNAP).round() / SNAP,
            y: (vv * SNAP).round() / SNAP,
            inv_z: 1.0 / p.z,
        });
    }
    let mut v = [v[0], v[1], v[2]];

    // Normalize winding so the signed area is positive in the y-down screen
    // frame; degenerate slivers vanish after snapping and are skipped.
    let area2 = (v[1].x - v[0].x) * (v[2].y - v[0].y) - (v[1].y - v[0].y) * (v[2].x - v[0].x);
    if area2 == 0.0 {
        return;
    }
    if area2 < 0.0 {
        v.swap(1, 2);
    }
    let area2 = area2.abs();

    let min_x = v[0].x.min(v[1].x).min(v[2].x);
    let max_x = v[0].x.max(v[1].x).max(v[2].x);
    let min_y = v[0].y.min(v[1].y).min(v[2].y);
    let max_y = v[0].y.max(v[1].y).max(v[2].y);
    if max_x < -0.5 || max_y < -0.5 || min_x > cam.width as f64 || min_y > cam.height as f64 {
        return;
    }
    let x0 = min_x.ceil().max(0.0) as u32;
    let x1 = max_x.floor().min(cam.width as f64 - 1.0) as u32;
    let y0 = min_y.ceil().max(0.0) as u32;
    let y1 = max_y.floor().min(cam.height as f64 - 1.0) as u32;
    if x0 > x1 || y0 > y1 {
        return;
    }

    // Edge k runs from v[k+1] to v[k+2] (opposite vertex k), so the edge
    // function doubles as the unnormalized barycentric of vertex k.
    let mut edges = [(0.0, 0.0, false); 3]; // (dx, dy, accepts_zero)
    for k in 0..3 {
        let a = v[(k + 1) % 3];
        let b = v[(k + 2) % 3];
        let dx = b.x - a.x;
        let dy = b.y - a.y;
        // Top-left rule: boundary pixels belong to top edges (horizontal,
        // pointing +x in this winding) and left edges (pointing -y).
        let accepts_zero = (dy == 0.0 && dx > 0.0) || dy < 0.0;
        edges[k] = (dx, dy, accepts_zero);
    }
    let anchor = [v[1], v[2], v[0]]; // start vertex of each edge

    for py in y0..=y1 {
        let cy = py as f64;
        for px in x0..=x1 {
            let cx = px as f64;
            let mut bary = [0.0; 3];
            let mut inside = true;
            for k in 0..3 {
                let (dx, dy, accepts_zero) = edges[k];
                let e = dx * (cy - anchor[k].y) - dy * (cx - anchor[k].x);
                if e < 0.0 || (e == 0.0 && !accepts_zero) {
                    inside = false;
                    break;
                }
                bary[k] = e;
            }
            if !inside {
                continue;
            }
            let inv_z = (bary[0] * v[0].inv_z + bary[1] * v[1].inv_z + bary[2] * v[2].inv_z)
                / area2;
            if inv_z <= 0.0 {
                continue;
            }
            let z = 1.0 / inv_z;
            let idx = py as usize * cam.width as usize + px as usize;
            if z < zbuf[idx] {
                zbuf[idx] = z;
            }
        }
    }
}

/// Intersection-over-union of two masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskIou {
    pub iou: f64,
    /// Both masks were empty; `iou` is defined as 0 and callers that average
    /// IoUs skip flagged values.
    pub both_empty: bool,
}

pub fn mask_iou(a: &Mask, b: &Mask) -> Result<MaskIou> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::RasterSizeMismatch {
            expected_w: a.width(),
            expected_h: a.height(),
            got_w: b.width(),
            got_h: b.height(),
        });
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (x, y) in a.bits().iter().zip(b.bits()) {
        if *x && *y {
            intersection += 1;
        }
        if *x || *y {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(MaskIou { iou: 0.0, both_empty: true });
    }
    Ok(MaskIou { iou: intersection as f64 / union as f64, both_empty: false })
}
