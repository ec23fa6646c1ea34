//! Geometric primitives shared by every stage: vectors, camera models,
//! rasters, meshes, similarity transforms, and exact nearest-neighbor search.

mod camera;
mod kdtree;
mod umeyama;

pub use camera::{CameraModel, Projection};
pub use kdtree::{nearest_neighbor_distance, KdTree};
#[cfg(test)]
pub(crate) use kdtree::dist2;
pub use umeyama::umeyama_fit;

use crate::{Error, Result};

/// 3D point / direction, always finite.
pub type Vec3 = nalgebra::Vector3<f64>;
/// Row-major 3x3 matrix; rotations satisfy R^T R = I, det R = +1.
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Orthonormality / determinant slack accepted by [`SimilarityTransform::validate`]
/// and [`CameraModel::validate`].
pub const ROTATION_TOL: f64 = 1e-6;

/// Similarity transform `x -> s * R * x + t` with `s > 0` and `R` a rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(scale: f64, rotation: Mat3, translation: Vec3) -> Self {
        Self { scale, rotation, translation }
    }

    /// Applies the transform to a point.
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Returns `self ∘ prev`, the transform applying `prev` first and then
    /// `self`. Used to fold a correction step into an accumulated pose:
    /// scale and rotation multiply, and the previous translation is carried
    /// through the correction.
    pub fn compose(&self, prev: &Self) -> Self {
        Self {
            scale: self.scale * prev.scale,
            rotation: self.rotation * prev.rotation,
            translation: self.scale * (self.rotation * prev.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rot_inv = self.rotation.transpose();
        let s_inv = 1.0 / self.scale;
        Self {
            scale: s_inv,
            rotation: rot_inv,
            translation: -s_inv * (rot_inv * self.translation),
        }
    }

    /// Checks scale positivity, rotation orthonormality and determinant, and
    /// finiteness of every component.
    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::InvalidTransform(format!("scale {} not positive", self.scale)));
        }
        if !self.translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidTransform("translation not finite".into()));
        }
        validate_rotation(&self.rotation).map_err(Error::InvalidTransform)
    }
}

/// Shared rotation check: finite, orthonormal and right-handed within
/// [`ROTATION_TOL`].
pub(crate) fn validate_rotation(r: &Mat3) -> std::result::Result<(), String> {
    if !r.iter().all(|c| c.is_finite()) {
        return Err("rotation not finite".into());
    }
    let gram = r.transpose() * r;
    let ortho_err = (gram - Mat3::identity()).abs().max();
    if ortho_err > ROTATION_TOL {
        return Err(format!("rotation not orthonormal (|R^T R - I| = {ortho_err:.2e})"));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(format!("rotation determinant {det} != 1"));
    }
    Ok(())
}

/// Angle in radians between two rotations, `acos((tr(Ra^T Rb) - 1) / 2)`.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Dense depth raster in meters. `0.0` marks pixels without a measurement;
/// valid values are strictly positive and finite. Storage is `f32` to match
/// the on-disk raster layout exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl DepthMap {
    /// All-invalid map.
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, values: vec![0.0; width as usize * height as usize] }
    }

    pub fn from_values(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::RasterSizeMismatch {
                expected_w: width,
                expected_h: height,
                got_w: values.len() as u32,
                got_h: 1,
            });
        }
        for &v in &values {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidDepth(v as f64));
            }
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    /// Depth at a pixel, `None` when the pixel has no measurement.
    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        let v = self.values[self.idx(x, y)];
        (v > 0.0).then_some(v as f64)
    }

    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.values[self.idx(x, y)] > 0.0
    }

    /// Writes a measurement; non-positive values mark the pixel invalid.
    pub fn set(&mut self, x: u32, y: u32, value: f32) {
        let i = self.idx(x, y);
        self.values[i] = if value > 0.0 { value } else { 0.0 };
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }
}

/// Binary instance mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::RasterSizeMismatch {
                expected_w: width,
                expected_h: height,
                got_w: bits.len() as u32,
                got_h: 1,
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Set pixels in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| ((i as u32) % w, (i as u32) / w))
    }

    /// In-place union; sizes must match.
    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::RasterSizeMismatch {
                expected_w: self.width,
                expected_h: self.height,
                got_w: other.width,
                got_h: other.height,
            });
        }
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Unstructured point cloud with optional unit normals.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        Self { points, normals: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Indexed triangle mesh with optional per-vertex colors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub colors: Option<Vec<[f32; 3]>>,
}

impl TriMesh {
    /// Checks index bounds, color table length, and vertex finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidMesh(format!("vertex {i} not finite")));
            }
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&k| k >= n) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {i} references vertex out of range (count {n})"
                )));
            }
        }
        if let Some(colors) = &self.colors {
            if colors.len() != self.vertices.len() {
                return Err(Error::InvalidMesh(format!(
                    "{} colors for {} vertices",
                    colors.len(),
                    self.vertices.len()
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_corners(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Mean of the vertex positions. Empty meshes yield the origin.
    pub fn vertex_centroid(&self) -> Vec3 {
        if self.vertices.is_empty() {
            return Vec3::zeros();
        }
        self.vertices.iter().sum::<Vec3>() / self.vertices.len() as f64
    }

    /// Copy with every vertex mapped through `t`.
    pub fn transformed(&self, t: &SimilarityTransform) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| t.apply(v)).collect(),
            triangles: self.triangles.clone(),
            colors: self.colors.clone(),
        }
    }

    /// Drops triangles whose area is at or below `min_area`, keeping vertex
    /// indices intact.
    pub fn without_degenerate_triangles(mut self, min_area: f64) -> TriMesh {
        self.triangles.retain(|t| {
            let a = self.vertices[t[0] as usize];
            let b = self.vertices[t[1] as usize];
            let c = self.vertices[t[2] as usize];
            0.5 * (b - a).cross(&(c - a)).norm() > min_area
        });
        self
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Aabb> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut aabb = Aabb { min: first, max: first };
        for p in it {
            aabb.min = aabb.min.inf(p);
            aabb.max = aabb.max.sup(p);
        }
        Some(aabb)
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        Aabb {
            min: self.min - Vec3::repeat(margin),
            max: self.max + Vec3::repeat(margin),
        }
    }
}
