//! Evaluation metrics: geometric (chamfer distance, f-score, normal
//! consistency over sampled surfaces), visual (PSNR, SSIM on grayscale
//! rasters), and semantic (category recall, instance F1).
//!
//! Every geometric metric is written to be *bitwise* reproducible against a
//! linear-scan oracle: nearest-neighbor queries share the k-d tree's exact
//! arithmetic, distances stay squared until after the minimum is taken, and
//! sums run in index order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::SceneDescription;
use crate::discovery::CategoryRegistry;
use crate::geom::{KdTree, PointCloud, TriMesh, Vec3};
use crate::{Error, InstanceId, Result};

fn nonempty(cloud: &PointCloud, side: &'static str) -> Result<()> {
    if cloud.points.is_empty() {
        return Err(Error::EmptyCloud(side));
    }
    Ok(())
}

/// Mean nearest-neighbor distance from every point of `from` to `to`.
/// `to_tree` must be built over `to.points`.
fn directed_mean(from: &PointCloud, to_tree: &KdTree) -> f64 {
    let mut sum = 0.0;
    for p in &from.points {
        let (_, d2) = to_tree.nearest(p).expect("tree built over a nonempty cloud");
        sum += d2.sqrt();
    }
    sum / from.points.len() as f64
}

/// Symmetric chamfer distance: the average of the two directed mean
/// nearest-neighbor distances.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    nonempty(a, "chamfer lhs")?;
    nonempty(b, "chamfer rhs")?;
    let tree_a = KdTree::build(&a.points);
    let tree_b = KdTree::build(&b.points);
    Ok(0.5 * (directed_mean(a, &tree_b) + directed_mean(b, &tree_a)))
}

/// Harmonic mean of precision (fraction of `a` within `threshold` of `b`)
/// and recall (the reverse direction). Distances compare inclusively, so a
/// point exactly at the threshold counts.
pub fn f_score(a: &PointCloud, b: &PointCloud, threshold: f64) -> Result<f64> {
    nonempty(a, "f-score lhs")?;
    nonempty(b, "f-score rhs")?;
    if !threshold.is_finite() || threshold <= 0.0 {
        return Err(Error::Config(format!("f-score threshold must be positive, got {threshold}")));
    }
    let t2 = threshold * threshold;
    let within = |from: &PointCloud, to_tree: &KdTree| {
        let hits = from
            .points
            .iter()
            .filter(|p| to_tree.nearest(p).expect("nonempty").1 <= t2)
            .count();
        hits as f64 / from.points.len() as f64
    };
    let precision = within(a, &KdTree::build(&b.points));
    let recall = within(b, &KdTree::build(&a.points));
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean absolute cosine between the normals of nearest-neighbor pairs,
/// averaged over both directions. Sign-invariant: opposite orientations of
/// the same surface agree perfectly.
pub fn normal_consistency(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    nonempty(a, "normal-consistency lhs")?;
    nonempty(b, "normal-consistency rhs")?;
    let (Some(na), Some(nb)) = (&a.normals, &b.normals) else {
        return Err(Error::MissingNormals);
    };
    let directed = |from: &PointCloud,
                    from_normals: &[Vec3],
                    to_tree: &KdTree,
                    to_normals: &[Vec3]| {
        let mut sum = 0.0;
        for (p, n) in from.points.iter().zip(from_normals) {
            let (idx, _) = to_tree.nearest(p).expect("nonempty");
            sum += n.dot(&to_normals[idx]).abs();
        }
        sum / from.points.len() as f64
    };
    let tree_a = KdTree::build(&a.points);
    let tree_b = KdTree::build(&b.points);
    Ok(0.5 * (directed(a, na, &tree_b, nb) + directed(b, nb, &tree_a, na)))
}

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(Error::Config(format!(
                "image payload holds {} values for a {width}x{height} raster",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("image intensity {bad} outside [0, 1]")));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    fn check_compatible(&self, other: &GrayImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::RasterSizeMismatch {
                expected_w: self.width,
                expected_h: self.height,
                got_w: other.width,
                got_h: other.height,
            });
        }
        Ok(())
    }
}

/// Decibels a signal of range 1 stands above the mean squared error.
/// Identical images have infinite PSNR; the returned value is capped at 99.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.check_compatible(b)?;
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, tap) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *tap = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *tap;
    }
    for tap in &mut taps {
        *tap /= sum;
    }
    taps
}

/// Valid-mode separable Gaussian filter: output is `(w - 10) x (h - 10)`.
fn gaussian_filter(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let out_w = w - (SSIM_WINDOW - 1);
    let out_h = h - (SSIM_WINDOW - 1);
    // Horizontal pass over full rows, then vertical pass over the valid
    // columns.
    let mut horiz = vec![0.0; out_w * h];
    for y in 0..h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, tap) in taps.iter().enumerate() {
                acc += tap * img[y * w + x + k];
            }
            horiz[y * out_w + x] = acc;
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, tap) in taps.iter().enumerate() {
                acc += tap * horiz[(y + k) * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}

/// Mean structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5, k1 = 0.01, k2 = 0.03, dynamic range 1). Windows are applied
/// in valid mode, so images must be at least 11 pixels on each side.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.check_compatible(b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let xx: Vec<f64> = a.pixels.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = b.pixels.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = a.pixels.iter().zip(&b.pixels).map(|(x, y)| x * y).collect();

    let mu_x = gaussian_filter(&a.pixels, w, h);
    let mu_y = gaussian_filter(&b.pixels, w, h);
    let m_xx = gaussian_filter(&xx, w, h);
    let m_yy = gaussian_filter(&yy, w, h);
    let m_xy = gaussian_filter(&xy, w, h);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut sum = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = m_xx[i] - mx * mx;
        let var_y = m_yy[i] - my * my;
        let cov = m_xy[i] - mx * my;
        sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(sum / mu_x.len() as f64)
}

/// Uniform area-weighted surface samples of a composed scene, with face
/// normals. Sample counts per triangle follow exact area proportions via
/// largest-remainder rounding; within a triangle the square-root trick maps
/// uniform variates to uniform barycentric coordinates. Deterministic for a
/// given seed.
pub fn sample_scene_surface(
    scene: &SceneDescription,
    meshes: &BTreeMap<InstanceId, TriMesh>,
    samples: usize,
    seed: u64,
) -> Result<PointCloud> {
    if samples == 0 {
        return Err(Error::Config("surface sampling needs at least one sample".into()));
    }
    // World-space triangles with their areas and unit normals.
    let mut corners: Vec<[Vec3; 3]> = Vec::new();
    let mut areas: Vec<f64> = Vec::new();
    let mut normals: Vec<Vec3> = Vec::new();
    for obj in &scene.objects {
        let mesh = meshes.get(&obj.id).ok_or_else(|| Error::UnknownReference {
            kind: "mesh",
            name: obj.id.to_string(),
        })?;
        for t in 0..mesh.triangles.len() {
            let [a, b, c] =
                mesh.triangle_corners(t).map(|v| obj.transform.apply(&v));
            let cross = (b - a).cross(&(c - a));
            let norm = cross.norm();
            if norm <= 0.0 {
                continue;
            }
            corners.push([a, b, c]);
            areas.push(0.5 * norm);
            normals.push(cross / norm);
        }
    }
    if corners.is_empty() {
        return Err(Error::EmptyCloud("surface sampling"));
    }

    let total: f64 = areas.iter().sum();
    // Largest-remainder allocation: floors first, then the largest
    // fractional parts take the leftover (ties to the lower index).
    let quotas: Vec<f64> = areas.iter().map(|a| a / total * samples as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = samples - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&i, &j| {
        let (fi, fj) = (quotas[i].fract(), quotas[j].fract());
        fj.total_cmp(&fi).then(i.cmp(&j))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(samples);
    let mut point_normals = Vec::with_capacity(samples);
    for (i, &count) in counts.iter().enumerate() {
        let [a, b, c] = corners[i];
        for _ in 0..count {
            let r1: f64 = rng.random();
            let r2: f64 = rng.random();
            let s = r1.sqrt();
            let p = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
            points.push(p);
            point_normals.push(normals[i]);
        }
    }
    Ok(PointCloud { points, normals: Some(point_normals) })
}

/// Geometric comparison of two composed scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryScore {
    /// Meters; `INFINITY` when the prediction has no surface at all.
    pub chamfer: f64,
    pub f_score: f64,
    pub normal_consistency: f64,
    /// Mean spacing between neighboring ground-truth samples — the
    /// resolution floor below which chamfer differences are sampling noise.
    pub sample_spacing: f64,
}

pub const F_SCORE_THRESHOLD: f64 = 0.05;

/// Samples both scenes on their surfaces (ground truth with `seed`, the
/// prediction with `seed + 1` so coincident scenes still exercise distinct
/// sample sets) and scores the prediction. An empty prediction scores the
/// defined failure value rather than erroring: infinite chamfer, zero
/// f-score and consistency.
pub fn scene_geometry_score(
    pred: &SceneDescription,
    pred_meshes: &BTreeMap<InstanceId, TriMesh>,
    gt: &SceneDescription,
    gt_meshes: &BTreeMap<InstanceId, TriMesh>,
    samples: usize,
    seed: u64,
) -> Result<GeometryScore> {
    scene_geometry_score_with(pred, pred_meshes, gt, gt_meshes, samples, seed, F_SCORE_THRESHOLD)
}

/// [`scene_geometry_score`] with an explicit f-score distance threshold.
#[allow(clippy::too_many_arguments)]
pub fn scene_geometry_score_with(
    pred: &SceneDescription,
    pred_meshes: &BTreeMap<InstanceId, TriMesh>,
    gt: &SceneDescription,
    gt_meshes: &BTreeMap<InstanceId, TriMesh>,
    samples: usize,
    seed: u64,
    f_threshold: f64,
) -> Result<GeometryScore> {
    if samples < 1000 {
        return Err(Error::Config(format!(
            "scene scoring needs at least 1000 samples for a stable estimate, got {samples}"
        )));
    }
    let gt_cloud = sample_scene_surface(gt, gt_meshes, samples, seed)?;
    let tree = KdTree::build(&gt_cloud.points);
    let spacing = {
        let mut sum = 0.0;
        for (i, p) in gt_cloud.points.iter().enumerate() {
            if let Some((_, d2)) = tree.nearest_excluding(p, i) {
                sum += d2.sqrt();
            }
        }
        sum / gt_cloud.points.len() as f64
    };
    let pred_cloud = match sample_scene_surface(pred, pred_meshes, samples, seed + 1) {
        Ok(c) => c,
        Err(Error::EmptyCloud(_)) => {
            return Ok(GeometryScore {
                chamfer: f64::INFINITY,
                f_score: 0.0,
                normal_consistency: 0.0,
                sample_spacing: spacing,
            });
        }
        Err(e) => return Err(e),
    };
    Ok(GeometryScore {
        chamfer: chamfer_distance(&pred_cloud, &gt_cloud)?,
        f_score: f_score(&pred_cloud, &gt_cloud, f_threshold)?,
        normal_consistency: normal_consistency(&pred_cloud, &gt_cloud)?,
        sample_spacing: spacing,
    })
}

/// Semantic comparison of two composed scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryScores {
    /// Fraction of ground-truth canonical categories present in the
    /// prediction.
    pub recall: f64,
    /// Instance-level F1 from greedy same-category matching by object
    /// position under the distance gate.
    pub f1: f64,
    pub precision: f64,
    pub instance_recall: f64,
    pub matched: usize,
}

pub const INSTANCE_MATCH_GATE: f64 = 0.5;

/// Category recall plus instance F1. Categories are canonicalized through
/// the synonym table before comparison. Instances match greedily: the
/// globally closest same-category (prediction, ground-truth) pair within
/// half a meter matches first, ties broken by lower ids, and matched
/// instances leave the pool.
pub fn category_scores(
    pred: &SceneDescription,
    gt: &SceneDescription,
    synonyms: &CategoryRegistry,
) -> Result<CategoryScores> {
    if gt.objects.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let canon = |s: &str| synonyms.canonical_of(s);
    let gt_cats: std::collections::BTreeSet<String> =
        gt.objects.iter().map(|o| canon(&o.category)).collect();
    let pred_cats: std::collections::BTreeSet<String> =
        pred.objects.iter().map(|o| canon(&o.category)).collect();
    let recall = gt_cats.intersection(&pred_cats).count() as f64 / gt_cats.len() as f64;

    // All candidate pairs within the gate, best first.
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.objects.iter().enumerate() {
        for (j, g) in gt.objects.iter().enumerate() {
            if canon(&p.category) != canon(&g.category) {
                continue;
            }
            let d = (p.transform.translation - g.transform.translation).norm();
            if d <= INSTANCE_MATCH_GATE {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.objects.len()];
    let mut gt_used = vec![false; gt.objects.len()];
    let mut matched = 0usize;
    for (_, i, j) in candidates {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            matched += 1;
        }
    }
    let precision = if pred.objects.is_empty() {
        0.0
    } else {
        matched as f64 / pred.objects.len() as f64
    };
    let instance_recall = matched as f64 / gt.objects.len() as f64;
    let f1 = if precision + instance_recall == 0.0 {
        0.0
    } else {
        2.0 * precision * instance_recall / (precision + instance_recall)
    };
    Ok(CategoryScores { recall, f1, precision, instance_recall, matched })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::PlacedObject;
    use crate::geom::{Mat3, SimilarityTransform};
    use nalgebra::{Rotation3, Vector3};
    use proptest::prelude::*;

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::from_points(points)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        cloud(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
    }

    /// Index-order linear scan mirroring the k-d tree arithmetic exactly.
    fn chamfer_oracle(a: &PointCloud, b: &PointCloud) -> f64 {
        let directed = |from: &PointCloud, to: &PointCloud| {
            let mut sum = 0.0;
            for p in &from.points {
                let mut best = f64::INFINITY;
                for q in &to.points {
                    let d2 = crate::geom::dist2(p, q);
                    if d2 < best {
                        best = d2;
                    }
                }
                sum += best.sqrt();
            }
            sum / from.points.len() as f64
        };
        0.5 * (directed(a, b) + directed(b, a))
    }

    #[test]
    fn chamfer_matches_linear_scan_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let a = random_cloud(&mut rng, 300);
            let b = random_cloud(&mut rng, 450);
            let fast = chamfer_distance(&a, &b).unwrap();
            let slow = chamfer_oracle(&a, &b);
            assert_eq!(fast.to_bits(), slow.to_bits());
        }
    }

    #[test]
    fn chamfer_basics() {
        let a = cloud(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        let p = cloud(vec![Vec3::zeros()]);
        let q = cloud(vec![Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(chamfer_distance(&p, &q).unwrap(), 1.0);
        // Symmetry.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_cloud(&mut rng, 100);
        let b = random_cloud(&mut rng, 80);
        assert_eq!(
            chamfer_distance(&a, &b).unwrap().to_bits(),
            chamfer_distance(&b, &a).unwrap().to_bits()
        );
        assert!(matches!(
            chamfer_distance(&cloud(vec![]), &a),
            Err(Error::EmptyCloud(_))
        ));
    }

    #[test]
    fn chamfer_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_cloud(&mut rng, 200);
        let b = random_cloud(&mut rng, 200);
        let rot = *Rotation3::from_euler_angles(0.3, -0.8, 1.1).matrix();
        let shift = Vec3::new(2.0, -1.0, 0.5);
        let move_cloud = |c: &PointCloud| {
            cloud(c.points.iter().map(|p| rot * p + shift).collect())
        };
        let before = chamfer_distance(&a, &b).unwrap();
        let after = chamfer_distance(&move_cloud(&a), &move_cloud(&b)).unwrap();
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn f_score_formula_cases() {
        let a = cloud(vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(f_score(&a, &a, 0.05).unwrap(), 1.0);
        let far = cloud(vec![Vec3::new(10.0, 0.0, 0.0)]);
        assert_eq!(f_score(&a, &far, 0.05).unwrap(), 0.0);
        // Half of a within threshold of b; all of b within threshold of a:
        // F = 2 * (0.5 * 1) / 1.5 = 2/3.
        let a = cloud(vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)]);
        let b = cloud(vec![Vec3::new(0.001, 0.0, 0.0)]);
        let f = f_score(&a, &b, 0.05).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(f_score(&a, &b, 0.0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn f_score_is_monotone_in_threshold(seed in 0u64..500, lo in 0.01..0.5f64, hi in 0.5..2.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, 60);
            let b = random_cloud(&mut rng, 60);
            let f_lo = f_score(&a, &b, lo).unwrap();
            let f_hi = f_score(&a, &b, hi).unwrap();
            prop_assert!(f_lo <= f_hi + 1e-12);
        }
    }

    fn plane_cloud(z: f64, normal: Vec3, n: usize) -> PointCloud {
        let mut points = Vec::new();
        let side = (n as f64).sqrt().ceil() as usize;
        for i in 0..side {
            for j in 0..side {
                if points.len() == n {
                    break;
                }
                points.push(Vec3::new(i as f64 * 0.1, j as f64 * 0.1, z));
            }
        }
        let normals = vec![normal; points.len()];
        PointCloud { points, normals: Some(normals) }
    }

    #[test]
    fn normal_consistency_cases() {
        let up = plane_cloud(0.0, Vec3::z(), 64);
        assert_eq!(normal_consistency(&up, &up).unwrap(), 1.0);
        // Same plane, flipped normals: absolute dot is sign-invariant.
        let down = plane_cloud(0.0, -Vec3::z(), 64);
        assert_eq!(normal_consistency(&up, &down).unwrap(), 1.0);
        // Co-located but orthogonal normals.
        let side = plane_cloud(0.0, Vec3::x(), 64);
        assert_eq!(normal_consistency(&up, &side).unwrap(), 0.0);
        let bare = cloud(up.points.clone());
        assert!(matches!(normal_consistency(&up, &bare), Err(Error::MissingNormals)));
    }

    fn image(w: u32, h: u32, mut f: impl FnMut(u32, u32) -> f64) -> GrayImage {
        let mut px = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            for x in 0..w {
                px.push(f(x, y));
            }
        }
        GrayImage::new(w, h, px).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = image(16, 16, |x, y| ((x + y) % 7) as f64 / 10.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        // Uniform +0.1 offset: MSE = 0.01 exactly, PSNR = 20 dB.
        let b = image(16, 16, |x, y| ((x + y) % 7) as f64 / 10.0 + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let small = image(8, 8, |_, _| 0.0);
        assert!(matches!(psnr(&a, &small), Err(Error::RasterSizeMismatch { .. })));
        assert!(GrayImage::new(2, 2, vec![0.0, 1.5, 0.0, 0.0]).is_err());
    }

    /// Direct 2D-window SSIM, written independently of the separable
    /// filtering path.
    fn ssim_oracle(a: &GrayImage, b: &GrayImage) -> f64 {
        let taps = gaussian_taps();
        let (w, h) = (a.width() as usize, a.height() as usize);
        let mut window = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        for (i, row) in window.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = taps[i] * taps[j];
            }
        }
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                for (dy, row) in window.iter().enumerate() {
                    for (dx, &wgt) in row.iter().enumerate() {
                        let xv = a.pixels()[(y0 + dy) * w + x0 + dx];
                        let yv = b.pixels()[(y0 + dy) * w + x0 + dx];
                        mx += wgt * xv;
                        my += wgt * yv;
                        sxx += wgt * xv * xv;
                        syy += wgt * yv * yv;
                        sxy += wgt * xv * yv;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        sum / count as f64
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..5 {
            let a = image(24, 18, |_, _| rng.random());
            let b = image(24, 18, |_, _| rng.random());
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_oracle(&a, &b);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_cases() {
        let a = image(32, 32, |x, y| ((x * 31 + y * 17) % 11) as f64 / 11.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // A checkerboard against its inversion: strong anti-correlation.
        let check = image(32, 32, |x, y| ((x + y) % 2) as f64);
        let inverted = image(32, 32, |x, y| ((x + y + 1) % 2) as f64);
        let s = ssim(&check, &inverted).unwrap();
        assert!(s < -0.9, "inverted checkerboard should anti-correlate: {s}");
        assert!((s - ssim_oracle(&check, &inverted)).abs() < 1e-12);
        let tiny = image(8, 8, |_, _| 0.5);
        assert!(matches!(ssim(&tiny, &tiny), Err(Error::Config(_))));
    }

    fn yaw(angle: f64) -> Mat3 {
        *Rotation3::from_axis_angle(&Vector3::y_axis(), angle).matrix()
    }

    fn unit_square_mesh() -> TriMesh {
        TriMesh {
            vertices: vec![
                Vec3::new(-0.5, 0.0, -0.5),
                Vec3::new(0.5, 0.0, -0.5),
                Vec3::new(-0.5, 0.0, 0.5),
                Vec3::new(0.5, 0.0, 0.5),
            ],
            triangles: vec![[0, 1, 2], [1, 3, 2]],
            colors: None,
        }
    }

    fn one_object_scene(t: SimilarityTransform) -> SceneDescription {
        SceneDescription {
            gravity: Vec3::new(0.0, -1.0, 0.0),
            walls: vec![],
            objects: vec![PlacedObject {
                id: 0,
                category: "panel".into(),
                mesh_ref: "assets/000.obj".into(),
                transform: t,
                relations: vec![],
            }],
        }
    }

    fn mesh_map(mesh: TriMesh) -> BTreeMap<InstanceId, TriMesh> {
        BTreeMap::from([(0, mesh)])
    }

    #[test]
    fn sampling_is_deterministic_and_on_surface() {
        let scene = one_object_scene(SimilarityTransform::new(
            2.0,
            yaw(0.6),
            Vec3::new(1.0, 0.5, -0.3),
        ));
        let meshes = mesh_map(unit_square_mesh());
        let a = sample_scene_surface(&scene, &meshes, 500, 9).unwrap();
        let b = sample_scene_surface(&scene, &meshes, 500, 9).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.points.len(), 500);
        // The square lives in the plane y = 0.5 after placement; every
        // sample must lie exactly in it with the matching unit normal.
        let normals = a.normals.as_ref().unwrap();
        let expected_n = yaw(0.6) * Vec3::y();
        for (p, n) in a.points.iter().zip(normals) {
            assert!((p.y - 0.5).abs() < 1e-12);
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!((n - expected_n).norm() < 1e-12 || (n + expected_n).norm() < 1e-12);
        }
        let c = sample_scene_surface(&scene, &meshes, 500, 10).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn sampling_is_area_proportional() {
        // Two parallel squares, one with twice the edge length: area ratio
        // 4:1, so 500 samples split 400/100 exactly.
        let mesh = TriMesh {
            vertices: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(2.0, 0.0, 0.0),
                Vec3::new(0.0, 2.0, 0.0),
                Vec3::new(2.0, 2.0, 0.0),
                Vec3::new(5.0, 0.0, 0.0),
                Vec3::new(6.0, 0.0, 0.0),
                Vec3::new(5.0, 1.0, 0.0),
                Vec3::new(6.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [1, 3, 2], [4, 5, 6], [5, 7, 6]],
            colors: None,
        };
        let scene = one_object_scene(SimilarityTransform::new(
            1.0,
            Mat3::identity(),
            Vec3::zeros(),
        ));
        let out = sample_scene_surface(&scene, &mesh_map(mesh), 500, 3).unwrap();
        let in_big = out.points.iter().filter(|p| p.x <= 2.0).count();
        assert_eq!(in_big, 400);
        assert_eq!(out.points.len() - in_big, 100);
    }

    #[test]
    fn identical_scenes_score_perfect() {
        let scene = one_object_scene(SimilarityTransform::new(
            1.0,
            yaw(0.2),
            Vec3::new(0.0, 0.3, 0.0),
        ));
        let meshes = mesh_map(unit_square_mesh());
        let score =
            scene_geometry_score(&scene, &meshes, &scene, &meshes, 2000, 5).unwrap();
        assert!(score.chamfer < 2.0 * score.sample_spacing);
        assert_eq!(score.f_score, 1.0);
        assert!(score.normal_consistency > 1.0 - 1e-12);
    }

    #[test]
    fn translated_object_scores_strictly_worse() {
        let gt = one_object_scene(SimilarityTransform::new(
            1.0,
            Mat3::identity(),
            Vec3::zeros(),
        ));
        let moved = one_object_scene(SimilarityTransform::new(
            1.0,
            Mat3::identity(),
            Vec3::new(1.0, 0.0, 0.0),
        ));
        let meshes = mesh_map(unit_square_mesh());
        let base = scene_geometry_score(&gt, &meshes, &gt, &meshes, 2000, 5).unwrap();
        let off = scene_geometry_score(&moved, &meshes, &gt, &meshes, 2000, 5).unwrap();
        assert!(off.chamfer > base.chamfer);
        assert!(off.f_score < base.f_score);
    }

    #[test]
    fn empty_prediction_scores_the_failure_sentinel() {
        let gt = one_object_scene(SimilarityTransform::new(
            1.0,
            Mat3::identity(),
            Vec3::zeros(),
        ));
        let empty = SceneDescription {
            gravity: Vec3::new(0.0, -1.0, 0.0),
            walls: vec![],
            objects: vec![],
        };
        let meshes = mesh_map(unit_square_mesh());
        let score =
            scene_geometry_score(&empty, &BTreeMap::new(), &gt, &meshes, 2000, 5).unwrap();
        assert!(score.chamfer.is_infinite());
        assert_eq!(score.f_score, 0.0);
        assert!(matches!(
            scene_geometry_score(&gt, &meshes, &gt, &meshes, 10, 5),
            Err(Error::Config(_))
        ));
    }

    fn labeled_scene(objects: &[(InstanceId, &str, Vec3)]) -> SceneDescription {
        SceneDescription {
            gravity: Vec3::new(0.0, -1.0, 0.0),
            walls: vec![],
            objects: objects
                .iter()
                .map(|&(id, cat, t)| PlacedObject {
                    id,
                    category: cat.into(),
                    mesh_ref: format!("assets/{id:03}.obj"),
                    transform: SimilarityTransform::new(1.0, Mat3::identity(), t),
                    relations: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn category_scores_cases() {
        let registry = CategoryRegistry::with_synonyms([("sofa", "couch")]).unwrap();
        let gt = labeled_scene(&[
            (0, "couch", Vec3::new(0.0, 0.0, 0.0)),
            (1, "lamp", Vec3::new(2.0, 0.0, 0.0)),
        ]);
        // Perfect prediction, modulo a synonym.
        let pred = labeled_scene(&[
            (0, "sofa", Vec3::new(0.1, 0.0, 0.0)),
            (1, "lamp", Vec3::new(2.05, 0.0, 0.0)),
        ]);
        let s = category_scores(&pred, &gt, &registry).unwrap();
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.f1, 1.0);

        // Duplicated instances: precision 0.5, recall 1, F1 = 2/3.
        let doubled = labeled_scene(&[
            (0, "couch", Vec3::new(0.05, 0.0, 0.0)),
            (1, "couch", Vec3::new(0.12, 0.0, 0.0)),
            (2, "lamp", Vec3::new(2.0, 0.0, 0.0)),
            (3, "lamp", Vec3::new(2.1, 0.0, 0.0)),
        ]);
        let s = category_scores(&doubled, &gt, &registry).unwrap();
        assert_eq!(s.precision, 0.5);
        assert_eq!(s.instance_recall, 1.0);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);

        // Empty prediction.
        let empty = labeled_scene(&[]);
        let s = category_scores(&empty, &gt, &registry).unwrap();
        assert_eq!(s.recall, 0.0);
        assert_eq!(s.f1, 0.0);
        assert!(matches!(
            category_scores(&gt, &empty, &registry),
            Err(Error::EmptyGroundTruth)
        ));

        // The gate: a same-category prediction 0.8 m away does not match.
        let far = labeled_scene(&[
            (0, "couch", Vec3::new(0.8, 0.0, 0.0)),
            (1, "lamp", Vec3::new(2.0, 0.0, 0.0)),
        ]);
        let s = category_scores(&far, &gt, &registry).unwrap();
        assert_eq!(s.matched, 1);
        assert!((s.f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn greedy_matching_prefers_the_globally_closest_pair() {
        let registry = CategoryRegistry::new();
        let gt = labeled_scene(&[
            (0, "box", Vec3::new(0.0, 0.0, 0.0)),
            (1, "box", Vec3::new(0.4, 0.0, 0.0)),
        ]);
        // One prediction sits between the two ground-truth boxes, nearer the
        // second; the other is close to the first. Greedy must pair
        // (pred 1, gt 0) and (pred 0, gt 1) by global distance order.
        let pred = labeled_scene(&[
            (0, "box", Vec3::new(0.3, 0.0, 0.0)),
            (1, "box", Vec3::new(0.05, 0.0, 0.0)),
        ]);
        let s = category_scores(&pred, &gt, &registry).unwrap();
        assert_eq!(s.matched, 2);
        assert_eq!(s.f1, 1.0);
    }
}
