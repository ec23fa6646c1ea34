//! Closed-form similarity-transform estimation between paired point sets.

use crate::{Error, Result};

use super::{Mat3, SimilarityTransform, Vec3};

/// Singular-value ratio below which the paired configuration is reported as
/// degenerate instead of guessing a rotation.
const DEGENERACY_RATIO: f64 = 1e-12;

/// Least-squares `s, R, t` with `target_i ~ s * R * source_i + t`.
///
/// Closed-form estimate from the cross-covariance SVD with sign correction,
/// scale from the source variance. Requires at least 3 pairs and a
/// non-degenerate source spread; near rank-deficient configurations (smallest
/// singular value below 1e-12 of the largest) return an error.
pub fn umeyama_fit(source: &[Vec3], target: &[Vec3]) -> Result<SimilarityTransform> {
    if source.len() != target.len() {
        return Err(Error::PointCountMismatch {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(Error::TooFewPoints {
            context: "similarity fit",
            got: source.len(),
            need: 3,
        });
    }

    let n = source.len() as f64;
    let mean_src: Vec3 = source.iter().sum::<Vec3>() / n;
    let mean_tgt: Vec3 = target.iter().sum::<Vec3>() / n;

    let mut covariance = Mat3::zeros();
    let mut src_variance = 0.0;
    for (s, t) in source.iter().zip(target) {
        let x = s - mean_src;
        let y = t - mean_tgt;
        covariance += y * x.transpose();
        src_variance += x.norm_squared();
    }
    covariance /= n;
    src_variance /= n;

    if src_variance <= 0.0 {
        return Err(Error::DegenerateGeometry("source points are all identical".into()));
    }

    let svd = nalgebra::SVD::new(covariance, true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateGeometry("SVD did not converge".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::DegenerateGeometry("SVD did not converge".into()))?;
    let d = svd.singular_values;

    // Do not assume the SVD orders its singular values.
    let mut min_i = 0;
    let mut max_i = 0;
    for i in 1..3 {
        if d[i] < d[min_i] {
            min_i = i;
        }
        if d[i] > d[max_i] {
            max_i = i;
        }
    }
    if d[max_i] <= 0.0 || d[min_i] < DEGENERACY_RATIO * d[max_i] {
        return Err(Error::DegenerateGeometry(format!(
            "cross-covariance singular values {:.3e} .. {:.3e} are rank deficient",
            d[min_i], d[max_i]
        )));
    }

    // Sign correction keeps the recovered rotation proper; the flip belongs
    // on the smallest singular value.
    let mut sign = Mat3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(min_i, min_i)] = -1.0;
    }

    let rotation = u * sign * v_t;
    let scale = (0..3).map(|i| d[i] * sign[(i, i)]).sum::<f64>() / src_variance;
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::DegenerateGeometry(format!("estimated scale {scale} not positive")));
    }
    let translation = mean_tgt - scale * (rotation * mean_src);

    let fit = SimilarityTransform { scale, rotation, translation };
    fit.validate()?;
    Ok(fit)
}
