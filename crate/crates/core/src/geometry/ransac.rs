//! Robust plane fitting.

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::camera::{Mat3, Vec3};
use crate::geometry::cloud::PointCloud;

/// `{p : normal . p = offset}` with a unit normal oriented to `+z` (or the
/// first nonzero axis when horizontal).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: Vec3, offset: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 0.0) || !offset.is_finite() {
            return Err(Error::Degenerate("plane normal must be nonzero".into()));
        }
        let (mut normal, mut offset) = (normal / n, offset / n);
        let lead = if normal.z.abs() > 1e-12 { normal.z } else if normal.y.abs() > 1e-12 { normal.y } else { normal.x };
        if lead < 0.0 {
            normal = -normal;
            offset = -offset;
        }
        Ok(Plane { normal, offset })
    }

    pub fn ground() -> Self {
        Plane { normal: Vec3::z(), offset: 0.0 }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    fn through(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<Plane> {
        let n = (b - a).cross(&(c - a));
        let scale = (b - a).norm() * (c - a).norm();
        if !(n.norm() > 1e-12 * scale) {
            return None;
        }
        Plane::new(n, n.dot(a)).ok()
    }

    /// Total least-squares plane through `points`.
    pub fn fit(points: &[Vec3]) -> Result<Plane> {
        if points.len() < 3 {
            return Err(Error::invalid(format!("plane fit needs 3 points, got {}", points.len())));
        }
        let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
        let mut cov = Mat3::zeros();
        for p in points {
            let d = p - centroid;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let (imin, _) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |best, (i, &v)| if v < best.1 { (i, v) } else { best });
        let mut sorted: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        if !(sorted[1] > 1e-12 * sorted[2].max(f64::MIN_POSITIVE)) {
            return Err(Error::Degenerate("points are collinear".into()));
        }
        let n = eig.eigenvectors.column(imin).into_owned();
        Plane::new(n, n.dot(&centroid))
    }
}

/// Three-point RANSAC with a least-squares refit on the best inlier set.
pub fn ransac_plane(points: &PointCloud, n_iters: usize, inlier_thresh: f64, seed: u64) -> Result<(Plane, Vec<usize>)> {
    ransac_plane_points(&points.positions, n_iters, inlier_thresh, seed)
}

pub fn ransac_plane_points(pts: &[Vec3], n_iters: usize, inlier_thresh: f64, seed: u64) -> Result<(Plane, Vec<usize>)> {
    if pts.len() < 3 {
        return Err(Error::invalid(format!("RANSAC needs at least 3 points, got {}", pts.len())));
    }
    if !(inlier_thresh > 0.0) {
        return Err(Error::invalid(format!("inlier threshold must be positive, got {inlier_thresh}")));
    }
    let inliers_of = |pl: &Plane| -> Vec<usize> {
        (0..pts.len()).filter(|&i| pl.signed_distance(&pts[i]).abs() <= inlier_thresh).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Plane, usize)> = None;
    for _ in 0..n_iters.max(1) {
        let i = rng.random_range(0..pts.len());
        let mut j = rng.random_range(0..pts.len() - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..pts.len() - 2);
        for m in [i.min(j), i.max(j)] {
            if k >= m {
                k += 1;
            }
        }
        let Some(pl) = Plane::through(&pts[i], &pts[j], &pts[k]) else { continue };
        let count = pts.iter().filter(|p| pl.signed_distance(p).abs() <= inlier_thresh).count();
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((pl, count));
        }
    }
    let (hyp, _) = best.ok_or_else(|| Error::Degenerate(format!("all {n_iters} RANSAC samples were collinear")))?;
    let initial = inliers_of(&hyp);
    let sel: Vec<Vec3> = initial.iter().map(|&i| pts[i]).collect();
    let plane = match Plane::fit(&sel) {
        Ok(p) => p,
        Err(_) => return Ok((hyp, initial)),
    };
    let refit = inliers_of(&plane);
    if refit.len() >= initial.len() {
        Ok((plane, refit))
    } else {
        Ok((hyp, initial))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand_distr::{Distribution, Normal};

    fn cloud(pts: Vec<Vec3>) -> PointCloud {
        let n = pts.len();
        PointCloud::new(pts, vec![[0.5; 3]; n], vec![0; n]).unwrap()
    }

    fn noisy_scene(seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1e-3).unwrap();
        let mut pts = Vec::new();
        for _ in 0..700 {
            pts.push(Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.2 + noise.sample(&mut rng)));
        }
        for _ in 0..300 {
            pts.push(Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..1.0)));
        }
        pts
    }

    #[test]
    fn exact_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<Vec3> = (0..1000).map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0)).collect();
        let (pl, inl) = ransac_plane(&cloud(pts), 50, 1e-6, 1).unwrap();
        assert!(pl.normal.angle(&Vec3::z()).to_degrees() < 0.01);
        assert!(pl.offset.abs() <= 1e-9);
        assert_eq!(inl.len(), 1000);
    }

    #[test]
    fn outlier_recovery() {
        let (pl, inl) = ransac_plane(&cloud(noisy_scene(3)), 200, 5e-3, 7).unwrap();
        assert!(pl.normal.angle(&Vec3::z()).to_degrees() < 1.0);
        assert!((pl.offset - 0.2).abs() < 2e-3);
        assert!(inl.len() as f64 >= 0.65 * 1000.0);
    }

    #[test]
    fn collinear_and_small_inputs() {
        let line = cloud(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 2.0, 2.0)]);
        assert!(matches!(ransac_plane(&line, 20, 1e-3, 0), Err(Error::Degenerate(_))));
        assert!(ransac_plane(&cloud(vec![Vec3::zeros(), Vec3::x()]), 20, 1e-3, 0).is_err());
    }

    #[test]
    fn deterministic_and_rigid_invariant() {
        let pts = noisy_scene(5);
        let a = ransac_plane_points(&pts, 100, 5e-3, 42).unwrap();
        assert_eq!(a, ransac_plane_points(&pts, 100, 5e-3, 42).unwrap());
        let rot = Rotation3::from_euler_angles(0.3, -0.2, 1.1);
        let shift = Vec3::new(0.4, -2.0, 0.7);
        let moved: Vec<Vec3> = pts.iter().map(|p| rot * p + shift).collect();
        let b = ransac_plane_points(&moved, 100, 5e-3, 42).unwrap();
        // Points near the threshold may flip under rounding.
        let common = a.1.iter().filter(|i| b.1.binary_search(i).is_ok()).count();
        assert!(a.1.len().abs_diff(common) <= 2 && b.1.len().abs_diff(common) <= 2);
        let n = rot * a.0.normal;
        assert!(n.dot(&b.0.normal).abs() > 1.0 - 1e-9);
    }
}
