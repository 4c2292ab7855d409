//! Filling surface clouds with simulation particles.

use crate::error::{Error, Result};
use crate::geometry::camera::Vec3;
use crate::geometry::cloud::PointCloud;

/// Voxelizes the surface cloud, closes the interior along scanlines and
/// emits a regular lattice of particles inside occupied voxels. Each
/// particle copies color and id from its nearest surface point.
///
/// A voxel is interior when it lies between two surface voxels along at
/// least two of the three axes, so a surface with one unseen side still
/// fills. The lattice has `floor(extent / spacing)` points per axis (at
/// least one), centered in the bounding box.
pub fn volumetric_sample(cloud: &PointCloud, voxel_size: f64, particle_spacing: f64) -> Result<PointCloud> {
    cloud.validate()?;
    if !(voxel_size > 0.0 && particle_spacing > 0.0) {
        return Err(Error::invalid(format!(
            "voxel size and spacing must be positive, got {voxel_size} and {particle_spacing}"
        )));
    }
    let (lo, hi) = cloud.bounds().ok_or_else(|| Error::invalid("cannot sample an empty cloud"))?;
    let extent = hi - lo;
    if extent.max() == 0.0 {
        return Ok(cloud.select([0]));
    }
    if particle_spacing > extent.max() {
        return Err(Error::invalid(format!(
            "particle spacing {particle_spacing} exceeds cloud extent {}",
            extent.max()
        )));
    }
    let dims: [usize; 3] = std::array::from_fn(|a| (extent[a] / voxel_size).floor() as usize + 1);
    let idx = |v: [usize; 3]| (v[2] * dims[1] + v[1]) * dims[0] + v[0];
    let voxel_of = |p: &Vec3| -> [usize; 3] {
        std::array::from_fn(|a| (((p[a] - lo[a]) / voxel_size).floor() as usize).min(dims[a] - 1))
    };
    let mut surface = vec![false; dims[0] * dims[1] * dims[2]];
    for p in &cloud.positions {
        surface[idx(voxel_of(p))] = true;
    }
    let occupied = close_scanlines(&surface, dims);
    let buckets = Buckets::new(cloud, lo, voxel_size, dims, voxel_of);

    let counts: [usize; 3] = std::array::from_fn(|a| ((extent[a] / particle_spacing + 1e-9).floor() as usize).max(1));
    let center = (lo + hi) / 2.0;
    let mut out = PointCloud::default();
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                let ijk = [i, j, k];
                let p = Vec3::from_fn(|a, _| center[a] + (ijk[a] as f64 - (counts[a] as f64 - 1.0) / 2.0) * particle_spacing);
                if !occupied[idx(voxel_of(&p))] {
                    continue;
                }
                let near = buckets.nearest(cloud, &p);
                out.push(p, cloud.colors[near], cloud.object_ids[near]);
            }
        }
    }
    Ok(out)
}

fn close_scanlines(surface: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let idx = |v: [usize; 3]| (v[2] * dims[1] + v[1]) * dims[0] + v[0];
    let mut votes = vec![0u8; surface.len()];
    for axis in 0..3 {
        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
        for u in 0..dims[a1] {
            for w in 0..dims[a2] {
                let at = |s: usize| {
                    let mut v = [0; 3];
                    v[axis] = s;
                    v[a1] = u;
                    v[a2] = w;
                    idx(v)
                };
                let hits: Vec<usize> = (0..dims[axis]).filter(|&s| surface[at(s)]).collect();
                if let (Some(&first), Some(&last)) = (hits.first(), hits.last()) {
                    for s in first..=last {
                        votes[at(s)] += 1;
                    }
                }
            }
        }
    }
    surface.iter().zip(&votes).map(|(&s, &v)| s || v >= 2).collect()
}

/// Surface points bucketed by voxel for nearest-neighbour queries.
struct Buckets {
    dims: [usize; 3],
    voxel_size: f64,
    lo: Vec3,
    start: Vec<usize>,
    items: Vec<usize>,
}

impl Buckets {
    fn new(cloud: &PointCloud, lo: Vec3, voxel_size: f64, dims: [usize; 3], voxel_of: impl Fn(&Vec3) -> [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        let cell: Vec<usize> = cloud
            .positions
            .iter()
            .map(|p| {
                let v = voxel_of(p);
                (v[2] * dims[1] + v[1]) * dims[0] + v[0]
            })
            .collect();
        let mut start = vec![0; n + 1];
        for &c in &cell {
            start[c + 1] += 1;
        }
        for i in 0..n {
            start[i + 1] += start[i];
        }
        let mut fill = start.clone();
        let mut items = vec![0; cell.len()];
        for (i, &c) in cell.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        Buckets { dims, voxel_size, lo, start, items }
    }

    /// Index of the nearest point, lowest index on ties.
    fn nearest(&self, cloud: &PointCloud, p: &Vec3) -> usize {
        let d = self.dims;
        let home: [i64; 3] = std::array::from_fn(|a| {
            (((p[a] - self.lo[a]) / self.voxel_size).floor() as i64).clamp(0, d[a] as i64 - 1)
        });
        let mut best = (usize::MAX, f64::INFINITY);
        let max_ring = *d.iter().max().unwrap() as i64;
        for ring in 0..=max_ring {
            // Every point outside the searched cube is at least this far away.
            let reach = (ring as f64 - 1.0).max(0.0) * self.voxel_size;
            if best.0 != usize::MAX && reach * reach > best.1 {
                break;
            }
            for z in home[2] - ring..=home[2] + ring {
                for y in home[1] - ring..=home[1] + ring {
                    for x in home[0] - ring..=home[0] + ring {
                        let on_shell = (x - home[0]).abs() == ring || (y - home[1]).abs() == ring || (z - home[2]).abs() == ring;
                        if !on_shell || x < 0 || y < 0 || z < 0 || x >= d[0] as i64 || y >= d[1] as i64 || z >= d[2] as i64 {
                            continue;
                        }
                        let c = (z as usize * d[1] + y as usize) * d[0] + x as usize;
                        for &i in &self.items[self.start[c]..self.start[c + 1]] {
                            let dist = (p - cloud.positions[i]).norm_squared();
                            if dist < best.1 || (dist == best.1 && i < best.0) {
                                best = (i, dist);
                            }
                        }
                    }
                }
            }
        }
        best.0
    }
}
