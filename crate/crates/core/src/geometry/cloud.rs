//! Colored, labelled point clouds and their ASCII PLY form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::camera::Vec3;
use crate::geometry::image::Rgb;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<Rgb>,
    pub object_ids: Vec<i32>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Vec<Rgb>, object_ids: Vec<i32>) -> Result<Self> {
        let cloud = PointCloud { positions, colors, object_ids };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.colors.len() != n || self.object_ids.len() != n {
            return Err(Error::invalid(format!(
                "point cloud arrays disagree: {} positions, {} colors, {} ids",
                n,
                self.colors.len(),
                self.object_ids.len()
            )));
        }
        if !self.positions.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("point positions"));
        }
        if !self.colors.iter().all(|c| c.iter().all(|v| (0.0..=1.0).contains(v))) {
            return Err(Error::invalid("point colors must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, p: Vec3, c: Rgb, id: i32) {
        self.positions.push(p);
        self.colors.push(c);
        self.object_ids.push(id);
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
        self.object_ids.extend_from_slice(&other.object_ids);
    }

    pub fn select(&self, idx: impl IntoIterator<Item = usize>) -> PointCloud {
        let mut out = PointCloud::default();
        for i in idx {
            out.push(self.positions[i], self.colors[i], self.object_ids[i]);
        }
        out
    }

    pub fn filter_ids(&self, keep: impl Fn(i32) -> bool) -> PointCloud {
        self.select((0..self.len()).filter(|&i| keep(self.object_ids[i])))
    }

    /// Sorted distinct object ids.
    pub fn ids(&self) -> Vec<i32> {
        let mut ids = self.object_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Axis-aligned bounds, `None` when empty.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }

    pub fn to_ply(&self) -> String {
        let mut s = format!(
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nproperty int object_id\nend_header\n",
            self.len()
        );
        for ((p, c), id) in self.positions.iter().zip(&self.colors).zip(&self.object_ids) {
            let b = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(s, "{} {} {} {} {} {} {}", p.x as f32, p.y as f32, p.z as f32, b(c[0]), b(c[1]), b(c[2]), id);
        }
        s
    }

    pub fn from_ply(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("PLY", m);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(bad("missing `ply` magic".into()));
        }
        let mut count = None;
        let mut props = Vec::new();
        let mut in_vertex = false;
        for line in lines.by_ref() {
            let t: Vec<&str> = line.split_whitespace().collect();
            match t.as_slice() {
                ["format", "ascii", _] => {}
                ["format", ..] => return Err(bad("only ASCII PLY is supported".into())),
                ["comment", ..] | [] => {}
                ["element", "vertex", n] => {
                    count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count `{n}`")))?);
                    in_vertex = true;
                }
                ["element", ..] => in_vertex = false,
                ["property", _, name] if in_vertex => props.push(name.to_string()),
                ["property", ..] => {}
                ["end_header"] => break,
                _ => return Err(bad(format!("unexpected header line `{line}`"))),
            }
        }
        let n = count.ok_or_else(|| bad("no vertex element".into()))?;
        let col = |name: &str| props.iter().position(|p| p == name);
        let (x, y, z) = match (col("x"), col("y"), col("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(bad("vertex element lacks x/y/z".into())),
        };
        let rgb = (col("red"), col("green"), col("blue"));
        let id = col("object_id");
        let mut cloud = PointCloud::default();
        for i in 0..n {
            let line = lines.next().ok_or_else(|| bad(format!("expected {n} vertices, found {i}")))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`"))))
                .collect::<Result<_>>()?;
            if v.len() != props.len() {
                return Err(bad(format!("vertex {i} has {} fields, expected {}", v.len(), props.len())));
            }
            let color = match rgb {
                (Some(r), Some(g), Some(b)) => [v[r] / 255.0, v[g] / 255.0, v[b] / 255.0],
                _ => [1.0; 3],
            };
            cloud.push(Vec3::new(v[x], v[y], v[z]), color, id.map_or(0, |j| v[j] as i32));
        }
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ply()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ply(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ply(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_round_trip() {
        let mut c = PointCloud::default();
        c.push(Vec3::new(0.5, -1.25, 2.0), [1.0, 0.0, 0.2], 3);
        c.push(Vec3::new(1e-3, 0.0, -7.5), [0.0, 0.5, 1.0], -1);
        let back = PointCloud::from_ply(&c.to_ply()).unwrap();
        assert_eq!(back.object_ids, c.object_ids);
        for (a, b) in back.positions.iter().zip(&c.positions) {
            assert!((a - b).norm() < 1e-6);
        }
        for (a, b) in back.colors.iter().zip(&c.colors) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn ply_rejects_garbage() {
        assert!(PointCloud::from_ply("nope").is_err());
        assert!(PointCloud::from_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
        let short = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(PointCloud::from_ply(short).is_err());
    }

    #[test]
    fn validation_and_bounds() {
        assert!(PointCloud::new(vec![Vec3::zeros()], vec![], vec![0]).is_err());
        assert!(PointCloud::new(vec![Vec3::zeros()], vec![[2.0, 0.0, 0.0]], vec![0]).is_err());
        let c = PointCloud::new(vec![Vec3::new(1.0, -1.0, 0.0), Vec3::new(-2.0, 3.0, 1.0)], vec![[0.0; 3]; 2], vec![1, 2]).unwrap();
        let (lo, hi) = c.bounds().unwrap();
        assert_eq!(lo, Vec3::new(-2.0, -1.0, 0.0));
        assert_eq!(hi, Vec3::new(1.0, 3.0, 1.0));
        assert_eq!(c.filter_ids(|i| i == 2).len(), 1);
    }
}
