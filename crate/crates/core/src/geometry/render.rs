//! Depth unprojection and z-buffered disc splatting.

use crate::error::{Error, Result};
use crate::geometry::camera::{CameraIntrinsics, CameraPose};
use crate::geometry::cloud::PointCloud;
use crate::geometry::image::{DepthMap, Image};
use crate::latent::VideoMask;

/// Lifts every masked pixel to a world point at its pixel-center ray.
/// Points take the pixel color and, if given, the pixel label as object id
/// (1 otherwise).
pub fn unproject(
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    colors: &Image,
    fg_mask: &VideoMask,
    labels: Option<&[i32]>,
) -> Result<PointCloud> {
    let (w, h) = (intr.width, intr.height);
    if (depth.width(), depth.height()) != (w, h)
        || (colors.width(), colors.height()) != (w, h)
        || (fg_mask.frames(), fg_mask.width(), fg_mask.height()) != (1, w, h)
        || labels.is_some_and(|l| l.len() != w * h)
    {
        return Err(Error::invalid(format!("unproject inputs must all be one {w}x{h} frame")));
    }
    let mut cloud = PointCloud::default();
    for y in 0..h {
        for x in 0..w {
            if !fg_mask.get(0, y, x) {
                continue;
            }
            let d = depth.get(x, y);
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::invalid(format!("non-positive depth {d} under mask at pixel ({x}, {y})")));
            }
            let p = pose.to_world(&(intr.ray(x as f64, y as f64) * d));
            let id = labels.map_or(1, |l| l[y * w + x]);
            cloud.push(p, colors.get(x, y), id);
        }
    }
    Ok(cloud)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub frame: Image,
    pub mask: VideoMask,
    pub depth: DepthMap,
    /// Object id of the winning point per pixel, -1 where uncovered.
    pub ids: Vec<i32>,
}

/// Splats each point as a disc of `radius_px` around its projection; the
/// nearest depth wins each pixel and ties keep the earlier point.
pub fn render_points(
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    radius_px: f64,
    background: &Image,
) -> Result<Rendered> {
    if !(radius_px >= 0.5) {
        return Err(Error::invalid(format!("splat radius must be at least 0.5 px, got {radius_px}")));
    }
    let (w, h) = (intr.width, intr.height);
    if (background.width(), background.height()) != (w, h) {
        return Err(Error::invalid(format!(
            "background is {}x{}, camera is {w}x{h}",
            background.width(),
            background.height()
        )));
    }
    let mut frame = background.clone();
    let mut depth = DepthMap::empty(w, h);
    let mut ids = vec![-1; w * h];
    let r2 = radius_px * radius_px;
    for ((p, c), &id) in cloud.positions.iter().zip(&cloud.colors).zip(&cloud.object_ids) {
        let pc = pose.to_camera(p);
        let Some((u, v)) = intr.project(&pc) else { continue };
        let x0 = (u - radius_px).ceil().max(0.0);
        let y0 = (v - radius_px).ceil().max(0.0);
        let x1 = (u + radius_px).floor().min(w as f64 - 1.0);
        let y1 = (v + radius_px).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let (dx, dy) = (x as f64 - u, y as f64 - v);
                if dx * dx + dy * dy > r2 || pc.z >= depth.get(x, y) {
                    continue;
                }
                depth.set(x, y, pc.z);
                frame.set(x, y, *c);
                ids[y * w + x] = id;
            }
        }
    }
    let mask = VideoMask::new(1, h, w, ids.iter().map(|&i| (i >= 0) as u8).collect())?;
    Ok(Rendered { frame, mask, depth, ids })
}
