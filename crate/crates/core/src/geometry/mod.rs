//! Cameras, point clouds, splatting, plane fitting and volumetric sampling.

pub mod camera;
pub mod cloud;
pub mod image;
pub mod ransac;
pub mod render;
pub mod volume;

pub use camera::{orbit_trajectory, CameraIntrinsics, CameraPose, Mat3, OrbitSpec, Vec3, WORLD_UP};
pub use cloud::PointCloud;
pub use image::{stack_masks, DepthMap, Image, Rgb};
pub use ransac::{ransac_plane, ransac_plane_points, Plane};
pub use render::{render_points, unproject, Rendered};
pub use volume::volumetric_sample;
