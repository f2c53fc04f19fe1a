//! Pinhole camera and z-buffer rasterizer.
//!
//! Camera frame: x right, y down, z forward (optical axis). Pixel `(i, j)`
//! samples the ray through its center `(j + 0.5, i + 0.5)`. Depth is the
//! camera-frame z of the nearest surface, `+inf` where nothing is hit.
//! Shading is flat per face: `base · (AMBIENT + DIFFUSE·|n·l|)` for one fixed
//! directional light.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::se3::Pose;
use crate::space::{Image, ImageData};

use super::collision::arm_capsules;
use super::model::{SimModel, SimState};
use super::scene::Shape;

type V3 = Vector3<f64>;

pub const BACKGROUND: [u8; 3] = [32, 34, 40];
const AMBIENT: f64 = 0.35;
const DIFFUSE: f64 = 0.65;
const NEAR: f64 = 0.01;
const ARM_COLOR: [f64; 3] = [0.86, 0.86, 0.9];
const HAND_COLOR: [f64; 3] = [0.3, 0.3, 0.33];

fn light_dir() -> V3 {
    V3::new(0.3, 0.2, 1.0).normalize()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
    /// base_T_cam.
    pub extrinsic: Pose,
}

impl CameraModel {
    pub fn check(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        if self.height == 0 || self.width == 0 {
            return Err("resolution must be at least 1x1".into());
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err("principal point must lie inside the image".into());
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, image up roughly along `up`.
    pub fn look_at(eye: V3, target: V3, up: V3) -> Pose {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&V3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
        Pose::new(UnitQuaternion::from_rotation_matrix(&r), eye)
    }

    /// Same view at another resolution; intrinsics scale with the image.
    pub fn with_resolution(&self, height: usize, width: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            height,
            width,
            ..self.clone()
        }
    }

    /// `[fx, fy, cx, cy]`.
    pub fn intrinsics(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    /// Ray direction in camera coordinates through the center of pixel
    /// `(row, col)`, scaled so its z component is 1.
    pub fn pixel_ray(&self, row: usize, col: usize) -> V3 {
        V3::new((col as f64 + 0.5 - self.cx) / self.fx, (row as f64 + 0.5 - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v: [V3; 3],
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// u8, H×W×3.
    pub rgb: Image,
    /// f32 meters, H×W×1.
    pub depth: Image,
}

fn unit_icosphere() -> &'static [[V3; 3]] {
    static MESH: OnceLock<Vec<[V3; 3]>> = OnceLock::new();
    MESH.get_or_init(|| {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let verts: Vec<V3> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| V3::new(x, y, z).normalize())
        .collect();
        let faces: [[usize; 3]; 20] = [
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        let mut tris: Vec<[V3; 3]> = faces.iter().map(|f| [verts[f[0]], verts[f[1]], verts[f[2]]]).collect();
        for _ in 0..2 {
            tris = tris
                .iter()
                .flat_map(|[a, b, c]| {
                    let ab = ((a + b) * 0.5).normalize();
                    let bc = ((b + c) * 0.5).normalize();
                    let ca = ((c + a) * 0.5).normalize();
                    [[*a, ab, ca], [*b, bc, ab], [*c, ca, bc], [ab, bc, ca]]
                })
                .collect();
        }
        tris
    })
}

pub fn box_triangles(pose: &Pose, half: &[f64; 3], color: [f64; 3], out: &mut Vec<Triangle>) {
    let corner = |i: usize| {
        let s = |bit: usize, h: f64| if i & bit != 0 { h } else { -h };
        pose.transform_point(&V3::new(s(1, half[0]), s(2, half[1]), s(4, half[2])))
    };
    let c: Vec<V3> = (0..8).map(corner).collect();
    // Faces as corner quads, counter-clockwise seen from outside.
    const QUADS: [[usize; 4]; 6] =
        [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    for q in QUADS {
        out.push(Triangle { v: [c[q[0]], c[q[1]], c[q[2]]], color });
        out.push(Triangle { v: [c[q[0]], c[q[2]], c[q[3]]], color });
    }
}

pub fn sphere_triangles(center: &V3, radius: f64, color: [f64; 3], out: &mut Vec<Triangle>) {
    for [a, b, c] in unit_icosphere() {
        out.push(Triangle { v: [center + a * radius, center + b * radius, center + c * radius], color });
    }
}

/// Capsule mesh as a surface of revolution around segment `ab`.
pub fn capsule_triangles(a: &V3, b: &V3, radius: f64, color: [f64; 3], out: &mut Vec<Triangle>) {
    const SEGMENTS: usize = 10;
    const CAP_RINGS: usize = 3;
    let axis = b - a;
    let len = axis.norm();
    let rot = if len > 1e-12 {
        UnitQuaternion::rotation_between(&V3::z(), &axis).unwrap_or_else(|| UnitQuaternion::from_axis_angle(&V3::x_axis(), std::f64::consts::PI))
    } else {
        UnitQuaternion::identity()
    };
    // Profile from the bottom pole to the top pole: (ring radius, height).
    let mut profile = Vec::with_capacity(2 * CAP_RINGS + 2);
    for i in 0..=CAP_RINGS {
        let phi = -std::f64::consts::FRAC_PI_2 * (1.0 - i as f64 / CAP_RINGS as f64);
        profile.push((radius * phi.cos(), radius * phi.sin()));
    }
    for i in 0..=CAP_RINGS {
        let phi = std::f64::consts::FRAC_PI_2 * (i as f64 / CAP_RINGS as f64);
        profile.push((radius * phi.cos(), len + radius * phi.sin()));
    }
    let point = |(rho, h): (f64, f64), k: usize| {
        let theta = 2.0 * std::f64::consts::PI * (k % SEGMENTS) as f64 / SEGMENTS as f64;
        a + rot * V3::new(rho * theta.cos(), rho * theta.sin(), h)
    };
    for w in profile.windows(2) {
        for k in 0..SEGMENTS {
            let (p00, p01) = (point(w[0], k), point(w[0], k + 1));
            let (p10, p11) = (point(w[1], k), point(w[1], k + 1));
            if w[0].0 > 1e-12 {
                out.push(Triangle { v: [p00, p01, p11], color });
            }
            if w[1].0 > 1e-12 {
                out.push(Triangle { v: [p00, p11, p10], color });
            }
        }
    }
}

/// World-space triangles for every object and arm body in `state`.
pub fn scene_triangles(model: &SimModel, state: &SimState) -> Vec<Triangle> {
    let mut out = Vec::with_capacity(2048);
    for obj in &state.objects {
        match obj.shape {
            Shape::Box { half_extents } => box_triangles(&obj.pose, &half_extents, obj.color, &mut out),
            Shape::Sphere { radius } => sphere_triangles(&obj.pose.translation, radius, obj.color, &mut out),
        }
    }
    for (name, cap) in arm_capsules(model, state) {
        let color = if name == "hand" { HAND_COLOR } else { ARM_COLOR };
        capsule_triangles(&cap.a, &cap.b, cap.radius, color, &mut out);
    }
    out
}

pub fn render(model: &SimModel, camera: &CameraModel, state: &SimState) -> RenderOutput {
    render_triangles(camera, &scene_triangles(model, state))
}

fn shade(tri: &Triangle) -> [f32; 3] {
    let n = (tri.v[1] - tri.v[0]).cross(&(tri.v[2] - tri.v[0]));
    let norm = n.norm();
    let lambert = if norm > 0.0 { (n / norm).dot(&light_dir()).abs() } else { 0.0 };
    let k = AMBIENT + DIFFUSE * lambert;
    [(tri.color[0] * k) as f32, (tri.color[1] * k) as f32, (tri.color[2] * k) as f32]
}

fn to_u8(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Clips a camera-space polygon against `z >= NEAR`.
fn clip_near(poly: &[V3]) -> Vec<V3> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (ina, inb) = (a.z >= NEAR, b.z >= NEAR);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR - a.z) / (b.z - a.z);
            let mut p = a + (b - a) * t;
            p.z = NEAR;
            out.push(p);
        }
    }
    out
}

pub fn render_triangles(camera: &CameraModel, triangles: &[Triangle]) -> RenderOutput {
    let (h, w) = (camera.height, camera.width);
    let mut depth = vec![f32::INFINITY; h * w];
    // Exact z in f64 for the depth test; f32 only for the stored image.
    let mut zbuf = vec![f64::INFINITY; h * w];
    let mut rgb = vec![0u8; h * w * 3];
    for px in rgb.chunks_exact_mut(3) {
        px.copy_from_slice(&BACKGROUND);
    }
    let cam_from_world = camera.extrinsic.inverse();
    for tri in triangles {
        let cam: [V3; 3] = [
            cam_from_world.transform_point(&tri.v[0]),
            cam_from_world.transform_point(&tri.v[1]),
            cam_from_world.transform_point(&tri.v[2]),
        ];
        if cam.iter().all(|p| p.z < NEAR) {
            continue;
        }
        let color = shade(tri);
        let color = [to_u8(color[0]), to_u8(color[1]), to_u8(color[2])];
        let poly = if cam.iter().all(|p| p.z >= NEAR) { cam.to_vec() } else { clip_near(&cam) };
        // (u, v, 1/z) per vertex.
        let proj: Vec<(f64, f64, f64)> = poly
            .iter()
            .map(|p| (camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy, 1.0 / p.z))
            .collect();
        for k in 1..proj.len().saturating_sub(1) {
            raster_one(camera, [proj[0], proj[k], proj[k + 1]], color, &mut zbuf, &mut depth, &mut rgb);
        }
    }
    RenderOutput {
        rgb: Image { height: h, width: w, channels: 3, data: ImageData::U8(rgb) },
        depth: Image { height: h, width: w, channels: 1, data: ImageData::F32(depth) },
    }
}

fn raster_one(
    camera: &CameraModel,
    p: [(f64, f64, f64); 3],
    color: [u8; 3],
    zbuf: &mut [f64],
    depth: &mut [f32],
    rgb: &mut [u8],
) {
    let edge = |a: (f64, f64, f64), b: (f64, f64, f64), x: f64, y: f64| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
    let area = edge(p[0], p[1], p[2].0, p[2].1);
    if area.abs() < 1e-12 || !area.is_finite() {
        return;
    }
    let (w, h) = (camera.width as f64, camera.height as f64);
    let min_x = p.iter().map(|q| q.0).fold(f64::INFINITY, f64::min);
    let max_x = p.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min);
    let max_y = p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max);
    if max_x < 0.0 || max_y < 0.0 || min_x > w || min_y > h {
        return;
    }
    let c0 = ((min_x - 0.5).floor().max(0.0)) as usize;
    let c1 = ((max_x - 0.5).ceil().min(w - 1.0)) as usize;
    let r0 = ((min_y - 0.5).floor().max(0.0)) as usize;
    let r1 = ((max_y - 0.5).ceil().min(h - 1.0)) as usize;
    let inv_area = 1.0 / area;
    for row in r0..=r1 {
        let y = row as f64 + 0.5;
        for col in c0..=c1 {
            let x = col as f64 + 0.5;
            let w0 = edge(p[1], p[2], x, y) * inv_area;
            let w1 = edge(p[2], p[0], x, y) * inv_area;
            let w2 = edge(p[0], p[1], x, y) * inv_area;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let inv_z = w0 * p[0].2 + w1 * p[1].2 + w2 * p[2].2;
            if inv_z <= 0.0 {
                continue;
            }
            let z = 1.0 / inv_z;
            let i = row * camera.width + col;
            if z < zbuf[i] {
                zbuf[i] = z;
                depth[i] = z as f32;
                rgb[3 * i..3 * i + 3].copy_from_slice(&color);
            }
        }
    }
}

pub fn write_png(path: &Path, image: &Image) -> std::io::Result<()> {
    std::fs::write(path, encode_png(image)?)
}

pub fn encode_png(image: &Image) -> std::io::Result<Vec<u8>> {
    let data = image.as_u8().ok_or_else(|| std::io::Error::other("PNG export needs a u8 image"))?;
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        n => return Err(std::io::Error::other(format!("unsupported channel count {n}"))),
    };
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(std::io::Error::other)?;
    writer.write_image_data(data).map_err(std::io::Error::other)?;
    writer.finish().map_err(std::io::Error::other)?;
    Ok(out)
}
