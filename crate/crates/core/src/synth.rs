//! Synthetic room scenes rendered as noisy ToF-like depth frames with class
//! masks and per-scene activity labels.
//!
//! World frame: x, y span the floor, z points up, the room occupies
//! `[0, size]` on each axis. Cameras follow the pinhole convention of
//! [`crate::geometry`]: camera x right, y down, z forward, depth is camera z.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depthio::{self, DatasetManifest, DepthFrame, Intrinsics, ManifestEntry, SplitTag, DEFAULT_UNIT_SCALE};
use crate::error::{Error, Result};
use crate::geometry::frame_seed;

pub const NUM_SEG_CLASSES: usize = 8;
pub const NUM_TEMPLATES: usize = 5;

pub const FLOOR: u8 = 0;
pub const WALL: u8 = 1;
pub const TABLE: u8 = 2;
pub const CART: u8 = 3;
pub const ROBOT: u8 = 4;
pub const HUMAN: u8 = 5;
pub const LIGHT: u8 = 6;
pub const MISC: u8 = 7;

pub const CLASS_NAMES: [&str; NUM_SEG_CLASSES] = ["floor", "wall", "table", "cart", "robot", "human", "light", "misc"];

const HIT_EPS: f64 = 1e-9;

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Box rotated by `yaw` radians about the vertical axis through its center.
    Box { center: [f64; 3], half: [f64; 3], yaw: f64 },
    Sphere { center: [f64; 3], radius: f64 },
    /// Vertical cylinder standing on `base` (center of the bottom cap).
    Cylinder { base: [f64; 3], radius: f64, height: f64 },
}

impl Shape {
    /// Axis-aligned bounds `(min, max)`.
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Shape::Box { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                let ex = (c * half[0]).abs() + (s * half[1]).abs();
                let ey = (s * half[0]).abs() + (c * half[1]).abs();
                let e = [ex, ey, half[2]];
                (std::array::from_fn(|i| center[i] - e[i]), std::array::from_fn(|i| center[i] + e[i]))
            }
            Shape::Sphere { center, radius } => (center.map(|c| c - radius), center.map(|c| c + radius)),
            Shape::Cylinder { base, radius, height } => (
                [base[0] - radius, base[1] - radius, base[2]],
                [base[0] + radius, base[1] + radius, base[2] + height],
            ),
        }
    }

    /// Unsigned distance from `p` to the primitive's surface.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Shape::Box { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let local = [c * dx + s * dy, -s * dx + c * dy, p[2] - center[2]];
                let q: [f64; 3] = std::array::from_fn(|i| local[i].abs() - half[i]);
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                (outside + inside).abs()
            }
            Shape::Sphere { center, radius } => ((v3(p) - v3(center)).norm() - radius).abs(),
            Shape::Cylinder { base, radius, height } => {
                let radial = ((p[0] - base[0]).powi(2) + (p[1] - base[1]).powi(2)).sqrt() - radius;
                let axial = (p[2] - (base[2] + height / 2.0)).abs() - height / 2.0;
                let outside = (radial.max(0.0).powi(2) + axial.max(0.0).powi(2)).sqrt();
                (outside + radial.max(axial).min(0.0)).abs()
            }
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Box { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let local = [c * dx + s * dy, -s * dx + c * dy, p[2] - center[2]];
                (0..3).all(|i| local[i].abs() <= half[i])
            }
            Shape::Sphere { center, radius } => (v3(p) - v3(center)).norm() <= radius,
            Shape::Cylinder { base, radius, height } => {
                (p[0] - base[0]).powi(2) + (p[1] - base[1]).powi(2) <= radius * radius
                    && p[2] >= base[2]
                    && p[2] <= base[2] + height
            }
        }
    }

    /// Nearest hit `(t, outward normal)` with `t > 0` along `o + t·d`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match *self {
            Shape::Box { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                let rel = o - v3(center);
                let lo = Vector3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
                let ld = Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
                let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for i in 0..3 {
                    if ld[i].abs() < 1e-15 {
                        if lo[i].abs() > half[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[i] - lo[i]) / ld[i];
                    let b = (half[i] - lo[i]) / ld[i];
                    let (near, far) = if a < b { (a, b) } else { (b, a) };
                    if near > tmin {
                        tmin = near;
                        axis = i;
                    }
                    tmax = tmax.min(far);
                }
                if tmin > tmax || tmin <= HIT_EPS {
                    return None;
                }
                let mut ln = Vector3::zeros();
                ln[axis] = -ld[axis].signum();
                let n = Vector3::new(c * ln.x - s * ln.y, s * ln.x + c * ln.y, ln.z);
                Some((tmin, n))
            }
            Shape::Sphere { center, radius } => {
                let oc = o - v3(center);
                let a = d.dot(d);
                let b = 2.0 * oc.dot(d);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t <= HIT_EPS {
                    return None;
                }
                let n = (o + d * t - v3(center)) / radius;
                Some((t, n))
            }
            Shape::Cylinder { base, radius, height } => {
                let (ox, oy) = (o.x - base[0], o.y - base[1]);
                let mut best: Option<(f64, Vector3<f64>)> = None;
                let mut consider = |t: f64, n: Vector3<f64>| {
                    if t > HIT_EPS && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, n));
                    }
                };
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-15 {
                    let b = 2.0 * (ox * d.x + oy * d.y);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / (2.0 * a);
                        let z = o.z + t * d.z;
                        if z >= base[2] && z <= base[2] + height {
                            let n = Vector3::new(ox + t * d.x, oy + t * d.y, 0.0) / radius;
                            consider(t, n);
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    for (z, nz) in [(base[2], -1.0), (base[2] + height, 1.0)] {
                        let t = (z - o.z) / d.z;
                        let (x, y) = (ox + t * d.x, oy + t * d.y);
                        if x * x + y * y <= radius * radius {
                            consider(t, Vector3::new(0.0, 0.0, nz));
                        }
                    }
                }
                best
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub class_id: u8,
}

/// Room faces in the order `-x, +x, -y, +y, floor, ceiling`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurfaceId {
    Room(u8),
    Object(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Room extent in meters along x, y, z.
    pub room: [f64; 3],
    pub objects: Vec<Object>,
    pub template_id: u32,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("room size {:?} must be positive", self.room)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_id as usize >= NUM_SEG_CLASSES {
                return Err(Error::invalid(format!("object {i} has class {}", o.class_id)));
            }
            let (lo, hi) = o.shape.aabb();
            if (0..3).any(|k| lo[k] < 0.0 || hi[k] > self.room[k]) {
                return Err(Error::invalid(format!("object {i} extends outside the room")));
            }
        }
        Ok(())
    }

    pub fn class_of(&self, s: SurfaceId) -> u8 {
        match s {
            SurfaceId::Room(4) => FLOOR,
            SurfaceId::Room(_) => WALL,
            SurfaceId::Object(i) => self.objects[i].class_id,
        }
    }

    /// Unsigned distance from `p` to the given surface.
    pub fn surface_distance(&self, s: SurfaceId, p: [f64; 3]) -> f64 {
        match s {
            SurfaceId::Room(f) => {
                let axis = (f / 2) as usize;
                let plane = if f % 2 == 0 { 0.0 } else { self.room[axis] };
                (p[axis] - plane).abs()
            }
            SurfaceId::Object(i) => self.objects[i].shape.surface_distance(p),
        }
    }

    pub fn inside_room(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] > 0.0 && p[k] < self.room[k])
    }

    /// Nearest surface hit along `o + t·d` from a point inside the room.
    fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> (f64, SurfaceId, Vector3<f64>) {
        let mut best_t = f64::INFINITY;
        let mut best = (SurfaceId::Room(0), Vector3::zeros());
        for axis in 0..3 {
            if d[axis].abs() < 1e-15 {
                continue;
            }
            let (plane, face) = if d[axis] > 0.0 { (self.room[axis], 2 * axis + 1) } else { (0.0, 2 * axis) };
            let t = (plane - o[axis]) / d[axis];
            if t > HIT_EPS && t < best_t {
                best_t = t;
                let mut n = Vector3::zeros();
                n[axis] = -d[axis].signum();
                best = (SurfaceId::Room(face as u8), n);
            }
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some((t, n)) = obj.shape.intersect(o, d) {
                if t < best_t {
                    best_t = t;
                    best = (SurfaceId::Object(i), n);
                }
            }
        }
        (best_t, best.0, best.1)
    }
}

struct Spec {
    class_id: u8,
    kind: Kind,
    /// Offset of the footprint center from the room center, meters.
    at: [f64; 2],
}

enum Kind {
    /// Full extents `(x, y, z)` resting on the floor.
    Block([f64; 3]),
    /// Thin block hanging `drop` meters below the ceiling.
    Hanging([f64; 3], f64),
    Ball(f64),
    Column(f64, f64),
    Person,
}

fn template(id: usize) -> Vec<Spec> {
    use Kind::*;
    let s = |class_id, kind, at| Spec { class_id, kind, at };
    match id {
        // Procedure: patient table with staff on both sides, robot and lamp.
        0 => vec![
            s(TABLE, Block([1.9, 0.7, 0.9]), [0.0, 0.0]),
            s(HUMAN, Person, [-0.4, 0.75]),
            s(HUMAN, Person, [0.4, -0.75]),
            s(ROBOT, Column(0.28, 1.7), [-1.3, -0.9]),
            s(LIGHT, Hanging([0.7, 0.7, 0.12], 0.7), [0.0, 0.0]),
            s(CART, Block([0.7, 0.5, 1.0]), [1.4, 1.1]),
        ],
        // Preparation: table off-center, two carts, one person, a bin.
        1 => vec![
            s(TABLE, Block([1.9, 0.7, 0.9]), [0.5, -0.6]),
            s(CART, Block([0.7, 0.5, 1.0]), [-0.9, 0.8]),
            s(CART, Block([0.6, 0.5, 0.9]), [0.8, 1.2]),
            s(HUMAN, Person, [-0.2, 0.2]),
            s(MISC, Ball(0.3), [-1.4, -1.2]),
        ],
        // Idle: empty table, lamp, storage.
        2 => vec![
            s(TABLE, Block([1.9, 0.7, 0.9]), [0.0, 0.0]),
            s(LIGHT, Hanging([0.7, 0.7, 0.12], 0.7), [0.0, 0.0]),
            s(MISC, Block([0.5, 0.5, 0.6]), [1.5, -1.4]),
            s(MISC, Column(0.2, 1.0), [-1.5, 1.3]),
        ],
        // Docking: robot at the table, one person, a cart.
        3 => vec![
            s(ROBOT, Column(0.3, 1.8), [0.6, 0.2]),
            s(TABLE, Block([1.6, 0.7, 0.9]), [-0.6, 0.0]),
            s(HUMAN, Person, [0.9, -1.0]),
            s(CART, Block([0.7, 0.5, 1.0]), [-1.3, 1.2]),
            s(LIGHT, Hanging([0.6, 0.6, 0.12], 0.8), [-0.6, 0.0]),
        ],
        // Cleaning: two people, cart, bucket, two lamps, no table.
        _ => vec![
            s(HUMAN, Person, [-0.8, 0.3]),
            s(HUMAN, Person, [0.9, -0.5]),
            s(CART, Block([0.7, 0.5, 1.0]), [0.2, 1.2]),
            s(MISC, Column(0.25, 0.9), [1.4, 1.3]),
            s(LIGHT, Hanging([0.5, 0.5, 0.1], 0.7), [-0.8, 0.0]),
            s(LIGHT, Hanging([0.5, 0.5, 0.1], 0.7), [0.8, 0.0]),
        ],
    }
}

const POSITION_JITTER_M: f64 = 0.15;
const SIZE_JITTER: f64 = 0.1;
const YAW_JITTER: f64 = 0.3;

/// Deterministic scene for `(template_id, seed)`. The template fixes object
/// kinds and rough layout; the seed jitters room size, poses and sizes.
pub fn generate_scene(template_id: u32, seed: u64) -> Result<Scene> {
    if template_id as usize >= NUM_TEMPLATES {
        return Err(Error::invalid(format!("unknown template {template_id} (have {NUM_TEMPLATES})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = [rng.random_range(4.6..5.4), rng.random_range(4.6..5.4), rng.random_range(2.8..3.2)];
    let scale = |v: f64, rng: &mut ChaCha8Rng| v * rng.random_range(1.0 - SIZE_JITTER..1.0 + SIZE_JITTER);
    let mut objects = Vec::new();
    for spec in template(template_id as usize) {
        let cx = room[0] / 2.0 + spec.at[0] + rng.random_range(-POSITION_JITTER_M..POSITION_JITTER_M);
        let cy = room[1] / 2.0 + spec.at[1] + rng.random_range(-POSITION_JITTER_M..POSITION_JITTER_M);
        let class_id = spec.class_id;
        match spec.kind {
            Kind::Block(size) => {
                let half = size.map(|v| scale(v, &mut rng) / 2.0);
                let yaw = rng.random_range(-YAW_JITTER..YAW_JITTER);
                objects.push(Object {
                    shape: Shape::Box {
                        center: [cx, cy, half[2]],
                        half,
                        yaw,
                    },
                    class_id,
                });
            }
            Kind::Hanging(size, drop) => {
                let half = size.map(|v| scale(v, &mut rng) / 2.0);
                let yaw = rng.random_range(-YAW_JITTER..YAW_JITTER);
                objects.push(Object {
                    shape: Shape::Box {
                        center: [cx, cy, room[2] - drop],
                        half,
                        yaw,
                    },
                    class_id,
                });
            }
            Kind::Ball(r) => {
                let radius = scale(r, &mut rng);
                objects.push(Object {
                    shape: Shape::Sphere {
                        center: [cx, cy, radius],
                        radius,
                    },
                    class_id,
                });
            }
            Kind::Column(r, h) => {
                objects.push(Object {
                    shape: Shape::Cylinder {
                        base: [cx, cy, 0.0],
                        radius: scale(r, &mut rng),
                        height: scale(h, &mut rng),
                    },
                    class_id,
                });
            }
            Kind::Person => {
                let height = scale(1.45, &mut rng);
                let radius = scale(0.2, &mut rng);
                let head = scale(0.12, &mut rng);
                objects.push(Object {
                    shape: Shape::Cylinder {
                        base: [cx, cy, 0.0],
                        radius,
                        height,
                    },
                    class_id,
                });
                objects.push(Object {
                    shape: Shape::Sphere {
                        center: [cx, cy, height + head],
                        radius: head,
                    },
                    class_id,
                });
            }
        }
    }
    let scene = Scene {
        room,
        objects,
        template_id,
    };
    scene.validate()?;
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    /// World-to-camera rotation; rows are the camera x, y, z axes in world coordinates.
    pub rotation: [[f64; 3]; 3],
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    /// Camera at `position` with its optical axis through `target` and
    /// image rows aligned with the horizon.
    pub fn look_at(position: [f64; 3], target: [f64; 3], intrinsics: Intrinsics) -> Result<Self> {
        let fwd = v3(target) - v3(position);
        if fwd.norm() < 1e-9 {
            return Err(Error::invalid("camera target coincides with its position"));
        }
        let z = fwd.normalize();
        let right = z.cross(&Vector3::z());
        if right.norm() < 1e-9 {
            return Err(Error::invalid("camera looks straight up or down; horizon undefined"));
        }
        let x = right.normalize();
        let y = z.cross(&x);
        let pose = CameraPose {
            position,
            rotation: [[x.x, x.y, x.z], [y.x, y.y, y.z], [z.x, z.y, z.z]],
            intrinsics,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let r = self.rotation_matrix();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(err <= 1e-9) || !(r.determinant() > 0.0) {
            return Err(Error::invalid(format!("camera rotation is not orthonormal (error {err:e})")));
        }
        Ok(())
    }

    /// Camera-frame point to world coordinates.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let w = self.rotation_matrix().transpose() * v3(p) + v3(self.position);
        [w.x, w.y, w.z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub surface: SurfaceId,
    /// Outward unit normal in world coordinates.
    pub normal: [f64; 3],
}

/// One rendered view.
#[derive(Debug, Clone)]
pub struct RenderedView {
    /// Noisy z-depth, 0 where dropped out.
    pub depth: Array2<f64>,
    /// Noise-free z-depth of the nearest hit.
    pub clean: Array2<f64>,
    pub labels: Array2<u8>,
    /// Row-major, one per pixel.
    pub hits: Vec<Hit>,
    pub intrinsics: Intrinsics,
}

impl RenderedView {
    pub fn to_frame(&self, frame_id: impl Into<String>, view_id: u32, activity: Option<u32>) -> Result<DepthFrame> {
        let mut frame = DepthFrame::from_depth(self.depth.clone(), self.intrinsics, frame_id, view_id)?;
        frame.labels = Some(self.labels.clone());
        frame.activity = activity;
        Ok(frame)
    }
}

/// Ray-casts every pixel against the room and all primitives, keeping the
/// nearest hit, then adds Gaussian depth noise and drops a seeded fraction
/// of pixels.
pub fn render_depth(scene: &Scene, cam: &CameraPose, noise_std: f64, dropout_frac: f64, seed: u64) -> Result<RenderedView> {
    cam.validate()?;
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std {noise_std} must be >= 0")));
    }
    if !(0.0..1.0).contains(&dropout_frac) {
        return Err(Error::invalid(format!("dropout fraction {dropout_frac} outside [0, 1)")));
    }
    if !scene.inside_room(cam.position) {
        return Err(Error::invalid(format!("camera at {:?} is outside the room", cam.position)));
    }
    if let Some(i) = scene.objects.iter().position(|o| o.shape.contains(cam.position)) {
        return Err(Error::invalid(format!("camera at {:?} is inside object {i}", cam.position)));
    }
    let intr = cam.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let rt = cam.rotation_matrix().transpose();
    let origin = v3(cam.position);
    let mut clean = Array2::zeros((h, w));
    let mut labels = Array2::zeros((h, w));
    let mut hits = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            // Camera-frame direction with unit z, so the ray parameter is z-depth.
            let dc = Vector3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
            let d = rt * dc;
            let (t, surface, n) = scene.trace(&origin, &d);
            clean[[v, u]] = t;
            labels[[v, u]] = scene.class_of(surface);
            hits.push(Hit {
                surface,
                normal: [n.x, n.y, n.z],
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depth = clean.clone();
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        for z in depth.iter_mut() {
            *z += normal.sample(&mut rng);
            if *z <= 0.0 {
                *z = 0.0;
            }
        }
    }
    let n_drop = (dropout_frac * (w * h) as f64).round() as usize;
    for i in index::sample(&mut rng, w * h, n_drop) {
        depth[[i / w, i % w]] = 0.0;
    }
    Ok(RenderedView {
        depth,
        clean,
        labels,
        hits,
        intrinsics: intr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_templates: usize,
    /// Total scenes; scene `i` uses template `i mod n_templates`.
    pub n_scenes: usize,
    pub views_per_scene: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub hfov_deg: f64,
    pub noise_std: f64,
    pub dropout_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_templates: NUM_TEMPLATES,
            n_scenes: 10,
            views_per_scene: 2,
            width: 160,
            height: 160,
            hfov_deg: 65.0,
            noise_std: 0.01,
            dropout_frac: 0.02,
            val_frac: 0.15,
            test_frac: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_templates == 0 || self.n_templates > NUM_TEMPLATES {
            return Err(Error::invalid(format!("n_templates must be in 1..={NUM_TEMPLATES}")));
        }
        if self.n_scenes < 3 {
            return Err(Error::invalid("need at least 3 scenes to fill train, val and test"));
        }
        if self.views_per_scene == 0 || self.width < 8 || self.height < 8 {
            return Err(Error::invalid("views_per_scene >= 1 and images of at least 8×8 required"));
        }
        if !(self.hfov_deg > 1.0 && self.hfov_deg < 170.0) {
            return Err(Error::invalid(format!("hfov_deg {} outside (1, 170)", self.hfov_deg)));
        }
        if !(self.val_frac >= 0.0 && self.test_frac >= 0.0 && self.val_frac + self.test_frac < 1.0) {
            return Err(Error::invalid("val_frac and test_frac must be >= 0 and sum below 1"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let focal = (self.width as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan();
        Intrinsics::centered(self.width, self.height, focal)
    }
}

const CAMERA_WALL_OFFSET_M: f64 = 0.3;
const CAMERA_CEILING_OFFSET_M: f64 = 0.2;
const CAMERA_JITTER_M: f64 = 0.1;

/// Ceiling-mounted camera `view` for a scene: views 0–3 sit in the corners
/// (0 and 1 opposite), further views on the wall midpoints, all aimed at the
/// room center near table height.
pub fn camera_for_view(scene: &Scene, view: usize, intrinsics: Intrinsics, seed: u64) -> Result<CameraPose> {
    const SLOTS: [[f64; 2]; 8] = [
        [1.0, 1.0],
        [-1.0, -1.0],
        [1.0, -1.0],
        [-1.0, 1.0],
        [1.0, 0.0],
        [-1.0, 0.0],
        [0.0, 1.0],
        [0.0, -1.0],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slot = SLOTS[view % SLOTS.len()];
    let [lx, ly, lz] = scene.room;
    let mut j = || rng.random_range(-CAMERA_JITTER_M..CAMERA_JITTER_M);
    let position = [
        lx / 2.0 + slot[0] * (lx / 2.0 - CAMERA_WALL_OFFSET_M) + j(),
        ly / 2.0 + slot[1] * (ly / 2.0 - CAMERA_WALL_OFFSET_M) + j(),
        lz - CAMERA_CEILING_OFFSET_M + j().min(0.0),
    ];
    let target = [lx / 2.0 + 2.0 * j(), ly / 2.0 + 2.0 * j(), 0.6 + j()];
    CameraPose::look_at(position, target, intrinsics)
}

/// Scene and cameras behind a generated dataset, written as `scenes.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: usize,
    pub split: SplitTag,
    pub scene: Scene,
    pub cameras: Vec<CameraPose>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub root: PathBuf,
    pub all: DatasetManifest,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    pub scenes: Vec<SceneRecord>,
}

pub fn frame_id(scene: usize, view: usize) -> String {
    format!("s{scene:04}_v{view}")
}

/// Scene-level split: scenes are shuffled within each template, interleaved
/// round-robin across templates, and the head goes to test, then val.
fn split_scenes(cfg: &SynthConfig, seed: u64) -> Vec<SplitTag> {
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(seed, "scene-split"));
    let mut per_template: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_templates];
    for s in 0..cfg.n_scenes {
        per_template[s % cfg.n_templates].push(s);
    }
    for list in &mut per_template {
        list.shuffle(&mut rng);
    }
    let mut order: Vec<usize> = Vec::with_capacity(cfg.n_scenes);
    for k in 0.. {
        let before = order.len();
        order.extend(per_template.iter().filter_map(|l| l.get(k)));
        if order.len() == before {
            break;
        }
    }
    let n = cfg.n_scenes;
    let n_test = ((cfg.test_frac * n as f64).round() as usize).max(1);
    let n_val = ((cfg.val_frac * n as f64).round() as usize).max(1).min(n - n_test - 1);
    let mut tags = vec![SplitTag::Train; n];
    for (rank, &s) in order.iter().enumerate() {
        if rank < n_test {
            tags[s] = SplitTag::Test;
        } else if rank < n_test + n_val {
            tags[s] = SplitTag::Val;
        }
    }
    tags
}

/// Renders `n_scenes × views_per_scene` frames into `out_dir`:
/// `depth/`, `labels/`, `intrinsics/`, `manifest.csv`, `train.csv`,
/// `val.csv`, `test.csv` and `scenes.json`. Splits are by scene.
pub fn build_dataset(cfg: &SynthConfig, out_dir: &Path, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    for sub in ["depth", "labels", "intrinsics"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let intr = cfg.intrinsics();
    for v in 0..cfg.views_per_scene {
        intr.save(&depthio::intrinsics_path(out_dir, v as u32))?;
    }
    let tags = split_scenes(cfg, seed);
    let scenes: Vec<SceneRecord> = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|s| {
            let template = (s % cfg.n_templates) as u32;
            let scene = generate_scene(template, frame_seed(seed, &format!("scene/{s}")))?;
            let cameras = (0..cfg.views_per_scene)
                .map(|v| camera_for_view(&scene, v, intr, frame_seed(seed, &format!("camera/{s}/{v}"))))
                .collect::<Result<_>>()?;
            Ok(SceneRecord {
                scene_id: s,
                split: tags[s],
                scene,
                cameras,
            })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..cfg.n_scenes)
        .flat_map(|s| (0..cfg.views_per_scene).map(move |v| (s, v)))
        .collect();
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|&(s, v)| {
            let rec = &scenes[s];
            let id = frame_id(s, v);
            let view = render_depth(
                &rec.scene,
                &rec.cameras[v],
                cfg.noise_std,
                cfg.dropout_frac,
                frame_seed(seed, &format!("render/{id}")),
            )?;
            let activity = rec.scene.template_id;
            let frame = view.to_frame(id.clone(), v as u32, Some(activity))?;
            let depth_path = out_dir.join("depth").join(format!("{id}.png"));
            let label_path = out_dir.join("labels").join(format!("{id}.png"));
            depthio::write_depth_png(&frame, &depth_path, DEFAULT_UNIT_SCALE)?;
            depthio::write_label_png(&view.labels, &label_path)?;
            Ok(ManifestEntry {
                frame_id: id,
                depth_path,
                view_id: v as u32,
                label_path: Some(label_path),
                activity: Some(activity),
            })
        })
        .collect::<Result<_>>()?;

    let manifest = |tag: Option<SplitTag>| DatasetManifest {
        entries: entries
            .iter()
            .zip(&jobs)
            .filter(|(_, (s, _))| tag.is_none_or(|t| scenes[*s].split == t))
            .map(|(e, _)| e.clone())
            .collect(),
        split_tag: tag,
        root: out_dir.to_path_buf(),
    };
    let all = manifest(None);
    let train = manifest(Some(SplitTag::Train));
    let val = manifest(Some(SplitTag::Val));
    let test = manifest(Some(SplitTag::Test));
    all.write(&out_dir.join("manifest.csv"))?;
    train.write(&out_dir.join("train.csv"))?;
    val.write(&out_dir.join("val.csv"))?;
    test.write(&out_dir.join("test.csv"))?;
    let scenes_path = out_dir.join("scenes.json");
    fs::write(&scenes_path, serde_json::to_vec_pretty(&scenes)?).map_err(|e| Error::io(&scenes_path, e))?;
    Ok(SynthDataset {
        root: out_dir.to_path_buf(),
        all,
        train,
        val,
        test,
        scenes,
    })
}

pub fn load_scene_records(path: &Path) -> Result<Vec<SceneRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
