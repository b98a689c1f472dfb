//! Deterministic eye-in-hand world.
//!
//! A pinhole camera rides on a small Cartesian rig above (or in front of) a
//! scene of primitive objects. Each object can be rendered as a synthetic
//! saliency map standing in for a segmentation network's output, so the
//! whole perception-to-control pipeline runs without any learned model.
//!
//! Conventions: world `z` is up; the camera frame has `x` right, `y` down
//! and `z` along the optical axis. With zero mount rotation the camera looks
//! straight down with image `x` along world `x`.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerConfig, ServoSession, SessionFault};
use crate::geometry::{ConstraintKind, HomoPoint};
use crate::saliency::{default_static_point, InteractionMode, PairingPolicy, SaliencyMap};

/// Points closer than this along the optical axis are not projected.
pub const Z_MIN: f64 = 0.01;
/// Width of the Gaussian falloff outside a rendered silhouette (pixels).
pub const EDGE_SIGMA: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("point at depth {depth:.4} m is behind the camera")]
    BehindCamera { depth: f64 },
    #[error("object `{0}` is not visible")]
    NotVisible(String),
    #[error("no object answers to prompt `{0}`")]
    UnknownPrompt(String),
    #[error("configuration has {got} values, rig has {expected} DOF")]
    DofMismatch { expected: usize, got: usize },
    #[error("nothing is attached to the gripper")]
    NothingAttached,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("image size must be positive".into());
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err("principal point must lie inside the image".into());
        }
        Ok(())
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project_camera_point(&self, p: Vector3<f64>) -> Result<HomoPoint, SimError> {
        if p.z <= Z_MIN {
            return Err(SimError::BehindCamera { depth: p.z });
        }
        Ok(HomoPoint::pixel(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Camera-frame direction (unit `z`) of the ray through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, p: HomoPoint) -> bool {
        p.x >= -0.5 && p.y >= -0.5 && p.x < self.width as f64 - 0.5 && p.y < self.height as f64 - 0.5
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Yaw-pitch-roll composition `Rz(yaw)·Ry(pitch)·Rx(roll)`.
pub fn ypr(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    rot_z(yaw) * rot_y(pitch) * rot_x(roll)
}

/// Rigid transform; `rotation` maps local axes into the parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn to_parent(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_local(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn compose(&self, child: &Pose) -> Pose {
        Pose { rotation: self.rotation * child.rotation, translation: self.to_parent(child.translation) }
    }

    pub fn relative(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.transpose() * other.rotation,
            translation: self.to_local(other.translation),
        }
    }
}

/// Projects a world point through a camera at `camera_pose`.
pub fn project(camera: &CameraModel, camera_pose: &Pose, world_point: [f64; 3]) -> Result<HomoPoint, SimError> {
    camera.project_camera_point(camera_pose.to_local(Vector3::from(world_point)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DofType {
    Translation,
    Rotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DofSpec {
    pub axis: Axis,
    #[serde(rename = "type")]
    pub kind: DofType,
    pub min: f64,
    pub max: f64,
}

/// Cartesian carrier for the camera.
///
/// Translations move along the mount axes; rotations are about the mount
/// axes, composed yaw (`z`), pitch (`y`), roll (`x`) in that fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rig {
    pub dofs: Vec<DofSpec>,
    /// Camera center at `q = 0` (world, meters).
    pub mount_position: [f64; 3],
    /// Mount rotation `[roll, pitch, yaw]` in degrees relative to the straight-down view.
    #[serde(default)]
    pub mount_rpy_deg: [f64; 3],
}

impl Rig {
    /// x, y, z translation plus rotation about the optical axis.
    pub fn four_dof(mount_position: [f64; 3]) -> Self {
        let t = |axis| DofSpec { axis, kind: DofType::Translation, min: -0.3, max: 0.3 };
        Self {
            dofs: vec![
                t(Axis::X),
                t(Axis::Y),
                t(Axis::Z),
                DofSpec { axis: Axis::Z, kind: DofType::Rotation, min: -1.5, max: 1.5 },
            ],
            mount_position,
            mount_rpy_deg: [0.0; 3],
        }
    }

    /// Translations and all three rotations.
    pub fn six_dof(mount_position: [f64; 3]) -> Self {
        let mut rig = Self::four_dof(mount_position);
        rig.dofs.push(DofSpec { axis: Axis::Y, kind: DofType::Rotation, min: -0.6, max: 0.6 });
        rig.dofs.push(DofSpec { axis: Axis::X, kind: DofType::Rotation, min: -0.6, max: 0.6 });
        rig
    }

    pub fn dof(&self) -> usize {
        self.dofs.len()
    }

    pub fn mount_rotation(&self) -> Matrix3<f64> {
        let [r, p, y] = self.mount_rpy_deg.map(f64::to_radians);
        Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)) * ypr(y, p, r)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dofs.is_empty() {
            return Err("rig needs at least one DOF".into());
        }
        for (i, d) in self.dofs.iter().enumerate() {
            if !(d.min < d.max) {
                return Err(format!("dofs[{i}]: min must be below max"));
            }
        }
        Ok(())
    }

    /// Camera pose for configuration `q`.
    pub fn pose(&self, q: &[f64]) -> Pose {
        let mut t = Vector3::zeros();
        let mut angles = [0.0; 3];
        for (d, v) in self.dofs.iter().zip(q) {
            match d.kind {
                DofType::Translation => t[d.axis.index()] += v,
                DofType::Rotation => angles[d.axis.index()] += v,
            }
        }
        let mount = self.mount_rotation();
        Pose {
            rotation: mount * ypr(angles[2], angles[1], angles[0]),
            translation: Vector3::from(self.mount_position) + mount * t,
        }
    }

    /// Clamps into the limits, reporting whether anything moved.
    pub fn clamp(&self, q: &[f64]) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let out = self
            .dofs
            .iter()
            .zip(q)
            .map(|(d, &v)| {
                let c = v.clamp(d.min, d.max);
                clamped |= c != v;
                c
            })
            .collect();
        (out, clamped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// `extent` holds the three semi-axes.
    Ellipsoid,
    /// `extent` holds the full edge lengths.
    Box,
    /// Thin marker bar: `extent = [length, width, thickness]`.
    Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub id: String,
    pub shape: Shape,
    pub position: [f64; 3],
    /// `[roll, pitch, yaw]` in degrees.
    #[serde(default)]
    pub rpy_deg: [f64; 3],
    pub extent: [f64; 3],
    pub tags: Vec<String>,
}

impl SceneObject {
    pub fn world_pose(&self) -> Pose {
        let [r, p, y] = self.rpy_deg.map(f64::to_radians);
        Pose { rotation: ypr(y, p, r), translation: Vector3::from(self.position) }
    }

    pub fn answers_to(&self, prompt: &str) -> bool {
        self.tags.iter().any(|t| t.eq_ignore_ascii_case(prompt))
    }

    /// Whether a world point lies over this object's footprint (ignoring height).
    pub fn footprint_contains(&self, pose: &Pose, world: Vector3<f64>) -> bool {
        let mut local = pose.to_local(world);
        local.z = 0.0;
        match self.shape {
            Shape::Ellipsoid => (local.x / self.extent[0]).powi(2) + (local.y / self.extent[1]).powi(2) <= 1.0,
            Shape::Box | Shape::Segment => {
                local.x.abs() <= self.extent[0] / 2.0 && local.y.abs() <= self.extent[1] / 2.0
            }
        }
    }
}

fn gaussian_edge(distance: f64) -> f64 {
    if distance <= 0.0 {
        1.0
    } else if distance >= 4.0 * EDGE_SIGMA {
        0.0
    } else {
        (-distance * distance / (2.0 * EDGE_SIGMA * EDGE_SIGMA)).exp()
    }
}

/// Rasterizes `distance(u, v)` (≤ 0 inside) over a pixel box, clipped to the image.
fn rasterize(
    camera: &CameraModel,
    bounds: (f64, f64, f64, f64),
    distance: impl Fn(f64, f64) -> f64,
) -> Option<SaliencyMap> {
    let margin = 4.0 * EDGE_SIGMA + 1.0;
    let (x0, y0, x1, y1) = bounds;
    let (w, h) = (camera.width as f64, camera.height as f64);
    let x_lo = (x0 - margin).floor().max(0.0);
    let y_lo = (y0 - margin).floor().max(0.0);
    let x_hi = (x1 + margin).ceil().min(w - 1.0);
    let y_hi = (y1 + margin).ceil().min(h - 1.0);
    if !(x_lo <= x_hi && y_lo <= y_hi) {
        return None;
    }
    let mut map = SaliencyMap::zeros(camera.width, camera.height);
    let mut any = false;
    for y in y_lo as usize..=y_hi as usize {
        for x in x_lo as usize..=x_hi as usize {
            let v = gaussian_edge(distance(x as f64, y as f64));
            if v > 0.0 {
                map.set(x, y, v);
                any = true;
            }
        }
    }
    any.then_some(map)
}

fn render_ellipsoid(camera: &CameraModel, center: Vector3<f64>, shape: &Matrix3<f64>) -> Option<SaliencyMap> {
    if center.z <= Z_MIN {
        return None;
    }
    let z = center.z;
    // Linearized projection at the center maps the ellipsoid onto an image ellipse.
    let jac = nalgebra::Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * center.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * center.y / (z * z),
    );
    let cov: Matrix2<f64> = jac * shape * jac.transpose();
    let inv = cov.try_inverse()?;
    let c = camera.project_camera_point(center).ok()?;
    let (hx, hy) = (cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt());
    rasterize(camera, (c.x - hx, c.y - hy, c.x + hx, c.y + hy), |u, v| {
        let d = Vector2::new(u - c.x, v - c.y);
        let r2 = (d.transpose() * inv * d)[(0, 0)];
        if r2 <= 1.0 {
            return 0.0;
        }
        let r = r2.sqrt();
        let grad = (inv * d).norm() / r;
        (r - 1.0) / grad
    })
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite projections"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn render_polygon(camera: &CameraModel, corners: &[Vector3<f64>]) -> Option<SaliencyMap> {
    let projected: Vec<(f64, f64)> = corners
        .iter()
        .filter_map(|c| camera.project_camera_point(*c).ok())
        .map(|p| (p.x, p.y))
        .collect();
    let hull = convex_hull(projected);
    if hull.len() < 3 {
        return None;
    }
    // Counter-clockwise hull (in image coordinates); outward normals per edge.
    let edges: Vec<(f64, f64, f64)> = hull
        .iter()
        .zip(hull.iter().cycle().skip(1))
        .map(|(a, b)| {
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len = dx.hypot(dy);
            let (nx, ny) = (dy / len, -dx / len);
            (nx, ny, -(nx * a.0 + ny * a.1))
        })
        .collect();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &hull {
        x0 = x0.min(p.0);
        y0 = y0.min(p.1);
        x1 = x1.max(p.0);
        y1 = y1.max(p.1);
    }
    rasterize(camera, (x0, y0, x1, y1), |u, v| {
        edges.iter().map(|(nx, ny, c)| nx * u + ny * v + c).fold(f64::MIN, f64::max)
    })
}

/// Renders one object seen from `camera_pose` given the object's world pose.
pub fn render_object(
    camera: &CameraModel,
    camera_pose: &Pose,
    object: &SceneObject,
    object_pose: &Pose,
) -> Result<SaliencyMap, SimError> {
    let rel = camera_pose.relative(object_pose);
    let map = match object.shape {
        Shape::Ellipsoid => {
            let axes = Matrix3::from_diagonal(&Vector3::from(object.extent.map(|a| a * a)));
            let shape = rel.rotation * axes * rel.rotation.transpose();
            render_ellipsoid(camera, rel.translation, &shape)
        }
        Shape::Box | Shape::Segment => {
            let half = Vector3::from(object.extent) / 2.0;
            let corners: Vec<Vector3<f64>> = (0..8)
                .map(|i| {
                    let s = Vector3::new(
                        if i & 1 == 0 { -1.0 } else { 1.0 },
                        if i & 2 == 0 { -1.0 } else { 1.0 },
                        if i & 4 == 0 { -1.0 } else { 1.0 },
                    );
                    rel.to_parent(half.component_mul(&s))
                })
                .collect();
            render_polygon(camera, &corners)
        }
    };
    map.ok_or_else(|| SimError::NotVisible(object.id.clone()))
}

/// Renders an object at its own world pose.
pub fn render_mask(camera: &CameraModel, camera_pose: &Pose, object: &SceneObject) -> Result<SaliencyMap, SimError> {
    render_object(camera, camera_pose, object, &object.world_pose())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskContext {
    ReachAndGrasp,
    PickAndPlace,
    PullOpen,
    GraspAndPour,
}

/// World-frame success check for a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageGoal {
    /// The object center lies within `tolerance` of the gripper approach ray
    /// (the camera ray through the static gripper point). With `attach`, the
    /// object then moves rigidly with the gripper, raised by `lift` meters.
    Reach {
        object: String,
        #[serde(default = "default_reach_tolerance")]
        tolerance: f64,
        #[serde(default)]
        attach: bool,
        #[serde(default)]
        lift: f64,
    },
    /// The carried object's center is over the target's footprint, or within
    /// `tolerance` of its center horizontally when a tolerance is given.
    Over {
        target: String,
        #[serde(default)]
        tolerance: Option<f64>,
    },
}

fn default_reach_tolerance() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub mode: InteractionMode,
    pub prompts: Vec<String>,
    pub constraints: Vec<ConstraintKind>,
    pub goal: StageGoal,
}

impl Stage {
    pub fn policy(&self, camera: &CameraModel) -> PairingPolicy {
        PairingPolicy::new(self.mode, self.prompts.clone(), camera.width, camera.height)
            .expect("validated prompt count")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub context: TaskContext,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    #[serde(default)]
    pub camera: CameraModel,
    pub rig: Rig,
    pub initial_q: Vec<f64>,
    /// Half-width of the uniform perturbation applied to `initial_q` per attempt.
    #[serde(default)]
    pub initial_spread: Vec<f64>,
    #[serde(default)]
    pub controller: Option<ControllerConfig>,
    pub objects: Vec<SceneObject>,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Error)]
#[error("scenario schema error at `{path}`: {message}")]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl SchemaError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

/// Parses and validates a TOML scenario document.
pub fn load_scenario(document: &str) -> Result<Scenario, SchemaError> {
    let de = toml::Deserializer::parse(document).map_err(|e| SchemaError::at(".", e.to_string()))?;
    let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        SchemaError::at(path, e.into_inner().message().to_string())
    })?;
    scenario.validate()?;
    Ok(scenario)
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SchemaError> {
        self.camera.validate().map_err(|m| SchemaError::at("camera", m))?;
        self.rig.validate().map_err(|m| SchemaError::at("rig", m))?;
        let n = self.rig.dof();
        if self.initial_q.len() != n {
            return Err(SchemaError::at("initial_q", format!("expected {n} values")));
        }
        if !self.initial_spread.is_empty() && self.initial_spread.len() != n {
            return Err(SchemaError::at("initial_spread", format!("expected {n} values or none")));
        }
        let mut ids = std::collections::BTreeSet::new();
        for (i, o) in self.objects.iter().enumerate() {
            if !ids.insert(o.id.as_str()) {
                return Err(SchemaError::at(format!("objects[{i}].id"), format!("duplicate id `{}`", o.id)));
            }
            if o.extent.iter().any(|e| !(*e > 0.0)) {
                return Err(SchemaError::at(format!("objects[{i}].extent"), "extents must be positive"));
            }
        }
        if self.stages.is_empty() {
            return Err(SchemaError::at("stages", "at least one stage is required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let path = format!("stages[{i}]");
            if s.prompts.len() != s.mode.mask_count() {
                return Err(SchemaError::at(
                    format!("{path}.prompts"),
                    format!("{:?} needs {} prompt(s)", s.mode, s.mode.mask_count()),
                ));
            }
            if s.constraints.is_empty() {
                return Err(SchemaError::at(format!("{path}.constraints"), "no constraints"));
            }
            for (k, p) in s.prompts.iter().enumerate() {
                if !self.objects.iter().any(|o| o.answers_to(p)) {
                    return Err(SchemaError::at(format!("{path}.prompts[{k}]"), format!("no object tagged `{p}`")));
                }
            }
            let referenced = match &s.goal {
                StageGoal::Reach { object, .. } => object,
                StageGoal::Over { target, .. } => target,
            };
            if !ids.contains(referenced.as_str()) {
                return Err(SchemaError::at(format!("{path}.goal"), format!("unknown object `{referenced}`")));
            }
        }
        Ok(())
    }

    /// Starting configuration for an attempt, drawn from the seeded spread.
    pub fn initial_configuration(&self, attempt: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(attempt as u64)));
        let q: Vec<f64> = self
            .initial_q
            .iter()
            .enumerate()
            .map(|(i, &q0)| {
                let spread = self.initial_spread.get(i).copied().unwrap_or(0.0);
                let u: f64 = rng.random();
                q0 + spread * (2.0 * u - 1.0)
            })
            .collect();
        self.rig.clamp(&q).0
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn controller_config(&self) -> ControllerConfig {
        self.controller.unwrap_or_default()
    }
}

const LIBRARY: [(&str, &str); 8] = [
    ("reach_can_frontal", include_str!("../scenarios/reach_can_frontal.toml")),
    ("reach_can_topdown", include_str!("../scenarios/reach_can_topdown.toml")),
    ("place_block_in_bowl", include_str!("../scenarios/place_block_in_bowl.toml")),
    ("place_teabag_in_mug", include_str!("../scenarios/place_teabag_in_mug.toml")),
    ("pull_drawer_handle", include_str!("../scenarios/pull_drawer_handle.toml")),
    ("pull_closet_handle", include_str!("../scenarios/pull_closet_handle.toml")),
    ("pour_cup_over_plate", include_str!("../scenarios/pour_cup_over_plate.toml")),
    ("pour_bottle_into_glass", include_str!("../scenarios/pour_bottle_into_glass.toml")),
];

/// Names of the bundled scenarios.
pub fn library_names() -> Vec<&'static str> {
    LIBRARY.iter().map(|(n, _)| *n).collect()
}

/// Source text of a bundled scenario.
pub fn library_document(name: &str) -> Option<&'static str> {
    LIBRARY.iter().find(|(n, _)| *n == name).map(|(_, d)| *d)
}

pub fn library_scenario(name: &str) -> Option<Scenario> {
    library_document(name).map(|d| load_scenario(d).expect("bundled scenarios are valid"))
}

/// Everything observable after a step.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub step: usize,
    pub q: Vec<f64>,
    pub clamped: bool,
    /// Rendered masks of the active prompts that are visible.
    pub masks: BTreeMap<String, SaliencyMap>,
    /// Projected object centers, for debugging only.
    pub projected_centers: BTreeMap<String, HomoPoint>,
}

#[derive(Debug, Clone)]
struct Attachment {
    index: usize,
    relative: Pose,
}

/// A live simulated scene. Single writer: one caller advances it.
#[derive(Debug, Clone)]
pub struct SimSession {
    pub camera: CameraModel,
    pub rig: Rig,
    objects: Vec<SceneObject>,
    q: Vec<f64>,
    step: usize,
    attached: Option<Attachment>,
    active_prompts: Vec<String>,
    anchors: Vec<Vector3<f64>>,
}

impl SimSession {
    pub fn new(camera: CameraModel, rig: Rig, objects: Vec<SceneObject>, q0: Vec<f64>) -> Result<Self, SimError> {
        if q0.len() != rig.dof() {
            return Err(SimError::DofMismatch { expected: rig.dof(), got: q0.len() });
        }
        let q = rig.clamp(&q0).0;
        Ok(Self { camera, rig, objects, q, step: 0, attached: None, active_prompts: Vec::new(), anchors: Vec::new() })
    }

    /// Session for one attempt of a scenario.
    pub fn for_scenario(scenario: &Scenario, attempt: usize) -> Self {
        Self::new(
            scenario.camera,
            scenario.rig.clone(),
            scenario.objects.clone(),
            scenario.initial_configuration(attempt),
        )
        .expect("validated scenario")
    }

    pub fn configuration(&self) -> &[f64] {
        &self.q
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn camera_pose(&self) -> Pose {
        self.rig.pose(&self.q)
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn set_active_prompts(&mut self, prompts: Vec<String>) {
        self.active_prompts = prompts;
    }

    pub fn active_prompts(&self) -> &[String] {
        &self.active_prompts
    }

    fn object_index(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    fn prompt_index(&self, prompt: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.answers_to(prompt))
    }

    pub fn object_pose(&self, index: usize) -> Pose {
        match &self.attached {
            Some(a) if a.index == index => self.camera_pose().compose(&a.relative),
            _ => self.objects[index].world_pose(),
        }
    }

    pub fn attached_object(&self) -> Option<&SceneObject> {
        self.attached.as_ref().map(|a| &self.objects[a.index])
    }

    /// Grasps an object: from now on it keeps its pose relative to the camera.
    pub fn attach(&mut self, id: &str, lift: f64) -> Result<(), SimError> {
        let index = self.object_index(id).ok_or_else(|| SimError::UnknownPrompt(id.to_owned()))?;
        let mut pose = self.object_pose(index);
        pose.translation.z += lift;
        self.attached = Some(Attachment { index, relative: self.camera_pose().relative(&pose) });
        Ok(())
    }

    pub fn render_prompt(&self, prompt: &str) -> Result<SaliencyMap, SimError> {
        let index = self.prompt_index(prompt).ok_or_else(|| SimError::UnknownPrompt(prompt.to_owned()))?;
        render_object(&self.camera, &self.camera_pose(), &self.objects[index], &self.object_pose(index))
    }

    /// Pointwise maximum of every object's mask, for display.
    pub fn render_scene(&self) -> SaliencyMap {
        let pose = self.camera_pose();
        let mut out = SaliencyMap::zeros(self.camera.width, self.camera.height);
        for i in 0..self.objects.len() {
            if let Ok(m) = render_object(&self.camera, &pose, &self.objects[i], &self.object_pose(i)) {
                out.max_with(&m);
            }
        }
        out
    }

    pub fn frame(&self, clamped: bool) -> Frame {
        let pose = self.camera_pose();
        let mut masks = BTreeMap::new();
        let mut centers = BTreeMap::new();
        for p in &self.active_prompts {
            if let Ok(m) = self.render_prompt(p) {
                masks.insert(p.clone(), m);
            }
            if let Some(i) = self.prompt_index(p) {
                if let Ok(c) = self.camera.project_camera_point(pose.to_local(self.object_pose(i).translation)) {
                    centers.insert(p.clone(), c);
                }
            }
        }
        Frame { step: self.step, q: self.q.clone(), clamped, masks, projected_centers: centers }
    }

    /// Applies a relative motion (clamped at the limits) and returns the new frame.
    pub fn step(&mut self, dq: &[f64]) -> Frame {
        let target: Vec<f64> = self.q.iter().zip(dq).map(|(a, b)| a + b).collect();
        let (q, clamped) = self.rig.clamp(&target);
        self.q = q;
        self.step += 1;
        self.frame(clamped)
    }

    /// Camera ray through the static gripper point, in world coordinates.
    pub fn approach_ray(&self) -> (Vector3<f64>, Vector3<f64>) {
        let f1 = default_static_point(self.camera.width, self.camera.height);
        let pose = self.camera_pose();
        let dir = (pose.rotation * self.camera.ray(f1.x, f1.y)).normalize();
        (pose.translation, dir)
    }

    pub fn evaluate_stage_success(&self, stage: &Stage) -> bool {
        match &stage.goal {
            StageGoal::Reach { object, tolerance, .. } => {
                let Some(i) = self.object_index(object) else { return false };
                let target = self.object_pose(i).translation;
                let (origin, dir) = self.approach_ray();
                let along = (target - origin).dot(&dir);
                along > 0.0 && (target - origin - dir * along).norm() <= *tolerance
            }
            StageGoal::Over { target, tolerance } => {
                let (Some(a), Some(t)) = (&self.attached, self.object_index(target)) else { return false };
                let carried = self.object_pose(a.index).translation;
                let target_pose = self.object_pose(t);
                match tolerance {
                    Some(tol) => (carried.xy() - target_pose.translation.xy()).norm() <= *tol,
                    None => self.objects[t].footprint_contains(&target_pose, carried),
                }
            }
        }
    }

    /// Registers a tracked world point under the clicked pixel.
    ///
    /// The depth comes from the nearest object whose mask covers the pixel,
    /// falling back to the nearest object in front of the camera.
    pub fn anchor_click(&mut self, u: f64, v: f64) -> usize {
        let pose = self.camera_pose();
        let (ui, vi) = (u.round().max(0.0) as usize, v.round().max(0.0) as usize);
        let mut best: Option<f64> = None;
        let mut fallback: Option<f64> = None;
        for i in 0..self.objects.len() {
            let op = self.object_pose(i);
            let depth = pose.to_local(op.translation).z;
            if depth <= Z_MIN {
                continue;
            }
            fallback = Some(fallback.map_or(depth, |d: f64| d.min(depth)));
            if ui < self.camera.width && vi < self.camera.height {
                if let Ok(m) = render_object(&self.camera, &pose, &self.objects[i], &op) {
                    if m.get(ui, vi) >= 0.5 {
                        best = Some(best.map_or(depth, |d: f64| d.min(depth)));
                    }
                }
            }
        }
        let depth = best.or(fallback).unwrap_or(0.5);
        self.anchors.push(pose.to_parent(self.camera.ray(u, v) * depth));
        self.anchors.len() - 1
    }

    pub fn anchor_position(&self, anchor: usize) -> Option<HomoPoint> {
        let p = self.camera_pose().to_local(*self.anchors.get(anchor)?);
        self.camera.project_camera_point(p).ok().filter(|h| self.camera.contains(*h))
    }
}

impl ServoSession for SimSession {
    fn dof(&self) -> usize {
        self.rig.dof()
    }

    fn q(&self) -> Vec<f64> {
        self.q.clone()
    }

    fn move_to(&mut self, q: &[f64]) -> Result<bool, SessionFault> {
        if q.len() != self.rig.dof() {
            return Err(Box::new(SimError::DofMismatch { expected: self.rig.dof(), got: q.len() }));
        }
        let (q, clamped) = self.rig.clamp(q);
        self.q = q;
        Ok(clamped)
    }

    fn mask(&mut self, prompt: &str) -> Result<Option<SaliencyMap>, SessionFault> {
        match self.render_prompt(prompt) {
            Ok(m) => Ok(Some(m)),
            Err(SimError::NotVisible(_)) => Ok(None),
            Err(e) => Err(Box::new(e)),
        }
    }

    fn tracked_point(&mut self, anchor: usize) -> Result<Option<HomoPoint>, SessionFault> {
        Ok(self.anchor_position(anchor))
    }
}
