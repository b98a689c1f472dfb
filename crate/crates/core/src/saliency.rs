//! Saliency maps and the features extracted from them.
//!
//! A map is reduced to a probability-weighted centroid and principal axis,
//! which become the target point and target line of an alignment
//! constraint. The other half of each constraint comes from the pairing
//! policy: heuristic static features fixed in the eye-in-hand image for
//! object-gripper interaction, or the carried object's own features for
//! object-object interaction.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{line_from_points, Constraint, ConstraintKind, GeometryError, HomoLine, HomoPoint};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("mask mass {mass:.3} is at or below the floor {floor}")]
    EmptyMask { mass: f64, floor: f64 },
    #[error("pairing policy expects {expected} mask(s), got {got}")]
    PolicyMismatch { expected: usize, got: usize },
    #[error("invalid saliency map: {0}")]
    InvalidMap(String),
    #[error("unsupported mask format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed mask file: {0}")]
    MalformedFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, SaliencyError>;

/// Row-major `width × height` grid of probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(SaliencyError::InvalidMap(format!("dimensions {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(SaliencyError::InvalidMap(format!(
                "expected {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SaliencyError::InvalidMap(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "saliency map must be non-empty");
        Self { width, height, values: vec![0.0; width * height] }
    }

    /// Builds a map by evaluating `f(x, y)` at every pixel; results are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut map = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                map.values[y * width + x] = f(x, y).clamp(0.0, 1.0);
            }
        }
        map
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn same_shape(&self, other: &SaliencyMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> SaliencyMap {
        SaliencyMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Pointwise maximum, used to compose per-object masks into one view.
    pub fn max_with(&mut self, other: &SaliencyMap) {
        assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = a.max(*b);
        }
    }

    /// 8-bit quantization (`round(255·p)`) used by every file export.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_gray8());
        out
    }

    pub fn to_png(&self) -> Vec<u8> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_gray8())
            .expect("buffer length matches dimensions");
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).expect("in-memory PNG encoding");
        buf.into_inner()
    }
}

/// Zeroes every value below `tau` and keeps the rest unchanged.
pub fn threshold_mask(map: &SaliencyMap, tau: f64) -> SaliencyMap {
    SaliencyMap {
        width: map.width,
        height: map.height,
        values: map.values.iter().map(|&v| if v < tau { 0.0 } else { v }).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcaConfig {
    /// Values below this are dropped before moments are taken.
    pub threshold: f64,
    /// Minimum total probability mass for a usable mask.
    pub min_mass: f64,
    /// Eigenvalue ratio below which the principal axis is considered noise.
    pub isotropy_ratio: f64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self { threshold: 0.5, min_mass: 10.0, isotropy_ratio: 1.1 }
    }
}

/// Probability-weighted zeroth, first and central second moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedMoments {
    pub mass: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub cov_xx: f64,
    pub cov_xy: f64,
    pub cov_yy: f64,
}

/// Two passes over the map: the mean first, then centered second moments,
/// each accumulated row by row.
pub fn weighted_moments(map: &SaliencyMap) -> WeightedMoments {
    let w = map.width;
    let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (y, row) in map.values.chunks_exact(w).enumerate() {
        let mut row_mass = 0.0;
        let mut row_sx = 0.0;
        for (x, &v) in row.iter().enumerate() {
            if v != 0.0 {
                row_mass += v;
                row_sx += v * x as f64;
            }
        }
        mass += row_mass;
        sx += row_sx;
        sy += row_mass * y as f64;
    }
    if mass <= 0.0 {
        return WeightedMoments { mass: 0.0, mean_x: 0.0, mean_y: 0.0, cov_xx: 0.0, cov_xy: 0.0, cov_yy: 0.0 };
    }
    let (mx, my) = (sx / mass, sy / mass);
    let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
    for (y, row) in map.values.chunks_exact(w).enumerate() {
        let dy = y as f64 - my;
        for (x, &v) in row.iter().enumerate() {
            if v != 0.0 {
                let dx = x as f64 - mx;
                cxx += v * dx * dx;
                cxy += v * dx * dy;
                cyy += v * dy * dy;
            }
        }
    }
    WeightedMoments {
        mass,
        mean_x: mx,
        mean_y: my,
        cov_xx: cxx / mass,
        cov_xy: cxy / mass,
        cov_yy: cyy / mass,
    }
}

/// Centroid and principal axis of a saliency map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractedFeatures {
    pub centroid: HomoPoint,
    pub axis_line: HomoLine,
    pub axis_endpoints: (HomoPoint, HomoPoint),
    pub mass: f64,
    /// `λ_max / λ_min` of the covariance; infinite for a one-pixel-wide mask.
    pub anisotropy: f64,
    /// Set when the anisotropy falls under the isotropy ratio; the axis is then vertical.
    pub isotropic: bool,
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl ExtractedFeatures {
    /// Axis angle in radians from the image x axis, in `(-π/2, π/2]`.
    pub fn axis_angle(&self) -> f64 {
        let (dx, dy) = self.axis_line.direction();
        let mut a = dy.atan2(dx);
        if a <= -std::f64::consts::FRAC_PI_2 {
            a += std::f64::consts::PI;
        } else if a > std::f64::consts::FRAC_PI_2 {
            a -= std::f64::consts::PI;
        }
        a
    }
}

/// PCA with the default mass floor and isotropy ratio, on the map as given.
pub fn pca_extract(map: &SaliencyMap) -> Result<ExtractedFeatures> {
    pca_extract_with(map, &PcaConfig::default())
}

/// PCA of the map as given; `cfg.threshold` is not applied here (see [`extract_features`]).
pub fn pca_extract_with(map: &SaliencyMap, cfg: &PcaConfig) -> Result<ExtractedFeatures> {
    let m = weighted_moments(map);
    if m.mass <= cfg.min_mass {
        return Err(SaliencyError::EmptyMask { mass: m.mass, floor: cfg.min_mass });
    }
    let half_trace = 0.5 * (m.cov_xx + m.cov_yy);
    let half_diff = 0.5 * (m.cov_xx - m.cov_yy);
    let radius = half_diff.hypot(m.cov_xy);
    let lambda_max = half_trace + radius;
    let lambda_min = (half_trace - radius).max(0.0);
    let anisotropy = if lambda_min > 0.0 { lambda_max / lambda_min } else { f64::INFINITY };
    let isotropic = anisotropy < cfg.isotropy_ratio;

    let (dx, dy) = if isotropic {
        (0.0, 1.0)
    } else {
        let theta = 0.5 * (2.0 * m.cov_xy).atan2(m.cov_xx - m.cov_yy);
        (theta.cos(), theta.sin())
    };
    let centroid = HomoPoint::pixel(m.mean_x, m.mean_y);
    let axis_line = HomoLine::through_with_direction(centroid, dx, dy)?;
    let half_len = 2.0 * lambda_max.sqrt();
    let axis_endpoints = (
        HomoPoint::pixel(m.mean_x - half_len * dx, m.mean_y - half_len * dy),
        HomoPoint::pixel(m.mean_x + half_len * dx, m.mean_y + half_len * dy),
    );
    Ok(ExtractedFeatures {
        centroid,
        axis_line,
        axis_endpoints,
        mass: m.mass,
        anisotropy,
        isotropic,
        lambda_max,
        lambda_min,
    })
}

/// Thresholds at `cfg.threshold`, then runs PCA.
pub fn extract_features(map: &SaliencyMap, cfg: &PcaConfig) -> Result<ExtractedFeatures> {
    pca_extract_with(&threshold_mask(map, cfg.threshold), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    /// One prompt; the target is paired with static features fixed in the image.
    ObjectGripper,
    /// Two prompts: the carried object first, then the target.
    ObjectObject,
}

impl InteractionMode {
    pub const fn mask_count(self) -> usize {
        match self {
            InteractionMode::ObjectGripper => 1,
            InteractionMode::ObjectObject => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingPolicy {
    pub mode: InteractionMode,
    pub prompts: Vec<String>,
    pub static_point: HomoPoint,
    /// Two points spanning `static_line`; these are the `f1, f2` of a gripper-side l2l.
    pub static_line_points: (HomoPoint, HomoPoint),
    pub static_line: HomoLine,
}

/// Heuristic gripper point `(W/2, 4H/5, 1)`.
pub fn default_static_point(width: usize, height: usize) -> HomoPoint {
    HomoPoint::pixel(width as f64 / 2.0, 4.0 * height as f64 / 5.0)
}

/// Points `(W/2, H/4)` and `(W/2, 3H/4)` spanning the vertical mid-image line.
pub fn default_static_line_points(width: usize, height: usize) -> (HomoPoint, HomoPoint) {
    let u = width as f64 / 2.0;
    (HomoPoint::pixel(u, height as f64 / 4.0), HomoPoint::pixel(u, 3.0 * height as f64 / 4.0))
}

impl PairingPolicy {
    pub fn object_gripper(prompt: impl Into<String>, width: usize, height: usize) -> Self {
        Self::with_defaults(InteractionMode::ObjectGripper, vec![prompt.into()], width, height)
    }

    pub fn object_object(
        carried: impl Into<String>,
        target: impl Into<String>,
        width: usize,
        height: usize,
    ) -> Self {
        Self::with_defaults(InteractionMode::ObjectObject, vec![carried.into(), target.into()], width, height)
    }

    /// Checks prompt arity against the mode.
    pub fn new(mode: InteractionMode, prompts: Vec<String>, width: usize, height: usize) -> Result<Self> {
        if prompts.len() != mode.mask_count() {
            return Err(SaliencyError::PolicyMismatch { expected: mode.mask_count(), got: prompts.len() });
        }
        Ok(Self::with_defaults(mode, prompts, width, height))
    }

    fn with_defaults(mode: InteractionMode, prompts: Vec<String>, width: usize, height: usize) -> Self {
        let static_line_points = default_static_line_points(width, height);
        let static_line = line_from_points(static_line_points.0, static_line_points.1)
            .expect("distinct static points");
        Self {
            mode,
            prompts,
            static_point: default_static_point(width, height),
            static_line_points,
            static_line,
        }
    }

    pub fn target_prompt(&self) -> &str {
        self.prompts.last().expect("policy has at least one prompt")
    }

    pub fn carried_prompt(&self) -> Option<&str> {
        match self.mode {
            InteractionMode::ObjectObject => Some(&self.prompts[0]),
            InteractionMode::ObjectGripper => None,
        }
    }
}

/// Binds extracted features to a concrete constraint.
///
/// `carried` must be present for object-object pairing and is ignored otherwise.
pub fn bind_constraint(
    kind: ConstraintKind,
    policy: &PairingPolicy,
    carried: Option<&ExtractedFeatures>,
    target: &ExtractedFeatures,
) -> Result<Constraint> {
    let c = match policy.mode {
        InteractionMode::ObjectGripper => match kind {
            ConstraintKind::PointToPoint => Constraint::PointToPoint { f1: policy.static_point, f2: target.centroid },
            ConstraintKind::PointToLine => Constraint::PointToLine { f1: policy.static_point, f34: target.axis_line },
            ConstraintKind::LineToLine => Constraint::LineToLine {
                f1: policy.static_line_points.0,
                f2: policy.static_line_points.1,
                f34: target.axis_line,
            },
            ConstraintKind::ParallelLines => Constraint::ParallelLines { f12: policy.static_line, f34: target.axis_line },
        },
        InteractionMode::ObjectObject => {
            let carried = carried.ok_or(SaliencyError::PolicyMismatch { expected: 2, got: 1 })?;
            match kind {
                ConstraintKind::PointToPoint => Constraint::PointToPoint { f1: carried.centroid, f2: target.centroid },
                ConstraintKind::PointToLine => Constraint::PointToLine { f1: carried.centroid, f34: target.axis_line },
                ConstraintKind::LineToLine => Constraint::LineToLine {
                    f1: carried.axis_endpoints.0,
                    f2: carried.axis_endpoints.1,
                    f34: target.axis_line,
                },
                ConstraintKind::ParallelLines => {
                    Constraint::ParallelLines { f12: carried.axis_line, f34: target.axis_line }
                }
            }
        }
    };
    Ok(c)
}

/// Extracts features from the policy's masks and binds them.
///
/// Masks are ordered like the policy prompts: `[target]` for object-gripper,
/// `[carried, target]` for object-object. This computes the carried-object
/// features afresh; an episode that freezes them calls [`bind_constraint`]
/// with its cached copy instead.
pub fn features_for_constraint(
    kind: ConstraintKind,
    policy: &PairingPolicy,
    masks: &[&SaliencyMap],
    cfg: &PcaConfig,
) -> Result<Constraint> {
    let expected = policy.mode.mask_count();
    if masks.len() != expected {
        return Err(SaliencyError::PolicyMismatch { expected, got: masks.len() });
    }
    let target = extract_features(masks[expected - 1], cfg)?;
    let carried = match policy.mode {
        InteractionMode::ObjectObject => Some(extract_features(masks[0], cfg)?),
        InteractionMode::ObjectGripper => None,
    };
    bind_constraint(kind, policy, carried.as_ref(), &target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskFormat {
    Png,
    Pgm,
}

impl MaskFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(MaskFormat::Png),
            "pgm" => Some(MaskFormat::Pgm),
            _ => None,
        }
    }
}

/// Decodes an 8-bit grayscale PNG or binary PGM; pixel `v` maps to `v / 255`.
pub fn load_mask(bytes: &[u8], format: MaskFormat) -> Result<SaliencyMap> {
    let fmt = match format {
        MaskFormat::Png => image::ImageFormat::Png,
        MaskFormat::Pgm => image::ImageFormat::Pnm,
    };
    if format == MaskFormat::Pgm && !bytes.starts_with(b"P5") {
        return Err(SaliencyError::UnsupportedFormat("only binary (P5) PGM is supported".into()));
    }
    let img = image::load_from_memory_with_format(bytes, fmt).map_err(|e| match e {
        image::ImageError::Unsupported(u) => SaliencyError::UnsupportedFormat(u.to_string()),
        other => SaliencyError::MalformedFile(other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(gray) => {
            let values = gray.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
            SaliencyMap::new(w, h, values)
        }
        other => Err(SaliencyError::UnsupportedFormat(format!(
            "expected 8-bit grayscale, found {:?}",
            other.color()
        ))),
    }
}

pub fn load_mask_file(path: &Path) -> Result<SaliencyMap> {
    let format = MaskFormat::from_path(path)
        .ok_or_else(|| SaliencyError::UnsupportedFormat(format!("unknown extension on {}", path.display())))?;
    let bytes = std::fs::read(path)?;
    load_mask(&bytes, format)
}
