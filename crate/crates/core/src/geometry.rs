//! Homogeneous image-plane points and lines, and the four alignment error
//! functions (point-to-point, point-to-line, line-to-line, parallel lines).
//!
//! Points are always normalized to `w = 1` before an error is evaluated, and
//! lines built through [`line_from_points`] carry unit-length normals, so
//! point-to-line errors read as signed pixel distances and the parallel-line
//! error is the sine of the angle between the two lines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magnitude below which the homogeneous scale of a point is treated as zero.
pub const IDEAL_POINT_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GeometryError {
    #[error("point ({x}, {y}, {w}) is at infinity")]
    DegeneratePoint { x: f64, y: f64, w: f64 },
    #[error("points are coincident, no unique line through them")]
    CoincidentPoints,
    #[error("line has no finite normal (a = b = 0)")]
    DegenerateLine,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum AnnotationError {
    #[error("{kind} needs {expected} points, got {got}")]
    PointCount { kind: ConstraintKind, expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Homogeneous image point `(x, y, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomoPoint {
    pub x: f64,
    pub y: f64,
    pub w: f64,
}

impl HomoPoint {
    pub const fn new(x: f64, y: f64, w: f64) -> Self {
        Self { x, y, w }
    }

    /// Pixel location `(u, v)` as a point with `w = 1`.
    pub const fn pixel(u: f64, v: f64) -> Self {
        Self { x: u, y: v, w: 1.0 }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.w]
    }

    pub fn scaled(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.w * s)
    }

    pub fn normalized(self) -> Result<Self> {
        normalize_point(self)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite()
    }
}

/// Homogeneous line `a·x + b·y + c·w = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomoLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl HomoLine {
    /// Builds a line and normalizes it to a unit normal with canonical sign.
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::raw(a, b, c).normalized()
    }

    /// Keeps the coefficients exactly as given.
    pub const fn raw(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// Vertical line `x = u`.
    pub const fn vertical(u: f64) -> Self {
        Self::raw(1.0, 0.0, -u)
    }

    /// Horizontal line `y = v`.
    pub const fn horizontal(v: f64) -> Self {
        Self::raw(0.0, 1.0, -v)
    }

    /// Line through `through` with direction `(dx, dy)`.
    pub fn through_with_direction(through: HomoPoint, dx: f64, dy: f64) -> Result<Self> {
        let p = normalize_point(through)?;
        let (a, b) = (-dy, dx);
        Self::new(a, b, -(a * p.x + b * p.y))
    }

    /// Scales to `a² + b² = 1` with the first nonzero of `(a, b)` positive.
    pub fn normalized(self) -> Result<Self> {
        let n = self.a.hypot(self.b);
        if n == 0.0 || !n.is_finite() {
            return Err(GeometryError::DegenerateLine);
        }
        let sign = if self.a > 0.0 || (self.a == 0.0 && self.b > 0.0) {
            1.0
        } else {
            -1.0
        };
        let s = sign / n;
        Ok(Self::raw(self.a * s, self.b * s, self.c * s))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }

    /// Unit direction vector along the line (rotated normal).
    pub fn direction(self) -> (f64, f64) {
        let n = self.a.hypot(self.b);
        (self.b / n, -self.a / n)
    }
}

fn cross(u: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ]
}

fn dot(u: [f64; 3], v: [f64; 3]) -> f64 {
    u[0] * v[0] + u[1] * v[1] + u[2] * v[2]
}

pub fn normalize_point(p: HomoPoint) -> Result<HomoPoint> {
    if p.w.abs() <= IDEAL_POINT_EPS || !p.is_finite() {
        return Err(GeometryError::DegeneratePoint { x: p.x, y: p.y, w: p.w });
    }
    Ok(HomoPoint::new(p.x / p.w, p.y / p.w, 1.0))
}

/// Line joining two points: their cross product, normalized.
pub fn line_from_points(p1: HomoPoint, p2: HomoPoint) -> Result<HomoLine> {
    let [a, b, c] = cross(p1.to_array(), p2.to_array());
    if a == 0.0 && b == 0.0 && c == 0.0 {
        return Err(GeometryError::CoincidentPoints);
    }
    // (a, b) = 0 with c != 0 is the line at infinity: both inputs were ideal.
    HomoLine::raw(a, b, c).normalized().map_err(|_| GeometryError::CoincidentPoints)
}

/// Point-to-point error `f2 - f1` on normalized points.
pub fn e_pp(f1: HomoPoint, f2: HomoPoint) -> Result<[f64; 2]> {
    let p1 = normalize_point(f1)?;
    let p2 = normalize_point(f2)?;
    Ok([p2.x - p1.x, p2.y - p1.y])
}

/// Point-to-line error: signed distance of `f1` from `f34` (for a unit-normal line).
pub fn e_pl(f1: HomoPoint, f34: HomoLine) -> Result<f64> {
    let p = normalize_point(f1)?;
    Ok(dot(p.to_array(), f34.to_array()))
}

/// Line-to-line error: sum of the two point-to-line errors.
pub fn e_ll(f1: HomoPoint, f2: HomoPoint, f34: HomoLine) -> Result<f64> {
    Ok(e_pl(f1, f34)? + e_pl(f2, f34)?)
}

/// Parallel-line error: the `w` component of `f12 × f34`, i.e. `a1·b2 − b1·a2`.
pub fn e_par(f12: HomoLine, f34: HomoLine) -> f64 {
    cross(f12.to_array(), f34.to_array())[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    #[serde(rename = "p2p")]
    PointToPoint,
    #[serde(rename = "p2l")]
    PointToLine,
    #[serde(rename = "l2l")]
    LineToLine,
    #[serde(rename = "par")]
    ParallelLines,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 4] = [
        ConstraintKind::PointToPoint,
        ConstraintKind::PointToLine,
        ConstraintKind::LineToLine,
        ConstraintKind::ParallelLines,
    ];

    /// Number of scalar error entries this constraint contributes.
    pub const fn error_dim(self) -> usize {
        match self {
            ConstraintKind::PointToPoint => 2,
            _ => 1,
        }
    }

    pub const fn short_name(self) -> &'static str {
        match self {
            ConstraintKind::PointToPoint => "p2p",
            ConstraintKind::PointToLine => "p2l",
            ConstraintKind::LineToLine => "l2l",
            ConstraintKind::ParallelLines => "par",
        }
    }

    /// Whether the error is measured in pixels (all kinds but `par`, which is a sine).
    pub const fn is_pixel_valued(self) -> bool {
        !matches!(self, ConstraintKind::ParallelLines)
    }

    /// Number of image points a user supplies to annotate this constraint.
    pub const fn annotation_points(self) -> usize {
        match self {
            ConstraintKind::PointToPoint => 2,
            ConstraintKind::PointToLine => 3,
            ConstraintKind::LineToLine | ConstraintKind::ParallelLines => 4,
        }
    }
}

impl std::fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

impl std::str::FromStr for ConstraintKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "p2p" => Ok(ConstraintKind::PointToPoint),
            "p2l" => Ok(ConstraintKind::PointToLine),
            "l2l" => Ok(ConstraintKind::LineToLine),
            "par" => Ok(ConstraintKind::ParallelLines),
            other => Err(format!("unknown constraint kind `{other}`")),
        }
    }
}

/// A constraint with its features bound to concrete image primitives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    PointToPoint { f1: HomoPoint, f2: HomoPoint },
    PointToLine { f1: HomoPoint, f34: HomoLine },
    LineToLine { f1: HomoPoint, f2: HomoPoint, f34: HomoLine },
    ParallelLines { f12: HomoLine, f34: HomoLine },
}

impl Constraint {
    pub fn kind(&self) -> ConstraintKind {
        match self {
            Constraint::PointToPoint { .. } => ConstraintKind::PointToPoint,
            Constraint::PointToLine { .. } => ConstraintKind::PointToLine,
            Constraint::LineToLine { .. } => ConstraintKind::LineToLine,
            Constraint::ParallelLines { .. } => ConstraintKind::ParallelLines,
        }
    }

    /// Builds a constraint from clicked image points, in the order
    /// `p2p: f1 f2`, `p2l: f1 f3 f4`, `l2l: f1 f2 f3 f4`, `par: f1 f2 f3 f4`.
    /// Lines are formed from consecutive point pairs.
    pub fn from_points(kind: ConstraintKind, points: &[HomoPoint]) -> std::result::Result<Self, AnnotationError> {
        if points.len() != kind.annotation_points() {
            return Err(AnnotationError::PointCount { kind, expected: kind.annotation_points(), got: points.len() });
        }
        let c = match kind {
            ConstraintKind::PointToPoint => Constraint::PointToPoint { f1: points[0], f2: points[1] },
            ConstraintKind::PointToLine => {
                Constraint::PointToLine { f1: points[0], f34: line_from_points(points[1], points[2])? }
            }
            ConstraintKind::LineToLine => Constraint::LineToLine {
                f1: points[0],
                f2: points[1],
                f34: line_from_points(points[2], points[3])?,
            },
            ConstraintKind::ParallelLines => Constraint::ParallelLines {
                f12: line_from_points(points[0], points[1])?,
                f34: line_from_points(points[2], points[3])?,
            },
        };
        Ok(c)
    }

    pub fn evaluate(&self) -> Result<ErrorVector> {
        let values = match *self {
            Constraint::PointToPoint { f1, f2 } => e_pp(f1, f2)?.to_vec(),
            Constraint::PointToLine { f1, f34 } => vec![e_pl(f1, f34)?],
            Constraint::LineToLine { f1, f2, f34 } => vec![e_ll(f1, f2, f34)?],
            Constraint::ParallelLines { f12, f34 } => vec![e_par(f12, f34)],
        };
        Ok(ErrorVector(values))
    }
}

/// Stacked error signal; one block per constraint, in declaration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ErrorVector(pub Vec<f64>);

impl ErrorVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for ErrorVector {
    fn from(values: Vec<f64>) -> Self {
        ErrorVector(values)
    }
}

/// Concatenates per-constraint errors in order.
pub fn stack_errors<'a, I>(evaluated: I) -> ErrorVector
where
    I: IntoIterator<Item = &'a ErrorVector>,
{
    ErrorVector(evaluated.into_iter().flat_map(|e| e.0.iter().copied()).collect())
}

/// Evaluates every constraint and stacks the results.
pub fn evaluate_all(constraints: &[Constraint]) -> Result<ErrorVector> {
    let parts = constraints
        .iter()
        .map(Constraint::evaluate)
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_errors(&parts))
}
