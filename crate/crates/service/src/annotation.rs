//! Manual constraint annotations: clicked pixels turned into constraint specs.
//!
//! Points are given in the order the constraint expects them. The leading
//! points describe gripper-side features and stay fixed in the image; the
//! trailing ones lie on the scene object and are tracked as the camera moves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use vsalient_core::controller::{AnnotatedPoint, ConstraintSpec};
use vsalient_core::geometry::{AnnotationError, ConstraintKind, HomoPoint};
use vsalient_core::simulator::SimSession;

/// Whether an annotated point stays put in the image or follows the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointRole {
    Fixed,
    Tracked,
}

/// Roles of the clicked points for each constraint kind.
pub fn point_roles(kind: ConstraintKind) -> &'static [PointRole] {
    use PointRole::*;
    match kind {
        ConstraintKind::PointToPoint => &[Fixed, Tracked],
        ConstraintKind::PointToLine => &[Fixed, Tracked, Tracked],
        ConstraintKind::LineToLine | ConstraintKind::ParallelLines => &[Fixed, Fixed, Tracked, Tracked],
    }
}

/// A constraint entered as clicked pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub kind: ConstraintKind,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Error, PartialEq)]
pub enum AnnotationRejected {
    #[error(transparent)]
    Shape(#[from] AnnotationError),
    #[error("point {index} is not a finite pixel inside the {width}x{height} image")]
    OutOfImage { index: usize, width: usize, height: usize },
}

impl Annotation {
    pub fn validate(&self, width: usize, height: usize) -> Result<(), AnnotationRejected> {
        let expected = self.kind.annotation_points();
        if self.points.len() != expected {
            return Err(AnnotationError::PointCount { kind: self.kind, expected, got: self.points.len() }.into());
        }
        for (index, [u, v]) in self.points.iter().enumerate() {
            let inside = u.is_finite() && v.is_finite() && *u >= 0.0 && *v >= 0.0 && *u < width as f64 && *v < height as f64;
            if !inside {
                return Err(AnnotationRejected::OutOfImage { index, width, height });
            }
        }
        Ok(())
    }

    /// Binds the annotation to a live simulation, registering tracked points
    /// at the clicked pixels of the current view.
    pub fn bind(&self, sim: &mut SimSession) -> Result<ConstraintSpec, AnnotationRejected> {
        self.validate(sim.camera.width, sim.camera.height)?;
        let points = self
            .points
            .iter()
            .zip(point_roles(self.kind))
            .map(|(&[u, v], role)| match role {
                PointRole::Fixed => AnnotatedPoint::Fixed(HomoPoint::pixel(u, v)),
                PointRole::Tracked => AnnotatedPoint::Tracked(sim.anchor_click(u, v)),
            })
            .collect();
        Ok(ConstraintSpec::annotated(self.kind, points))
    }
}
