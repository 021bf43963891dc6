//! Gaussians, cameras and scenes.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::InstanceMask;
use crate::{Feature, FEATURE_DIM};

const QUATERNION_NORM_TOL: f64 = 1e-6;

/// A single 3D Gaussian with degree-0 color and an instance feature.
///
/// Opacity is stored post-activation. Rotation is `[w, x, y, z]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPoint {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub instance_feature: Feature,
}

impl GaussianPoint {
    /// Axis-aligned isotropic Gaussian with a zero feature.
    pub fn isotropic(position: [f64; 3], radius: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [radius; 3],
            opacity,
            color,
            instance_feature: [0.0; FEATURE_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.rotation;
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(Error::validation(format!(
                "rotation quaternion norm {norm} is not 1"
            )));
        }
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::validation(format!(
                "scale {:?} must be positive",
                self.scale
            )));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::validation(format!(
                "opacity {} must lie strictly inside (0, 1)",
                self.opacity
            )));
        }
        if !self.position.iter().all(|v| v.is_finite())
            || !self.instance_feature.iter().all(|v| v.is_finite())
        {
            return Err(Error::validation("non-finite position or feature"));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::validation(format!(
                "color {:?} outside [0, 1]",
                self.color
            )));
        }
        Ok(())
    }

    /// World-space covariance `R S S^T R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation;
        let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
            .to_rotation_matrix()
            .into_inner();
        let s = Matrix3::from_diagonal(&Vector3::from(self.scale));
        let rs = rot * s;
        rs * rs.transpose()
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn from_points<'a>(positions: impl IntoIterator<Item = &'a [f64; 3]>) -> Option<Self> {
        let mut iter = positions.into_iter();
        let first = *iter.next()?;
        let mut bounds = Aabb {
            min: first,
            max: first,
        };
        for p in iter {
            for a in 0..3 {
                bounds.min[a] = bounds.min[a].min(p[a]);
                bounds.max[a] = bounds.max[a].max(p[a]);
            }
        }
        Some(bounds)
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    /// Maps `p` into `[0, 1]^3`; degenerate axes map to 0.
    pub fn normalize(&self, p: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            let extent = self.max[a] - self.min[a];
            if extent > 0.0 {
                out[a] = (p[a] - self.min[a]) / extent;
            }
        }
        out
    }
}

/// Ordered collection of Gaussians. Point order is the point identity.
///
/// An empty scene is representable (it renders as pure background) so that
/// edits can remove everything; loaders reject empty point blocks.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Scene {
    points: Vec<GaussianPoint>,
    bounds: Option<Aabb>,
}

impl Scene {
    pub fn new(points: Vec<GaussianPoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::validation(format!("point {i}: {e}")))?;
        }
        let bounds = Aabb::from_points(points.iter().map(|p| &p.position));
        Ok(Self { points, bounds })
    }

    pub fn points(&self) -> &[GaussianPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> Option<Aabb> {
        self.bounds
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn features(&self) -> Vec<Feature> {
        self.points.iter().map(|p| p.instance_feature).collect()
    }

    /// Copy of the scene with instance features replaced; geometry and color
    /// are carried over untouched.
    pub fn with_features(&self, features: &[Feature]) -> Result<Self> {
        if features.len() != self.points.len() {
            return Err(Error::validation(format!(
                "{} feature rows for {} points",
                features.len(),
                self.points.len()
            )));
        }
        let points = self
            .points
            .iter()
            .zip(features)
            .map(|(p, f)| GaussianPoint {
                instance_feature: *f,
                ..p.clone()
            })
            .collect();
        Ok(Self {
            points,
            bounds: self.bounds,
        })
    }

    pub(crate) fn from_points_unchecked(points: Vec<GaussianPoint>) -> Self {
        let bounds = Aabb::from_points(points.iter().map(|p| &p.position));
        Self { points, bounds }
    }
}

/// Pinhole camera with OpenCV axes (x right, y down, z forward).
///
/// `rotation` and `translation` map world to camera: `x_c = R x_w + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the world origin looking down +z.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
        )
    }

    /// Camera at `eye` looking at `target`, with principal point at the
    /// image center.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let eye_v = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye_v).normalize();
        let right = forward.cross(&Vector3::from(up));
        if right.norm() < 1e-12 {
            return Err(Error::validation("look_at: up vector parallel to view"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye_v);
        let rotation = [
            [rot[(0, 0)], rot[(0, 1)], rot[(0, 2)]],
            [rot[(1, 0)], rot[(1, 1)], rot[(1, 2)]],
            [rot[(2, 0)], rot[(2, 1)], rot[(2, 2)]],
        ];
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            [t.x, t.y, t.z],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("image size must be nonzero"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::validation(format!(
                "cx {} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::validation(format!(
                "cy {} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn to_camera(&self, p: &[f64; 3]) -> Vector3<f64> {
        self.rotation_matrix() * Vector3::from(*p) + Vector3::from(self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let c = -(self.rotation_matrix().transpose() * Vector3::from(self.translation));
        [c.x, c.y, c.z]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: u32, height: u32) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            width,
            height,
            self.rotation,
            self.translation,
        )
    }
}

/// Identifier of a discrete 3D instance: a (coarse, fine) codebook pair.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct InstanceId {
    pub coarse: u32,
    pub fine: u32,
}

impl InstanceId {
    pub const fn new(coarse: u32, fine: u32) -> Self {
        Self { coarse, fine }
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.coarse, self.fine)
    }
}

impl FromStr for InstanceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (c, f) = s
            .split_once(':')
            .ok_or_else(|| Error::parse("instance id", format!("expected c:f, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|e| Error::parse("instance id", e.to_string()))
        };
        Ok(Self::new(parse(c)?, parse(f)?))
    }
}

/// A training/association view: a camera and the masks observed in it.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub masks: Vec<InstanceMask>,
}
