//! Software splatting.
//!
//! Rendering is split in two: [`compute_blend_weights`] projects, sorts and
//! blends the Gaussians of a view into per-pixel `(point, weight)` lists, and
//! the `render_*` functions are weighted sums over those lists. Feature maps
//! are therefore exactly linear in the features, and [`backprop_features`] is
//! the transpose of that linear map.
//!
//! Pixel `(x, y)` samples the image plane at integer coordinates, so a
//! Gaussian whose projected mean is `(50, 50)` is centered on pixel
//! `(50, 50)`.

use std::sync::OnceLock;

use nalgebra::{Matrix2, Matrix2x3, Matrix3};

use crate::association::InstanceTable;
use crate::error::{Error, Result};
use crate::par;
use crate::scene::{Camera, GaussianPoint, InstanceId, Scene};
use crate::{Feature, FEATURE_DIM};

/// Added to the diagonal of every projected covariance, in px².
pub const COV2D_DILATION: f64 = 0.3;
/// Gaussians closer than this (camera-space z) are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Screen-space cutoff, in standard deviations (Mahalanobis radius).
pub const CUTOFF_SIGMA: f64 = 3.0;
/// Blending stops once transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected2D {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
    pub jacobian: [[f64; 3]; 2],
}

/// Projects a Gaussian through a pinhole camera with the local affine
/// (EWA) approximation. Returns `None` when the point is behind the near
/// plane.
pub fn project_gaussian(point: &GaussianPoint, cam: &Camera) -> Option<Projected2D> {
    let pc = cam.to_camera(&point.position);
    let z = pc.z;
    if z <= NEAR_PLANE {
        return None;
    }
    let mean2d = [cam.fx * pc.x / z + cam.cx, cam.fy * pc.y / z + cam.cy];
    let jac = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * pc.x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * pc.y / (z * z),
    );
    let w: Matrix3<f64> = cam.rotation_matrix();
    let cov_cam = w * point.covariance() * w.transpose();
    let mut cov = jac * cov_cam * jac.transpose();
    cov[(0, 0)] += COV2D_DILATION;
    cov[(1, 1)] += COV2D_DILATION;
    // symmetrize away rounding
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    Some(Projected2D {
        mean2d,
        cov2d: [[cov[(0, 0)], off], [off, cov[(1, 1)]]],
        depth: z,
        jacobian: [
            [jac[(0, 0)], jac[(0, 1)], jac[(0, 2)]],
            [jac[(1, 0)], jac[(1, 1)], jac[(1, 2)]],
        ],
    })
}

/// A projected Gaussian prepared for pixel evaluation.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: u32,
    pub depth: f64,
    pub mean: [f64; 2],
    /// Inverse 2D covariance `[a, b, c]` for the form `a dx² + 2 b dx dy + c dy²`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub x_range: (i64, i64),
    pub y_range: (i64, i64),
}

impl Splat {
    fn new(index: usize, point: &GaussianPoint, cam: &Camera) -> Option<Self> {
        let proj = project_gaussian(point, cam)?;
        let cov = Matrix2::new(
            proj.cov2d[0][0],
            proj.cov2d[0][1],
            proj.cov2d[1][0],
            proj.cov2d[1][1],
        );
        let det = cov.determinant();
        if det <= 0.0 || !det.is_finite() {
            return None;
        }
        let inv = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
        // bounding box of the cutoff ellipse
        let rx = CUTOFF_SIGMA * cov[(0, 0)].sqrt();
        let ry = CUTOFF_SIGMA * cov[(1, 1)].sqrt();
        let x_range = (
            (proj.mean2d[0] - rx).ceil() as i64,
            (proj.mean2d[0] + rx).floor() as i64,
        );
        let y_range = (
            (proj.mean2d[1] - ry).ceil() as i64,
            (proj.mean2d[1] + ry).floor() as i64,
        );
        let in_view = x_range.1 >= 0
            && y_range.1 >= 0
            && x_range.0 < cam.width as i64
            && y_range.0 < cam.height as i64;
        in_view.then_some(Self {
            index: index as u32,
            depth: proj.depth,
            mean: proj.mean2d,
            conic: inv,
            opacity: point.opacity,
            x_range,
            y_range,
        })
    }

    /// Gaussian falloff at pixel `(x, y)`, or `None` outside the cutoff.
    #[inline]
    pub fn falloff(&self, x: i64, y: i64) -> Option<f64> {
        if x < self.x_range.0 || x > self.x_range.1 {
            return None;
        }
        let dx = x as f64 - self.mean[0];
        let dy = y as f64 - self.mean[1];
        let q = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        (q <= CUTOFF_SIGMA * CUTOFF_SIGMA).then(|| (-0.5 * q).exp())
    }
}

/// Projects `indices` (or every point) and returns the visible splats sorted
/// front to back, ties broken by point index.
pub(crate) fn sorted_splats(scene: &Scene, cam: &Camera, indices: Option<&[usize]>) -> Vec<Splat> {
    let points = scene.points();
    let projected: Vec<Option<Splat>> = match indices {
        Some(idx) => par::map_collect(idx.len(), |k| Splat::new(idx[k], &points[idx[k]], cam)),
        None => par::map_collect(points.len(), |i| Splat::new(i, &points[i], cam)),
    };
    let mut splats: Vec<Splat> = projected.into_iter().flatten().collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

/// One term of a pixel's blend.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub index: u32,
    pub weight: f64,
}

/// Per-pixel blend weights `w_i = T_i G_i(u) σ_i`, front to back.
#[derive(Debug)]
pub struct BlendWeights {
    width: usize,
    height: usize,
    point_count: usize,
    offsets: Vec<usize>,
    entries: Vec<Contribution>,
    alpha: Vec<f64>,
    transmittance: Vec<f64>,
    by_point: OnceLock<PointMajor>,
}

/// The same weights grouped by point, pixels ascending.
#[derive(Debug)]
struct PointMajor {
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl BlendWeights {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of points in the scene the weights were computed for.
    pub fn point_count(&self) -> usize {
        self.point_count
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[Contribution] {
        let p = y * self.width + x;
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    /// Accumulated alpha `A = Σ w` at a pixel.
    pub fn alpha(&self, x: usize, y: usize) -> f64 {
        self.alpha[y * self.width + x]
    }

    /// Transmittance left after the last blended Gaussian.
    pub fn final_transmittance(&self, x: usize, y: usize) -> f64 {
        self.transmittance[y * self.width + x]
    }

    pub fn alpha_map(&self) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self.alpha.clone(),
        }
    }

    /// Total number of `(pixel, point)` terms.
    pub fn term_count(&self) -> usize {
        self.entries.len()
    }

    fn point_major(&self) -> &PointMajor {
        self.by_point.get_or_init(|| {
            let mut counts = vec![0usize; self.point_count + 1];
            for c in &self.entries {
                counts[c.index as usize + 1] += 1;
            }
            for i in 0..self.point_count {
                counts[i + 1] += counts[i];
            }
            let offsets = counts.clone();
            let mut cursor = counts;
            let mut entries = vec![(0u32, 0.0f64); self.entries.len()];
            for pixel in 0..self.width * self.height {
                for c in &self.entries[self.offsets[pixel]..self.offsets[pixel + 1]] {
                    let slot = &mut cursor[c.index as usize];
                    entries[*slot] = (pixel as u32, c.weight);
                    *slot += 1;
                }
            }
            PointMajor { offsets, entries }
        })
    }
}

/// Blends every point of `scene` as seen from `cam`.
pub fn compute_blend_weights(scene: &Scene, cam: &Camera) -> BlendWeights {
    blend_splats(&sorted_splats(scene, cam, None), scene.len(), cam)
}

/// Blends only the points in `members`; weights still refer to global point
/// indices.
pub fn compute_blend_weights_subset(scene: &Scene, cam: &Camera, members: &[usize]) -> BlendWeights {
    blend_splats(&sorted_splats(scene, cam, Some(members)), scene.len(), cam)
}

pub(crate) fn blend_splats(splats: &[Splat], point_count: usize, cam: &Camera) -> BlendWeights {
    let width = cam.width as usize;
    let height = cam.height as usize;

    // rows[y] lists splat positions (front to back) whose box touches row y
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height];
    for (k, s) in splats.iter().enumerate() {
        let y0 = s.y_range.0.max(0) as usize;
        let y1 = s.y_range.1.min(height as i64 - 1);
        if y1 < 0 {
            continue;
        }
        for row in rows.iter_mut().take(y1 as usize + 1).skip(y0) {
            row.push(k as u32);
        }
    }

    struct RowOut {
        counts: Vec<usize>,
        entries: Vec<Contribution>,
        alpha: Vec<f64>,
        transmittance: Vec<f64>,
    }

    let row_out = par::map_collect(height, |y| {
        let mut out = RowOut {
            counts: Vec::with_capacity(width),
            entries: Vec::new(),
            alpha: Vec::with_capacity(width),
            transmittance: Vec::with_capacity(width),
        };
        for x in 0..width {
            let start = out.entries.len();
            let mut t = 1.0f64;
            let mut acc = 0.0f64;
            for &k in &rows[y] {
                let s = &splats[k as usize];
                let Some(g) = s.falloff(x as i64, y as i64) else {
                    continue;
                };
                let a = s.opacity * g;
                let w = t * a;
                out.entries.push(Contribution {
                    index: s.index,
                    weight: w,
                });
                acc += w;
                t *= 1.0 - a;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            out.counts.push(out.entries.len() - start);
            out.alpha.push(acc);
            out.transmittance.push(t);
        }
        out
    });

    let total: usize = row_out.iter().map(|r| r.entries.len()).sum();
    let mut offsets = Vec::with_capacity(width * height + 1);
    let mut entries = Vec::with_capacity(total);
    let mut alpha = Vec::with_capacity(width * height);
    let mut transmittance = Vec::with_capacity(width * height);
    offsets.push(0);
    for r in row_out {
        for c in r.counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        entries.extend(r.entries);
        alpha.extend(r.alpha);
        transmittance.extend(r.transmittance);
    }
    BlendWeights {
        width,
        height,
        point_count,
        offsets,
        entries,
        alpha,
        transmittance,
        by_point: OnceLock::new(),
    }
}

/// Row-major single-channel map.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Row-major boolean map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::validation(format!(
                "binary map has {} cells, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// `H x W x 6` feature image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Feature>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; FEATURE_DIM]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> &Feature {
        &self.data[y * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &FeatureMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }
}

/// Linear RGB image in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }
}

/// Blends point colors with precomputed weights over `background`.
pub fn render_color_with(weights: &BlendWeights, scene: &Scene, background: [f64; 3]) -> RgbImage {
    let points = scene.points();
    let width = weights.width;
    let data = par::map_collect(width * weights.height, |p| {
        let (x, y) = (p % width, p / width);
        let mut c = [0.0; 3];
        for t in weights.pixel(x, y) {
            let col = points[t.index as usize].color;
            for ch in 0..3 {
                c[ch] += t.weight * col[ch];
            }
        }
        let rest = 1.0 - weights.alpha(x, y);
        for ch in 0..3 {
            c[ch] += rest * background[ch];
        }
        c
    });
    RgbImage {
        width,
        height: weights.height,
        data,
    }
}

pub fn render_color(scene: &Scene, cam: &Camera, background: [f64; 3]) -> RgbImage {
    render_color_with(&compute_blend_weights(scene, cam), scene, background)
}

/// `M[u] = Σ w_i(u) features[i]`. Background feature is zero.
pub fn render_features(weights: &BlendWeights, features: &[Feature]) -> Result<FeatureMap> {
    if features.len() != weights.point_count {
        return Err(Error::validation(format!(
            "{} feature rows for {} points",
            features.len(),
            weights.point_count
        )));
    }
    let width = weights.width;
    let data = par::map_collect(width * weights.height, |p| {
        let (x, y) = (p % width, p / width);
        let mut m = [0.0; FEATURE_DIM];
        for t in weights.pixel(x, y) {
            let f = &features[t.index as usize];
            for c in 0..FEATURE_DIM {
                m[c] += t.weight * f[c];
            }
        }
        m
    });
    Ok(FeatureMap {
        width,
        height: weights.height,
        data,
    })
}

pub fn render_feature_map(scene: &Scene, cam: &Camera, features: &[Feature]) -> Result<FeatureMap> {
    if features.len() != scene.len() {
        return Err(Error::validation(format!(
            "{} feature rows for {} points",
            features.len(),
            scene.len()
        )));
    }
    render_features(&compute_blend_weights(scene, cam), features)
}

/// Feature map and alpha map of a point subset blended on its own.
pub fn render_subset(
    scene: &Scene,
    cam: &Camera,
    members: &[usize],
    features: &[Feature],
) -> Result<(FeatureMap, ScalarMap)> {
    let weights = compute_blend_weights_subset(scene, cam, members);
    Ok((render_features(&weights, features)?, weights.alpha_map()))
}

/// Single-instance map: only the instance's own points are blended, so the
/// instance renders fully even where other geometry occludes it.
pub fn render_single_instance(
    scene: &Scene,
    cam: &Camera,
    table: &InstanceTable,
    id: InstanceId,
) -> Result<(FeatureMap, ScalarMap)> {
    let record = table
        .get(id)
        .ok_or_else(|| Error::NotFound(format!("instance {id}")))?;
    render_subset(scene, cam, &record.members, &scene.features())
}

/// Adjoint of [`render_features`]: `grad[i] = Σ_u w_i(u) grad_map[u]`.
pub fn backprop_features(grad_map: &FeatureMap, weights: &BlendWeights) -> Result<Vec<Feature>> {
    if grad_map.width != weights.width || grad_map.height != weights.height {
        return Err(Error::validation("gradient map shape differs from weights"));
    }
    let pm = weights.point_major();
    Ok(par::map_collect(weights.point_count, |i| {
        let mut g = [0.0; FEATURE_DIM];
        for &(pixel, w) in &pm.entries[pm.offsets[i]..pm.offsets[i + 1]] {
            let gm = &grad_map.data[pixel as usize];
            for c in 0..FEATURE_DIM {
                g[c] += w * gm[c];
            }
        }
        g
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cam100() -> Camera {
        Camera::identity(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = GaussianPoint::isotropic([0.0, 0.0, 1.0], 0.01, 0.5, [1.0, 0.0, 0.0]);
        let proj = project_gaussian(&p, &cam100()).unwrap();
        assert_eq!(proj.mean2d, [50.0, 50.0]);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = cam100();
        for z in [0.0, -1.0, NEAR_PLANE * 0.5, NEAR_PLANE] {
            let p = GaussianPoint::isotropic([0.0, 0.0, z], 0.01, 0.5, [1.0; 3]);
            assert!(project_gaussian(&p, &cam).is_none(), "z = {z}");
        }
    }

    #[test]
    fn isotropic_covariance_matches_pinhole_scaling() {
        // on the optical axis J = diag(f/z, f/z) in the xy block
        let (s, z) = (0.05, 2.0);
        let p = GaussianPoint::isotropic([0.0, 0.0, z], s, 0.5, [1.0; 3]);
        let proj = project_gaussian(&p, &cam100()).unwrap();
        let expect = (100.0 * s / z).powi(2) + COV2D_DILATION;
        assert_relative_eq!(proj.cov2d[0][0], expect, max_relative = 1e-12);
        assert_relative_eq!(proj.cov2d[1][1], expect, max_relative = 1e-12);
        assert_relative_eq!(proj.cov2d[0][1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn single_gaussian_weight_is_opacity_at_center() {
        let p = GaussianPoint::isotropic([0.0, 0.0, 1.0], 0.02, 0.7, [1.0; 3]);
        let scene = Scene::new(vec![p]).unwrap();
        let w = compute_blend_weights(&scene, &cam100());
        let px = w.pixel(50, 50);
        assert_eq!(px.len(), 1);
        assert_relative_eq!(px[0].weight, 0.7, epsilon = 1e-15);
    }

    #[test]
    fn co_located_pair_expands_transmittance() {
        let p = GaussianPoint::isotropic([0.0, 0.0, 1.0], 0.02, 0.6, [1.0; 3]);
        let scene = Scene::new(vec![p.clone(), p]).unwrap();
        let w = compute_blend_weights(&scene, &cam100());
        // off-center pixel so G < 1
        let px = w.pixel(51, 50);
        assert_eq!(px.len(), 2);
        assert_eq!(px[0].index, 0, "index tie-break");
        let g = px[0].weight / 0.6;
        assert!(g < 1.0);
        assert_relative_eq!(px[1].weight, 0.6 * (1.0 - 0.6 * g) * g, max_relative = 1e-12);
    }

    #[test]
    fn empty_pixels_have_no_terms() {
        let p = GaussianPoint::isotropic([0.0, 0.0, 1.0], 0.01, 0.5, [1.0; 3]);
        let scene = Scene::new(vec![p]).unwrap();
        let w = compute_blend_weights(&scene, &cam100());
        assert!(w.pixel(0, 0).is_empty());
        assert_eq!(w.alpha(0, 0), 0.0);
        assert_eq!(w.final_transmittance(0, 0), 1.0);
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = Scene::default();
        let img = render_color(&scene, &cam100(), [0.1, 0.2, 0.3]);
        assert!(img.data.iter().all(|c| *c == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn opaque_red_center_is_red() {
        let p = GaussianPoint::isotropic([0.0, 0.0, 1.0], 0.05, 0.999, [1.0, 0.0, 0.0]);
        let scene = Scene::new(vec![p]).unwrap();
        let img = render_color(&scene, &cam100(), [0.0; 3]);
        let c = img.get(50, 50);
        assert_relative_eq!(c[0], 0.999, epsilon = 1e-12);
        assert_eq!(c[1], 0.0);
    }

    #[test]
    fn constant_features_render_as_alpha_times_value() {
        let pts: Vec<_> = (0..5)
            .map(|i| GaussianPoint::isotropic([0.01 * i as f64, 0.0, 1.0 + 0.1 * i as f64], 0.03, 0.5, [1.0; 3]))
            .collect();
        let scene = Scene::new(pts).unwrap();
        let cam = cam100();
        let v = [1.0, -2.0, 0.5, 0.0, 3.0, 0.25];
        let m = render_feature_map(&scene, &cam, &vec![v; 5]).unwrap();
        let w = compute_blend_weights(&scene, &cam);
        for y in 0..100 {
            for x in 0..100 {
                for c in 0..6 {
                    assert_relative_eq!(m.get(x, y)[c], w.alpha(x, y) * v[c], epsilon = 1e-12);
                }
            }
        }
        let zero = render_feature_map(&scene, &cam, &vec![[0.0; 6]; 5]).unwrap();
        assert!(zero.data.iter().flatten().all(|v| *v == 0.0));
        assert!(render_feature_map(&scene, &cam, &vec![v; 4]).is_err());
    }

    #[test]
    fn backprop_single_term() {
        let p = GaussianPoint::isotropic([0.0, 0.0, 1.0], 0.02, 0.7, [1.0; 3]);
        let scene = Scene::new(vec![p]).unwrap();
        // 1x1 image centered on the Gaussian
        let cam = Camera::identity(100.0, 100.0, 0.0, 0.0, 1, 1).unwrap();
        let w = compute_blend_weights(&scene, &cam);
        assert_relative_eq!(w.pixel(0, 0)[0].weight, 0.7, epsilon = 1e-15);
        let g = [1.0, 2.0, -3.0, 0.5, 0.0, 4.0];
        let map = FeatureMap {
            width: 1,
            height: 1,
            data: vec![g],
        };
        let grad = backprop_features(&map, &w).unwrap();
        for c in 0..6 {
            assert_relative_eq!(grad[0][c], 0.7 * g[c], epsilon = 1e-15);
        }
        let zero = backprop_features(&FeatureMap::zeros(1, 1), &w).unwrap();
        assert_eq!(zero[0], [0.0; 6]);
    }
}
