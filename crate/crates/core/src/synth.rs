//! Synthetic scenes with known ground truth.
//!
//! Instances are compact Gaussian blobs on the `z = 0` plane of a z-up
//! world, watched by a ring of cameras. Each view gets one mask per visible
//! instance: the pixels where the instance, rendered alone, has alpha at
//! least 0.5 and also carries the largest blending weight in the full
//! render. Masks therefore cover what a camera actually sees, the way an
//! image segmenter would, while the alone-rendered silhouettes are kept
//! separately as 2D evaluation targets.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::association::binarize;
use crate::error::{Error, Result};
use crate::losses::InstanceMask;
use crate::query::Embedding;
use crate::render::{compute_blend_weights, compute_blend_weights_subset, BinaryMap, BlendWeights};
use crate::scene::{Camera, GaussianPoint, Scene, View};
use crate::EMBEDDING_DIM;

const MAX_PLACEMENT_TRIES: usize = 10_000;
const SILHOUETTE_TAU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    /// Square grid, row-major from the origin corner.
    Grid { spacing: f64 },
    /// Uniform in `[-extent, extent]^2` with pairwise center distance at
    /// least `min_separation`.
    Random { extent: f64, min_separation: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub instances: usize,
    pub points_per_instance: usize,
    pub layout: Layout,
    /// Per-instance colors; a spread palette when absent.
    pub colors: Option<Vec<[f64; 3]>>,
    /// Per-instance class ids; instance `i` is class `i` when absent.
    pub class_ids: Option<Vec<usize>>,
    /// Names of the classes, `class_<k>` when absent.
    pub class_names: Option<Vec<String>>,
    /// Standard deviation of point offsets inside a blob.
    pub blob_radius: f64,
    /// Scale of each isotropic Gaussian.
    pub point_radius: f64,
    pub opacity: f64,
    pub width: u32,
    pub height: u32,
    pub cameras: usize,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    /// Put instance 1 between camera 0 and instance 0, offset sideways so it
    /// covers part of instance 0.
    pub occlusion: bool,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            instances: 8,
            points_per_instance: 250,
            layout: Layout::Grid { spacing: 1.0 },
            colors: None,
            class_ids: None,
            class_names: None,
            blob_radius: 0.15,
            point_radius: 0.05,
            opacity: 0.8,
            width: 64,
            height: 64,
            cameras: 6,
            elevation_deg: 40.0,
            fov_deg: 60.0,
            occlusion: false,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.points_per_instance == 0 {
            return Err(Error::validation("need at least one instance and one point"));
        }
        if self.cameras == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::validation("need at least one camera with a nonzero image"));
        }
        match self.layout {
            Layout::Grid { spacing } if !(spacing > 0.0) => {
                return Err(Error::validation("grid spacing must be positive"));
            }
            Layout::Random {
                extent,
                min_separation,
            } if !(min_separation > 0.0 && extent > 0.0) => {
                return Err(Error::validation(
                    "random layout needs positive extent and min separation",
                ));
            }
            _ => {}
        }
        if !(self.blob_radius > 0.0 && self.point_radius > 0.0) {
            return Err(Error::validation("radii must be positive"));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::validation("opacity must lie strictly inside (0, 1)"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::validation("field of view must lie in (0, 180)"));
        }
        if self.occlusion && self.instances < 2 {
            return Err(Error::validation("occlusion needs at least two instances"));
        }
        if let Some(c) = &self.colors {
            if c.len() != self.instances {
                return Err(Error::validation("one color per instance required"));
            }
            if c.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::validation("colors must lie in [0, 1]"));
            }
        }
        if let Some(ids) = &self.class_ids {
            if ids.len() != self.instances {
                return Err(Error::validation("one class id per instance required"));
            }
        }
        let classes = self.class_count();
        if classes > EMBEDDING_DIM {
            return Err(Error::validation(format!(
                "{classes} classes do not fit an orthonormal {EMBEDDING_DIM}-dim basis"
            )));
        }
        if let Some(names) = &self.class_names {
            if names.len() != classes {
                return Err(Error::validation(format!(
                    "{} class names for {classes} classes",
                    names.len()
                )));
            }
        }
        Ok(())
    }

    fn class_of(&self, i: usize) -> usize {
        self.class_ids.as_ref().map_or(i, |ids| ids[i])
    }

    pub fn class_count(&self) -> usize {
        (0..self.instances).map(|i| self.class_of(i) + 1).max().unwrap_or(0)
    }
}

/// A generated scene and everything known about it.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    /// Instance index of every point.
    pub labels: Vec<usize>,
    /// Class id of every instance.
    pub instance_classes: Vec<usize>,
    pub centers: Vec<[f64; 3]>,
    /// Views with their masks; mask embeddings are class embeddings.
    pub views: Vec<View>,
    /// Instance index behind each mask, parallel to `views[v].masks`.
    pub mask_owners: Vec<Vec<usize>>,
    /// `[view][instance]` alone-rendered alpha binarized at 0.5.
    pub silhouettes: Vec<Vec<BinaryMap>>,
    /// One unit vector per class, pairwise orthogonal.
    pub class_embeddings: Vec<Embedding>,
}

impl SyntheticScene {
    /// Point indices of each instance.
    pub fn instance_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centers.len()];
        for (p, l) in self.labels.iter().enumerate() {
            out[*l].push(p);
        }
        out
    }

    /// Per-point class labels.
    pub fn class_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|l| self.instance_classes[*l]).collect()
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn palette(n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|i| hsv(i as f64 * 0.618_033_988_75, 0.7, 0.9)).collect()
}

fn place_centers(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 3]>> {
    match spec.layout {
        Layout::Grid { spacing } => {
            let cols = (spec.instances as f64).sqrt().ceil() as usize;
            let rows = spec.instances.div_ceil(cols);
            let off_x = (cols - 1) as f64 * spacing / 2.0;
            let off_y = (rows - 1) as f64 * spacing / 2.0;
            Ok((0..spec.instances)
                .map(|i| {
                    let (r, c) = (i / cols, i % cols);
                    [c as f64 * spacing - off_x, r as f64 * spacing - off_y, 0.0]
                })
                .collect())
        }
        Layout::Random {
            extent,
            min_separation,
        } => {
            let mut centers: Vec<[f64; 3]> = Vec::with_capacity(spec.instances);
            let mut tries = 0;
            while centers.len() < spec.instances {
                tries += 1;
                if tries > MAX_PLACEMENT_TRIES {
                    return Err(Error::Generation(format!(
                        "placed {} of {} instances with separation {min_separation} in extent {extent}",
                        centers.len(),
                        spec.instances
                    )));
                }
                let c = [
                    rng.random_range(-extent..=extent),
                    rng.random_range(-extent..=extent),
                    0.0,
                ];
                let far = centers.iter().all(|o| {
                    let (dx, dy) = (o[0] - c[0], o[1] - c[1]);
                    (dx * dx + dy * dy).sqrt() >= min_separation
                });
                if far {
                    centers.push(c);
                }
            }
            Ok(centers)
        }
    }
}

/// Ring of cameras around the origin, all looking at it.
fn ring_cameras(spec: &SyntheticSceneSpec, centers: &[[f64; 3]]) -> Result<Vec<Camera>> {
    let reach = centers
        .iter()
        .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
        .fold(0.0, f64::max)
        + 3.0 * spec.blob_radius;
    let half_fov = spec.fov_deg.to_radians() / 2.0;
    let focal = spec.width.min(spec.height) as f64 / 2.0 / half_fov.tan();
    // far enough that a sphere of radius `reach` fits inside the frustum
    let distance = reach / (0.9 * half_fov).sin();
    let elev = spec.elevation_deg.to_radians();
    (0..spec.cameras)
        .map(|k| {
            let az = 2.0 * PI * k as f64 / spec.cameras as f64;
            let eye = [
                distance * elev.cos() * az.cos(),
                distance * elev.cos() * az.sin(),
                distance * elev.sin(),
            ];
            Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], focal, spec.width, spec.height)
        })
        .collect()
}

/// Moves instance 1 onto the segment from instance 0 to camera 0, shifted
/// sideways by one blob radius so the cover is partial.
fn place_occluder(spec: &SyntheticSceneSpec, centers: &mut [[f64; 3]], cam: &Camera) {
    let target = centers[0];
    let eye = cam.center();
    let dir: Vec<f64> = (0..3).map(|a| eye[a] - target[a]).collect();
    let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    let dir: Vec<f64> = dir.iter().map(|d| d / len).collect();
    // horizontal direction perpendicular to the viewing ray
    let side = {
        let s = [-dir[1], dir[0], 0.0];
        let n = (s[0] * s[0] + s[1] * s[1]).sqrt().max(1e-12);
        [s[0] / n, s[1] / n, 0.0]
    };
    let along = 6.0 * spec.blob_radius;
    let lateral = 1.5 * spec.blob_radius;
    centers[1] = std::array::from_fn(|a| target[a] + along * dir[a] + lateral * side[a]);
}

fn sample_blob(
    spec: &SyntheticSceneSpec,
    center: [f64; 3],
    color: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> Vec<GaussianPoint> {
    let normal = Normal::new(0.0, spec.blob_radius).expect("positive radius");
    let limit = 2.5 * spec.blob_radius;
    (0..spec.points_per_instance)
        .map(|_| {
            let offset: [f64; 3] = std::array::from_fn(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= limit {
                    break v;
                }
            });
            GaussianPoint::isotropic(
                std::array::from_fn(|a| center[a] + offset[a]),
                spec.point_radius,
                spec.opacity,
                color,
            )
        })
        .collect()
}

/// `count` pairwise-orthogonal unit vectors in `EMBEDDING_DIM` dimensions.
pub fn orthonormal_embeddings(count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count > EMBEDDING_DIM {
        return Err(Error::validation(format!(
            "cannot build {count} orthonormal vectors in {EMBEDDING_DIM} dims"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| normal.sample(&mut rng)).collect();
        // two Gram-Schmidt passes keep round-off orthogonality near 1e-16
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Ok(basis)
}

/// Per-pixel instance with the largest summed blending weight.
fn dominant_owner(weights: &BlendWeights, labels: &[usize], instances: usize) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(weights.width() * weights.height());
    let mut acc = vec![0.0; instances];
    for y in 0..weights.height() {
        for x in 0..weights.width() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for c in weights.pixel(x, y) {
                acc[labels[c.index as usize]] += c.weight;
            }
            let best = acc
                .iter()
                .enumerate()
                .filter(|(_, w)| **w > 0.0)
                .fold(None, |best: Option<(usize, f64)>, (i, w)| match best {
                    Some((_, bw)) if bw >= *w => best,
                    _ => Some((i, *w)),
                });
            out.push(best.map(|(i, _)| i));
        }
    }
    out
}

pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centers = place_centers(spec, &mut rng)?;
    let cameras = ring_cameras(spec, &centers)?;
    if spec.occlusion {
        place_occluder(spec, &mut centers, &cameras[0]);
    }
    let colors = spec.colors.clone().unwrap_or_else(|| palette(spec.instances));

    let mut points = Vec::with_capacity(spec.instances * spec.points_per_instance);
    let mut labels = Vec::with_capacity(points.capacity());
    for (i, (c, color)) in centers.iter().zip(&colors).enumerate() {
        points.extend(sample_blob(spec, *c, *color, &mut rng));
        labels.extend(std::iter::repeat_n(i, spec.points_per_instance));
    }
    let scene = Scene::new(points)?;

    let instance_classes: Vec<usize> = (0..spec.instances).map(|i| spec.class_of(i)).collect();
    let classes = spec.class_count();
    let class_embeddings = orthonormal_embeddings(classes, spec.seed ^ 0x5eed_c1a5)?
        .into_iter()
        .enumerate()
        .map(|(k, v)| {
            let label = spec
                .class_names
                .as_ref()
                .map_or_else(|| format!("class_{k}"), |n| n[k].clone());
            Embedding::new(v, label)
        })
        .collect::<Result<Vec<_>>>()?;

    let members: Vec<Vec<usize>> = (0..spec.instances)
        .map(|i| (i * spec.points_per_instance..(i + 1) * spec.points_per_instance).collect())
        .collect();
    let mut views = Vec::with_capacity(cameras.len());
    let mut mask_owners = Vec::with_capacity(cameras.len());
    let mut silhouettes = Vec::with_capacity(cameras.len());
    for (v, cam) in cameras.iter().enumerate() {
        let full = compute_blend_weights(&scene, cam);
        let owner = dominant_owner(&full, &labels, spec.instances);
        let sil: Vec<BinaryMap> = members
            .iter()
            .map(|m| binarize(&compute_blend_weights_subset(&scene, cam, m).alpha_map(), SILHOUETTE_TAU))
            .collect();
        let mut masks = Vec::new();
        let mut owners = Vec::new();
        for (i, s) in sil.iter().enumerate() {
            let data: Vec<bool> = s
                .data
                .iter()
                .zip(&owner)
                .map(|(inside, o)| *inside && *o == Some(i))
                .collect();
            if data.iter().any(|b| *b) {
                let emb = class_embeddings[instance_classes[i]].vector.clone();
                masks.push(InstanceMask::new(
                    BinaryMap::new(s.width, s.height, data)?,
                    v,
                    Some(emb),
                )?);
                owners.push(i);
            }
        }
        views.push(View {
            camera: cam.clone(),
            masks,
        });
        mask_owners.push(owners);
        silhouettes.push(sil);
    }

    Ok(SyntheticScene {
        scene,
        cameras,
        labels,
        instance_classes,
        centers,
        views,
        mask_owners,
        silhouettes,
        class_embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(instances: usize, cameras: usize) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            instances,
            points_per_instance: 40,
            cameras,
            width: 32,
            height: 32,
            ..Default::default()
        }
    }

    #[test]
    fn two_instances_one_camera_disjoint_masks() {
        let s = generate_synthetic(&tiny(2, 1)).unwrap();
        let masks = &s.views[0].masks;
        assert_eq!(masks.len(), 2);
        assert!(masks[0]
            .mask
            .data
            .iter()
            .zip(&masks[1].mask.data)
            .all(|(a, b)| !(*a && *b)));
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_synthetic(&tiny(3, 2)).unwrap();
        let b = generate_synthetic(&tiny(3, 2)).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.cameras, b.cameras);
        let c = generate_synthetic(&SyntheticSceneSpec { seed: 9, ..tiny(3, 2) }).unwrap();
        assert_ne!(a.scene, c.scene);
    }

    #[test]
    fn embeddings_orthonormal() {
        let e = orthonormal_embeddings(10, 1).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let dot: f64 = e[i].iter().zip(&e[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crowded_random_layout_fails() {
        let spec = SyntheticSceneSpec {
            instances: 50,
            layout: Layout::Random {
                extent: 0.5,
                min_separation: 1.0,
            },
            ..tiny(50, 1)
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn occluder_covers_part_of_target() {
        let spec = SyntheticSceneSpec {
            occlusion: true,
            ..tiny(3, 4)
        };
        let s = generate_synthetic(&spec).unwrap();
        let sil = &s.silhouettes[0];
        let overlap = sil[0].data.iter().zip(&sil[1].data).filter(|(a, b)| **a && **b).count();
        let own = sil[0].count();
        assert!(overlap > 0 && overlap < own, "overlap {overlap} of {own}");
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = tiny(2, 1);
        s.layout = Layout::Random {
            extent: 1.0,
            min_separation: 0.0,
        };
        assert!(s.validate().is_err());
        let s = SyntheticSceneSpec {
            colors: Some(vec![[0.0; 3]]),
            ..tiny(2, 1)
        };
        assert!(s.validate().is_err());
    }
}
