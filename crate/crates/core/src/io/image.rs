//! 8-bit PNG export of color renders and feature maps.

use std::path::Path;

use nalgebra::{SMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::render::{FeatureMap, RgbImage};
use crate::FEATURE_DIM;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(img: &RgbImage) -> ::image::RgbImage {
    let raw = img.data.iter().flat_map(|p| p.map(to_u8)).collect();
    ::image::RgbImage::from_raw(img.width as u32, img.height as u32, raw).expect("sized buffer")
}

/// Saves a render, clamped to `[0, 1]` and quantized to 8 bits.
pub fn export_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    to_rgb8(img).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Three-channel visualization of a feature map.
#[derive(Clone, Debug)]
pub struct FeaturePca {
    pub image: RgbImage,
    /// Rows are the top principal directions, orthonormal.
    pub projection: [[f64; FEATURE_DIM]; 3],
}

/// Projects the centered features onto their top three principal
/// directions and min-max normalizes each channel over the image. Channels
/// with no spread render as 0.
pub fn feature_pca(map: &FeatureMap) -> FeaturePca {
    let n = map.data.len().max(1) as f64;
    let mut mean = [0.0; FEATURE_DIM];
    for f in &map.data {
        for c in 0..FEATURE_DIM {
            mean[c] += f[c] / n;
        }
    }
    let mut cov = SMatrix::<f64, FEATURE_DIM, FEATURE_DIM>::zeros();
    for f in &map.data {
        let d = SMatrix::<f64, FEATURE_DIM, 1>::from_fn(|c, _| f[c] - mean[c]);
        cov += d * d.transpose() / n;
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..FEATURE_DIM).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));
    let projection: [[f64; FEATURE_DIM]; 3] =
        std::array::from_fn(|k| std::array::from_fn(|c| eig.eigenvectors[(c, order[k])]));

    let projected: Vec<[f64; 3]> = map
        .data
        .iter()
        .map(|f| {
            std::array::from_fn(|k| (0..FEATURE_DIM).map(|c| projection[k][c] * (f[c] - mean[c])).sum())
        })
        .collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &projected {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let data = projected
        .iter()
        .map(|p| {
            std::array::from_fn(|k| {
                let range = hi[k] - lo[k];
                if range > 1e-12 {
                    (p[k] - lo[k]) / range
                } else {
                    0.0
                }
            })
        })
        .collect();
    FeaturePca {
        image: RgbImage {
            width: map.width,
            height: map.height,
            data,
        },
        projection,
    }
}

pub fn export_feature_pca(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    export_image(&feature_pca(map).image, path)
}
