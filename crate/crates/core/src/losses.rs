//! Mask-supervised losses on rendered feature maps.
//!
//! Every loss returns its value together with the exact gradient with
//! respect to the feature map; chaining through
//! [`crate::render::backprop_features`] gives the gradient with respect to
//! the per-Gaussian features.

use std::borrow::Borrow;

use crate::error::{Error, Result};
use crate::render::{BinaryMap, FeatureMap};
use crate::{Feature, EMBEDDING_DIM, FEATURE_DIM};

/// Floor inside the inter-mask denominator so coincident means stay finite.
pub const CONTRASTIVE_EPS: f64 = 1e-6;

const EMBEDDING_NORM_TOL: f64 = 1e-4;

/// One boolean segment of one view, optionally carrying a language
/// embedding of the segment.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub mask: BinaryMap,
    pub view_id: usize,
    pub embedding: Option<Vec<f64>>,
}

impl InstanceMask {
    pub fn new(mask: BinaryMap, view_id: usize, embedding: Option<Vec<f64>>) -> Result<Self> {
        if let Some(e) = &embedding {
            if e.len() != EMBEDDING_DIM {
                return Err(Error::validation(format!(
                    "mask embedding has {} dims, expected {EMBEDDING_DIM}",
                    e.len()
                )));
            }
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > EMBEDDING_NORM_TOL {
                return Err(Error::validation(format!(
                    "mask embedding norm {norm} is not 1"
                )));
            }
        }
        Ok(Self {
            mask,
            view_id,
            embedding,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.count()
    }
}

/// Loss value and its gradient w.r.t. the feature map.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad: FeatureMap,
}

fn check_mask(map: &FeatureMap, mask: &InstanceMask) -> Result<usize> {
    if !mask.mask.same_shape(map.width, map.height) {
        return Err(Error::validation(format!(
            "mask is {}x{}, feature map is {}x{}",
            mask.mask.width, mask.mask.height, map.width, map.height
        )));
    }
    match mask.pixel_count() {
        0 => Err(Error::validation("mask has no true pixels")),
        n => Ok(n),
    }
}

/// Channel-wise mean of `map` over the mask's true pixels.
pub fn mask_mean_feature(map: &FeatureMap, mask: &InstanceMask) -> Result<Feature> {
    let count = check_mask(map, mask)?;
    let mut sum = [0.0; FEATURE_DIM];
    for (m, _) in map.data.iter().zip(&mask.mask.data).filter(|(_, b)| **b) {
        for c in 0..FEATURE_DIM {
            sum[c] += m[c];
        }
    }
    Ok(sum.map(|s| s / count as f64))
}

/// Intra-mask smoothing: `Σ_i Σ_{u ∈ B_i} ‖M(u) − mean_i‖²`.
///
/// The gradient differentiates through the mean as well; that term vanishes
/// because deviations from a mean sum to zero, leaving `2 (M(u) − mean_i)`.
pub fn intra_mask_loss<M: Borrow<InstanceMask>>(map: &FeatureMap, masks: &[M]) -> Result<LossOutput> {
    let mut grad = FeatureMap::zeros(map.width, map.height);
    let mut value = 0.0;
    for mask in masks {
        let mask = mask.borrow();
        let mean = mask_mean_feature(map, mask)?;
        for ((m, g), _) in map
            .data
            .iter()
            .zip(grad.data.iter_mut())
            .zip(&mask.mask.data)
            .filter(|(_, b)| **b)
        {
            for c in 0..FEATURE_DIM {
                let d = m[c] - mean[c];
                value += d * d;
                g[c] += 2.0 * d;
            }
        }
    }
    Ok(LossOutput { value, grad })
}

/// Inter-mask contrastive loss:
/// `1/(m(m+1)) Σ_i Σ_{j≠i} 1 / (‖mean_i − mean_j‖² + ε)`.
pub fn inter_mask_loss<M: Borrow<InstanceMask>>(map: &FeatureMap, masks: &[M]) -> Result<LossOutput> {
    let m = masks.len();
    if m < 2 {
        return Err(Error::validation(format!(
            "inter-mask loss needs at least 2 masks, got {m}"
        )));
    }
    let means = masks
        .iter()
        .map(|b| mask_mean_feature(map, b.borrow()))
        .collect::<Result<Vec<_>>>()?;
    let norm = 1.0 / (m * (m + 1)) as f64;

    let mut value = 0.0;
    let mut grad_means = vec![[0.0; FEATURE_DIM]; m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let diff: Feature = std::array::from_fn(|c| means[i][c] - means[j][c]);
            let denom = diff.iter().map(|d| d * d).sum::<f64>() + CONTRASTIVE_EPS;
            value += norm / denom;
            // the (i, j) term depends on both means; its derivative w.r.t.
            // mean_i is −2 diff / denom², and the opposite for mean_j
            let scale = -2.0 * norm / (denom * denom);
            for c in 0..FEATURE_DIM {
                grad_means[i][c] += scale * diff[c];
                grad_means[j][c] -= scale * diff[c];
            }
        }
    }

    let mut grad = FeatureMap::zeros(map.width, map.height);
    for (mask, gm) in masks.iter().zip(&grad_means) {
        let mask = mask.borrow();
        let inv = 1.0 / mask.pixel_count() as f64;
        for (g, _) in grad.data.iter_mut().zip(&mask.mask.data).filter(|(_, b)| **b) {
            for c in 0..FEATURE_DIM {
                g[c] += gm[c] * inv;
            }
        }
    }
    Ok(LossOutput { value, grad })
}

/// Pseudo-feature loss `‖M_p − M_c‖₁` over every entry, with gradient
/// `sign(M_c − M_p)` w.r.t. `M_c` (zero at ties).
pub fn pseudo_loss(current: &FeatureMap, pseudo: &FeatureMap) -> Result<LossOutput> {
    if !current.same_shape(pseudo) {
        return Err(Error::validation(format!(
            "pseudo map is {}x{}, current map is {}x{}",
            pseudo.width, pseudo.height, current.width, current.height
        )));
    }
    let mut value = 0.0;
    let data = current
        .data
        .iter()
        .zip(&pseudo.data)
        .map(|(c, p)| {
            std::array::from_fn(|k| {
                let d = c[k] - p[k];
                value += d.abs();
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok(LossOutput {
        value,
        grad: FeatureMap {
            width: current.width,
            height: current.height,
            data,
        },
    })
}
