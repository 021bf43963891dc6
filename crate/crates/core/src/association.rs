//! Training-free 2D-3D association.
//!
//! Each discrete 3D instance is rendered on its own into every view and
//! scored against that view's masks by IoU times a feature-agreement term.
//! The best-scoring mask per view donates its embedding; contributions are
//! fused across views by a score-weighted mean.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::codebook::TwoLevelCodebook;
use crate::error::{Error, Result};
use crate::par;
use crate::render::{
    compute_blend_weights, compute_blend_weights_subset, render_features, BinaryMap, FeatureMap,
    ScalarMap,
};
use crate::scene::{InstanceId, Scene, View};
use crate::{Feature, EMBEDDING_DIM, FEATURE_DIM};

/// One view's best match for an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub view: u32,
    pub mask: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct InstanceRecord {
    /// Point indices, ascending.
    pub members: Vec<usize>,
    /// Unit-norm language embedding, when any view matched.
    pub embedding: Option<Vec<f64>>,
    pub audit: Vec<AuditEntry>,
}

/// Instances of a scene: membership, embeddings and association audit.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InstanceTable {
    instances: BTreeMap<InstanceId, InstanceRecord>,
}

impl InstanceTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// One record per populated codebook instance, without embeddings.
    pub fn from_codebook(codebook: &TwoLevelCodebook) -> Self {
        let instances = codebook
            .instances()
            .into_iter()
            .map(|(id, members)| {
                (
                    id,
                    InstanceRecord {
                        members,
                        ..Default::default()
                    },
                )
            })
            .collect();
        Self { instances }
    }

    /// Instance `(label, 0)` per distinct label.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut t = Self::new();
        for (i, &l) in labels.iter().enumerate() {
            t.instances
                .entry(InstanceId::new(l as u32, 0))
                .or_default()
                .members
                .push(i);
        }
        t
    }

    pub fn get(&self, id: InstanceId) -> Option<&InstanceRecord> {
        self.instances.get(&id)
    }

    pub fn get_mut(&mut self, id: InstanceId) -> Option<&mut InstanceRecord> {
        self.instances.get_mut(&id)
    }

    pub fn contains(&self, id: InstanceId) -> bool {
        self.instances.contains_key(&id)
    }

    pub fn insert(&mut self, id: InstanceId, record: InstanceRecord) -> Result<()> {
        if let Some(e) = &record.embedding {
            check_unit(e)?;
        }
        self.instances.insert(id, record);
        Ok(())
    }

    pub fn remove(&mut self, id: InstanceId) -> Option<InstanceRecord> {
        self.instances.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (InstanceId, &InstanceRecord)> {
        self.instances.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn has_embeddings(&self) -> bool {
        self.instances.values().any(|r| r.embedding.is_some())
    }

    /// Instance of every point, `None` for points no instance claims.
    pub fn point_instances(&self, point_count: usize) -> Vec<Option<InstanceId>> {
        let mut out = vec![None; point_count];
        for (id, r) in &self.instances {
            for &m in &r.members {
                if m < point_count {
                    out[m] = Some(*id);
                }
            }
        }
        out
    }

    /// Checks that member sets are disjoint, in range, and cover every point.
    pub fn validate_partition(&self, point_count: usize) -> Result<()> {
        let mut seen = vec![false; point_count];
        for (id, r) in &self.instances {
            for &m in &r.members {
                if m >= point_count {
                    return Err(Error::validation(format!(
                        "instance {id} member {m} out of range"
                    )));
                }
                if std::mem::replace(&mut seen[m], true) {
                    return Err(Error::validation(format!(
                        "point {m} belongs to more than one instance"
                    )));
                }
            }
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!("point {p} has no instance")));
        }
        Ok(())
    }
}

fn check_unit(e: &[f64]) -> Result<()> {
    if e.len() != EMBEDDING_DIM {
        return Err(Error::validation(format!(
            "embedding has {} dims, expected {EMBEDDING_DIM}",
            e.len()
        )));
    }
    let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-4 {
        return Err(Error::validation(format!("embedding norm {n} is not 1")));
    }
    Ok(())
}

/// `true` where `alpha > tau`.
pub fn binarize(alpha: &ScalarMap, tau: f64) -> BinaryMap {
    BinaryMap {
        width: alpha.width,
        height: alpha.height,
        data: alpha.data.iter().map(|a| *a > tau).collect(),
    }
}

/// `|a ∧ b| / |a ∨ b|`, 0 when both are empty.
pub fn iou(a: &BinaryMap, b: &BinaryMap) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::validation("IoU of differently shaped maps"));
    }
    let (inter, union) = overlap_counts(a, b);
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

fn overlap_counts(a: &BinaryMap, b: &BinaryMap) -> (usize, usize) {
    a.data.iter().zip(&b.data).fold((0, 0), |(i, u), (x, y)| {
        (i + (*x && *y) as usize, u + (*x || *y) as usize)
    })
}

/// Feature-filled mask: the pseudo map inside the mask, zero outside.
pub fn fill_mask_with_pseudo(mask: &BinaryMap, pseudo: &FeatureMap) -> Result<FeatureMap> {
    if !mask.same_shape(pseudo.width, pseudo.height) {
        return Err(Error::validation("mask and pseudo map shapes differ"));
    }
    Ok(FeatureMap {
        width: pseudo.width,
        height: pseudo.height,
        data: pseudo
            .data
            .iter()
            .zip(&mask.data)
            .map(|(f, b)| if *b { *f } else { [0.0; FEATURE_DIM] })
            .collect(),
    })
}

/// Which terms of the score are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// IoU times feature agreement.
    #[default]
    Combined,
    /// Feature distance forced to 0: pure IoU.
    IouOnly,
    /// IoU forced to 1 wherever the supports overlap: pure feature agreement.
    FeatureOnly,
}

/// `S = IoU(π(alpha_i), B_j) · (1 − D)` where `D` is the mean per-pixel L1
/// distance between the instance map and the feature-filled mask over the
/// intersection of both supports, clamped to `[0, 1]`. Zero when the
/// supports do not intersect.
pub fn score(
    instance_map: &FeatureMap,
    instance_alpha: &ScalarMap,
    mask: &BinaryMap,
    filled: &FeatureMap,
    tau: f64,
    mode: ScoreMode,
) -> Result<f64> {
    let support = binarize(instance_alpha, tau);
    score_support(instance_map, &support, mask, filled, mode)
}

fn score_support(
    instance_map: &FeatureMap,
    support: &BinaryMap,
    mask: &BinaryMap,
    filled: &FeatureMap,
    mode: ScoreMode,
) -> Result<f64> {
    if !instance_map.same_shape(filled)
        || !support.same_shape(mask.width, mask.height)
        || !mask.same_shape(filled.width, filled.height)
    {
        return Err(Error::validation("score inputs have differing shapes"));
    }
    let (inter, union) = overlap_counts(support, mask);
    if inter == 0 {
        return Ok(0.0);
    }
    let overlap = match mode {
        ScoreMode::FeatureOnly => 1.0,
        _ => inter as f64 / union as f64,
    };
    let distance = match mode {
        ScoreMode::IouOnly => 0.0,
        _ => {
            let mut total = 0.0;
            for p in 0..support.data.len() {
                if support.data[p] && mask.data[p] {
                    let a = &instance_map.data[p];
                    let b = &filled.data[p];
                    total += (0..FEATURE_DIM).map(|c| (a[c] - b[c]).abs()).sum::<f64>();
                }
            }
            (total / inter as f64).clamp(0.0, 1.0)
        }
    };
    Ok(overlap * (1.0 - distance))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationConfig {
    /// Binarization threshold on single-instance alpha.
    pub tau: f64,
    /// Scores at or below this never donate an embedding.
    pub min_score: f64,
    pub mode: ScoreMode,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            min_score: 0.1,
            mode: ScoreMode::Combined,
        }
    }
}

/// Best mask per (view, instance); `None` when nothing clears `min_score`.
pub fn match_view(
    scene: &Scene,
    instances: &[(InstanceId, Vec<usize>)],
    quantized: &[Feature],
    pseudo: &[Feature],
    view: &View,
    cfg: &AssociationConfig,
) -> Result<Vec<Option<(usize, f64)>>> {
    let cam = &view.camera;
    let pseudo_map = render_features(&compute_blend_weights(scene, cam), pseudo)?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut filled = Vec::with_capacity(view.masks.len());
    for m in &view.masks {
        if !m.mask.same_shape(w, h) {
            return Err(Error::validation(format!(
                "mask of view {} is {}x{}, camera is {w}x{h}",
                m.view_id, m.mask.width, m.mask.height
            )));
        }
        filled.push(fill_mask_with_pseudo(&m.mask, &pseudo_map)?);
    }
    let usable: Vec<usize> = (0..view.masks.len())
        .filter(|j| view.masks[*j].embedding.is_some())
        .collect();

    let results = par::map_collect(instances.len(), |k| -> Result<Option<(usize, f64)>> {
        let weights = compute_blend_weights_subset(scene, cam, &instances[k].1);
        let map = render_features(&weights, quantized)?;
        let support = binarize(&weights.alpha_map(), cfg.tau);
        let mut best: Option<(usize, f64)> = None;
        for &j in &usable {
            let s = score_support(&map, &support, &view.masks[j].mask, &filled[j], cfg.mode)?;
            if s > cfg.min_score && best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        Ok(best)
    });
    results.into_iter().collect()
}

/// Attaches mask embeddings to the codebook's instances.
///
/// Instance maps are rendered from the quantized features; feature-filled
/// masks carry the pseudo (stage-1) features rendered over the full scene.
pub fn associate(
    scene: &Scene,
    codebook: &TwoLevelCodebook,
    views: &[View],
    pseudo: &[Feature],
    cfg: &AssociationConfig,
) -> Result<InstanceTable> {
    if codebook.point_count() != scene.len() || pseudo.len() != scene.len() {
        return Err(Error::validation(format!(
            "codebook covers {} points and pseudo features {}, scene has {}",
            codebook.point_count(),
            pseudo.len(),
            scene.len()
        )));
    }
    let skipped: usize = views
        .iter()
        .flat_map(|v| &v.masks)
        .filter(|m| m.embedding.is_none())
        .count();
    if skipped > 0 {
        warn!("{skipped} masks lack embeddings and are skipped");
    }

    let quantized = codebook.quantize();
    let mut table = InstanceTable::from_codebook(codebook);
    let instances: Vec<(InstanceId, Vec<usize>)> =
        table.iter().map(|(id, r)| (id, r.members.clone())).collect();

    let mut sums: Vec<(Vec<f64>, f64)> = vec![(vec![0.0; EMBEDDING_DIM], 0.0); instances.len()];
    for (v, view) in views.iter().enumerate() {
        let matches = match_view(scene, &instances, &quantized, pseudo, view, cfg)?;
        for (k, m) in matches.into_iter().enumerate() {
            let Some((j, s)) = m else { continue };
            let emb = view.masks[j].embedding.as_ref().expect("usable mask");
            for (acc, e) in sums[k].0.iter_mut().zip(emb) {
                *acc += s * e;
            }
            sums[k].1 += s;
            let record = table.get_mut(instances[k].0).expect("instance exists");
            record.audit.push(AuditEntry {
                view: v as u32,
                mask: j as u32,
                score: s,
            });
        }
    }
    for ((id, _), (sum, weight)) in instances.iter().zip(sums) {
        if weight <= 0.0 {
            continue;
        }
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            table.get_mut(*id).expect("instance exists").embedding =
                Some(sum.into_iter().map(|v| v / norm).collect());
        }
    }
    Ok(table)
}
