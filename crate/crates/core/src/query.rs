//! Open-vocabulary selection, point classification, click selection and the
//! evaluation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::association::{binarize, iou, InstanceTable};
use crate::error::{Error, Result};
use crate::render::{blend_splats, compute_blend_weights, compute_blend_weights_subset, BinaryMap};
use crate::scene::{Camera, InstanceId, Scene};
use crate::EMBEDDING_DIM;

/// Default cosine threshold for threshold-mode selection.
pub const DEFAULT_THRESHOLD: f64 = 0.23;
/// A click selects nothing unless the dominant instance's accumulated
/// weight at the pixel exceeds this.
pub const CLICK_MIN_WEIGHT: f64 = 0.1;
/// A 2D query counts as accurate at IoU of at least this.
pub const ACCURACY_IOU: f64 = 0.25;

/// Unit-norm language embedding with a text label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub label: String,
}

impl Embedding {
    pub fn new(vector: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if vector.len() != EMBEDDING_DIM {
            return Err(Error::validation(format!(
                "embedding has {} dims, expected {EMBEDDING_DIM}",
                vector.len()
            )));
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::validation(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self {
            vector,
            label: label.into(),
        })
    }

    /// Scales a nonzero vector to unit norm.
    pub fn normalized(vector: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::validation("cannot normalize a zero embedding"));
        }
        Self::new(vector.into_iter().map(|v| v / norm).collect(), label)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "theta")]
pub enum SelectMode {
    /// Members of the single most similar instance.
    Top1,
    /// Members of every instance with cosine at least `theta`.
    Threshold(f64),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Selected instances with their cosine, most similar first.
    pub instances: Vec<(InstanceId, f64)>,
    /// Member points of the selected instances, ascending.
    pub points: Vec<usize>,
}

/// Selects instances by cosine similarity between `query` and instance
/// embeddings. Empty when no instance carries an embedding.
pub fn text_select(table: &InstanceTable, query: &[f64], mode: SelectMode) -> Result<Selection> {
    if query.len() != EMBEDDING_DIM {
        return Err(Error::validation(format!(
            "query has {} dims, expected {EMBEDDING_DIM}",
            query.len()
        )));
    }
    let mut scored: Vec<(InstanceId, f64)> = table
        .iter()
        .filter_map(|(id, r)| r.embedding.as_ref().map(|e| (id, cosine(query, e))))
        .collect();
    // stable: equal cosines keep ascending instance order
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let instances: Vec<(InstanceId, f64)> = match mode {
        SelectMode::Top1 => scored.into_iter().take(1).collect(),
        SelectMode::Threshold(theta) => scored.into_iter().filter(|(_, s)| *s >= theta).collect(),
    };
    let mut points: Vec<usize> = instances
        .iter()
        .flat_map(|(id, _)| table.get(*id).expect("scored instance exists").members.iter().copied())
        .collect();
    points.sort_unstable();
    Ok(Selection { instances, points })
}

/// Labels every point with the class whose embedding is most similar to its
/// instance's embedding (lowest class index on ties). Points of instances
/// without an embedding, or of no instance, are `None`.
pub fn classify_points(
    table: &InstanceTable,
    point_count: usize,
    classes: &[Embedding],
) -> Result<Vec<Option<usize>>> {
    if classes.is_empty() {
        return Err(Error::validation("at least one class is required"));
    }
    let mut labels = vec![None; point_count];
    for (_, r) in table.iter() {
        let Some(e) = &r.embedding else { continue };
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for (c, class) in classes.iter().enumerate() {
            let s = cosine(e, &class.vector);
            if s > best_s {
                best_s = s;
                best = c;
            }
        }
        for &m in &r.members {
            if m < point_count {
                labels[m] = Some(best);
            }
        }
    }
    Ok(labels)
}

/// Instance under pixel `(u, v)`: the instance holding the largest share of
/// the pixel's full-scene blend weight, if that share exceeds
/// [`CLICK_MIN_WEIGHT`].
pub fn click_select(
    scene: &Scene,
    table: &InstanceTable,
    cam: &Camera,
    pixel: (u32, u32),
) -> Result<Option<InstanceId>> {
    let (u, v) = pixel;
    if u >= cam.width || v >= cam.height {
        return Err(Error::validation(format!(
            "pixel ({u}, {v}) outside {}x{}",
            cam.width, cam.height
        )));
    }
    let owner = table.point_instances(scene.len());
    // blending a single pixel only needs the splats that touch it
    let probe = Camera {
        cx: cam.cx - u as f64,
        cy: cam.cy - v as f64,
        width: 1,
        height: 1,
        ..cam.clone()
    };
    let splats = crate::render::sorted_splats(scene, &probe, None);
    let weights = blend_splats(&splats, scene.len(), &probe);
    let mut totals: BTreeMap<InstanceId, f64> = BTreeMap::new();
    for t in weights.pixel(0, 0) {
        if let Some(id) = owner[t.index as usize] {
            *totals.entry(id).or_default() += t.weight;
        }
    }
    let best = totals
        .into_iter()
        .fold(None::<(InstanceId, f64)>, |acc, (id, w)| match acc {
            Some((_, bw)) if bw >= w => acc,
            _ => Some((id, w)),
        });
    Ok(best.filter(|(_, w)| *w > CLICK_MIN_WEIGHT).map(|(id, _)| id))
}

/// Per-class (or per-query) score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub iou: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassScore>,
    pub miou: f64,
    pub macc: f64,
    /// `confusion[gt][pred]`; the last column counts unassigned points.
    pub confusion: Vec<Vec<usize>>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.per_class {
            writeln!(f, "class {:>3}  IoU {:.4}  Acc {:.4}", c.class, c.iou, c.accuracy)?;
        }
        write!(f, "mIoU {:.4}  mAcc {:.4}", self.miou, self.macc)
    }
}

/// One text query to evaluate in 2D: the selected points and the GT mask of
/// the queried object in each view (`None` where it is not annotated).
#[derive(Clone, Debug)]
pub struct QueryCase<'a> {
    pub class: usize,
    pub selected: &'a [usize],
    pub gt_masks: Vec<Option<&'a BinaryMap>>,
}

/// Renders each selection into every annotated view, binarizes at `tau`,
/// and compares with the GT mask. A query's IoU is its mean over annotated
/// views and its accuracy the fraction of those views with IoU at least
/// [`ACCURACY_IOU`]; the report averages over queries.
pub fn eval_2d(scene: &Scene, cams: &[Camera], cases: &[QueryCase<'_>], tau: f64) -> Result<EvalReport> {
    let mut per_class = Vec::with_capacity(cases.len());
    for case in cases {
        if case.gt_masks.len() != cams.len() {
            return Err(Error::validation("one GT mask slot per camera required"));
        }
        let (mut iou_sum, mut hits, mut views) = (0.0, 0usize, 0usize);
        for (cam, gt) in cams.iter().zip(&case.gt_masks) {
            let Some(gt) = gt else { continue };
            let alpha = compute_blend_weights_subset(scene, cam, case.selected).alpha_map();
            let value = iou(&binarize(&alpha, tau), gt)?;
            iou_sum += value;
            hits += (value >= ACCURACY_IOU) as usize;
            views += 1;
        }
        let (iou_q, acc_q) = if views == 0 {
            (0.0, 0.0)
        } else {
            (iou_sum / views as f64, hits as f64 / views as f64)
        };
        per_class.push(ClassScore {
            class: case.class,
            iou: iou_q,
            accuracy: acc_q,
        });
    }
    let count = per_class.len().max(1) as f64;
    Ok(EvalReport {
        miou: per_class.iter().map(|c| c.iou).sum::<f64>() / count,
        macc: per_class.iter().map(|c| c.accuracy).sum::<f64>() / count,
        per_class,
        confusion: Vec::new(),
    })
}

/// Point-level IoU and accuracy, macro-averaged over classes present in the
/// ground truth. Unassigned predictions count as misses for IoU and are left
/// out of accuracy.
pub fn eval_3d(predicted: &[Option<usize>], gt: &[usize]) -> Result<EvalReport> {
    if predicted.len() != gt.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} labels",
            predicted.len(),
            gt.len()
        )));
    }
    let classes = gt
        .iter()
        .copied()
        .chain(predicted.iter().flatten().copied())
        .max()
        .map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0usize; classes + 1]; classes];
    for (p, g) in predicted.iter().zip(gt) {
        confusion[*g][p.unwrap_or(classes)] += 1;
    }
    let mut per_class = Vec::new();
    for c in 0..classes {
        let gt_total: usize = confusion[c].iter().sum();
        if gt_total == 0 {
            continue;
        }
        let tp = confusion[c][c];
        let fp: usize = (0..classes).filter(|g| *g != c).map(|g| confusion[g][c]).sum();
        let assigned = gt_total - confusion[c][classes];
        per_class.push(ClassScore {
            class: c,
            iou: tp as f64 / (gt_total + fp) as f64,
            accuracy: if assigned == 0 {
                0.0
            } else {
                tp as f64 / assigned as f64
            },
        });
    }
    let count = per_class.len().max(1) as f64;
    Ok(EvalReport {
        miou: per_class.iter().map(|c| c.iou).sum::<f64>() / count,
        macc: per_class.iter().map(|c| c.accuracy).sum::<f64>() / count,
        per_class,
        confusion,
    })
}

/// Per-instance accumulated full-scene weight at every pixel; used by tests
/// and the service overlay to inspect who dominates a pixel.
pub fn dominant_instance_map(scene: &Scene, table: &InstanceTable, cam: &Camera) -> Vec<Option<InstanceId>> {
    let owner = table.point_instances(scene.len());
    let weights = compute_blend_weights(scene, cam);
    let (w, h) = (weights.width(), weights.height());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut totals: BTreeMap<InstanceId, f64> = BTreeMap::new();
            for t in weights.pixel(x, y) {
                if let Some(id) = owner[t.index as usize] {
                    *totals.entry(id).or_default() += t.weight;
                }
            }
            out.push(
                totals
                    .into_iter()
                    .fold(None::<(InstanceId, f64)>, |acc, (id, w)| match acc {
                        Some((_, bw)) if bw >= w => acc,
                        _ => Some((id, w)),
                    })
                    .map(|(id, _)| id),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::InstanceRecord;
    use crate::scene::GaussianPoint;

    fn basis(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[i] = 1.0;
        v
    }

    fn table_with(embeddings: &[Option<usize>]) -> InstanceTable {
        let mut t = InstanceTable::new();
        for (k, e) in embeddings.iter().enumerate() {
            t.insert(
                InstanceId::new(k as u32, 0),
                InstanceRecord {
                    members: vec![2 * k, 2 * k + 1],
                    embedding: e.map(basis),
                    audit: vec![],
                },
            )
            .unwrap();
        }
        t
    }

    #[test]
    fn text_select_modes() {
        let t = table_with(&[Some(0), Some(1), None, Some(2)]);
        let sel = text_select(&t, &basis(1), SelectMode::Top1).unwrap();
        assert_eq!(sel.points, vec![2, 3]);
        assert_eq!(sel.instances[0].0, InstanceId::new(1, 0));
        let all = text_select(&t, &basis(1), SelectMode::Threshold(-1.0)).unwrap();
        assert_eq!(all.points, vec![0, 1, 2, 3, 6, 7]);
        assert!(all.instances.windows(2).all(|w| w[0].1 >= w[1].1));
        let none = text_select(&t, &basis(5), SelectMode::Threshold(DEFAULT_THRESHOLD)).unwrap();
        assert!(none.points.is_empty());
        let empty = text_select(&table_with(&[None]), &basis(0), SelectMode::Top1).unwrap();
        assert_eq!(empty, Selection::default());
        let scaled: Vec<f64> = basis(2).iter().map(|v| v * 7.5).collect();
        assert_eq!(
            text_select(&t, &scaled, SelectMode::Top1).unwrap().instances[0].0,
            InstanceId::new(3, 0)
        );
    }

    #[test]
    fn classify_cases() {
        let t = table_with(&[Some(0), Some(1), None]);
        let classes: Vec<Embedding> = (0..2).map(|c| Embedding::new(basis(c), format!("c{c}")).unwrap()).collect();
        let labels = classify_points(&t, 6, &classes).unwrap();
        assert_eq!(labels, vec![Some(0), Some(0), Some(1), Some(1), None, None]);
        let one = classify_points(&t, 6, &classes[..1]).unwrap();
        assert_eq!(&one[..4], &[Some(0); 4]);
        let dup = vec![classes[1].clone(), classes[1].clone()];
        assert_eq!(classify_points(&t, 6, &dup).unwrap()[2], Some(0));
        assert!(classify_points(&t, 6, &[]).is_err());
    }

    #[test]
    fn eval_3d_cases() {
        let gt = vec![0, 0, 1, 1, 2, 2];
        let perfect: Vec<_> = gt.iter().map(|g| Some(*g)).collect();
        let r = eval_3d(&perfect, &gt).unwrap();
        assert_eq!((r.miou, r.macc), (1.0, 1.0));
        let wrong = eval_3d(&[Some(1), Some(1)], &[0, 0]).unwrap();
        assert_eq!(wrong.per_class[0].iou, 0.0);
        assert!(eval_3d(&[Some(0)], &[0, 0]).is_err());
    }

    #[test]
    fn eval_3d_hand_confusion() {
        // gt:   0 0 0 1 1 2 2 2
        // pred: 0 1 - 1 1 2 0 2
        let gt = [0, 0, 0, 1, 1, 2, 2, 2];
        let pred = [Some(0), Some(1), None, Some(1), Some(1), Some(2), Some(0), Some(2)];
        let r = eval_3d(&pred, &gt).unwrap();
        // class 0: tp 1, fn 2 (one wrong, one unassigned), fp 1 -> 1/4
        // class 1: tp 2, fn 0, fp 1 -> 2/3
        // class 2: tp 2, fn 1, fp 0 -> 2/3
        let ious: Vec<f64> = r.per_class.iter().map(|c| c.iou).collect();
        assert_eq!(ious, vec![0.25, 2.0 / 3.0, 2.0 / 3.0]);
        // accuracy ignores the unassigned point: 1/2, 2/2, 2/3
        let accs: Vec<f64> = r.per_class.iter().map(|c| c.accuracy).collect();
        assert_eq!(accs, vec![0.5, 1.0, 2.0 / 3.0]);
    }

    #[test]
    fn click_background_and_bounds() {
        let p = GaussianPoint::isotropic([0.0, 0.0, 1.0], 0.05, 0.9, [1.0; 3]);
        let scene = Scene::new(vec![p]).unwrap();
        let t = InstanceTable::from_labels(&[0]);
        let cam = Camera::identity(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        assert_eq!(click_select(&scene, &t, &cam, (50, 50)).unwrap(), Some(InstanceId::new(0, 0)));
        assert_eq!(click_select(&scene, &t, &cam, (2, 2)).unwrap(), None);
        assert!(click_select(&scene, &t, &cam, (100, 0)).is_err());
    }

    #[test]
    fn eval_2d_empty_selection() {
        let p = GaussianPoint::isotropic([0.0, 0.0, 1.0], 0.05, 0.9, [1.0; 3]);
        let scene = Scene::new(vec![p]).unwrap();
        let cam = Camera::identity(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let alpha = compute_blend_weights(&scene, &cam).alpha_map();
        let gt = binarize(&alpha, 0.5);
        let hit = QueryCase {
            class: 0,
            selected: &[0],
            gt_masks: vec![Some(&gt)],
        };
        let miss = QueryCase {
            class: 1,
            selected: &[],
            gt_masks: vec![Some(&gt)],
        };
        let r = eval_2d(&scene, &[cam], &[hit, miss], 0.5).unwrap();
        assert_eq!(r.per_class[0].iou, 1.0);
        assert_eq!(r.per_class[0].accuracy, 1.0);
        assert_eq!(r.per_class[1].iou, 0.0);
        assert_eq!(r.per_class[1].accuracy, 0.0);
    }
}
