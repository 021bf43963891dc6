#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatseg::render::{BinaryMap, FeatureMap};
use splatseg::scene::{Camera, GaussianPoint, Scene};
use splatseg::{Feature, FEATURE_DIM};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    if n < 1e-3 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    q.map(|v| v / n)
}

/// Anisotropic Gaussians in front of the identity camera, inside its frustum.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Scene {
    let points = (0..n)
        .map(|_| {
            let z = rng.random_range(1.5..4.0);
            GaussianPoint {
                position: [
                    rng.random_range(-0.35..0.35) * z,
                    rng.random_range(-0.35..0.35) * z,
                    z,
                ],
                rotation: unit_quaternion(rng),
                scale: std::array::from_fn(|_| rng.random_range(0.05..0.3)),
                opacity: rng.random_range(0.05..0.95),
                color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                instance_feature: [0.0; FEATURE_DIM],
            }
        })
        .collect();
    Scene::new(points).unwrap()
}

/// Identity camera with a field of view of roughly 53 degrees.
pub fn camera(size: u32) -> Camera {
    let f = size as f64;
    Camera::identity(f, f, f / 2.0, f / 2.0, size, size).unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, n: usize) -> Vec<Feature> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}

pub fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FeatureMap {
    let mut m = FeatureMap::zeros(w, h);
    for v in &mut m.data {
        *v = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    }
    m
}

pub fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMap {
    let data = (0..w * h)
        .map(|p| (x0..x1).contains(&(p % w)) && (y0..y1).contains(&(p / w)))
        .collect();
    BinaryMap::new(w, h, data).unwrap()
}

/// Every bit of every geometry field.
pub fn geometry_bits(scene: &Scene) -> Vec<u64> {
    scene
        .points()
        .iter()
        .flat_map(|p| {
            p.position
                .iter()
                .chain(&p.rotation)
                .chain(&p.scale)
                .chain(std::iter::once(&p.opacity))
                .chain(&p.color)
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        })
        .collect()
}

pub struct GradientReport {
    pub loss: &'static str,
    pub checked: usize,
    pub worst_relative: f64,
}

/// Central-difference check of L_s, L_c and L_p chained through the
/// renderer adjoint, on a 20-Gaussian 16x16 scene.
pub fn finite_difference_check(seed: u64, step: f64) -> Vec<GradientReport> {
    use splatseg::losses::{inter_mask_loss, intra_mask_loss, pseudo_loss, InstanceMask};
    use splatseg::render::{backprop_features, compute_blend_weights, render_features};

    let mut rng = rng(seed);
    let scene = random_scene(&mut rng, 20);
    let weights = compute_blend_weights(&scene, &camera(16));
    let features = random_features(&mut rng, 20);
    let masks: Vec<InstanceMask> = [(0, 0, 8, 8), (8, 0, 16, 10), (0, 8, 8, 16), (9, 11, 16, 16)]
        .iter()
        .map(|&(x0, y0, x1, y1)| InstanceMask::new(rect(16, 16, x0, y0, x1, y1), 0, None).unwrap())
        .collect();
    // offsets keep every pixel away from the L1 kink under the perturbation
    let mut pseudo = render_features(&weights, &features).unwrap();
    for v in pseudo.data.iter_mut().flatten() {
        let m: f64 = rng.random_range(0.2..0.5);
        *v += if rng.random_bool(0.5) { m } else { -m };
    }

    type Loss<'a> = Box<dyn Fn(&FeatureMap) -> splatseg::losses::LossOutput + 'a>;
    let losses: [(&'static str, Loss); 3] = [
        ("L_s", Box::new(|m| intra_mask_loss(m, &masks).unwrap())),
        ("L_c", Box::new(|m| inter_mask_loss(m, &masks).unwrap())),
        ("L_p", Box::new(|m| pseudo_loss(m, &pseudo).unwrap())),
    ];
    losses
        .iter()
        .map(|(name, loss)| {
            let eval = |f: &[Feature]| loss(&render_features(&weights, f).unwrap());
            let analytic = backprop_features(&eval(&features).grad, &weights).unwrap();
            let mut worst: f64 = 0.0;
            let mut checked = 0;
            for i in 0..features.len() {
                for c in 0..FEATURE_DIM {
                    let mut plus = features.clone();
                    plus[i][c] += step;
                    let mut minus = features.clone();
                    minus[i][c] -= step;
                    let numeric = (eval(&plus).value - eval(&minus).value) / (2.0 * step);
                    let a = analytic[i][c];
                    let scale = a.abs().max(numeric.abs());
                    // points with no pixel coverage have an exactly zero gradient
                    if scale < 1e-9 {
                        continue;
                    }
                    checked += 1;
                    worst = worst.max((a - numeric).abs() / scale);
                }
            }
            GradientReport {
                loss: name,
                checked,
                worst_relative: worst,
            }
        })
        .collect()
}

/// Settings the end-to-end synthetic runs use.
pub fn pipeline_config(seed: u64) -> splatseg::train::TrainConfig {
    splatseg::train::TrainConfig {
        stage1_iters: 3000,
        stage2_iters: 1000,
        learning_rate: 2.5e-3,
        feature_init_std: 0.03,
        seed,
        log_every: 0,
        codebook: splatseg::codebook::CodebookConfig {
            coarse_k: 8,
            fine_k: 10,
            fine_merge_distance: 0.5,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub struct PipelineRun {
    pub stage1: splatseg::train::Stage1Output,
    pub stage2: splatseg::train::Stage2Output,
    pub table: splatseg::association::InstanceTable,
}

pub fn run_pipeline(
    syn: &splatseg::synth::SyntheticScene,
    cfg: &splatseg::train::TrainConfig,
    assoc: &splatseg::association::AssociationConfig,
) -> PipelineRun {
    use splatseg::train::{train_stage1, train_stage2};
    let stage1 = train_stage1(&syn.scene, &syn.views, cfg).unwrap();
    let stage2 = train_stage2(&syn.scene, &stage1.features, &syn.views, cfg).unwrap();
    let table =
        splatseg::association::associate(&syn.scene, &stage2.codebook, &syn.views, &stage1.features, assoc)
            .unwrap();
    PipelineRun { stage1, stage2, table }
}

/// 3D point mIoU/mAcc of nearest-class labels against ground truth.
pub fn eval_points(
    syn: &splatseg::synth::SyntheticScene,
    table: &splatseg::association::InstanceTable,
) -> splatseg::query::EvalReport {
    use splatseg::query::{classify_points, eval_3d};
    let pred = classify_points(table, syn.scene.len(), &syn.class_embeddings).unwrap();
    eval_3d(&pred, &syn.class_labels()).unwrap()
}

/// Text query per class, scored against the rendered full silhouettes.
pub fn eval_queries(
    syn: &splatseg::synth::SyntheticScene,
    table: &splatseg::association::InstanceTable,
) -> splatseg::query::EvalReport {
    use splatseg::query::{eval_2d, text_select, QueryCase, SelectMode, DEFAULT_THRESHOLD};
    let selections: Vec<_> = syn
        .class_embeddings
        .iter()
        .map(|e| text_select(table, &e.vector, SelectMode::Threshold(DEFAULT_THRESHOLD)).unwrap())
        .collect();
    let cases: Vec<QueryCase> = (0..selections.len())
        .map(|k| QueryCase {
            class: k,
            selected: &selections[k].points,
            gt_masks: syn.silhouettes.iter().map(|s| Some(&s[k])).collect(),
        })
        .collect();
    eval_2d(&syn.scene, &syn.cameras, &cases, 0.5).unwrap()
}
