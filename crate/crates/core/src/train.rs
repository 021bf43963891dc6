//! Two-stage feature optimization over frozen geometry.
//!
//! Stage 1 fits continuous instance features to per-view masks with the
//! intra-mask smoothing and inter-mask contrastive losses. Stage 2 freezes
//! those features as pseudo ground truth, builds the two-level codebook, and
//! trains the features through the quantizer with the pseudo-feature loss
//! and straight-through gradients, refreshing the codebook after every step.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codebook::{build_two_level, straight_through_backward, CodebookConfig, TwoLevelCodebook};
use crate::error::{Error, Result};
use crate::losses::{inter_mask_loss, intra_mask_loss, pseudo_loss, InstanceMask};
use crate::render::{backprop_features, compute_blend_weights, render_features, BlendWeights, FeatureMap};
use crate::scene::{Scene, View};
use crate::{Feature, FEATURE_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub learning_rate: f64,
    /// Weight of the intra-mask smoothing loss.
    pub smooth_weight: f64,
    /// Weight of the inter-mask contrastive loss.
    pub contrast_weight: f64,
    pub views_per_iter: usize,
    pub seed: u64,
    /// Standard deviation of the random initial features.
    pub feature_init_std: f64,
    pub codebook: CodebookConfig,
    /// Emit a progress line every this many iterations (0 = never).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 2000,
            stage2_iters: 4000,
            learning_rate: 2.5e-3,
            smooth_weight: 1.0,
            contrast_weight: 1.0,
            views_per_iter: 1,
            seed: 0,
            feature_init_std: 0.03,
            codebook: CodebookConfig::default(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_iters == 0 || self.stage2_iters == 0 {
            return Err(Error::validation("iteration counts must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if self.views_per_iter == 0 {
            return Err(Error::validation("views_per_iter must be positive"));
        }
        Ok(())
    }
}

/// Adam over an `n x 6` parameter block.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Feature>,
    v: Vec<Feature>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            step: 0,
            m: vec![[0.0; FEATURE_DIM]; len],
            v: vec![[0.0; FEATURE_DIM]; len],
        }
    }

    pub fn step(&mut self, params: &mut [Feature], grads: &[Feature]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for c in 0..FEATURE_DIM {
                m[c] = self.beta1 * m[c] + (1.0 - self.beta1) * g[c];
                v[c] = self.beta2 * v[c] + (1.0 - self.beta2) * g[c] * g[c];
                let mhat = m[c] / bc1;
                let vhat = v[c] / bc2;
                p[c] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Endless stream of view indices: a fresh seeded shuffle per pass.
struct ViewSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ViewSampler {
    fn new(count: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..count).collect(),
            cursor: count,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

fn add_scaled(acc: &mut [Feature], g: &[Feature], s: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for c in 0..FEATURE_DIM {
            a[c] += s * b[c];
        }
    }
}

fn add_map(acc: &mut FeatureMap, g: &FeatureMap, s: f64) {
    for (a, b) in acc.data.iter_mut().zip(&g.data) {
        for c in 0..FEATURE_DIM {
            a[c] += s * b[c];
        }
    }
}

/// Losses of one stage-1 iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage1Losses {
    pub smooth: f64,
    pub contrast: f64,
}

impl Stage1Losses {
    pub fn total(&self, cfg: &TrainConfig) -> f64 {
        cfg.smooth_weight * self.smooth + cfg.contrast_weight * self.contrast
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub features: Vec<Feature>,
    pub history: Vec<Stage1Losses>,
}

struct PreparedView<'a> {
    weights: BlendWeights,
    masks: Vec<&'a InstanceMask>,
}

fn prepare_views<'a>(scene: &Scene, views: &'a [View]) -> Result<Vec<PreparedView<'a>>> {
    views
        .iter()
        .map(|v| {
            let (w, h) = (v.camera.width as usize, v.camera.height as usize);
            let masks: Vec<&InstanceMask> = v.masks.iter().filter(|m| m.pixel_count() > 0).collect();
            if let Some(bad) = masks.iter().find(|m| !m.mask.same_shape(w, h)) {
                return Err(Error::validation(format!(
                    "mask {}x{} does not match camera {w}x{h}",
                    bad.mask.width, bad.mask.height
                )));
            }
            Ok(PreparedView {
                weights: compute_blend_weights(scene, &v.camera),
                masks,
            })
        })
        .collect()
}

/// Loss value and feature gradient of the stage-1 objective on one view.
pub fn stage1_objective(
    weights: &BlendWeights,
    masks: &[InstanceMask],
    features: &[Feature],
    cfg: &TrainConfig,
) -> Result<(Stage1Losses, Vec<Feature>)> {
    let refs: Vec<&InstanceMask> = masks.iter().collect();
    view_objective(weights, &refs, features, cfg)
}

fn view_objective(
    weights: &BlendWeights,
    masks: &[&InstanceMask],
    features: &[Feature],
    cfg: &TrainConfig,
) -> Result<(Stage1Losses, Vec<Feature>)> {
    let map = render_features(weights, features)?;
    let mut grad = FeatureMap::zeros(map.width, map.height);
    let mut losses = Stage1Losses::default();
    if !masks.is_empty() {
        let s = intra_mask_loss(&map, masks)?;
        losses.smooth = s.value;
        add_map(&mut grad, &s.grad, cfg.smooth_weight);
    }
    if masks.len() >= 2 {
        let c = inter_mask_loss(&map, masks)?;
        losses.contrast = c.value;
        add_map(&mut grad, &c.grad, cfg.contrast_weight);
    }
    Ok((losses, backprop_features(&grad, weights)?))
}

fn initial_features(n: usize, cfg: &TrainConfig) -> Vec<Feature> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.feature_init_std.max(0.0)).expect("finite std");
    (0..n)
        .map(|_| std::array::from_fn(|_| normal.sample(&mut rng)))
        .collect()
}

/// Learns continuous instance features from masks. Geometry is read only.
pub fn train_stage1(scene: &Scene, views: &[View], cfg: &TrainConfig) -> Result<Stage1Output> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::validation("stage 1 needs at least one view"));
    }
    let prepared = prepare_views(scene, views)?;
    let mut features = initial_features(scene.len(), cfg);
    let mut adam = Adam::new(scene.len(), cfg.learning_rate);
    let mut sampler = ViewSampler::new(views.len(), ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let mut history = Vec::with_capacity(cfg.stage1_iters);

    for iter in 0..cfg.stage1_iters {
        let mut grad = vec![[0.0; FEATURE_DIM]; scene.len()];
        let mut losses = Stage1Losses::default();
        for _ in 0..cfg.views_per_iter {
            let v = &prepared[sampler.next()];
            let (l, g) = view_objective(&v.weights, &v.masks, &features, cfg)?;
            losses.smooth += l.smooth;
            losses.contrast += l.contrast;
            add_scaled(&mut grad, &g, 1.0);
        }
        adam.step(&mut features, &grad);
        history.push(losses);
        if cfg.log_every > 0 && (iter + 1) % cfg.log_every == 0 {
            info!(
                "iter={} Ls={:.6} Lc={:.6} Lp={:.6}",
                iter + 1,
                losses.smooth,
                losses.contrast,
                0.0
            );
        }
    }
    Ok(Stage1Output { features, history })
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub codebook: TwoLevelCodebook,
    /// Continuous features after training.
    pub features: Vec<Feature>,
    /// Per-point codebook feature.
    pub quantized: Vec<Feature>,
    /// Pseudo-feature loss per iteration.
    pub history: Vec<f64>,
}

/// Discretizes stage-1 features with the two-level codebook, training the
/// features through the quantizer against the frozen stage-1 renders.
pub fn train_stage2(
    scene: &Scene,
    pseudo: &[Feature],
    views: &[View],
    cfg: &TrainConfig,
) -> Result<Stage2Output> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::validation("stage 2 needs at least one view"));
    }
    if pseudo.len() != scene.len() {
        return Err(Error::validation(format!(
            "{} pseudo features for {} points",
            pseudo.len(),
            scene.len()
        )));
    }
    let positions = scene.positions();
    let weights: Vec<BlendWeights> = views
        .iter()
        .map(|v| compute_blend_weights(scene, &v.camera))
        .collect();
    let pseudo_maps = weights
        .iter()
        .map(|w| render_features(w, pseudo))
        .collect::<Result<Vec<_>>>()?;

    let mut features = pseudo.to_vec();
    let mut codebook = build_two_level(&features, &positions, &cfg.codebook, cfg.seed)?;
    let mut adam = Adam::new(scene.len(), cfg.learning_rate);
    let mut sampler = ViewSampler::new(views.len(), ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed2));
    let mut history = Vec::with_capacity(cfg.stage2_iters);

    for iter in 0..cfg.stage2_iters {
        let quantized = codebook.quantize();
        let mut grad = vec![[0.0; FEATURE_DIM]; scene.len()];
        let mut value = 0.0;
        for _ in 0..cfg.views_per_iter {
            let v = sampler.next();
            let current = render_features(&weights[v], &quantized)?;
            let loss = pseudo_loss(&current, &pseudo_maps[v])?;
            value += loss.value;
            let grad_q = backprop_features(&loss.grad, &weights[v])?;
            add_scaled(&mut grad, &straight_through_backward(&codebook.entry_gradients(&grad_q)), 1.0);
        }
        adam.step(&mut features, &grad);
        if cfg.codebook.interleave {
            codebook.refine(&features, &positions);
        }
        history.push(value);
        if cfg.log_every > 0 && (iter + 1) % cfg.log_every == 0 {
            info!("iter={} Ls={:.6} Lc={:.6} Lp={:.6}", iter + 1, 0.0, 0.0, value);
        }
    }
    let quantized = codebook.quantize();
    Ok(Stage2Output {
        codebook,
        features,
        quantized,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![[1.0; FEATURE_DIM]];
        let mut opt = Adam::new(1, 0.1);
        opt.step(&mut p, &[[1.0, -1.0, 0.0, 2.0, -3.0, 0.5]]);
        assert!((p[0][0] - 0.9).abs() < 1e-9);
        assert!((p[0][1] - 1.1).abs() < 1e-9);
        assert_eq!(p[0][2], 1.0);
    }

    #[test]
    fn sampler_visits_every_view_per_pass() {
        let mut s = ViewSampler::new(5, ChaCha8Rng::seed_from_u64(1));
        for _ in 0..3 {
            let mut pass: Vec<usize> = (0..5).map(|_| s.next()).collect();
            pass.sort();
            assert_eq!(pass, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
