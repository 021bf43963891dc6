//! Vector quantization of instance features.
//!
//! [`Codebook`] is a flat k-means codebook over arbitrary-dimension rows.
//! [`TwoLevelCodebook`] clusters `[feature; normalized position]` at the
//! coarse level and features alone within each coarse cluster at the fine
//! level; a point's instance is its `(coarse, fine)` pair.

use log::warn;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::scene::{Aabb, InstanceId};
use crate::{Feature, FEATURE_DIM};

/// Stop after this many assign/update rounds if assignments still move.
pub const MAX_ROUNDS: usize = 50;

/// Dense row-major sample matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    dim: usize,
    data: Vec<f64>,
}

impl Samples {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::validation(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_features(features: &[Feature]) -> Self {
        Self {
            dim: FEATURE_DIM,
            data: features.iter().flatten().copied().collect(),
        }
    }

    /// Rows `[feature; position mapped into [0,1]^3 by bounds]`.
    pub fn with_positions(features: &[Feature], positions: &[[f64; 3]], bounds: &Aabb) -> Self {
        let mut data = Vec::with_capacity(features.len() * (FEATURE_DIM + 3));
        for (f, p) in features.iter().zip(positions) {
            data.extend_from_slice(f);
            data.extend_from_slice(&bounds.normalize(p));
        }
        Self {
            dim: FEATURE_DIM + 3,
            data,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn subset(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            dim: self.dim,
            data,
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// How initial entries are drawn from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Seeding {
    /// `k` distinct rows chosen uniformly at random.
    #[default]
    Uniform,
    /// D²-weighted sampling (k-means++).
    PlusPlus,
}

/// `k x dim` entries plus the nearest-entry index of every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    entries: Vec<f64>,
    assignments: Vec<u32>,
}

impl Codebook {
    pub fn from_parts(dim: usize, entries: Vec<f64>, assignments: Vec<u32>) -> Result<Self> {
        if dim == 0 || !entries.len().is_multiple_of(dim) {
            return Err(Error::validation("codebook entries are not whole rows"));
        }
        let k = entries.len() / dim;
        if let Some(bad) = assignments.iter().find(|a| **a as usize >= k) {
            return Err(Error::validation(format!(
                "assignment {bad} out of range for {k} entries"
            )));
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("non-finite codebook entry"));
        }
        Ok(Self {
            dim,
            entries,
            assignments,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn entry(&self, j: usize) -> &[f64] {
        &self.entries[j * self.dim..(j + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn assignments(&self) -> &[u32] {
        &self.assignments
    }

    /// Entry index nearest to `row`, lowest index on ties.
    pub fn nearest(&self, row: &[f64]) -> u32 {
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for j in 0..self.size() {
            let d = sq_dist(row, self.entry(j));
            if d < best_d {
                best_d = d;
                best = j as u32;
            }
        }
        best
    }
}

/// Uniform initialization. With fewer samples than `k`, falls back to one
/// entry per sample and logs a warning.
pub fn init_codebook(samples: &Samples, k: usize, seed: u64) -> Codebook {
    init_codebook_with(samples, k, seed, Seeding::Uniform)
}

pub fn init_codebook_with(samples: &Samples, k: usize, seed: u64, seeding: Seeding) -> Codebook {
    let n = samples.len();
    let k = if n < k {
        warn!("codebook size {k} exceeds {n} samples; using {n} entries");
        n
    } else {
        k
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = match seeding {
        Seeding::Uniform => index::sample(&mut rng, n, k).into_vec(),
        Seeding::PlusPlus => plus_plus(samples, k, &mut rng),
    };
    let mut entries = Vec::with_capacity(k * samples.dim);
    for &p in &picks {
        entries.extend_from_slice(samples.row(p));
    }
    let mut cb = Codebook {
        dim: samples.dim,
        entries,
        assignments: Vec::new(),
    };
    cb.assignments = assign(samples, &cb);
    cb
}

fn plus_plus(samples: &Samples, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = samples.len();
    if k == 0 {
        return Vec::new();
    }
    let mut picks = vec![rng.random_range(0..n)];
    let mut chosen = vec![false; n];
    chosen[picks[0]] = true;
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(samples.row(i), samples.row(picks[0])))
        .collect();
    while picks.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 {
                    pick = Some(i);
                    target -= d;
                    if target <= 0.0 {
                        break;
                    }
                }
            }
            pick.expect("positive total has a positive term")
        } else {
            // all remaining rows duplicate a pick; take any unchosen row
            let free: Vec<usize> = (0..n).filter(|i| !chosen[*i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        picks.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(samples.row(i), samples.row(next)));
        }
    }
    picks
}

/// Nearest entry per sample (squared Euclidean, lowest index on ties).
pub fn assign(samples: &Samples, codebook: &Codebook) -> Vec<u32> {
    assert_eq!(samples.dim, codebook.dim, "sample and codebook widths differ");
    par::map_collect(samples.len(), |i| codebook.nearest(samples.row(i)))
}

/// Entry `j` becomes the mean of the samples assigned to it. Empty entries
/// are re-seeded, in index order, from the sample farthest from its own
/// (updated) entry; each sample seeds at most one entry.
pub fn update_codebook(samples: &Samples, assignments: &[u32], k: usize) -> Codebook {
    let dim = samples.dim;
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        let a = a as usize;
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(samples.row(i)) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let inv = counts[j] as f64;
            sums[j * dim..(j + 1) * dim].iter_mut().for_each(|s| *s /= inv);
        }
    }
    let empties: Vec<usize> = (0..k).filter(|j| counts[*j] == 0).collect();
    if !empties.is_empty() && !assignments.is_empty() {
        let mut dist: Vec<f64> = assignments
            .iter()
            .enumerate()
            .map(|(i, &a)| sq_dist(samples.row(i), &sums[a as usize * dim..(a as usize + 1) * dim]))
            .collect();
        for j in empties {
            let mut far = 0usize;
            for i in 1..dist.len() {
                if dist[i] > dist[far] {
                    far = i;
                }
            }
            sums[j * dim..(j + 1) * dim].copy_from_slice(samples.row(far));
            dist[far] = f64::NEG_INFINITY;
        }
    }
    Codebook {
        dim,
        entries: sums,
        assignments: assignments.to_vec(),
    }
}

/// Row `i` is the entry assigned to sample `i`.
pub fn quantize_forward(codebook: &Codebook) -> Samples {
    let mut data = Vec::with_capacity(codebook.assignments.len() * codebook.dim);
    for &a in &codebook.assignments {
        data.extend_from_slice(codebook.entry(a as usize));
    }
    Samples {
        dim: codebook.dim,
        data,
    }
}

/// Straight-through estimator: the gradient w.r.t. a quantized row is used
/// unchanged as the gradient w.r.t. the continuous row.
pub fn straight_through_backward(grad_quantized: &[Feature]) -> Vec<Feature> {
    grad_quantized.to_vec()
}

/// `Σ_i ‖x_i − c_{a(i)}‖²` under the codebook's stored assignments.
pub fn distortion(samples: &Samples, codebook: &Codebook) -> f64 {
    codebook
        .assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(samples.row(i), codebook.entry(a as usize)))
        .sum()
}

/// Result of alternating assign/update rounds.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub codebook: Codebook,
    /// Distortion after initialization and after every round.
    pub history: Vec<f64>,
    pub rounds: usize,
}

pub fn kmeans(samples: &Samples, k: usize, seed: u64, seeding: Seeding, max_rounds: usize) -> KMeans {
    let mut cb = init_codebook_with(samples, k, seed, seeding);
    let k = cb.size();
    let mut history = vec![distortion(samples, &cb)];
    let mut rounds = 0;
    while rounds < max_rounds {
        rounds += 1;
        let mut next = update_codebook(samples, &cb.assignments, k);
        next.assignments = assign(samples, &next);
        let changed = next.assignments != cb.assignments;
        history.push(distortion(samples, &next));
        cb = next;
        if !changed {
            break;
        }
    }
    KMeans {
        codebook: cb,
        history,
        rounds,
    }
}

/// Best of `restarts` independently seeded runs by final distortion; the
/// earliest run wins ties.
pub fn kmeans_restarts(
    samples: &Samples,
    k: usize,
    seed: u64,
    seeding: Seeding,
    max_rounds: usize,
    restarts: usize,
) -> KMeans {
    let runs = par::map_collect(restarts.max(1), |r| {
        let run_seed = seed.wrapping_add(0x2545_f491_4f6c_dd1d_u64.wrapping_mul(r as u64));
        kmeans(samples, k, run_seed, seeding, max_rounds)
    });
    runs.into_iter()
        .reduce(|best, run| {
            let (b, r) = (best.history.last(), run.history.last());
            if r < b {
                run
            } else {
                best
            }
        })
        .expect("at least one run")
}

/// Options for [`build_two_level`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookConfig {
    pub coarse_k: usize,
    pub fine_k: usize,
    /// Append normalized positions to the coarse samples.
    pub use_position: bool,
    pub seeding: Seeding,
    pub max_rounds: usize,
    /// Independent coarse-level runs; the lowest-distortion one is kept.
    pub restarts: usize,
    /// Fine entries of one coarse cluster closer than this (Euclidean, in
    /// feature units) are merged after clustering. 0 disables merging.
    pub fine_merge_distance: f64,
    /// Re-assign and update both levels after every stage-2 optimizer step;
    /// when false the codebook is frozen after the initial build.
    pub interleave: bool,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            coarse_k: 64,
            fine_k: 10,
            use_position: true,
            seeding: Seeding::PlusPlus,
            max_rounds: MAX_ROUNDS,
            restarts: 8,
            fine_merge_distance: 0.0,
            interleave: true,
        }
    }
}

impl CodebookConfig {
    /// Single-level codebook of `k` entries over features only, seeded by
    /// uniform sampling in a single run.
    pub fn flat(k: usize) -> Self {
        Self {
            coarse_k: k,
            fine_k: 1,
            use_position: false,
            seeding: Seeding::Uniform,
            restarts: 1,
            ..Self::default()
        }
    }
}

/// Coarse codebook over `[feature; position]` (or features only) and one
/// fine feature codebook per coarse entry.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLevelCodebook {
    use_position: bool,
    bounds: Option<Aabb>,
    coarse: Codebook,
    fine_entries: Vec<Vec<Feature>>,
    fine_index: Vec<u32>,
}

impl TwoLevelCodebook {
    pub fn from_parts(
        use_position: bool,
        bounds: Option<Aabb>,
        coarse: Codebook,
        fine_entries: Vec<Vec<Feature>>,
        fine_index: Vec<u32>,
    ) -> Result<Self> {
        let expect_dim = if use_position { FEATURE_DIM + 3 } else { FEATURE_DIM };
        if coarse.dim != expect_dim {
            return Err(Error::validation(format!(
                "coarse codebook width {} but expected {expect_dim}",
                coarse.dim
            )));
        }
        if use_position && bounds.is_none() {
            return Err(Error::validation("position-aware codebook needs bounds"));
        }
        if fine_entries.len() != coarse.size() {
            return Err(Error::validation("one fine codebook per coarse entry required"));
        }
        if fine_index.len() != coarse.assignments.len() {
            return Err(Error::validation("coarse and fine index lengths differ"));
        }
        for (c, f) in coarse.assignments.iter().zip(&fine_index) {
            if *f as usize >= fine_entries[*c as usize].len() {
                return Err(Error::validation(format!(
                    "fine index {f} out of range in coarse cluster {c}"
                )));
            }
        }
        Ok(Self {
            use_position,
            bounds,
            coarse,
            fine_entries,
            fine_index,
        })
    }

    pub fn use_position(&self) -> bool {
        self.use_position
    }

    pub fn bounds(&self) -> Option<Aabb> {
        self.bounds
    }

    pub fn coarse(&self) -> &Codebook {
        &self.coarse
    }

    pub fn fine_entries(&self) -> &[Vec<Feature>] {
        &self.fine_entries
    }

    pub fn fine_index(&self) -> &[u32] {
        &self.fine_index
    }

    pub fn point_count(&self) -> usize {
        self.fine_index.len()
    }

    pub fn instance_of(&self, point: usize) -> InstanceId {
        InstanceId::new(self.coarse.assignments[point], self.fine_index[point])
    }

    /// Quantized feature of every point: its fine entry.
    pub fn quantize(&self) -> Vec<Feature> {
        self.coarse
            .assignments
            .iter()
            .zip(&self.fine_index)
            .map(|(&c, &f)| self.fine_entries[c as usize][f as usize])
            .collect()
    }

    /// Gradient w.r.t. each point's codebook entry, given per-point
    /// gradients w.r.t. the quantized rows: row `i` of the result is the
    /// sum of `grad_quantized` over every point sharing `i`'s entry.
    pub fn entry_gradients(&self, grad_quantized: &[Feature]) -> Vec<Feature> {
        let mut sums: Vec<Vec<Feature>> = self
            .fine_entries
            .iter()
            .map(|e| vec![[0.0; FEATURE_DIM]; e.len()])
            .collect();
        for (i, g) in grad_quantized.iter().enumerate() {
            let slot = &mut sums[self.coarse.assignments[i] as usize][self.fine_index[i] as usize];
            for c in 0..FEATURE_DIM {
                slot[c] += g[c];
            }
        }
        (0..grad_quantized.len())
            .map(|i| sums[self.coarse.assignments[i] as usize][self.fine_index[i] as usize])
            .collect()
    }

    /// Member points of every populated instance, ids ascending.
    pub fn instances(&self) -> std::collections::BTreeMap<InstanceId, Vec<usize>> {
        let mut out: std::collections::BTreeMap<InstanceId, Vec<usize>> = Default::default();
        for i in 0..self.point_count() {
            out.entry(self.instance_of(i)).or_default().push(i);
        }
        out
    }

    fn coarse_samples(&self, features: &[Feature], positions: &[[f64; 3]]) -> Samples {
        match (self.use_position, &self.bounds) {
            (true, Some(b)) => Samples::with_positions(features, positions, b),
            _ => Samples::from_features(features),
        }
    }

    /// One interleaved refinement: reassign both levels to the current
    /// features, then move every populated entry to its members' mean.
    /// Positions are read, never written.
    pub fn refine(&mut self, features: &[Feature], positions: &[[f64; 3]]) {
        let samples = self.coarse_samples(features, positions);
        let coarse_assign = assign(&samples, &self.coarse);
        self.coarse = update_codebook(&samples, &coarse_assign, self.coarse.size());

        let fine_index: Vec<u32> = par::map_collect(features.len(), |i| {
            let c = coarse_assign[i] as usize;
            nearest_feature(&self.fine_entries[c], &features[i]).unwrap_or(0)
        });
        self.fine_index = fine_index;
        // a point landing in a coarse cluster without fine entries seeds one
        for i in 0..features.len() {
            let c = coarse_assign[i] as usize;
            if self.fine_entries[c].is_empty() {
                self.fine_entries[c].push(features[i]);
                self.fine_index[i] = 0;
            }
        }
        let mut sums: Vec<Vec<(Feature, usize)>> = self
            .fine_entries
            .iter()
            .map(|e| vec![([0.0; FEATURE_DIM], 0); e.len()])
            .collect();
        for i in 0..features.len() {
            let slot = &mut sums[coarse_assign[i] as usize][self.fine_index[i] as usize];
            for c in 0..FEATURE_DIM {
                slot.0[c] += features[i][c];
            }
            slot.1 += 1;
        }
        for (entries, sums) in self.fine_entries.iter_mut().zip(sums) {
            for (e, (s, n)) in entries.iter_mut().zip(sums) {
                if n > 0 {
                    *e = s.map(|v| v / n as f64);
                }
            }
        }
    }
}

fn nearest_feature(entries: &[Feature], f: &Feature) -> Option<u32> {
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for (j, e) in entries.iter().enumerate() {
        let d = sq_dist(e, f);
        if d < best_d {
            best_d = d;
            best = Some(j as u32);
        }
    }
    best
}

/// Coarse-to-fine discretization of `features`, using `positions` only to
/// shape the coarse clusters.
pub fn build_two_level(
    features: &[Feature],
    positions: &[[f64; 3]],
    cfg: &CodebookConfig,
    seed: u64,
) -> Result<TwoLevelCodebook> {
    let n = features.len();
    if n == 0 {
        return Err(Error::validation("cannot build a codebook over zero points"));
    }
    if positions.len() != n {
        return Err(Error::validation(format!(
            "{} positions for {n} features",
            positions.len()
        )));
    }
    if cfg.coarse_k == 0 || cfg.fine_k == 0 {
        return Err(Error::validation("codebook sizes must be positive"));
    }
    let bounds = if cfg.use_position {
        Aabb::from_points(positions)
    } else {
        None
    };
    let samples = match &bounds {
        Some(b) => Samples::with_positions(features, positions, b),
        None => Samples::from_features(features),
    };
    let coarse = kmeans_restarts(
        &samples,
        cfg.coarse_k,
        seed,
        cfg.seeding,
        cfg.max_rounds,
        cfg.restarts,
    )
    .codebook;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); coarse.size()];
    for (i, &c) in coarse.assignments.iter().enumerate() {
        members[c as usize].push(i);
    }
    let all = Samples::from_features(features);
    let fine: Vec<(Vec<Feature>, Vec<u32>)> = par::map_collect(members.len(), |c| {
        let rows = &members[c];
        if rows.is_empty() {
            return (Vec::new(), Vec::new());
        }
        let sub = all.subset(rows);
        let fine_seed = seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(c as u64 + 1));
        let k = cfg.fine_k.min(rows.len());
        let cb = kmeans(&sub, k, fine_seed, cfg.seeding, cfg.max_rounds).codebook;
        compact_fine(&sub, &cb, cfg.fine_merge_distance)
    });

    let mut fine_entries = Vec::with_capacity(members.len());
    let mut fine_index = vec![0u32; n];
    for (rows, (entries, local)) in members.iter().zip(fine) {
        for (r, l) in rows.iter().zip(local) {
            fine_index[*r] = l;
        }
        fine_entries.push(entries);
    }
    Ok(TwoLevelCodebook {
        use_position: cfg.use_position,
        bounds,
        coarse,
        fine_entries,
        fine_index,
    })
}

/// Drops unpopulated fine entries and merges entries closer than
/// `merge_distance`, then re-assigns members to the surviving entries (set to
/// their members' means).
fn compact_fine(sub: &Samples, cb: &Codebook, merge_distance: f64) -> (Vec<Feature>, Vec<u32>) {
    let k = cb.size();
    let mut counts = vec![0usize; k];
    for &a in &cb.assignments {
        counts[a as usize] += 1;
    }
    // union-find over populated entries
    let mut parent: Vec<usize> = (0..k).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    if merge_distance > 0.0 {
        let limit = merge_distance * merge_distance;
        for a in 0..k {
            for b in a + 1..k {
                if counts[a] > 0 && counts[b] > 0 && sq_dist(cb.entry(a), cb.entry(b)) < limit {
                    let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
            }
        }
    }
    let mut remap = vec![u32::MAX; k];
    let mut next = 0u32;
    for j in 0..k {
        if counts[j] == 0 {
            continue;
        }
        let r = root(&mut parent, j);
        if remap[r] == u32::MAX {
            remap[r] = next;
            next += 1;
        }
        remap[j] = remap[r];
    }
    let local: Vec<u32> = cb.assignments.iter().map(|a| remap[*a as usize]).collect();
    let mut sums = vec![([0.0; FEATURE_DIM], 0usize); next as usize];
    for (i, &l) in local.iter().enumerate() {
        let slot = &mut sums[l as usize];
        for (c, v) in sub.row(i).iter().enumerate() {
            slot.0[c] += v;
        }
        slot.1 += 1;
    }
    let entries = sums
        .into_iter()
        .map(|(s, n)| s.map(|v| v / n as f64))
        .collect();
    (entries, local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[Vec<f64>], per: usize, spread: f64, seed: u64) -> Samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, spread).unwrap();
        let dim = centers[0].len();
        let mut data = Vec::new();
        for c in centers {
            for _ in 0..per {
                data.extend(c.iter().map(|v| v + noise.sample(&mut rng)));
            }
        }
        Samples::new(dim, data).unwrap()
    }

    #[test]
    fn n_equal_k_is_a_permutation() {
        let s = blobs(&[vec![0.0; 6], vec![5.0; 6]], 3, 1.0, 1);
        let cb = init_codebook(&s, 6, 7);
        let mut got: Vec<Vec<u64>> = (0..6)
            .map(|j| cb.entry(j).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut want: Vec<Vec<u64>> = (0..6)
            .map(|i| s.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn init_is_deterministic_and_degrades() {
        let s = blobs(&[vec![0.0; 6]], 20, 1.0, 2);
        assert_eq!(init_codebook(&s, 5, 11), init_codebook(&s, 5, 11));
        let small = blobs(&[vec![0.0; 6]], 3, 1.0, 2);
        assert_eq!(init_codebook(&small, 8, 1).size(), 3);
    }

    #[test]
    fn assign_ties_take_lowest_index() {
        let entries = vec![
            9.0, 9.0, // 0
            9.0, 9.0, // 1
            1.0, 0.0, // 2
            5.0, 5.0, // 3
            8.0, 8.0, // 4
            -1.0, 0.0, // 5
        ];
        let cb = Codebook::from_parts(2, entries, vec![]).unwrap();
        let s = Samples::new(2, vec![0.0, 0.0, 9.0, 9.0, 1.0, 0.0]).unwrap();
        assert_eq!(assign(&s, &cb), vec![2, 0, 2]);
    }

    #[test]
    fn assign_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Samples::new(6, (0..600).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cb = init_codebook(&s, 10, 3);
        let got = assign(&s, &cb);
        for i in 0..s.len() {
            let dists: Vec<f64> = (0..10)
                .map(|j| (0..6).map(|c| (s.row(i)[c] - cb.entry(j)[c]).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let want = dists.iter().position(|d| *d == min).unwrap();
            assert_eq!(got[i] as usize, want);
        }
    }

    #[test]
    fn update_means_and_singletons() {
        let s = Samples::new(2, vec![0.0, 0.0, 2.0, 4.0, 4.0, 2.0, 10.0, 10.0]).unwrap();
        let cb = update_codebook(&s, &[0, 0, 0, 1], 2);
        assert_eq!(cb.entry(0), &[2.0, 2.0]);
        assert_eq!(cb.entry(1), &[10.0, 10.0]);
    }

    #[test]
    fn empty_entry_reseeds_from_worst_point() {
        let s = Samples::new(1, vec![0.0, 1.0, 10.0]).unwrap();
        let cb = update_codebook(&s, &[0, 0, 0], 2);
        // mean 11/3; farthest sample is 10
        assert_eq!(cb.entry(1), &[10.0]);
    }

    #[test]
    fn two_blobs_converge_to_blob_means() {
        let s = blobs(&[vec![-5.0; 6], vec![5.0; 6]], 50, 0.3, 4);
        let km = kmeans(&s, 2, 1, Seeding::Uniform, MAX_ROUNDS);
        // exhaustive 2-partition oracle is the split by blob here
        let mut means = [[0.0; 6]; 2];
        for b in 0..2 {
            for i in 0..50 {
                for c in 0..6 {
                    means[b][c] += s.row(b * 50 + i)[c] / 50.0;
                }
            }
        }
        let a0 = km.codebook.assignments()[0] as usize;
        assert!(km.codebook.assignments()[..50].iter().all(|a| *a as usize == a0));
        assert!(km.codebook.assignments()[50..].iter().all(|a| *a as usize != a0));
        assert!(km.rounds <= 5);
        for c in 0..6 {
            assert!((km.codebook.entry(a0)[c] - means[0][c]).abs() < 1e-12);
            assert!((km.codebook.entry(1 - a0)[c] - means[1][c]).abs() < 1e-12);
        }
    }

    #[test]
    fn quantize_rows_come_from_entries() {
        let s = blobs(&[vec![0.0; 6], vec![3.0; 6]], 10, 0.5, 8);
        let cb = kmeans(&s, 4, 2, Seeding::Uniform, MAX_ROUNDS).codebook;
        let q = quantize_forward(&cb);
        for i in 0..q.len() {
            assert!((0..cb.size()).any(|j| cb.entry(j) == q.row(i)));
        }
        // quantized rows are fixed points of assignment
        let again = assign(&q, &cb);
        let q2 = quantize_forward(&Codebook::from_parts(6, cb.entries().to_vec(), again).unwrap());
        assert_eq!(q, q2);
    }

    #[test]
    fn straight_through_copies_bits() {
        let g = vec![[0.1, -2.0, 3.5, f64::MIN_POSITIVE, 0.0, -0.0]; 3];
        let out = straight_through_backward(&g);
        for (a, b) in out.iter().flatten().zip(g.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn position_separates_same_feature_clusters() {
        let mut features = Vec::new();
        let mut positions = Vec::new();
        for side in [-10.0, 10.0] {
            for i in 0..20 {
                features.push([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
                positions.push([side + 0.01 * i as f64, 0.0, 0.0]);
            }
        }
        let cfg = CodebookConfig {
            coarse_k: 2,
            fine_k: 10,
            ..CodebookConfig::default()
        };
        let cb = build_two_level(&features, &positions, &cfg, 0).unwrap();
        assert_ne!(cb.instance_of(0), cb.instance_of(20));
        // uniform features inside a coarse cluster leave one populated fine entry
        assert_eq!(cb.instances().len(), 2);
        let flat = build_two_level(&features, &positions, &CodebookConfig::flat(2), 0).unwrap();
        assert_eq!(flat.instance_of(0), flat.instance_of(20));
    }

    #[test]
    fn merge_collapses_near_duplicates() {
        let s = blobs(&[vec![0.0; 6]], 40, 0.01, 3);
        let features: Vec<Feature> = (0..40).map(|i| s.row(i).try_into().unwrap()).collect();
        let positions = vec![[0.0; 3]; 40];
        let cfg = CodebookConfig {
            coarse_k: 1,
            fine_k: 10,
            fine_merge_distance: 0.5,
            ..CodebookConfig::default()
        };
        let cb = build_two_level(&features, &positions, &cfg, 1).unwrap();
        assert_eq!(cb.fine_entries()[0].len(), 1);
        let unmerged = CodebookConfig {
            fine_merge_distance: 0.0,
            ..cfg
        };
        let cb = build_two_level(&features, &positions, &unmerged, 1).unwrap();
        assert_eq!(cb.fine_entries()[0].len(), 10);
    }

    #[test]
    fn entry_gradients_sum_over_members() {
        let s = blobs(&[vec![0.0; 6], vec![5.0; 6]], 10, 0.01, 4);
        let features: Vec<Feature> = (0..20).map(|i| s.row(i).try_into().unwrap()).collect();
        let positions = vec![[0.0; 3]; 20];
        let cb = build_two_level(&features, &positions, &CodebookConfig::flat(2), 0).unwrap();
        let grads: Vec<Feature> = (0..20).map(|i| [i as f64; 6]).collect();
        let out = cb.entry_gradients(&grads);
        for i in 0..20 {
            let expect: f64 = (0..20)
                .filter(|j| cb.instance_of(*j) == cb.instance_of(i))
                .map(|j| j as f64)
                .sum();
            assert_eq!(out[i], [expect; 6]);
        }
        assert_eq!(out[0], [45.0; 6]);
        assert_eq!(out[10], [145.0; 6]);
    }

    #[test]
    fn restarts_never_worse_than_first_run() {
        let centers: Vec<Vec<f64>> = (0..6).map(|c| vec![c as f64 * 3.0, (c % 2) as f64]).collect();
        let s = blobs(&centers, 30, 0.2, 9);
        for seed in 0..10 {
            let one = kmeans(&s, 6, seed, Seeding::Uniform, 50);
            let best = kmeans_restarts(&s, 6, seed, Seeding::Uniform, 50, 8);
            assert!(best.history.last() <= one.history.last());
            let single = kmeans_restarts(&s, 6, seed, Seeding::Uniform, 50, 1);
            assert_eq!(single.codebook, one.codebook);
        }
    }
}
