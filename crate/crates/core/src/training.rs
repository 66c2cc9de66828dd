//! Triplet-margin training with batch-hard mining and a growing batch.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_bool, KvConfig};
use crate::dataio::{pair_masks, BatchMasks, ScanRef, NEG_THRESHOLD_M, POS_THRESHOLD_M};
use crate::diff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{forward_batch, Model};
use crate::nn::{apply_bn_statistics, Mode, Session};
use crate::params::{derived_rng, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::voxel::PointCloud;

/// `(anchor, positive, negative)` indices into a batch.
pub type Triple = (usize, usize, usize);

pub fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// `[‖a−p‖ − ‖a−n‖ + margin]₊` for one triple.
pub fn triplet_hinge<T: Scalar>(a: &[T], p: &[T], n: &[T], margin: T) -> T {
    (euclidean(a, p) - euclidean(a, n) + margin).max(T::zero())
}

/// Mean hinge over the given triples of a row-major `descs` table.
pub fn triplet_loss<T: Scalar>(descs: &[Vec<T>], triples: &[Triple], margin: T) -> T {
    if triples.is_empty() {
        return T::zero();
    }
    let total: T = triples
        .iter()
        .map(|&(a, p, n)| triplet_hinge(&descs[a], &descs[p], &descs[n], margin))
        .sum();
    total / T::of(triples.len() as f64)
}

/// Graph form of [`triplet_loss`] over a `n × dim` descriptor node.
pub fn triplet_loss_node<T: Scalar>(g: &mut Graph<T>, descs: NodeId, triples: &[Triple], margin: T) -> Result<NodeId> {
    let a: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let p: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let n: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let ga = g.gather(descs, a)?;
    let gp = g.gather(descs, p)?;
    let gn = g.gather(descs, n)?;
    let dap = g.sub(ga, gp)?;
    let dap = g.row_norm(dap)?;
    let dan = g.sub(ga, gn)?;
    let dan = g.row_norm(dan)?;
    let diff = g.sub(dap, dan)?;
    let shifted = g.add_scalar(diff, margin)?;
    let hinge = g.relu(shifted)?;
    Ok(g.mean_all(hinge)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mined {
    pub triples: Vec<Triple>,
    /// Triples with a non-zero hinge.
    pub active: usize,
}

/// Hardest positive (farthest) and hardest negative (nearest) per anchor,
/// ties to the lowest index; anchors lacking either are skipped.
pub fn batch_hard_mine<T: Scalar>(descs: &[Vec<T>], masks: &BatchMasks, margin: T) -> Mined {
    let n = descs.len();
    assert_eq!(n, masks.n, "mask size differs from batch size");
    let mut triples = Vec::new();
    let mut active = 0;
    for a in 0..n {
        let mut hp: Option<(usize, T)> = None;
        let mut hn: Option<(usize, T)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = euclidean(&descs[a], &descs[j]);
            if masks.pos(a, j) && hp.is_none_or(|(_, best)| d > best) {
                hp = Some((j, d));
            }
            if masks.neg(a, j) && hn.is_none_or(|(_, best)| d < best) {
                hn = Some((j, d));
            }
        }
        if let (Some((p, dp)), Some((q, dn))) = (hp, hn) {
            triples.push((a, p, q));
            if dp - dn + margin > T::zero() {
                active += 1;
            }
        }
    }
    Mined { triples, active }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchScheduler {
    pub batch_size: usize,
    pub growth: f64,
    pub threshold: f64,
    pub max_batch: usize,
}

impl Default for BatchScheduler {
    fn default() -> Self {
        Self {
            batch_size: 32,
            growth: 1.4,
            threshold: 0.7,
            max_batch: 256,
        }
    }
}

impl BatchScheduler {
    /// Grows to `min(max_batch, ⌈growth·batch⌉)` when fewer than
    /// `threshold` of the mined triples are active.
    pub fn step(self, active: usize, total: usize) -> Self {
        if total == 0 || (active as f64) >= self.threshold * total as f64 {
            return self;
        }
        // Growth as an exact multiple of 1e-6 so ⌈1.4·45⌉ is 63, not 64.
        let num = (self.growth * 1e6).round() as u128;
        let grown = (self.batch_size as u128 * num).div_ceil(1_000_000) as usize;
        Self {
            batch_size: grown.min(self.max_batch).max(self.batch_size),
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub translate: f64,
    /// The per-cloud removal probability is drawn from
    /// `[removal_min, removal_max]`.
    pub removal_min: f64,
    pub removal_max: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    /// Yaw drawn from `±rotate_deg`.
    pub rotate_deg: f64,
    pub erase_prob: f64,
    /// Cuboid edges as fractions of the cloud extent.
    pub erase_min: f64,
    pub erase_max: f64,
    pub max_retries: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.001,
            jitter_clip: 0.002,
            translate: 0.01,
            removal_min: 0.0,
            removal_max: 0.1,
            flip_x: true,
            flip_y: true,
            rotate_deg: 5.0,
            erase_prob: 0.5,
            erase_min: 0.05,
            erase_max: 0.2,
            max_retries: 10,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            translate: 0.0,
            removal_min: 0.0,
            removal_max: 0.0,
            flip_x: false,
            flip_y: false,
            rotate_deg: 0.0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut a = Self::default();
        if let Some(v) = kv.take::<String>("aug.enabled")? {
            if !parse_bool(&v)? {
                a = Self::none();
            }
        }
        kv.take_into("aug.jitter_sigma", &mut a.jitter_sigma)?;
        kv.take_into("aug.jitter_clip", &mut a.jitter_clip)?;
        kv.take_into("aug.translate", &mut a.translate)?;
        kv.take_into("aug.removal_min", &mut a.removal_min)?;
        kv.take_into("aug.removal_max", &mut a.removal_max)?;
        if let Some(v) = kv.take::<String>("aug.flip_x")? {
            a.flip_x = parse_bool(&v)?;
        }
        if let Some(v) = kv.take::<String>("aug.flip_y")? {
            a.flip_y = parse_bool(&v)?;
        }
        kv.take_into("aug.rotate_deg", &mut a.rotate_deg)?;
        kv.take_into("aug.erase_prob", &mut a.erase_prob)?;
        kv.take_into("aug.erase_min", &mut a.erase_min)?;
        kv.take_into("aug.erase_max", &mut a.erase_max)?;
        kv.take_into("aug.max_retries", &mut a.max_retries)?;
        if !(a.erase_min <= a.erase_max && a.erase_min >= 0.0 && 0.0 <= a.removal_min && a.removal_min <= a.removal_max && a.removal_max <= 1.0) {
            return Err(Error::Config("augmentation ranges are inconsistent".into()));
        }
        Ok(a)
    }
}

/// Jitter, translation, point removal, axis flips, yaw rotation and a
/// cuboid erase, in that order, then clipping to `[-1, 1]`.
pub fn augment(cloud: &PointCloud, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<PointCloud> {
    for _ in 0..=cfg.max_retries {
        let out = augment_once(cloud, cfg, rng);
        if !out.is_empty() {
            return Ok(out);
        }
    }
    Err(Error::InvalidInput(format!(
        "augmentation emptied the cloud {} times",
        cfg.max_retries + 1
    )))
}

fn augment_once(cloud: &PointCloud, cfg: &AugmentConfig, rng: &mut impl Rng) -> PointCloud {
    let mut pts = cloud.points.clone();
    if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).expect("positive sigma");
        for p in &mut pts {
            for v in p.iter_mut() {
                *v += normal.sample(rng).clamp(-cfg.jitter_clip, cfg.jitter_clip);
            }
        }
    }
    if cfg.translate > 0.0 {
        let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-cfg.translate..=cfg.translate));
        for p in &mut pts {
            for a in 0..3 {
                p[a] += t[a];
            }
        }
    }
    if cfg.removal_max > 0.0 {
        let dr = rng.random_range(cfg.removal_min..=cfg.removal_max);
        pts.retain(|_| rng.random::<f64>() >= dr);
    }
    for (axis, on) in [(0, cfg.flip_x), (1, cfg.flip_y)] {
        if on && rng.random_bool(0.5) {
            pts.iter_mut().for_each(|p| p[axis] = -p[axis]);
        }
    }
    if cfg.rotate_deg > 0.0 {
        let yaw = rng.random_range(-cfg.rotate_deg..=cfg.rotate_deg).to_radians();
        let (s, c) = yaw.sin_cos();
        for p in &mut pts {
            let (x, y) = (p[0], p[1]);
            p[0] = c * x - s * y;
            p[1] = s * x + c * y;
        }
    }
    if cfg.erase_prob > 0.0 && !pts.is_empty() && rng.random::<f64>() < cfg.erase_prob {
        if let Some((lo, hi)) = PointCloud::new(pts.clone()).bounds() {
            let mut box_lo = [0.0; 3];
            let mut box_hi = [0.0; 3];
            for a in 0..3 {
                let extent = hi[a] - lo[a];
                let edge = rng.random_range(cfg.erase_min..=cfg.erase_max) * extent;
                let centre = rng.random_range(lo[a]..=hi[a]);
                box_lo[a] = centre - 0.5 * edge;
                box_hi[a] = centre + 0.5 * edge;
            }
            pts.retain(|p| !(0..3).all(|a| p[a] >= box_lo[a] && p[a] <= box_hi[a]));
        }
    }
    pts.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0)));
    PointCloud::new(pts)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    /// Updates every trainable parameter; missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let paths: Vec<String> = params.iter().filter(|(_, e)| e.trainable).map(|(p, _)| p.clone()).collect();
        for path in paths {
            let entry = params.get_mut(&path).expect("path listed above");
            let len = entry.value.len();
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![T::zero(); len]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![T::zero(); len]);
            let g = grads.get(&path).map(|g| g.data());
            for (i, w) in entry.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub margin: f64,
    pub lr: f64,
    /// 0-based epochs at whose start the rate is multiplied by `lr_decay`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub scheduler: BatchScheduler,
    pub augment: AugmentConfig,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    /// Batches smaller than this are dropped.
    pub min_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            epochs: 200,
            margin: 0.2,
            lr: 2e-4,
            lr_decay_epochs: vec![80, 120, 160],
            lr_decay: 0.1,
            scheduler: BatchScheduler::default(),
            augment: AugmentConfig::default(),
            pos_threshold: POS_THRESHOLD_M,
            neg_threshold: NEG_THRESHOLD_M,
            min_batch: 4,
        }
    }
}

impl TrainConfig {
    /// Applies `train.*` and `aug.*` keys.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut c = Self::default();
        kv.take_into("train.seed", &mut c.seed)?;
        kv.take_into("train.epochs", &mut c.epochs)?;
        kv.take_into("train.margin", &mut c.margin)?;
        kv.take_into("train.lr", &mut c.lr)?;
        if let Some(v) = kv.take_list("train.lr_decay_epochs")? {
            c.lr_decay_epochs = v;
        }
        kv.take_into("train.lr_decay", &mut c.lr_decay)?;
        kv.take_into("train.batch_size", &mut c.scheduler.batch_size)?;
        kv.take_into("train.batch_growth", &mut c.scheduler.growth)?;
        kv.take_into("train.active_threshold", &mut c.scheduler.threshold)?;
        kv.take_into("train.max_batch", &mut c.scheduler.max_batch)?;
        kv.take_into("train.pos_threshold", &mut c.pos_threshold)?;
        kv.take_into("train.neg_threshold", &mut c.neg_threshold)?;
        kv.take_into("train.min_batch", &mut c.min_batch)?;
        c.augment = AugmentConfig::from_kv(kv)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        let s = &self.scheduler;
        if s.batch_size < 2 || s.batch_size > s.max_batch || s.growth < 1.0 {
            return Err(Error::Config("batch size must be in 2..=max_batch with growth ≥ 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub active_fraction: f64,
    pub batch_size: usize,
    pub lr: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{:e}",
            self.epoch, self.loss, self.active_fraction, self.batch_size, self.lr
        )
    }
}

/// Shuffled anchors each paired with a random unused positive; pairs are
/// packed into batches of at most `batch_size`, short tails dropped.
pub fn partition_batches(masks: &BatchMasks, batch_size: usize, min_batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let n = masks.n;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut used = vec![false; n];
    let mut batches = Vec::new();
    let mut current = Vec::with_capacity(batch_size);
    for &i in &order {
        if used[i] {
            continue;
        }
        let partners: Vec<usize> = order.iter().copied().filter(|&j| !used[j] && masks.pos(i, j)).collect();
        if partners.is_empty() {
            continue;
        }
        let j = partners[rng.random_range(0..partners.len())];
        used[i] = true;
        used[j] = true;
        current.push(i);
        current.push(j);
        if current.len() + 2 > batch_size {
            batches.push(std::mem::take(&mut current));
        }
    }
    if current.len() >= min_batch.max(2) {
        batches.push(current);
    }
    batches
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
}

fn dump_batch<T: Scalar>(epoch: usize, batch: &[usize], scans: &[ScanRef<'_>], descs: &[Vec<T>]) -> String {
    let mut s = format!("non-finite loss in epoch {epoch}\nrow\tscan\tplace\ttraversal\tpoints\tdescriptor_norm\tfinite\n");
    for (r, &i) in batch.iter().enumerate() {
        let d = &descs[r];
        let norm = d.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        let finite = d.iter().all(|v| v.is_finite());
        writeln!(
            s,
            "{r}\t{i}\t{}\t{}\t{}\t{norm}\t{finite}",
            scans[i].place,
            scans[i].traversal,
            scans[i].cloud.len()
        )
        .expect("string write");
    }
    s
}

/// Runs the epoch loop, calling `on_epoch` after each epoch.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    scans: &[ScanRef<'_>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let positions: Vec<[f64; 2]> = scans.iter().map(|s| s.position).collect();
    let all_masks = pair_masks(&positions, cfg.pos_threshold, cfg.neg_threshold);
    if !(0..all_masks.n).any(|i| (0..all_masks.n).any(|j| all_masks.pos(i, j))) {
        return Err(Error::InvalidInput("training scans contain no positive pair".into()));
    }
    let margin = T::of(cfg.margin);
    let mut adam = Adam::<T>::default();
    let mut scheduler = cfg.scheduler;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = derived_rng(cfg.seed, &format!("batches/{epoch}"));
        let batches = partition_batches(&all_masks, scheduler.batch_size, cfg.min_batch, &mut rng);
        let (mut loss_sum, mut loss_batches, mut active, mut total) = (0.0, 0usize, 0usize, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let clouds = batch
                .iter()
                .map(|&i| {
                    let mut r = derived_rng(cfg.seed, &format!("augment/{epoch}/{b}/{i}"));
                    augment(scans[i].cloud, &cfg.augment, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            let masks = pair_masks(&batch.iter().map(|&i| positions[i]).collect::<Vec<_>>(), cfg.pos_threshold, cfg.neg_threshold);
            debug_assert!(masks.is_valid());
            let refs: Vec<&PointCloud> = clouds.iter().collect();
            let mut sess = Session::new(&model.params, Mode::Train);
            let nodes = forward_batch(&mut sess, &model.config, &refs)?;
            let desc_nodes = nodes.descriptors();
            let descs: Vec<Vec<T>> = desc_nodes.iter().map(|&d| sess.graph.value(d).data().to_vec()).collect();
            let mined = batch_hard_mine(&descs, &masks, margin);
            active += mined.active;
            total += mined.triples.len();
            let loss_node = if mined.triples.is_empty() {
                None
            } else {
                let table = sess.graph.concat(&desc_nodes, 0)?;
                Some(triplet_loss_node(&mut sess.graph, table, &mined.triples, margin)?)
            };
            let loss = loss_node.map_or(0.0, |l| sess.graph.value(l).data()[0].as_f64());
            if !loss.is_finite() {
                return Err(Error::Numerical(dump_batch(epoch + 1, batch, scans, &descs)));
            }
            loss_sum += loss;
            loss_batches += 1;
            let grads = match loss_node {
                Some(l) if loss > 0.0 => {
                    let mut g = sess.graph.backward(l)?;
                    Some(sess.param_grads(&mut g))
                }
                _ => None,
            };
            let bn = sess.bn_statistics();
            drop(sess);
            apply_bn_statistics(&mut model.params, &bn);
            if let Some(grads) = grads {
                if grads.values().any(|g| !g.all_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient\n{}",
                        dump_batch(epoch + 1, batch, scans, &descs)
                    )));
                }
                adam.step(&mut model.params, &grads, lr);
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: if loss_batches > 0 { loss_sum / loss_batches as f64 } else { 0.0 },
            active_fraction: if total > 0 { active as f64 / total as f64 } else { 0.0 },
            batch_size: scheduler.batch_size,
            lr,
        };
        scheduler = scheduler.step(active, total);
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainReport { log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hinge_examples() {
        let a = [1.0, 0.0];
        let n = [-1.0, 0.0];
        assert_eq!(triplet_hinge(&a, &a, &n, 0.2), 0.0);
        let p = [1.0, 0.3];
        assert!((triplet_hinge(&a, &p, &a, 0.2f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scheduler_examples() {
        let s = BatchScheduler::default();
        assert_eq!(s.step(20, 32).batch_size, 45);
        assert_eq!(s.step(23, 32).batch_size, 32);
        assert_eq!(s.step(0, 0).batch_size, 32);
        let full = BatchScheduler { batch_size: 256, ..s };
        assert_eq!(full.step(0, 10).batch_size, 256);
        assert_eq!(BatchScheduler { batch_size: 45, ..s }.step(0, 1).batch_size, 63);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let descs = vec![vec![0.0], vec![1.0], vec![1.0], vec![5.0]];
        let masks = pair_masks(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [100.0, 0.0]], 10.0, 50.0);
        let m = batch_hard_mine(&descs, &masks, 0.2);
        assert_eq!(m.triples[0], (0, 1, 3));
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let c = PointCloud::new(vec![[0.1, 0.2, 0.3], [-0.5, 0.9, -1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment(&c, &AugmentConfig::none(), &mut rng).unwrap(), c);
    }

    #[test]
    fn lr_decays_on_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(79), 2e-4);
        assert!((c.lr_at(80) - 2e-5).abs() < 1e-18);
        assert!((c.lr_at(170) - 2e-7).abs() < 1e-20);
    }

    #[test]
    fn batches_hold_positive_pairs() {
        let positions: Vec<[f64; 2]> = (0..10).flat_map(|p| [[p as f64 * 60.0, 0.0]; 3]).collect();
        let masks = pair_masks(&positions, 10.0, 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = partition_batches(&masks, 8, 4, &mut rng);
        assert!(!batches.is_empty());
        for b in &batches {
            assert!(b.len() <= 8 && b.len() >= 4);
            for pair in b.chunks(2) {
                assert!(masks.pos(pair[0], pair[1]));
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.init_const("w", &[2], 1.0, true);
        store.init_const("buf", &[1], 1.0, false);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_owned(), Tensor::from_f64(&[2], &[3.0, -0.5]));
        Adam::default().step(&mut store, &grads, 0.01);
        let w = store.tensor("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] - 1.01).abs() < 1e-9);
        assert_eq!(store.tensor("buf").unwrap().data(), &[1.0]);
    }
}
