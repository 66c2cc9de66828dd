//! Sparse convolution stem and the adaptive receptive field module.
//!
//! The stem is a `k=5, s=1` convolution followed by a `k=2, s=2`
//! downsampling convolution, each with batch norm and ReLU. The adaptive
//! receptive field module runs parallel branches whose stacked kernels
//! reach receptive fields 1, 3, 5, 7 and 9, reweights each branch's
//! channels with ECA and fuses the branches with per-position,
//! per-channel softmax gates.

use std::collections::HashMap;
use std::sync::Arc;

use crate::diff::NodeId;
use crate::error::{Error, Result};
use crate::nn::{register_bn, Mode, Session};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::voxel::{active_pair_count, build_kernel_map_for, segment_counts, Coord, KernelMap, SparseGrid};

/// One sparse convolution `C^c_{k s}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    /// Batch norm + ReLU after the convolution; otherwise a plain bias.
    pub bn_relu: bool,
}

impl ConvSpec {
    pub fn new(kernel_size: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_size,
            stride,
            in_channels,
            out_channels,
            dilation: 1,
            bn_relu: true,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn linear_output(mut self) -> Self {
        self.bn_relu = false;
        self
    }

    /// Receptive field extent of this convolution alone (stride 1).
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilation
    }
}

/// Convolution stack of one branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub target_rf: usize,
    pub conv_stack: Vec<ConvSpec>,
}

impl BranchSpec {
    /// Conventional branch built from 1³, 3³ and 5³ kernels.
    pub fn conventional(target_rf: usize, channels: usize) -> Result<Self> {
        let kernels: &[usize] = match target_rf {
            1 => &[1],
            3 => &[3],
            5 => &[5],
            7 => &[5, 3],
            9 => &[5, 5],
            11 => &[5, 5, 3],
            _ => return Err(Error::Config(format!("no branch decomposition for receptive field {target_rf}"))),
        };
        Ok(Self::from_kernels(target_rf, kernels.iter().map(|&k| (k, 1)), channels))
    }

    /// One 3³ kernel whose dilation reaches the same receptive field.
    pub fn dilated(target_rf: usize, channels: usize) -> Result<Self> {
        if target_rf.is_multiple_of(2) {
            return Err(Error::Config(format!("receptive field {target_rf} must be odd")));
        }
        let conv = if target_rf == 1 { (1, 1) } else { (3, (target_rf - 1) / 2) };
        Ok(Self::from_kernels(target_rf, [conv].into_iter(), channels))
    }

    fn from_kernels(target_rf: usize, kernels: impl Iterator<Item = (usize, usize)>, c: usize) -> Self {
        let mut conv_stack: Vec<ConvSpec> = kernels.map(|(k, d)| ConvSpec::new(k, 1, c, c).dilated(d)).collect();
        let last = conv_stack.pop().expect("non-empty stack").linear_output();
        conv_stack.push(last);
        Self { target_rf, conv_stack }
    }

    /// `1 + Σ (k_i − 1)·d_i`.
    pub fn receptive_field(&self) -> usize {
        1 + self.conv_stack.iter().map(|c| c.receptive_field() - 1).sum::<usize>()
    }

    /// Non-self kernel-map pairs summed over the stack on `grid`.
    pub fn active_pairs<T: Scalar>(&self, grid: &SparseGrid<T>) -> Result<usize> {
        self.conv_stack
            .iter()
            .map(|c| active_pair_count(grid, c.kernel_size, c.dilation))
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Softmax gates across branches.
    Attention,
    /// Channel concatenation followed by a 1³ convolution.
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArfmConfig {
    pub branch_rfs: Vec<usize>,
    pub dilated: bool,
    pub use_eca: bool,
    pub eca_kernel: usize,
    pub fusion: Fusion,
}

impl Default for ArfmConfig {
    fn default() -> Self {
        Self {
            branch_rfs: vec![1, 3, 5, 7, 9],
            dilated: false,
            use_eca: true,
            eca_kernel: 3,
            fusion: Fusion::Attention,
        }
    }
}

impl ArfmConfig {
    pub fn branches(&self, channels: usize) -> Result<Vec<BranchSpec>> {
        self.branch_rfs
            .iter()
            .map(|&rf| {
                if self.dilated {
                    BranchSpec::dilated(rf, channels)
                } else {
                    BranchSpec::conventional(rf, channels)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub channels: usize,
    pub conv0_kernel: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    /// `None` removes the module entirely.
    pub arfm: Option<ArfmConfig>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            conv0_kernel: 5,
            conv1_kernel: 2,
            conv1_stride: 2,
            arfm: Some(ArfmConfig::default()),
        }
    }
}

impl BackboneConfig {
    pub fn conv0(&self) -> ConvSpec {
        ConvSpec::new(self.conv0_kernel, 1, 1, self.channels)
    }

    pub fn conv1(&self) -> ConvSpec {
        ConvSpec::new(self.conv1_kernel, self.conv1_stride, self.channels, self.channels)
    }
}

/// Feature rows of a graph node together with the sites they live on.
#[derive(Clone, Debug)]
pub struct SparseFeat {
    pub node: NodeId,
    pub coords: Arc<[Coord]>,
    pub level: i32,
    /// Row counts of the packed clouds, in order.
    pub segments: Arc<[usize]>,
}

/// Kernel maps of one cloud, built on first use.
#[derive(Default)]
pub struct MapCache {
    maps: HashMap<(i32, usize, usize, usize), Arc<KernelMap>>,
}

impl MapCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, coords: &[Coord], level: i32, k: usize, s: usize, d: usize) -> Result<Arc<KernelMap>> {
        if let Some(m) = self.maps.get(&(level, k, s, d)) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(build_kernel_map_for(coords, level, k, s, d)?);
        self.maps.insert((level, k, s, d), Arc::clone(&m));
        Ok(m)
    }
}

pub fn register_conv<T: Scalar>(store: &mut ParamStore<T>, seed: u64, prefix: &str, spec: &ConvSpec) {
    let vol = spec.kernel_size.pow(3);
    store.init_he(
        seed,
        &format!("{prefix}.weight"),
        &[vol, spec.in_channels, spec.out_channels],
        vol * spec.in_channels,
    );
    if spec.bn_relu {
        register_bn(store, &format!("{prefix}.bn"), spec.out_channels);
    } else {
        store.init_const(&format!("{prefix}.bias"), &[spec.out_channels], 0.0, true);
    }
}

/// `y[out] = Σ W[off]·x[in]` over the kernel map, then BN+ReLU or bias.
pub fn conv_forward<T: Scalar>(
    sess: &mut Session<'_, T>,
    cache: &mut MapCache,
    x: &SparseFeat,
    spec: &ConvSpec,
    prefix: &str,
) -> Result<SparseFeat> {
    let c_in = sess.graph.shape(x.node)[1];
    if c_in != spec.in_channels {
        return Err(Error::InvalidInput(format!(
            "{prefix}: input has {c_in} channels, convolution expects {}",
            spec.in_channels
        )));
    }
    let map = cache.get(&x.coords, x.level, spec.kernel_size, spec.stride, spec.dilation)?;
    let w = sess.p(&format!("{prefix}.weight"))?;
    let mut y = sess.graph.sparse_conv(x.node, w, Arc::clone(&map))?;
    if spec.bn_relu {
        y = sess.batch_norm(y, &format!("{prefix}.bn"))?;
        y = sess.graph.relu(y)?;
    } else {
        let b = sess.p(&format!("{prefix}.bias"))?;
        y = sess.graph.add(y, b)?;
    }
    let (coords, segments): (Arc<[Coord]>, Arc<[usize]>) = if spec.stride == 1 {
        (Arc::clone(&x.coords), Arc::clone(&x.segments))
    } else if x.segments.len() == 1 {
        (map.out_coords().into(), vec![map.output_len()].into())
    } else {
        (map.out_coords().into(), segment_counts(map.out_coords(), x.segments.len()).into())
    };
    Ok(SparseFeat {
        node: y,
        coords,
        level: map.out_stride_level,
        segments,
    })
}

pub fn register_eca<T: Scalar>(store: &mut ParamStore<T>, seed: u64, prefix: &str, kernel: usize) {
    store.init_he(seed, &format!("{prefix}.weight"), &[kernel], kernel);
    store.init_const(&format!("{prefix}.bias"), &[1], 0.0, true);
}

/// `x ⊗ σ(conv1d(mean_rows(x)))`: one channel weighting shared by all sites.
pub fn eca_forward<T: Scalar>(sess: &mut Session<'_, T>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let rows = sess.graph.shape(x)[0];
    eca_segments(sess, x, &[rows], prefix)
}

/// ECA applied separately to each run of `segments` rows.
pub fn eca_segments<T: Scalar>(sess: &mut Session<'_, T>, x: NodeId, segments: &[usize], prefix: &str) -> Result<NodeId> {
    let w = sess.p(&format!("{prefix}.weight"))?;
    let b = sess.p(&format!("{prefix}.bias"))?;
    let mut parts = Vec::with_capacity(segments.len());
    let mut start = 0;
    for &len in segments {
        let xs = if segments.len() == 1 {
            x
        } else {
            sess.graph.narrow(x, 0, start, len)?
        };
        start += len;
        let pooled = sess.graph.mean_rows(xs)?;
        let z = sess.graph.channel_conv1d(pooled, w, b)?;
        let s = sess.graph.sigmoid(z)?;
        parts.push(sess.graph.mul(xs, s)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        Ok(sess.graph.concat(&parts, 0)?)
    }
}

pub fn register_arfm<T: Scalar>(
    store: &mut ParamStore<T>,
    seed: u64,
    prefix: &str,
    channels: usize,
    cfg: &ArfmConfig,
) -> Result<()> {
    let branches = cfg.branches(channels)?;
    for (i, br) in branches.iter().enumerate() {
        let b = i + 1;
        for (j, spec) in br.conv_stack.iter().enumerate() {
            register_conv(store, seed, &format!("{prefix}.branch{b}.conv{j}"), spec);
        }
        if cfg.use_eca {
            register_eca(store, seed, &format!("{prefix}.eca{b}"), cfg.eca_kernel);
        }
        if cfg.fusion == Fusion::Attention {
            register_bn(store, &format!("{prefix}.gate{b}.delta.bn"), channels);
            store.init_he(seed, &format!("{prefix}.gate{b}.phi.weight"), &[channels, channels], channels);
            register_bn(store, &format!("{prefix}.gate{b}.phi.bn"), channels);
        }
    }
    if cfg.fusion == Fusion::Concat {
        let width = channels * branches.len();
        store.init_he(seed, &format!("{prefix}.fuse.weight"), &[width, channels], width);
        store.init_const(&format!("{prefix}.fuse.bias"), &[channels], 0.0, true);
    }
    Ok(())
}

/// Intermediate nodes of one module application.
#[derive(Clone, Debug)]
pub struct ArfmNodes {
    pub output: SparseFeat,
    /// Post-ECA branch features `X''_i`.
    pub branches: Vec<NodeId>,
    /// `branches × N × C` gate weights (attention fusion only).
    pub gates: Option<NodeId>,
}

pub fn arfm_forward<T: Scalar>(
    sess: &mut Session<'_, T>,
    cache: &mut MapCache,
    x: &SparseFeat,
    channels: usize,
    cfg: &ArfmConfig,
    prefix: &str,
) -> Result<ArfmNodes> {
    let specs = cfg.branches(channels)?;
    let mut branches = Vec::with_capacity(specs.len());
    for (i, br) in specs.iter().enumerate() {
        let b = i + 1;
        let mut h = x.clone();
        for (j, spec) in br.conv_stack.iter().enumerate() {
            h = conv_forward(sess, cache, &h, spec, &format!("{prefix}.branch{b}.conv{j}"))?;
        }
        assert!(
            Arc::ptr_eq(&h.coords, &x.coords) || *h.coords == *x.coords,
            "branch {b} changed the active site set"
        );
        let out = if cfg.use_eca {
            eca_segments(sess, h.node, &x.segments, &format!("{prefix}.eca{b}"))?
        } else {
            h.node
        };
        branches.push(out);
    }
    let (node, gates) = match cfg.fusion {
        Fusion::Attention => {
            let mut s = None;
            for (i, &xb) in branches.iter().enumerate() {
                let d = sess.batch_norm(xb, &format!("{prefix}.gate{}.delta.bn", i + 1))?;
                let d = sess.graph.relu(d)?;
                s = Some(match s {
                    None => d,
                    Some(acc) => sess.graph.add(acc, d)?,
                });
            }
            let s = s.ok_or_else(|| Error::Config("module needs at least one branch".into()))?;
            let mut logits = Vec::with_capacity(branches.len());
            for i in 0..branches.len() {
                let pre = format!("{prefix}.gate{}.phi", i + 1);
                let w = sess.p(&format!("{pre}.weight"))?;
                let l = sess.graph.matmul(s, w)?;
                logits.push(sess.batch_norm(l, &format!("{pre}.bn"))?);
            }
            let stacked = sess.graph.stack(&logits)?;
            let gates = sess.graph.softmax(stacked, 0)?;
            let values = sess.graph.stack(&branches)?;
            let weighted = sess.graph.mul(gates, values)?;
            (sess.graph.sum_axis(weighted, 0)?, Some(gates))
        }
        Fusion::Concat => {
            let cat = sess.graph.concat(&branches, 1)?;
            (sess.linear(cat, &format!("{prefix}.fuse"))?, None)
        }
    };
    Ok(ArfmNodes {
        output: SparseFeat {
            node,
            coords: Arc::clone(&x.coords),
            level: x.level,
            segments: Arc::clone(&x.segments),
        },
        branches,
        gates,
    })
}

pub fn register_backbone<T: Scalar>(store: &mut ParamStore<T>, seed: u64, cfg: &BackboneConfig) -> Result<()> {
    register_conv(store, seed, "conv0", &cfg.conv0());
    register_conv(store, seed, "conv1", &cfg.conv1());
    if let Some(a) = &cfg.arfm {
        register_arfm(store, seed, "arfm", cfg.channels, a)?;
    }
    Ok(())
}

/// Stem plus optional adaptive receptive field module.
pub fn backbone_forward<T: Scalar>(
    sess: &mut Session<'_, T>,
    cache: &mut MapCache,
    grid: &SparseGrid<T>,
    cfg: &BackboneConfig,
) -> Result<SparseFeat> {
    let x = grid_input(sess, grid);
    backbone_packed(sess, cache, x, cfg)
}

/// Backbone over clouds packed with [`crate::voxel::pack_grids`]; `segments` are their
/// row counts.
pub fn backbone_forward_packed<T: Scalar>(
    sess: &mut Session<'_, T>,
    cache: &mut MapCache,
    grid: &SparseGrid<T>,
    segments: &[usize],
    cfg: &BackboneConfig,
) -> Result<SparseFeat> {
    if segments.iter().sum::<usize>() != grid.len() {
        return Err(Error::InvalidInput("segment counts do not cover the grid".into()));
    }
    let x = SparseFeat {
        segments: segments.into(),
        ..grid_input(sess, grid)
    };
    backbone_packed(sess, cache, x, cfg)
}

fn backbone_packed<T: Scalar>(
    sess: &mut Session<'_, T>,
    cache: &mut MapCache,
    x: SparseFeat,
    cfg: &BackboneConfig,
) -> Result<SparseFeat> {
    let h = conv_forward(sess, cache, &x, &cfg.conv0(), "conv0")?;
    let h = conv_forward(sess, cache, &h, &cfg.conv1(), "conv1")?;
    match &cfg.arfm {
        Some(a) => Ok(arfm_forward(sess, cache, &h, cfg.channels, a, "arfm")?.output),
        None => Ok(h),
    }
}

fn grid_input<T: Scalar>(sess: &mut Session<'_, T>, grid: &SparseGrid<T>) -> SparseFeat {
    SparseFeat {
        node: sess.constant(grid.feats.clone()),
        coords: grid.coords.clone().into(),
        level: grid.stride_level,
        segments: vec![grid.len()].into(),
    }
}

fn to_grid<T: Scalar>(sess: &Session<'_, T>, f: &SparseFeat) -> Result<SparseGrid<T>> {
    SparseGrid::new(f.coords.to_vec(), sess.graph.value(f.node).clone(), f.level)
}

/// Applies one convolution to a grid in inference mode.
pub fn sparse_conv<T: Scalar>(
    grid: &SparseGrid<T>,
    spec: &ConvSpec,
    params: &ParamStore<T>,
    prefix: &str,
) -> Result<SparseGrid<T>> {
    let mut sess = Session::new(params, Mode::Infer);
    let x = grid_input(&mut sess, grid);
    let y = conv_forward(&mut sess, &mut MapCache::new(), &x, spec, prefix)?;
    to_grid(&sess, &y)
}

/// Channel reweighting of a grid.
pub fn eca<T: Scalar>(grid: &SparseGrid<T>, params: &ParamStore<T>, prefix: &str) -> Result<SparseGrid<T>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("channel attention on an empty grid".into()));
    }
    let mut sess = Session::new(params, Mode::Infer);
    let x = sess.constant(grid.feats.clone());
    let y = eca_forward(&mut sess, x, prefix)?;
    SparseGrid::new(grid.coords.clone(), sess.graph.value(y).clone(), grid.stride_level)
}

/// Applies the module to a grid with batch statistics from `mode`.
pub fn arfm<T: Scalar>(
    grid: &SparseGrid<T>,
    params: &ParamStore<T>,
    cfg: &ArfmConfig,
    mode: Mode,
) -> Result<SparseGrid<T>> {
    let mut sess = Session::new(params, mode);
    let x = grid_input(&mut sess, grid);
    let out = arfm_forward(&mut sess, &mut MapCache::new(), &x, grid.channels(), cfg, "arfm")?;
    to_grid(&sess, &out.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn branch_stacks_reach_targets() {
        for rf in [1, 3, 5, 7, 9] {
            let b = BranchSpec::conventional(rf, 8).unwrap();
            assert_eq!(b.receptive_field(), rf);
            assert!(b.conv_stack.iter().all(|c| [1, 3, 5].contains(&c.kernel_size)));
            assert!(!b.conv_stack.last().unwrap().bn_relu);
            assert!(b.conv_stack[..b.conv_stack.len() - 1].iter().all(|c| c.bn_relu));
            let d = BranchSpec::dilated(rf, 8).unwrap();
            assert_eq!(d.receptive_field(), rf);
        }
        assert_eq!(
            BranchSpec::conventional(7, 4).unwrap().conv_stack.iter().map(|c| c.kernel_size).collect::<Vec<_>>(),
            vec![5, 3]
        );
        assert!(BranchSpec::conventional(4, 4).is_err());
    }

    #[test]
    fn stem_specs() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.conv0(), ConvSpec::new(5, 1, 1, 64));
        assert_eq!(cfg.conv1(), ConvSpec::new(2, 2, 64, 64));
    }

    fn identity_conv(c: usize) -> (ParamStore<f64>, ConvSpec) {
        let spec = ConvSpec::new(3, 1, c, c).linear_output();
        let mut store = ParamStore::new();
        let mut w = vec![0.0; 27 * c * c];
        for i in 0..c {
            w[13 * c * c + i * c + i] = 1.0;
        }
        store.insert("c.weight", Tensor::new(vec![27, c, c], w), true);
        store.init_const("c.bias", &[c], 0.0, true);
        (store, spec)
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let (store, spec) = identity_conv(2);
        let coords = vec![[0, 0, 0], [1, 0, 0], [0, 2, 1]];
        let feats = Tensor::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = SparseGrid::new(coords, feats, 1).unwrap();
        let out = sparse_conv(&g, &spec, &store, "c").unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn isolated_voxel_uses_center_weights_only() {
        let spec = ConvSpec::new(3, 1, 1, 1).linear_output();
        let mut store = ParamStore::<f64>::new();
        store.init_uniform(1, "c.weight", &[27, 1, 1], 1.0);
        store.init_const("c.bias", &[1], 0.0, true);
        let g = SparseGrid::new(vec![[4, 4, 4]], Tensor::from_f64(&[1, 1], &[2.0]), 1).unwrap();
        let out = sparse_conv(&g, &spec, &store, "c").unwrap();
        let center = store.tensor("c.weight").unwrap().data()[13];
        assert_eq!(out.feats.data(), &[2.0 * center]);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let (store, spec) = identity_conv(2);
        let g = SparseGrid::<f64>::occupancy(vec![[0, 0, 0]]).unwrap();
        assert!(matches!(sparse_conv(&g, &spec, &store, "c"), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn eca_zero_weights_halve() {
        let mut store = ParamStore::<f64>::new();
        store.init_const("e.weight", &[3], 0.0, true);
        store.init_const("e.bias", &[1], 0.0, true);
        let feats = Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        let g = SparseGrid::new(vec![[0, 0, 0], [1, 1, 1]], feats.clone(), 1).unwrap();
        let out = eca(&g, &store, "e").unwrap();
        assert_eq!(out.feats, feats.map(|v| v / 2.0));
    }

    #[test]
    fn eca_saturated_gate_is_identity() {
        let mut store = ParamStore::<f64>::new();
        store.init_const("e.weight", &[3], 0.0, true);
        store.init_const("e.bias", &[1], 50.0, true);
        let feats = Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 4.0]);
        let g = SparseGrid::new(vec![[0, 0, 0], [1, 1, 1]], feats.clone(), 1).unwrap();
        let out = eca(&g, &store, "e").unwrap();
        assert!(out.feats.max_abs_diff(&feats) < 1e-12);
    }
}
