//! Coordinate-hashed sparse voxel grids and kernel maps.
//!
//! A [`SparseGrid`] stores occupied integer cells in finest-voxel units;
//! cells at stride level `s` are multiples of `s`. A [`KernelMap`] lists
//! every `(input, output, offset)` contribution of one sparse convolution.
//! Stride-1 maps follow the submanifold convention: outputs exist only at
//! occupied input sites.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Multiplicative hash for integer coordinate keys; deterministic and much
/// cheaper than the default SipHash for three `i32`s.
#[derive(Default, Clone, Copy)]
pub struct CoordHasher(u64);

impl Hasher for CoordHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            self.write_u64(u64::from_le_bytes(word));
        }
    }

    fn write_i32(&mut self, v: i32) {
        self.write_u64(v as u32 as u64);
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(5) ^ v).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
    }

    fn write_usize(&mut self, v: usize) {
        self.write_u64(v as u64);
    }
}

/// Hash map keyed by voxel coordinates.
pub type CoordMap<V> = HashMap<Coord, V, BuildHasherDefault<CoordHasher>>;

pub type Coord = [i32; 3];

/// Unordered set of 3-D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True if every component lies in `[-1, 1]`.
    pub fn is_canonical(&self) -> bool {
        self.points.iter().flatten().all(|v| (-1.0..=1.0).contains(v))
    }

    /// Axis-aligned bounds `(min, max)`; `None` when empty.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }
}

/// Occupied voxels with one feature row each.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrid<T> {
    pub coords: Vec<Coord>,
    pub feats: Tensor<T>,
    pub stride_level: i32,
}

impl<T: Scalar> SparseGrid<T> {
    pub fn new(coords: Vec<Coord>, feats: Tensor<T>, stride_level: i32) -> Result<Self> {
        if feats.shape().len() != 2 || feats.rows() != coords.len() {
            return Err(Error::InvalidInput(format!(
                "{} coords but feature tensor {:?}",
                coords.len(),
                feats.shape()
            )));
        }
        if stride_level < 1 {
            return Err(Error::InvalidInput(format!("stride level {stride_level}")));
        }
        let mut seen = CoordMap::with_capacity_and_hasher(coords.len(), Default::default());
        for (i, c) in coords.iter().enumerate() {
            if c.iter().any(|v| v.rem_euclid(stride_level) != 0) {
                return Err(Error::InvalidInput(format!("coord {c:?} not on stride {stride_level}")));
            }
            if seen.insert(*c, i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate coord {c:?}")));
            }
        }
        Ok(Self {
            coords,
            feats,
            stride_level,
        })
    }

    /// Occupancy grid with constant unit features.
    pub fn occupancy(coords: Vec<Coord>) -> Result<Self> {
        let n = coords.len();
        Self::new(coords, Tensor::full(&[n, 1], T::one()), 1)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    /// Cell centres in point units for quantisation step `step`.
    pub fn dequantize_centers(&self, step: f64) -> PointCloud {
        let half = 0.5 * self.stride_level as f64;
        PointCloud::new(
            self.coords
                .iter()
                .map(|c| c.map(|v| (v as f64 + half) * step))
                .collect(),
        )
    }
}

/// Voxelises a cloud at `step`: cell `floor(p / step)`, duplicates merged
/// with the first occurrence kept, unit occupancy features.
pub fn quantize<T: Scalar>(cloud: &PointCloud, step: f64) -> Result<SparseGrid<T>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidInput(format!("quantization step {step}")));
    }
    if cloud.is_empty() {
        return Err(Error::InvalidInput("empty point cloud".into()));
    }
    let mut index: CoordMap<usize> = CoordMap::with_capacity_and_hasher(cloud.len(), Default::default());
    let mut coords = Vec::new();
    for p in &cloud.points {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite coordinate {p:?}")));
        }
        let c = p.map(|v| (v / step).floor() as i32);
        index.entry(c).or_insert_with(|| {
            coords.push(c);
            coords.len() - 1
        });
    }
    SparseGrid::occupancy(coords)
}

/// Spacing along x between clouds packed into one grid.
pub const BATCH_SEPARATION: i32 = 1 << 20;

/// Packs grids into one by shifting cloud `b` by `b·BATCH_SEPARATION`
/// along x. Rows stay contiguous per cloud; returns the row counts.
pub fn pack_grids<T: Scalar>(grids: &[SparseGrid<T>]) -> Result<(SparseGrid<T>, Vec<usize>)> {
    let first = grids
        .first()
        .ok_or_else(|| Error::InvalidInput("no grids to pack".into()))?;
    let (level, channels) = (first.stride_level, first.channels());
    let limit = BATCH_SEPARATION / 2;
    if grids.len() as i64 * BATCH_SEPARATION as i64 > i32::MAX as i64 / 2 {
        return Err(Error::InvalidInput(format!("cannot pack {} grids", grids.len())));
    }
    let mut coords = Vec::new();
    let mut data = Vec::new();
    let mut counts = Vec::with_capacity(grids.len());
    for (b, g) in grids.iter().enumerate() {
        if g.stride_level != level || g.channels() != channels {
            return Err(Error::InvalidInput("packed grids must share stride and channels".into()));
        }
        let shift = b as i32 * BATCH_SEPARATION;
        for c in &g.coords {
            if c.iter().any(|v| v.abs() >= limit) {
                return Err(Error::InvalidInput(format!("coord {c:?} too far from the origin to pack")));
            }
            coords.push([c[0] + shift, c[1], c[2]]);
        }
        data.extend_from_slice(g.feats.data());
        counts.push(g.len());
    }
    let n = coords.len();
    let grid = SparseGrid {
        coords,
        feats: Tensor::new(vec![n, channels], data),
        stride_level: level,
    };
    Ok((grid, counts))
}

/// Row counts per packed cloud for sites produced from a packed grid.
pub fn segment_counts(coords: &[Coord], segments: usize) -> Vec<usize> {
    let mut counts = vec![0; segments];
    for c in coords {
        let b = (c[0] + BATCH_SEPARATION / 2).div_euclid(BATCH_SEPARATION);
        counts[b as usize] += 1;
    }
    counts
}

fn offset_start(kernel_size: usize) -> i32 {
    if kernel_size % 2 == 1 {
        -((kernel_size / 2) as i32)
    } else {
        0
    }
}

/// Integer offset vector for a flat kernel index (x-major order).
///
/// Odd kernels are centred on the output site; even kernels span
/// `{0, …, k−1}³` anchored at it.
pub fn offset_vector(kernel_size: usize, idx: usize) -> Coord {
    let k = kernel_size;
    let s = offset_start(k);
    [
        (idx / (k * k)) as i32 + s,
        ((idx / k) % k) as i32 + s,
        (idx % k) as i32 + s,
    ]
}

/// Precomputed contributions of one sparse convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMap {
    triples: Vec<(u32, u32, u32)>,
    by_offset: Vec<Vec<(u32, u32)>>,
    out_coords: Vec<Coord>,
    input_len: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub in_stride_level: i32,
    pub out_stride_level: i32,
}

impl KernelMap {
    /// `(in_idx, out_idx, offset_idx)` in output-major, offset-minor order.
    pub fn triples(&self) -> &[(u32, u32, u32)] {
        &self.triples
    }

    /// `(in_idx, out_idx)` pairs grouped by offset index.
    pub fn pairs_by_offset(&self) -> &[Vec<(u32, u32)>] {
        &self.by_offset
    }

    pub fn out_coords(&self) -> &[Coord] {
        &self.out_coords
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.out_coords.len()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel_size.pow(3)
    }

    /// Contributions whose input and output are the same site.
    pub fn self_pairs(&self) -> usize {
        if self.stride != 1 {
            return 0;
        }
        self.triples.iter().filter(|t| t.0 == t.1).count()
    }
}

/// Builds the kernel map of a convolution over `coords` at `stride_level`.
pub fn build_kernel_map_for(
    coords: &[Coord],
    stride_level: i32,
    kernel_size: usize,
    stride: usize,
    dilation: usize,
) -> Result<KernelMap> {
    if kernel_size == 0 || stride == 0 || dilation == 0 {
        return Err(Error::InvalidInput(format!(
            "kernel {kernel_size}, stride {stride}, dilation {dilation} must be positive"
        )));
    }
    let index: CoordMap<u32> = coords.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
    let out_level = stride_level * stride as i32;
    let out_coords: Vec<Coord> = if stride == 1 {
        coords.to_vec()
    } else {
        let mut seen = CoordMap::default();
        let mut out = Vec::new();
        for c in coords {
            let o = c.map(|v| v.div_euclid(out_level) * out_level);
            seen.entry(o).or_insert_with(|| {
                out.push(o);
            });
        }
        out
    };
    let vol = kernel_size.pow(3);
    let offsets: Vec<Coord> = (0..vol)
        .map(|i| offset_vector(kernel_size, i).map(|v| v * dilation as i32 * stride_level))
        .collect();
    let mut triples = Vec::new();
    let mut by_offset = vec![Vec::new(); vol];
    for (o, oc) in out_coords.iter().enumerate() {
        for (k, d) in offsets.iter().enumerate() {
            let src = [oc[0] + d[0], oc[1] + d[1], oc[2] + d[2]];
            if let Some(&i) = index.get(&src) {
                triples.push((i, o as u32, k as u32));
                by_offset[k].push((i, o as u32));
            }
        }
    }
    Ok(KernelMap {
        triples,
        by_offset,
        out_coords,
        input_len: coords.len(),
        kernel_size,
        stride,
        dilation,
        in_stride_level: stride_level,
        out_stride_level: out_level,
    })
}

pub fn build_kernel_map<T: Scalar>(
    grid: &SparseGrid<T>,
    kernel_size: usize,
    stride: usize,
    dilation: usize,
) -> Result<KernelMap> {
    build_kernel_map_for(&grid.coords, grid.stride_level, kernel_size, stride, dilation)
}

/// Non-self contributions of a stride-1 map: how many neighbours the kernel
/// actually reaches on this grid.
pub fn active_pair_count<T: Scalar>(grid: &SparseGrid<T>, kernel_size: usize, dilation: usize) -> Result<usize> {
    let map = build_kernel_map(grid, kernel_size, 1, dilation)?;
    Ok(map.triples().len() - map.self_pairs())
}
