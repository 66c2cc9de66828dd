//! Places, pair labels, canonical preprocessing, the synthetic scene
//! generator and on-disk formats for clouds and dataset manifests.
//!
//! Cloud files start with `PCF1`, a little-endian `u32` count and `count × 3`
//! `f32` coordinates. Whitespace-separated `x y z` text is accepted too.
//! A manifest has one scan per line: `place_id x y traversal relative_path`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::params::derived_rng;
use crate::voxel::PointCloud;

pub const CANONICAL_POINTS: usize = 4096;
pub const POS_THRESHOLD_M: f64 = 10.0;
pub const NEG_THRESHOLD_M: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub target_points: usize,
    /// Fraction of lowest points (by height) dropped as ground.
    pub ground_quantile: f64,
    pub min_points: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_points: CANONICAL_POINTS,
            ground_quantile: 0.1,
            min_points: 16,
        }
    }
}

/// Ground removal, resampling to the target count, then centring on the
/// bounding box and scaling by half its longest edge. Clouds that are
/// already canonical pass through unchanged.
pub fn preprocess(raw: &PointCloud, cfg: &PreprocessConfig, rng: &mut impl Rng) -> Result<PointCloud> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("cannot preprocess an empty cloud".into()));
    }
    if raw.points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("cloud has a non-finite coordinate".into()));
    }
    if raw.len() == cfg.target_points && raw.is_canonical() {
        return Ok(raw.clone());
    }
    let mut heights: Vec<f64> = raw.points.iter().map(|p| p[2]).collect();
    heights.sort_by(f64::total_cmp);
    let cut = (cfg.ground_quantile * raw.len() as f64).floor() as usize;
    let kept: Vec<[f64; 3]> = if cut == 0 {
        raw.points.clone()
    } else {
        let ground = heights[cut - 1];
        raw.points.iter().copied().filter(|p| p[2] > ground).collect()
    };
    if kept.len() < cfg.min_points {
        return Err(Error::InvalidInput(format!(
            "{} points left after ground removal, need at least {}",
            kept.len(),
            cfg.min_points
        )));
    }
    let n = cfg.target_points;
    let sampled: Vec<[f64; 3]> = if kept.len() >= n {
        let mut idx = index::sample(rng, kept.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| kept[i]).collect()
    } else {
        let mut out = kept.clone();
        out.extend((kept.len()..n).map(|_| kept[rng.random_range(0..kept.len())]));
        out
    };
    Ok(normalize_extent(&sampled))
}

/// Affine map sending the bounding-box centre to the origin and the longest
/// edge onto `[-1, 1]`.
pub fn normalize_extent(points: &[[f64; 3]]) -> PointCloud {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center: [f64; 3] = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
    let half = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max);
    let scale = if half > 0.0 { 1.0 / half } else { 1.0 };
    PointCloud::new(
        points
            .iter()
            .map(|p| std::array::from_fn(|a| ((p[a] - center[a]) * scale).clamp(-1.0, 1.0)))
            .collect(),
    )
}

/// Symmetric positive / negative labels of a batch, diagonal excluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchMasks {
    pub n: usize,
    pub pos: Vec<bool>,
    pub neg: Vec<bool>,
}

impl BatchMasks {
    pub fn pos(&self, i: usize, j: usize) -> bool {
        self.pos[i * self.n + j]
    }

    pub fn neg(&self, i: usize, j: usize) -> bool {
        self.neg[i * self.n + j]
    }

    /// Disjoint, symmetric, empty diagonal.
    pub fn is_valid(&self) -> bool {
        let n = self.n;
        (0..n).all(|i| {
            !self.pos(i, i)
                && !self.neg(i, i)
                && (0..n).all(|j| {
                    !(self.pos(i, j) && self.neg(i, j)) && self.pos(i, j) == self.pos(j, i) && self.neg(i, j) == self.neg(j, i)
                })
        })
    }
}

pub fn distance2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `pos = d < pos_threshold ∧ i ≠ j`, `neg = d > neg_threshold`.
pub fn pair_masks(positions: &[[f64; 2]], pos_threshold: f64, neg_threshold: f64) -> BatchMasks {
    let n = positions.len();
    let mut pos = vec![false; n * n];
    let mut neg = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = distance2(positions[i], positions[j]);
            pos[i * n + j] = d < pos_threshold;
            neg[i * n + j] = d > neg_threshold;
        }
    }
    BatchMasks { n, pos, neg }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub traversal: u32,
    /// World position of the sensor, metres.
    pub position: [f64; 2],
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Place {
    pub id: u64,
    pub position: [f64; 2],
    pub scans: Vec<Scan>,
}

/// Borrowed view of one scan with its place id.
#[derive(Clone, Copy, Debug)]
pub struct ScanRef<'a> {
    pub place: u64,
    pub traversal: u32,
    pub position: [f64; 2],
    pub cloud: &'a PointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaceDataset {
    pub places: Vec<Place>,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
}

impl PlaceDataset {
    pub fn new(places: Vec<Place>) -> Self {
        Self {
            places,
            pos_threshold: POS_THRESHOLD_M,
            neg_threshold: NEG_THRESHOLD_M,
        }
    }

    pub fn scan_count(&self) -> usize {
        self.places.iter().map(|p| p.scans.len()).sum()
    }

    /// Scans in place order then traversal order; with `Some(set)`, only
    /// traversals contained in `set`.
    pub fn scans(&self, traversals: Option<&[u32]>) -> Vec<ScanRef<'_>> {
        self.places
            .iter()
            .flat_map(|p| {
                p.scans
                    .iter()
                    .filter(move |s| traversals.is_none_or(|t| t.contains(&s.traversal)))
                    .map(move |s| ScanRef {
                        place: p.id,
                        traversal: s.traversal,
                        position: s.position,
                        cloud: &s.cloud,
                    })
            })
            .collect()
    }

    pub fn masks(&self, scans: &[ScanRef<'_>]) -> BatchMasks {
        let pos: Vec<_> = scans.iter().map(|s| s.position).collect();
        pair_masks(&pos, self.pos_threshold, self.neg_threshold)
    }

    /// Writes `manifest.txt` and one `PCF1` file per scan under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("scans"))?;
        let mut manifest = String::new();
        for p in &self.places {
            for s in &p.scans {
                let rel = format!("scans/p{:04}_t{}.pcf", p.id, s.traversal);
                write_pcf(&dir.join(&rel), &s.cloud)?;
                writeln!(
                    manifest,
                    "{} {} {} {} {}",
                    p.id, s.position[0], s.position[1], s.traversal, rel
                )
                .expect("string write");
            }
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Reads a dataset written by [`PlaceDataset::save`]. A place's position
    /// is the mean of its scan positions.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::format("manifest", format!("{}: {e}", manifest_path.display())))?;
        let mut places: Vec<Place> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rec = ManifestRecord::parse(line).map_err(|d| Error::format("manifest", format!("line {}: {d}", lineno + 1)))?;
            let cloud = read_pcf(&dir.join(&rec.path))?;
            let scan = Scan {
                traversal: rec.traversal,
                position: rec.position,
                cloud,
            };
            match places.iter_mut().find(|p| p.id == rec.place) {
                Some(p) => p.scans.push(scan),
                None => places.push(Place {
                    id: rec.place,
                    position: rec.position,
                    scans: vec![scan],
                }),
            }
        }
        for p in &mut places {
            let n = p.scans.len() as f64;
            p.position = [0, 1].map(|a| p.scans.iter().map(|s| s.position[a]).sum::<f64>() / n);
        }
        Ok(Self::new(places))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub place: u64,
    pub position: [f64; 2],
    pub traversal: u32,
    pub path: PathBuf,
}

impl ManifestRecord {
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(format!("expected 5 fields, found {}", f.len()));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|e| format!("{what} `{s}`: {e}"));
        Ok(Self {
            place: f[0].parse().map_err(|e| format!("place id `{}`: {e}", f[0]))?,
            position: [num(f[1], "x")?, num(f[2], "y")?],
            traversal: f[3].parse().map_err(|e| format!("traversal `{}`: {e}", f[3]))?,
            path: PathBuf::from(f[4]),
        })
    }
}

pub fn encode_pcf(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 12 * cloud.len());
    out.extend_from_slice(b"PCF1");
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for &v in p {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pcf(bytes: &[u8]) -> Result<PointCloud> {
    if let Some(body) = bytes.strip_prefix(b"PCF1") {
        if body.len() < 4 {
            return Err(Error::format("PCF1", "truncated header"));
        }
        let n = u32::from_le_bytes(body[..4].try_into().expect("4 bytes")) as usize;
        let data = &body[4..];
        if data.len() != n * 12 {
            return Err(Error::format(
                "PCF1",
                format!("{n} points need {} bytes, found {}", n * 12, data.len()),
            ));
        }
        let points = data
            .chunks_exact(12)
            .map(|c| std::array::from_fn(|a| f32::from_le_bytes(c[4 * a..4 * a + 4].try_into().expect("4 bytes")) as f64))
            .collect();
        return Ok(PointCloud::new(points));
    }
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format("point cloud", "neither PCF1 nor UTF-8 text"))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("point cloud text", format!("line {}: {e}", lineno + 1)))?;
        if v.len() != 3 {
            return Err(Error::format(
                "point cloud text",
                format!("line {}: expected 3 values, found {}", lineno + 1, v.len()),
            ));
        }
        points.push([v[0], v[1], v[2]]);
    }
    Ok(PointCloud::new(points))
}

pub fn write_pcf(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pcf(cloud))?;
    Ok(())
}

pub fn read_pcf(path: &Path) -> Result<PointCloud> {
    decode_pcf(&std::fs::read(path)?)
}

/// Parameters of the synthetic place generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecipe {
    pub seed: u64,
    pub places: usize,
    /// Distance between consecutive places along a straight trajectory.
    pub spacing: f64,
    pub traversals: usize,
    /// Standard deviation of per-point range noise, metres.
    pub noise: f64,
    /// Sensor position jitter between traversals, metres.
    pub pose_jitter: f64,
    /// Heading jitter between traversals, degrees.
    pub yaw_jitter_deg: f64,
    /// Probability that a small (pedestrian-scale) object is absent in a traversal.
    pub dynamic_dropout: f64,
    pub raw_points: usize,
    /// Half-width of the square region around each place, metres.
    pub extent: f64,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        Self {
            seed: 7,
            places: 64,
            spacing: 60.0,
            traversals: 4,
            noise: 0.03,
            pose_jitter: 1.0,
            yaw_jitter_deg: 3.0,
            dynamic_dropout: 0.2,
            raw_points: 6000,
            extent: 20.0,
        }
    }
}

impl SceneRecipe {
    /// Applies `data.*` keys.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut r = Self::default();
        kv.take_into("data.seed", &mut r.seed)?;
        kv.take_into("data.places", &mut r.places)?;
        kv.take_into("data.spacing", &mut r.spacing)?;
        kv.take_into("data.traversals", &mut r.traversals)?;
        kv.take_into("data.noise", &mut r.noise)?;
        kv.take_into("data.pose_jitter", &mut r.pose_jitter)?;
        kv.take_into("data.yaw_jitter_deg", &mut r.yaw_jitter_deg)?;
        kv.take_into("data.dynamic_dropout", &mut r.dynamic_dropout)?;
        kv.take_into("data.raw_points", &mut r.raw_points)?;
        kv.take_into("data.extent", &mut r.extent)?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.places < 2 {
            return Err(Error::Config("a synthetic dataset needs at least 2 places".into()));
        }
        if self.traversals == 0 {
            return Err(Error::Config("traversals must be positive".into()));
        }
        if !(self.spacing > 0.0 && self.extent > 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("spacing and extent must be positive, noise non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.dynamic_dropout) {
            return Err(Error::Config("dynamic_dropout must lie in [0, 1]".into()));
        }
        if self.raw_points < 64 {
            return Err(Error::Config("raw_points must be at least 64".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Primitive {
    /// Axis-aligned in the place frame after a yaw about its centre.
    Box { center: [f64; 2], size: [f64; 3], yaw: f64 },
    /// Vertical rectangle from `a` to `b`.
    Wall { a: [f64; 2], b: [f64; 2], height: f64 },
    Cylinder { center: [f64; 2], radius: f64, height: f64, dynamic: bool },
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Primitive::Box { size: [w, d, h], .. } => w * d + 2.0 * h * (w + d),
            Primitive::Wall { a, b, height } => distance2(a, b) * height,
            Primitive::Cylinder { radius, height, .. } => std::f64::consts::TAU * radius * height + std::f64::consts::PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match *self {
            Primitive::Box { center, size: [w, d, h], yaw } => {
                let top = w * d;
                let side_x = w * h;
                let side_y = d * h;
                let u = rng.random_range(0.0..top + 2.0 * side_x + 2.0 * side_y);
                let (s, t) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                let local = if u < top {
                    [s * w, t * d, h]
                } else if u < top + 2.0 * side_x {
                    let sign = if u < top + side_x { -0.5 } else { 0.5 };
                    [s * w, sign * d, (t + 0.5) * h]
                } else {
                    let sign = if u < top + 2.0 * side_x + side_y { -0.5 } else { 0.5 };
                    [sign * w, s * d, (t + 0.5) * h]
                };
                let (sy, cy) = yaw.sin_cos();
                [
                    center[0] + cy * local[0] - sy * local[1],
                    center[1] + sy * local[0] + cy * local[1],
                    local[2],
                ]
            }
            Primitive::Wall { a, b, height } => {
                let s = rng.random::<f64>();
                [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), rng.random::<f64>() * height]
            }
            Primitive::Cylinder {
                center, radius, height, ..
            } => {
                let lateral = std::f64::consts::TAU * radius * height;
                let cap = std::f64::consts::PI * radius * radius;
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                if rng.random::<f64>() * (lateral + cap) < lateral {
                    [
                        center[0] + radius * theta.cos(),
                        center[1] + radius * theta.sin(),
                        rng.random::<f64>() * height,
                    ]
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    [center[0] + r * theta.cos(), center[1] + r * theta.sin(), height]
                }
            }
        }
    }
}

/// Building-scale boxes, walls, and pole/pedestrian/tree-scale cylinders.
fn place_layout(recipe: &SceneRecipe, place: u64) -> Vec<Primitive> {
    let mut rng = derived_rng(recipe.seed, &format!("layout/{place}"));
    let e = recipe.extent;
    let pt = |rng: &mut ChaCha8Rng, margin: f64| [rng.random_range(-e + margin..e - margin), rng.random_range(-e + margin..e - margin)];
    let mut prims = Vec::new();
    for _ in 0..rng.random_range(3..=6) {
        let size = [rng.random_range(3.0..12.0), rng.random_range(3.0..12.0), rng.random_range(3.0..12.0)];
        let center = pt(&mut rng, 2.0);
        prims.push(Primitive::Box {
            center,
            size,
            yaw: rng.random_range(-0.8..0.8),
        });
    }
    for _ in 0..rng.random_range(1..=3) {
        let a = pt(&mut rng, 1.0);
        let len = rng.random_range(8.0..25.0);
        let dir = rng.random_range(0.0..std::f64::consts::TAU);
        let b = [(a[0] + len * dir.cos()).clamp(-e, e), (a[1] + len * dir.sin()).clamp(-e, e)];
        prims.push(Primitive::Wall {
            a,
            b,
            height: rng.random_range(1.5..5.0),
        });
    }
    for _ in 0..rng.random_range(4..=12) {
        let kind = rng.random_range(0..3);
        let (radius, height, dynamic) = match kind {
            0 => (rng.random_range(0.1..0.3), rng.random_range(3.0..7.0), false),
            1 => (rng.random_range(0.25..0.4), rng.random_range(1.5..1.9), true),
            _ => (rng.random_range(0.6..1.5), rng.random_range(3.0..8.0), false),
        };
        prims.push(Primitive::Cylinder {
            center: pt(&mut rng, 0.5),
            radius,
            height,
            dynamic,
        });
    }
    prims
}

/// One raw scan of `place` in traversal `traversal`, in world-aligned
/// metres relative to the jittered sensor pose.
fn raw_scan(recipe: &SceneRecipe, layout: &[Primitive], place: u64, traversal: u32) -> (PointCloud, [f64; 2]) {
    let mut rng = derived_rng(recipe.seed, &format!("scan/{place}/{traversal}"));
    let present: Vec<&Primitive> = layout
        .iter()
        .filter(|p| !matches!(p, Primitive::Cylinder { dynamic: true, .. }) || rng.random::<f64>() >= recipe.dynamic_dropout)
        .collect();
    let offset = [
        rng.random_range(-1.0..=1.0) * recipe.pose_jitter,
        rng.random_range(-1.0..=1.0) * recipe.pose_jitter,
    ];
    let yaw = rng.random_range(-1.0..=1.0) * recipe.yaw_jitter_deg.to_radians();
    let (sy, cy) = yaw.sin_cos();
    let areas: Vec<f64> = present.iter().map(|p| p.area()).collect();
    let total: f64 = areas.iter().sum();
    let noise = Normal::new(0.0, recipe.noise.max(0.0)).expect("valid sigma");
    let ground_n = recipe.raw_points / 10;
    let e = recipe.extent;
    let mut points = Vec::with_capacity(recipe.raw_points);
    for i in 0..recipe.raw_points {
        let mut p = if i < ground_n {
            [rng.random_range(-e..e), rng.random_range(-e..e), 0.0]
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut k = 0;
            while k + 1 < areas.len() && u >= areas[k] {
                u -= areas[k];
                k += 1;
            }
            present[k].sample(&mut rng)
        };
        for v in &mut p {
            *v += noise.sample(&mut rng);
        }
        let (x, y) = (p[0] - offset[0], p[1] - offset[1]);
        points.push([cy * x + sy * y, -sy * x + cy * y, p[2]]);
    }
    (PointCloud::new(points), offset)
}

/// Deterministic function of the recipe; places lie on the x axis at
/// `id · spacing`.
pub fn generate_synthetic(recipe: &SceneRecipe) -> Result<PlaceDataset> {
    recipe.validate()?;
    let pre = PreprocessConfig::default();
    let places = (0..recipe.places as u64)
        .map(|id| {
            let position = [id as f64 * recipe.spacing, 0.0];
            let layout = place_layout(recipe, id);
            let scans = (0..recipe.traversals as u32)
                .map(|t| {
                    let (raw, offset) = raw_scan(recipe, &layout, id, t);
                    let mut rng = derived_rng(recipe.seed, &format!("preprocess/{id}/{t}"));
                    Ok(Scan {
                        traversal: t,
                        position: [position[0] + offset[0], position[1] + offset[1]],
                        cloud: preprocess(&raw, &pre, &mut rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Place { id, position, scans })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PlaceDataset::new(places))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn masks_follow_thresholds() {
        let m = pair_masks(&[[0.0, 0.0], [5.0, 0.0], [30.0, 0.0], [100.0, 0.0]], 10.0, 50.0);
        assert!(m.pos(0, 1) && m.pos(1, 0));
        assert!(!m.pos(0, 2) && !m.neg(0, 2));
        assert!(m.neg(0, 3) && m.neg(2, 3) && !m.neg(1, 2));
        assert!(m.is_valid());
    }

    #[test]
    fn pcf_binary_and_text() {
        let c = PointCloud::new(vec![[0.5, -0.25, 1.0], [0.0, 0.125, -1.0]]);
        assert_eq!(decode_pcf(&encode_pcf(&c)).unwrap(), c);
        let t = decode_pcf(b"0.5 -0.25 1\n# c\n0 0.125 -1\n").unwrap();
        assert_eq!(t, c);
        assert!(decode_pcf(b"PCF1\x02\0\0\0").is_err());
        assert!(decode_pcf(b"1 2\n").is_err());
    }

    #[test]
    fn preprocess_rejects_tiny_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = PointCloud::new((0..10).map(|i| [i as f64, 0.0, i as f64]).collect());
        assert!(preprocess(&c, &PreprocessConfig::default(), &mut rng).is_err());
        assert!(preprocess(&PointCloud::new(vec![]), &PreprocessConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn manifest_record_parse() {
        let r = ManifestRecord::parse("3 120.5 -0.25 2 scans/p0003_t2.pcf").unwrap();
        assert_eq!(r.place, 3);
        assert_eq!(r.position, [120.5, -0.25]);
        assert_eq!(r.traversal, 2);
        assert!(ManifestRecord::parse("3 1 2").is_err());
    }
}
