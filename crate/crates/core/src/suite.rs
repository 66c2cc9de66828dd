//! Finite-difference checks of every graph primitive and model module.
//!
//! Each case builds a small graph from fixed seeds, reduces its output to a
//! scalar through a random projection and compares analytic gradients with
//! central differences.

use std::sync::Arc;

use rand::Rng;

use crate::aggregation::{gating_forward, head_forward, netvlad_forward, register_aggregation, AggregationConfig};
use crate::backbone::{
    arfm_forward, conv_forward, eca_forward, register_arfm, register_conv, register_eca, ArfmConfig, ConvSpec, Fusion,
    MapCache, SparseFeat,
};
use crate::diff::{grad_check, BnMode, GradCheckReport, Graph, NodeId};
use crate::error::Result;
use crate::model::{forward_batch, ModelConfig};
use crate::nn::{register_linear, Mode, Session};
use crate::params::{derived_rng, ParamStore};
use crate::tensor::Tensor;
use crate::training::triplet_loss_node;
use crate::transformer::{ea_layer_forward, register_ea_layer, register_transformer, transformer_forward, TransformerConfig};
use crate::voxel::{build_kernel_map_for, Coord, PointCloud};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Builder = fn(u64) -> Result<(Graph<f64>, NodeId)>;

/// Names of all cases, primitives first.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|(n, _)| *n).collect()
}

/// Runs every case whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>, seed: u64, tolerance: f64, h: f64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (name, build) in cases() {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let (mut g, y) = build(seed)?;
        let report = grad_check(&mut g, y, tolerance, h)?;
        out.push(CaseResult { name, report });
    }
    Ok(out)
}

fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", matmul),
        ("transpose", transpose),
        ("add_broadcast", add_broadcast),
        ("sub", sub),
        ("mul_broadcast", mul_broadcast),
        ("scale", scale),
        ("add_scalar", add_scalar),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("softmax_rows", softmax_rows),
        ("softmax_leading", softmax_leading),
        ("batch_norm_train", batch_norm_train),
        ("batch_norm_infer", batch_norm_infer),
        ("mean_rows", mean_rows),
        ("concat", concat),
        ("stack", stack),
        ("narrow", narrow),
        ("reshape", reshape),
        ("l2_normalize", l2_normalize),
        ("row_norm", row_norm),
        ("sum_axis", sum_axis),
        ("max_axis", max_axis),
        ("sum_all", sum_all),
        ("mean_all", mean_all),
        ("gather", gather),
        ("scatter_add", scatter_add),
        ("sparse_conv_submanifold", sparse_conv_sub),
        ("sparse_conv_strided", sparse_conv_strided),
        ("sparse_conv_dilated", sparse_conv_dilated),
        ("channel_conv1d", channel_conv1d),
        ("linear", linear),
        ("module_conv_bn_relu", module_conv),
        ("module_eca", module_eca),
        ("module_arfm_attention", module_arfm_attention),
        ("module_arfm_concat", module_arfm_concat),
        ("module_ea_layer", module_ea_layer),
        ("module_transformer", module_transformer),
        ("module_netvlad", module_netvlad),
        ("module_context_gating", module_gating),
        ("module_head", module_head),
        ("module_triplet_loss", module_triplet),
        ("module_full_model", module_full_model),
    ]
}

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from kinks.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element matters.
fn project(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = derived_rng(seed, "projection");
    let r = random(&mut rng, g.shape(y), -1.0, 1.0);
    let r = g.constant(r);
    let m = g.mul(y, r)?;
    Ok(g.sum_all(m)?)
}

fn unary(seed: u64, label: &str, shape: &[usize], f: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>) -> Result<(Graph<f64>, NodeId)> {
    let mut rng = derived_rng(seed, label);
    let mut g = Graph::new();
    let x = g.leaf(away_from_zero(&mut rng, shape), true);
    let y = f(&mut g, x)?;
    let out = project(&mut g, y, seed)?;
    Ok((g, out))
}

fn binary(
    seed: u64,
    label: &str,
    a: &[usize],
    b: &[usize],
    f: impl Fn(&mut Graph<f64>, NodeId, NodeId) -> Result<NodeId>,
) -> Result<(Graph<f64>, NodeId)> {
    let mut rng = derived_rng(seed, label);
    let mut g = Graph::new();
    let x = g.leaf(away_from_zero(&mut rng, a), true);
    let w = g.leaf(away_from_zero(&mut rng, b), true);
    let y = f(&mut g, x, w)?;
    let out = project(&mut g, y, seed)?;
    Ok((g, out))
}

fn matmul(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    binary(seed, "matmul", &[4, 3], &[3, 5], |g, a, b| Ok(g.matmul(a, b)?))
}

fn transpose(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "transpose", &[3, 4], |g, x| Ok(g.transpose(x)?))
}

fn add_broadcast(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    binary(seed, "add", &[4, 3], &[3], |g, a, b| Ok(g.add(a, b)?))
}

fn sub(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    binary(seed, "sub", &[4, 3], &[4, 3], |g, a, b| Ok(g.sub(a, b)?))
}

fn mul_broadcast(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    binary(seed, "mul", &[4, 3], &[1, 3], |g, a, b| Ok(g.mul(a, b)?))
}

fn scale(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "scale", &[3, 3], |g, x| Ok(g.scale(x, -1.7)?))
}

fn add_scalar(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "add_scalar", &[3, 3], |g, x| Ok(g.add_scalar(x, 0.4)?))
}

fn relu(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "relu", &[5, 4], |g, x| Ok(g.relu(x)?))
}

fn sigmoid(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "sigmoid", &[5, 4], |g, x| Ok(g.sigmoid(x)?))
}

fn softmax_rows(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "softmax1", &[4, 5], |g, x| Ok(g.softmax(x, 1)?))
}

fn softmax_leading(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "softmax0", &[3, 4, 2], |g, x| Ok(g.softmax(x, 0)?))
}

fn batch_norm_train(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let mut rng = derived_rng(seed, "bn");
    let mut g = Graph::new();
    let x = g.leaf(random(&mut rng, &[7, 3], -2.0, 2.0), true);
    let gamma = g.leaf(random(&mut rng, &[3], 0.5, 1.5), true);
    let beta = g.leaf(random(&mut rng, &[3], -0.5, 0.5), true);
    let y = g.batch_norm(x, gamma, beta, BnMode::Train, 1e-5)?;
    let out = project(&mut g, y, seed)?;
    Ok((g, out))
}

fn batch_norm_infer(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let mut rng = derived_rng(seed, "bn_infer");
    let mut g = Graph::new();
    let x = g.leaf(random(&mut rng, &[5, 3], -2.0, 2.0), true);
    let gamma = g.leaf(random(&mut rng, &[3], 0.5, 1.5), true);
    let beta = g.leaf(random(&mut rng, &[3], -0.5, 0.5), true);
    let mode = BnMode::Infer {
        mean: vec![0.1, -0.3, 0.5],
        var: vec![0.8, 1.5, 2.0],
    };
    let y = g.batch_norm(x, gamma, beta, mode, 1e-5)?;
    let out = project(&mut g, y, seed)?;
    Ok((g, out))
}

fn mean_rows(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "mean_rows", &[6, 3], |g, x| Ok(g.mean_rows(x)?))
}

fn concat(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    binary(seed, "concat", &[3, 2], &[3, 4], |g, a, b| {
        let c1 = g.concat(&[a, b], 1)?;
        let t = g.narrow(b, 1, 1, 2)?;
        let c0 = g.concat(&[a, t], 0)?;
        let s0 = g.sum_all(c0)?;
        let m = g.mul(c1, c1)?;
        let s1 = g.sum_all(m)?;
        Ok(g.add(s0, s1)?)
    })
}

fn stack(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    binary(seed, "stack", &[3, 2], &[3, 2], |g, a, b| Ok(g.stack(&[a, b, a])?))
}

fn narrow(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "narrow", &[5, 4], |g, x| {
        let r = g.narrow(x, 0, 1, 3)?;
        Ok(g.narrow(r, 1, 2, 2)?)
    })
}

fn reshape(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "reshape", &[3, 4], |g, x| Ok(g.reshape(x, &[2, 6])?))
}

fn l2_normalize(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "l2", &[3, 4], |g, x| Ok(g.l2_normalize(x)?))
}

fn row_norm(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "row_norm", &[4, 3], |g, x| Ok(g.row_norm(x)?))
}

fn sum_axis(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "sum_axis", &[3, 4, 2], |g, x| {
        let a = g.sum_axis(x, 0)?;
        Ok(g.sum_axis(a, 1)?)
    })
}

fn max_axis(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "max_axis", &[4, 5], |g, x| Ok(g.max_axis(x, 1)?))
}

fn sum_all(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "sum_all", &[3, 3], |g, x| {
        let s = g.mul(x, x)?;
        Ok(g.sum_all(s)?)
    })
}

fn mean_all(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "mean_all", &[3, 3], |g, x| {
        let s = g.mul(x, x)?;
        Ok(g.mean_all(s)?)
    })
}

fn gather(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "gather", &[4, 3], |g, x| Ok(g.gather(x, vec![2, 0, 2, 3, 1])?))
}

fn scatter_add(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    unary(seed, "scatter_add", &[5, 3], |g, x| Ok(g.scatter_add(x, vec![1, 0, 1, 3, 1], 4)?))
}

fn random_sites(rng: &mut impl Rng, n: usize, extent: i32, level: i32) -> Vec<Coord> {
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < n {
        let c = [0; 3].map(|_: i32| rng.random_range(0..extent) * level);
        seen.insert(c);
    }
    seen.into_iter().collect()
}

fn conv_case(seed: u64, label: &str, k: usize, s: usize, d: usize) -> Result<(Graph<f64>, NodeId)> {
    let mut rng = derived_rng(seed, label);
    let coords = random_sites(&mut rng, 30, 5, 1);
    let map = Arc::new(build_kernel_map_for(&coords, 1, k, s, d)?);
    let mut g = Graph::new();
    let x = g.leaf(random(&mut rng, &[coords.len(), 2], -1.0, 1.0), true);
    let w = g.leaf(random(&mut rng, &[k * k * k, 2, 3], -1.0, 1.0), true);
    let y = g.sparse_conv(x, w, map)?;
    let out = project(&mut g, y, seed)?;
    Ok((g, out))
}

fn sparse_conv_sub(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    conv_case(seed, "conv_sub", 3, 1, 1)
}

fn sparse_conv_strided(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    conv_case(seed, "conv_stride", 2, 2, 1)
}

fn sparse_conv_dilated(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    conv_case(seed, "conv_dilated", 3, 1, 2)
}

fn channel_conv1d(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let mut rng = derived_rng(seed, "conv1d");
    let mut g = Graph::new();
    let x = g.leaf(random(&mut rng, &[1, 6], -1.0, 1.0), true);
    let w = g.leaf(random(&mut rng, &[3], -1.0, 1.0), true);
    let b = g.leaf(random(&mut rng, &[1], -1.0, 1.0), true);
    let y = g.channel_conv1d(x, w, b)?;
    let out = project(&mut g, y, seed)?;
    Ok((g, out))
}

fn linear(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let mut rng = derived_rng(seed, "linear");
    let mut g = Graph::new();
    let x = g.leaf(random(&mut rng, &[4, 3], -1.0, 1.0), true);
    let w = g.leaf(random(&mut rng, &[3, 2], -1.0, 1.0), true);
    let b = g.leaf(random(&mut rng, &[2], -1.0, 1.0), true);
    let y = g.linear(x, w, Some(b))?;
    let out = project(&mut g, y, seed)?;
    Ok((g, out))
}

/// Runs `f` in a training session over `params` with a grad-requiring input
/// and returns the projected scalar.
fn module(
    seed: u64,
    params: ParamStore<f64>,
    input: Tensor<f64>,
    f: impl FnOnce(&mut Session<'_, f64>, NodeId) -> Result<NodeId>,
) -> Result<(Graph<f64>, NodeId)> {
    let mut sess = Session::new(&params, Mode::Train);
    let x = sess.graph.leaf(input, true);
    let y = f(&mut sess, x)?;
    let out = project(&mut sess.graph, y, seed)?;
    Ok((sess.graph, out))
}

fn sparse_input(seed: u64, label: &str, n: usize, channels: usize) -> (Vec<Coord>, Tensor<f64>) {
    let mut rng = derived_rng(seed, label);
    let coords = random_sites(&mut rng, n, 4, 1);
    let feats = random(&mut rng, &[n, channels], -1.0, 1.0);
    (coords, feats)
}

fn feat(x: NodeId, coords: &[Coord]) -> SparseFeat {
    SparseFeat {
        node: x,
        coords: coords.into(),
        level: 1,
        segments: vec![coords.len()].into(),
    }
}

fn module_conv(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let spec = ConvSpec::new(3, 1, 2, 3);
    let mut store = ParamStore::new();
    register_conv(&mut store, seed, "c", &spec);
    let (coords, feats) = sparse_input(seed, "module_conv", 24, 2);
    module(seed, store, feats, |sess, x| {
        Ok(conv_forward(sess, &mut MapCache::new(), &feat(x, &coords), &spec, "c")?.node)
    })
}

fn module_eca(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let mut store = ParamStore::new();
    register_eca(&mut store, seed, "eca", 3);
    let mut rng = derived_rng(seed, "module_eca");
    module(seed, store, random(&mut rng, &[6, 5], -1.0, 1.0), |sess, x| eca_forward(sess, x, "eca"))
}

fn arfm_case(seed: u64, fusion: Fusion) -> Result<(Graph<f64>, NodeId)> {
    let cfg = ArfmConfig {
        branch_rfs: vec![1, 3, 5],
        fusion,
        ..ArfmConfig::default()
    };
    let mut store = ParamStore::new();
    register_arfm(&mut store, seed, "arfm", 3, &cfg)?;
    let (coords, feats) = sparse_input(seed, "module_arfm", 20, 3);
    module(seed, store, feats, |sess, x| {
        Ok(arfm_forward(sess, &mut MapCache::new(), &feat(x, &coords), 3, &cfg, "arfm")?
            .output
            .node)
    })
}

fn module_arfm_attention(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    arfm_case(seed, Fusion::Attention)
}

fn module_arfm_concat(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    arfm_case(seed, Fusion::Concat)
}

fn small_transformer() -> TransformerConfig {
    TransformerConfig {
        d_model: 4,
        heads: 2,
        memory_sizes: vec![5, 3],
        out_dim: 6,
    }
}

fn module_ea_layer(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let cfg = small_transformer();
    let mut store = ParamStore::new();
    register_ea_layer(&mut store, seed, "ea", &cfg, 5);
    let mut rng = derived_rng(seed, "module_ea");
    module(seed, store, random(&mut rng, &[7, 4], -1.0, 1.0), |sess, x| {
        Ok(ea_layer_forward(sess, x, &cfg, "ea")?.output)
    })
}

fn module_transformer(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let cfg = small_transformer();
    let mut store = ParamStore::new();
    register_transformer(&mut store, seed, &cfg)?;
    let mut rng = derived_rng(seed, "module_xfmr");
    module(seed, store, random(&mut rng, &[7, 4], -1.0, 1.0), |sess, x| {
        Ok(transformer_forward(sess, x, &cfg)?.output)
    })
}

fn small_aggregation() -> AggregationConfig {
    AggregationConfig {
        in_dim: 3,
        clusters: 2,
        output_dim: 4,
        ..AggregationConfig::default()
    }
}

fn module_netvlad(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let cfg = small_aggregation();
    let mut store = ParamStore::new();
    register_aggregation(&mut store, seed, &cfg)?;
    let mut rng = derived_rng(seed, "module_vlad");
    module(seed, store, random(&mut rng, &[6, 3], -1.0, 1.0), |sess, x| {
        Ok(netvlad_forward(sess, x, &cfg)?.vlad)
    })
}

fn module_gating(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let mut store = ParamStore::new();
    register_linear(&mut store, seed, "gate", 5, 5, true);
    let mut rng = derived_rng(seed, "module_gate");
    module(seed, store, random(&mut rng, &[1, 5], -1.0, 1.0), |sess, x| gating_forward(sess, x, "gate"))
}

fn module_head(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let cfg = small_aggregation();
    let mut store = ParamStore::new();
    register_aggregation(&mut store, seed, &cfg)?;
    let mut rng = derived_rng(seed, "module_head");
    module(seed, store, random(&mut rng, &[6, 3], -1.0, 1.0), |sess, x| {
        Ok(head_forward(sess, x, &cfg)?.descriptor)
    })
}

fn module_triplet(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let mut rng = derived_rng(seed, "module_triplet");
    let mut g = Graph::new();
    let d = g.leaf(random(&mut rng, &[5, 3], -1.0, 1.0), true);
    let n = g.l2_normalize(d)?;
    let loss = triplet_loss_node(&mut g, n, &[(0, 1, 2), (3, 4, 0), (1, 0, 4)], 0.9)?;
    Ok((g, loss))
}

/// Two tiny clouds through the packed model; gradients reach every module.
fn module_full_model(seed: u64) -> Result<(Graph<f64>, NodeId)> {
    let mut cfg = ModelConfig::desk();
    cfg.quant_step = 0.5;
    cfg.backbone.channels = 2;
    if let Some(a) = cfg.backbone.arfm.as_mut() {
        a.branch_rfs = vec![1, 3];
    }
    cfg.transformer = TransformerConfig {
        d_model: 2,
        heads: 1,
        memory_sizes: vec![3],
        out_dim: 3,
    };
    cfg.aggregation = AggregationConfig {
        in_dim: 3,
        clusters: 2,
        output_dim: 3,
        ..AggregationConfig::default()
    };
    let params = cfg.init_params::<f64>(seed)?;
    let mut rng = derived_rng(seed, "module_model");
    let clouds: Vec<PointCloud> = (0..2)
        .map(|_| PointCloud::new((0..40).map(|_| [0; 3].map(|_: i32| rng.random_range(-1.0..1.0))).collect()))
        .collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let mut sess = Session::new(&params, Mode::Train);
    let b = forward_batch(&mut sess, &cfg, &refs)?;
    let descs = b.descriptors();
    let table = sess.graph.concat(&descs, 0)?;
    let out = project(&mut sess.graph, table, seed)?;
    Ok((sess.graph, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names = case_names();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
