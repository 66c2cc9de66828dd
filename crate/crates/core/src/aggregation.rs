//! NetVLAD aggregation, context gating and the final projection to a
//! unit-norm global descriptor.

use rand_distr::{Distribution, StandardNormal};

use crate::diff::NodeId;
use crate::error::{Error, Result};
use crate::nn::{register_linear, Mode, Session};
use crate::params::{derived_rng, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatingPlacement {
    /// Gate the flattened `K·D` VLAD vector, then project.
    BeforeProjection,
    /// Project first, then gate the output vector.
    AfterProjection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationConfig {
    pub in_dim: usize,
    pub clusters: usize,
    pub output_dim: usize,
    pub gating: GatingPlacement,
    /// Sharpness of the centre-derived soft-assignment initialisation.
    pub assign_alpha: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            in_dim: 512,
            clusters: 64,
            output_dim: 256,
            gating: GatingPlacement::AfterProjection,
            assign_alpha: 1.0,
        }
    }
}

impl AggregationConfig {
    pub fn vlad_dim(&self) -> usize {
        self.in_dim * self.clusters
    }

    fn gate_dim(&self) -> usize {
        match self.gating {
            GatingPlacement::BeforeProjection => self.vlad_dim(),
            GatingPlacement::AfterProjection => self.output_dim,
        }
    }
}

/// Centres uniform on the unit sphere; assignment `w_k = 2α·c_k`,
/// `b_k = −α·‖c_k‖²`, so the initial logits rank clusters by distance.
pub fn register_aggregation<T: Scalar>(store: &mut ParamStore<T>, seed: u64, cfg: &AggregationConfig) -> Result<()> {
    if cfg.clusters == 0 || cfg.in_dim == 0 || cfg.output_dim == 0 {
        return Err(Error::Config("aggregation sizes must be positive".into()));
    }
    let (k, d) = (cfg.clusters, cfg.in_dim);
    let mut rng = derived_rng(seed, "vlad.centers");
    let mut centers = vec![0.0f64; k * d];
    for row in centers.chunks_mut(d) {
        loop {
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    let alpha = cfg.assign_alpha;
    let mut w = vec![0.0; d * k];
    for c in 0..k {
        for j in 0..d {
            w[j * k + c] = 2.0 * alpha * centers[c * d + j];
        }
    }
    store.insert("vlad.centers", Tensor::from_f64(&[k, d], &centers), true);
    store.insert("vlad.assign.weight", Tensor::from_f64(&[d, k], &w), true);
    store.init_const("vlad.assign.bias", &[k], -alpha, true);
    register_linear(store, seed, "proj256", cfg.vlad_dim(), cfg.output_dim, false);
    let g = cfg.gate_dim();
    register_linear(store, seed, "gate", g, g, true);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct VladNodes {
    /// `N × K` soft assignment.
    pub assignment: NodeId,
    /// `1 × K·D` normalised VLAD vector.
    pub vlad: NodeId,
}

/// `V[k] = Σ_x a_k(x)·(x − c_k)`, intra-normalised per cluster, flattened
/// and L2-normalised.
pub fn netvlad_forward<T: Scalar>(sess: &mut Session<'_, T>, x: NodeId, cfg: &AggregationConfig) -> Result<VladNodes> {
    let width = sess.graph.shape(x)[1];
    if width != cfg.in_dim {
        return Err(Error::InvalidInput(format!(
            "aggregation expects width {}, got {width}",
            cfg.in_dim
        )));
    }
    let logits = sess.linear(x, "vlad.assign")?;
    let a = sess.graph.softmax(logits, 1)?;
    let at = sess.graph.transpose(a)?;
    let weighted = sess.graph.matmul(at, x)?;
    let mass = sess.graph.sum_axis(a, 0)?;
    let mass = sess.graph.reshape(mass, &[cfg.clusters, 1])?;
    let centers = sess.p("vlad.centers")?;
    let shift = sess.graph.mul(mass, centers)?;
    let v = sess.graph.sub(weighted, shift)?;
    let v = sess.graph.l2_normalize(v)?;
    let v = sess.graph.reshape(v, &[1, cfg.vlad_dim()])?;
    let vlad = sess.graph.l2_normalize(v)?;
    Ok(VladNodes { assignment: a, vlad })
}

/// `v ⊗ σ(v·W + b)`.
pub fn gating_forward<T: Scalar>(sess: &mut Session<'_, T>, v: NodeId, prefix: &str) -> Result<NodeId> {
    let z = sess.linear(v, prefix)?;
    let s = sess.graph.sigmoid(z)?;
    Ok(sess.graph.mul(v, s)?)
}

#[derive(Clone, Debug)]
pub struct HeadNodes {
    pub vlad: VladNodes,
    /// `1 × output_dim` unit-norm descriptor.
    pub descriptor: NodeId,
}

pub fn head_forward<T: Scalar>(sess: &mut Session<'_, T>, x: NodeId, cfg: &AggregationConfig) -> Result<HeadNodes> {
    let vlad = netvlad_forward(sess, x, cfg)?;
    let out = match cfg.gating {
        GatingPlacement::BeforeProjection => {
            let g = gating_forward(sess, vlad.vlad, "gate")?;
            sess.linear(g, "proj256")?
        }
        GatingPlacement::AfterProjection => {
            let p = sess.linear(vlad.vlad, "proj256")?;
            gating_forward(sess, p, "gate")?
        }
    };
    let descriptor = sess.graph.l2_normalize(out)?;
    Ok(HeadNodes { vlad, descriptor })
}

/// Flat `K·D` VLAD vector of a local descriptor set.
pub fn netvlad<T: Scalar>(locals: &Tensor<T>, params: &ParamStore<T>, cfg: &AggregationConfig) -> Result<Vec<T>> {
    let mut sess = Session::new(params, Mode::Infer);
    let x = sess.constant(locals.clone());
    let out = netvlad_forward(&mut sess, x, cfg)?;
    Ok(sess.graph.value(out.vlad).data().to_vec())
}

pub fn context_gating<T: Scalar>(v: &[T], params: &ParamStore<T>, prefix: &str) -> Result<Vec<T>> {
    let mut sess = Session::new(params, Mode::Infer);
    let x = sess.constant(Tensor::new(vec![1, v.len()], v.to_vec()));
    let y = gating_forward(&mut sess, x, prefix)?;
    Ok(sess.graph.value(y).data().to_vec())
}

pub fn global_descriptor<T: Scalar>(
    locals: &Tensor<T>,
    params: &ParamStore<T>,
    cfg: &AggregationConfig,
) -> Result<Vec<T>> {
    let mut sess = Session::new(params, Mode::Infer);
    let x = sess.constant(locals.clone());
    let out = head_forward(&mut sess, x, cfg)?;
    Ok(sess.graph.value(out.descriptor).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AggregationConfig {
        AggregationConfig {
            in_dim: 3,
            clusters: 2,
            output_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn gating_limits() {
        let mut store = ParamStore::<f64>::new();
        store.init_const("g.weight", &[3, 3], 0.0, true);
        store.init_const("g.bias", &[3], 0.0, true);
        let v = [0.4, -1.0, 2.0];
        assert_eq!(context_gating(&v, &store, "g").unwrap(), vec![0.2, -0.5, 1.0]);
        store.init_const("g.bias", &[3], 20.0, true);
        let out = context_gating(&v, &store, "g").unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn centres_are_unit_and_assignment_is_derived() {
        let mut store = ParamStore::<f64>::new();
        register_aggregation(&mut store, 9, &small()).unwrap();
        let c = store.tensor("vlad.centers").unwrap();
        for r in 0..2 {
            let n: f64 = c.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let w = store.tensor("vlad.assign.weight").unwrap();
        assert_eq!(w.data()[1], 2.0 * c.data()[3]);
    }

    #[test]
    fn descriptor_is_unit_norm() {
        let cfg = small();
        let mut store = ParamStore::<f64>::new();
        register_aggregation(&mut store, 9, &cfg).unwrap();
        let x = Tensor::from_f64(&[1, 3], &[0.1, 0.7, -0.2]);
        let d = global_descriptor(&x, &store, &cfg).unwrap();
        assert_eq!(d.len(), 4);
        let n: f64 = d.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_before_projection_has_vlad_width() {
        let cfg = AggregationConfig {
            gating: GatingPlacement::BeforeProjection,
            ..small()
        };
        let mut store = ParamStore::<f64>::new();
        register_aggregation(&mut store, 9, &cfg).unwrap();
        assert_eq!(store.tensor("gate.weight").unwrap().shape(), &[6, 6]);
    }
}
