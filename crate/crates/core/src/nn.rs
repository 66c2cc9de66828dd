//! Per-forward binding of a [`ParamStore`] into a [`Graph`], plus the small
//! layer helpers (linear, batch norm, LBR) shared by the model modules.

use std::collections::BTreeMap;

use crate::diff::{BnMode, Gradients, Graph, NodeId};
use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients tracked for trainable parameters.
    Train,
    /// Running statistics, no gradient tracking.
    Infer,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Graph under construction together with the parameters it reads.
pub struct Session<'p, T: Scalar> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, NodeId>,
    bn_nodes: Vec<(String, NodeId)>,
    pub mode: Mode,
    /// When false, parameters enter the graph as constants even in training
    /// mode; useful for checking gradients with respect to inputs only.
    pub track_params: bool,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: BTreeMap::new(),
            bn_nodes: Vec::new(),
            mode,
            track_params: mode == Mode::Train,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Leaf for parameter `path`, bound once per session.
    pub fn p(&mut self, path: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(path) {
            return Ok(id);
        }
        let entry = self.params.get(path).ok_or_else(|| crate::Error::Checkpoint {
            path: path.to_owned(),
            detail: "parameter missing".into(),
        })?;
        let id = self.graph.leaf(entry.value.clone(), entry.trainable && self.track_params);
        self.graph.set_label(id, path);
        self.bound.insert(path.to_owned(), id);
        Ok(id)
    }

    pub fn bound(&self) -> &BTreeMap<String, NodeId> {
        &self.bound
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.graph.constant(t)
    }

    /// Batch norm over rows with parameters under `prefix`.
    pub fn batch_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let mode = match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Infer => BnMode::Infer {
                mean: self.params.tensor(&format!("{prefix}.running_mean"))?.data().to_vec(),
                var: self.params.tensor(&format!("{prefix}.running_var"))?.data().to_vec(),
            },
        };
        let y = self.graph.batch_norm(x, gamma, beta, mode, T::of(BN_EPS))?;
        if self.mode == Mode::Train {
            self.bn_nodes.push((prefix.to_owned(), y));
        }
        Ok(y)
    }

    /// `x · W (+ b)` with `{prefix}.weight` and optional `{prefix}.bias`.
    pub fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let bias_path = format!("{prefix}.bias");
        let b = if self.params.contains(&bias_path) {
            Some(self.p(&bias_path)?)
        } else {
            None
        };
        Ok(self.graph.linear(x, w, b)?)
    }

    /// Linear → batch norm → ReLU.
    pub fn lbr(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let y = self.linear(x, prefix)?;
        let y = self.batch_norm(y, &format!("{prefix}.bn"))?;
        Ok(self.graph.relu(y)?)
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(p, &id)| grads.take(id).map(|g| (p.clone(), g)))
            .collect()
    }

    /// Batch statistics of every training-mode batch norm, in creation order.
    pub fn bn_statistics(&self) -> Vec<BnStatistics<T>> {
        self.bn_nodes
            .iter()
            .filter_map(|(prefix, id)| {
                let rows = self.graph.shape(*id)[0];
                self.graph.bn_batch_stats(*id).map(|(m, v)| BnStatistics {
                    prefix: prefix.clone(),
                    mean: m.to_vec(),
                    var: v.to_vec(),
                    rows,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BnStatistics<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    pub rows: usize,
}

/// Exponential running-average update: `r ← (1−m)·r + m·batch`, with the
/// unbiased variance estimate.
pub fn apply_bn_statistics<T: Scalar>(store: &mut ParamStore<T>, stats: &[BnStatistics<T>]) {
    let m = T::of(BN_MOMENTUM);
    for s in stats {
        let correction = if s.rows > 1 {
            T::of(s.rows as f64 / (s.rows - 1) as f64)
        } else {
            T::one()
        };
        if let Some(e) = store.get_mut(&format!("{}.running_mean", s.prefix)) {
            for (r, &b) in e.value.data_mut().iter_mut().zip(&s.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
        if let Some(e) = store.get_mut(&format!("{}.running_var", s.prefix)) {
            for (r, &b) in e.value.data_mut().iter_mut().zip(&s.var) {
                *r = (T::one() - m) * *r + m * b * correction;
            }
        }
    }
}

/// Registers `{prefix}.gamma/beta/running_mean/running_var` for `c` channels.
pub fn register_bn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.init_const(&format!("{prefix}.gamma"), &[c], 1.0, true);
    store.init_const(&format!("{prefix}.beta"), &[c], 0.0, true);
    store.init_const(&format!("{prefix}.running_mean"), &[c], 0.0, false);
    store.init_const(&format!("{prefix}.running_var"), &[c], 1.0, false);
}

pub fn register_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    seed: u64,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) {
    store.init_he(seed, &format!("{prefix}.weight"), &[fan_in, fan_out], fan_in);
    if bias {
        store.init_const(&format!("{prefix}.bias"), &[fan_out], 0.0, true);
    }
}

/// Linear (no bias) followed by batch norm parameters.
pub fn register_lbr<T: Scalar>(store: &mut ParamStore<T>, seed: u64, prefix: &str, fan_in: usize, fan_out: usize) {
    register_linear(store, seed, prefix, fan_in, fan_out, false);
    register_bn(store, &format!("{prefix}.bn"), fan_out);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        register_bn(&mut store, "bn", 1);
        let stats = [BnStatistics {
            prefix: "bn".into(),
            mean: vec![2.0],
            var: vec![3.0],
            rows: 4,
        }];
        apply_bn_statistics(&mut store, &stats);
        assert!((store.tensor("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-15);
        // 0.9·1 + 0.1·3·4/3
        assert!((store.tensor("bn.running_var").unwrap().data()[0] - 1.3).abs() < 1e-15);
    }

    #[test]
    fn missing_parameter_names_path() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Infer);
        let e = s.p("nowhere.weight").unwrap_err();
        assert!(e.to_string().contains("nowhere.weight"));
    }
}
