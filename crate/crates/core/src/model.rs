//! Whole-pipeline configuration and the cloud → descriptor forward pass.

use crate::aggregation::{head_forward, register_aggregation, AggregationConfig, GatingPlacement, HeadNodes};
use crate::backbone::{backbone_forward, backbone_forward_packed, register_backbone, ArfmConfig, BackboneConfig, Fusion, MapCache, SparseFeat};
use crate::config::{parse_bool, KvConfig};
use crate::diff::NodeId;
use crate::error::{Error, Result};
use crate::nn::{Mode, Session};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::transformer::{register_transformer, transformer_forward, TransformerConfig, TransformerNodes};
use crate::voxel::{pack_grids, quantize, PointCloud};

pub const ABLATIONS: &[&str] = &[
    "baseline",
    "no_arfm",
    "no_eca",
    "no_fusion_attention",
    "dilated_branches",
    "branches_k",
    "layers_k",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub quant_step: f64,
    pub backbone: BackboneConfig,
    pub transformer: TransformerConfig,
    pub aggregation: AggregationConfig,
}

impl ModelConfig {
    /// Full-width sizes: 64 channels, six layers of memories
    /// 256/128/128/64/64/64, 512-d locals, 64 clusters, 256-d output.
    pub fn full() -> Self {
        Self {
            quant_step: 0.01,
            backbone: BackboneConfig::default(),
            transformer: TransformerConfig::default(),
            aggregation: AggregationConfig::default(),
        }
    }

    /// Same topology at a width and resolution that trains on one core.
    pub fn desk() -> Self {
        let channels = 16;
        let local_dim = 64;
        Self {
            quant_step: 0.1,
            backbone: BackboneConfig {
                channels,
                ..BackboneConfig::default()
            },
            transformer: TransformerConfig {
                d_model: channels,
                heads: 2,
                memory_sizes: vec![32, 16, 16, 8, 8, 8],
                out_dim: local_dim,
            },
            aggregation: AggregationConfig {
                in_dim: local_dim,
                clusters: 8,
                output_dim: 256,
                gating: GatingPlacement::AfterProjection,
                assign_alpha: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.quant_step.is_finite() && self.quant_step > 0.0) {
            return Err(Error::Config(format!("quant_step must be positive, got {}", self.quant_step)));
        }
        if self.backbone.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.transformer.d_model != self.backbone.channels {
            return Err(Error::Config(format!(
                "transformer width {} differs from backbone width {}",
                self.transformer.d_model, self.backbone.channels
            )));
        }
        if self.aggregation.in_dim != self.transformer.out_dim {
            return Err(Error::Config(format!(
                "aggregation width {} differs from transformer output {}",
                self.aggregation.in_dim, self.transformer.out_dim
            )));
        }
        if let Some(a) = &self.backbone.arfm {
            if a.branch_rfs.is_empty() {
                return Err(Error::Config("module needs at least one branch".into()));
            }
            a.branches(self.backbone.channels)?;
        }
        self.transformer.validate()
    }

    /// Applies `model.*` keys: `preset`, `quant_step`, `channels`, `arfm`,
    /// `eca`, `fusion`, `dilated`, `branches`, `heads`, `memory_sizes`,
    /// `local_dim`, `clusters`, `output_dim`, `gating`, `ablation`.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut cfg = match kv.take::<String>("model.preset")?.as_deref() {
            None | Some("desk") => Self::desk(),
            Some("full") => Self::full(),
            Some(other) => return Err(Error::Config(format!("unknown preset `{other}` (full, desk)"))),
        };
        kv.take_into("model.quant_step", &mut cfg.quant_step)?;
        if let Some(c) = kv.take::<usize>("model.channels")? {
            cfg.backbone.channels = c;
            cfg.transformer.d_model = c;
        }
        if let Some(v) = kv.take::<String>("model.arfm")? {
            if !parse_bool(&v)? {
                cfg.backbone.arfm = None;
            }
        }
        if let Some(a) = cfg.backbone.arfm.as_mut() {
            if let Some(v) = kv.take::<String>("model.eca")? {
                a.use_eca = parse_bool(&v)?;
            }
            if let Some(v) = kv.take::<String>("model.dilated")? {
                a.dilated = parse_bool(&v)?;
            }
            if let Some(v) = kv.take::<String>("model.fusion")? {
                a.fusion = match v.as_str() {
                    "attention" => Fusion::Attention,
                    "concat" => Fusion::Concat,
                    _ => return Err(Error::Config(format!("fusion must be attention or concat, got `{v}`"))),
                };
            }
            if let Some(b) = kv.take_list("model.branches")? {
                a.branch_rfs = b;
            }
        }
        kv.take_into("model.heads", &mut cfg.transformer.heads)?;
        if let Some(m) = kv.take_list("model.memory_sizes")? {
            cfg.transformer.memory_sizes = m;
        }
        if let Some(d) = kv.take::<usize>("model.local_dim")? {
            cfg.transformer.out_dim = d;
            cfg.aggregation.in_dim = d;
        }
        kv.take_into("model.clusters", &mut cfg.aggregation.clusters)?;
        kv.take_into("model.output_dim", &mut cfg.aggregation.output_dim)?;
        if let Some(v) = kv.take::<String>("model.gating")? {
            cfg.aggregation.gating = match v.as_str() {
                "before_projection" => GatingPlacement::BeforeProjection,
                "after_projection" => GatingPlacement::AfterProjection,
                _ => {
                    return Err(Error::Config(format!(
                        "gating must be before_projection or after_projection, got `{v}`"
                    )))
                }
            };
        }
        if let Some(name) = kv.take::<String>("model.ablation")? {
            cfg = cfg.ablation(&name)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Variant named `baseline`, `no_arfm`, `no_eca`, `no_fusion_attention`,
    /// `dilated_branches`, `branches_K` (K in 1..=6) or `layers_K`
    /// (K in 1..=8).
    pub fn ablation(&self, name: &str) -> Result<Self> {
        let mut cfg = self.clone();
        let unknown = || {
            Error::Config(format!(
                "unknown ablation `{name}`; valid: {}",
                ABLATIONS.join(", ")
            ))
        };
        let arfm = || cfg.backbone.arfm.clone().unwrap_or_default();
        match name {
            "baseline" => {}
            "no_arfm" => cfg.backbone.arfm = None,
            "no_eca" => cfg.backbone.arfm = Some(ArfmConfig { use_eca: false, ..arfm() }),
            "no_fusion_attention" => {
                cfg.backbone.arfm = Some(ArfmConfig {
                    fusion: Fusion::Concat,
                    ..arfm()
                })
            }
            "dilated_branches" => cfg.backbone.arfm = Some(ArfmConfig { dilated: true, ..arfm() }),
            _ => {
                if let Some(k) = name.strip_prefix("branches_") {
                    let k: usize = k.parse().map_err(|_| unknown())?;
                    if !(1..=6).contains(&k) {
                        return Err(Error::Config(format!("branch count {k} outside 1..=6")));
                    }
                    let rfs = (0..k).map(|i| 2 * i + 1).collect();
                    cfg.backbone.arfm = Some(ArfmConfig { branch_rfs: rfs, ..arfm() });
                } else if let Some(k) = name.strip_prefix("layers_") {
                    let k: usize = k.parse().map_err(|_| unknown())?;
                    if !(1..=8).contains(&k) {
                        return Err(Error::Config(format!("layer count {k} outside 1..=8")));
                    }
                    cfg.transformer = cfg.transformer.with_layers(k);
                } else {
                    return Err(unknown());
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("model.quant_step", self.quant_step);
        kv.set("model.channels", self.backbone.channels);
        match &self.backbone.arfm {
            None => kv.set("model.arfm", false),
            Some(a) => {
                kv.set("model.arfm", true);
                kv.set("model.eca", a.use_eca);
                kv.set("model.dilated", a.dilated);
                let fusion = match a.fusion {
                    Fusion::Attention => "attention",
                    Fusion::Concat => "concat",
                };
                kv.set("model.fusion", fusion);
                kv.set("model.branches", join(&a.branch_rfs));
            }
        }
        kv.set("model.heads", self.transformer.heads);
        kv.set("model.memory_sizes", join(&self.transformer.memory_sizes));
        kv.set("model.local_dim", self.transformer.out_dim);
        kv.set("model.clusters", self.aggregation.clusters);
        kv.set("model.output_dim", self.aggregation.output_dim);
        let gating = match self.aggregation.gating {
            GatingPlacement::BeforeProjection => "before_projection",
            GatingPlacement::AfterProjection => "after_projection",
        };
        kv.set("model.gating", gating);
        kv
    }

    /// Parameter layout with seeded initial values.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut store = ParamStore::new();
        register_backbone(&mut store, seed, &self.backbone)?;
        register_transformer(&mut store, seed, &self.transformer)?;
        register_aggregation(&mut store, seed, &self.aggregation)?;
        Ok(store)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Nodes of one cloud's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub backbone: SparseFeat,
    pub transformer: TransformerNodes,
    pub head: HeadNodes,
}

impl ForwardNodes {
    pub fn descriptor(&self) -> NodeId {
        self.head.descriptor
    }
}

/// Quantize → backbone → transformer → aggregation inside `sess`.
pub fn forward_cloud<T: Scalar>(
    sess: &mut Session<'_, T>,
    cfg: &ModelConfig,
    cloud: &PointCloud,
) -> Result<ForwardNodes> {
    let mut b = forward_batch(sess, cfg, &[cloud])?;
    Ok(ForwardNodes {
        backbone: b.backbone,
        transformer: b.transformer,
        head: b.heads.pop().expect("one head per cloud"),
    })
}

/// Nodes of a packed multi-cloud forward pass.
#[derive(Clone, Debug)]
pub struct BatchNodes {
    pub backbone: SparseFeat,
    pub transformer: TransformerNodes,
    /// One head per input cloud, in order.
    pub heads: Vec<HeadNodes>,
}

impl BatchNodes {
    pub fn descriptors(&self) -> Vec<NodeId> {
        self.heads.iter().map(|h| h.descriptor).collect()
    }
}

/// Runs several clouds through one graph. Batch normalisation sees the
/// rows of every cloud; channel attention and aggregation stay per cloud.
pub fn forward_batch<T: Scalar>(
    sess: &mut Session<'_, T>,
    cfg: &ModelConfig,
    clouds: &[&PointCloud],
) -> Result<BatchNodes> {
    let grids = clouds
        .iter()
        .map(|c| quantize::<T>(c, cfg.quant_step))
        .collect::<Result<Vec<_>>>()?;
    let mut cache = MapCache::new();
    let backbone = if grids.len() == 1 {
        backbone_forward(sess, &mut cache, &grids[0], &cfg.backbone)?
    } else {
        let (packed, counts) = pack_grids(&grids)?;
        backbone_forward_packed(sess, &mut cache, &packed, &counts, &cfg.backbone)?
    };
    let transformer = transformer_forward(sess, backbone.node, &cfg.transformer)?;
    let mut heads = Vec::with_capacity(clouds.len());
    let mut start = 0;
    for &len in backbone.segments.iter() {
        let x = if backbone.segments.len() == 1 {
            transformer.output
        } else {
            sess.graph.narrow(transformer.output, 0, start, len)?
        };
        start += len;
        heads.push(head_forward(sess, x, &cfg.aggregation)?);
    }
    Ok(BatchNodes {
        backbone,
        transformer,
        heads,
    })
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking them against the layout.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.init_params::<T>(0)?.check_compatible(&params)?;
        Ok(Self { config, params })
    }

    /// Inference-mode descriptor of one cloud.
    pub fn descriptor(&self, cloud: &PointCloud) -> Result<Vec<T>> {
        let mut sess = Session::new(&self.params, Mode::Infer);
        let out = forward_cloud(&mut sess, &self.config, cloud)?;
        Ok(sess.graph.value(out.descriptor()).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn no_arfm_has_no_gate_parameters() {
        let cfg = ModelConfig::desk().ablation("no_arfm").unwrap();
        let store = cfg.init_params::<f64>(1).unwrap();
        assert!(store.paths().all(|p| !p.starts_with("arfm.")));
    }

    #[test]
    fn five_branches_is_baseline() {
        let base = ModelConfig::desk();
        assert_eq!(base.ablation("branches_5").unwrap(), base);
        assert_eq!(base.ablation("layers_6").unwrap(), base);
    }

    #[test]
    fn unknown_ablation_lists_names() {
        let err = ModelConfig::desk().ablation("wat").unwrap_err().to_string();
        for name in ABLATIONS {
            assert!(err.contains(name));
        }
        assert!(ModelConfig::desk().ablation("branches_9").is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig::desk().ablation("no_fusion_attention").unwrap();
        let mut kv = cfg.to_kv();
        assert_eq!(ModelConfig::from_kv(&mut kv).unwrap(), cfg);
        kv.finish().unwrap();
    }

    #[test]
    fn descriptor_is_unit_norm() {
        let cfg = ModelConfig {
            transformer: TransformerConfig {
                memory_sizes: vec![4, 4],
                ..ModelConfig::desk().transformer
            },
            ..ModelConfig::desk()
        };
        let model = Model::<f64>::new(cfg, 3).unwrap();
        let pts = (0..200)
            .map(|i| {
                let t = i as f64 / 200.0;
                [2.0 * t - 1.0, (7.0 * t).sin() * 0.8, (3.0 * t).cos() * 0.5]
            })
            .collect();
        let d = model.descriptor(&PointCloud::new(pts)).unwrap();
        assert_eq!(d.len(), 256);
        let n: f64 = d.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-9);
    }
}
