//! Online and target encoder networks.
//!
//! The online network is a backbone `f`, a projector `g` and a predictor `q`.
//! The target network holds exponential-moving-average copies of `f` and `g`
//! only, and is never differentiated through: its forward passes read
//! parameters as detached tensors.

mod arch;
pub mod checkpoint;
pub mod conv;
mod params;

use std::path::PathBuf;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use arch::{
    backbone_specs, backbone_width, head_specs, images_to_tensor, BackboneArch, NormMode, Role,
    TensorSpec,
};
pub use params::{load_safetensors, ParamKind, ParamStore};

use crate::error::{Error, Result};
use crate::image::Image;

/// ImageNet channel statistics used by the residual backbone's checkpoints.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone_arch: BackboneArch,
    /// Square input side in pixels; inputs are resized to it.
    pub input_size: usize,
    pub feature_dim: usize,
    pub projector_hidden_dim: usize,
    pub projector_out_dim: usize,
    pub predictor_hidden_dim: usize,
    pub pretrained_checkpoint: Option<PathBuf>,
    /// Convolution widths of the tiny CNN, one 3x3 layer each.
    pub tiny_channels: Vec<usize>,
    /// Seed for freshly initialized tensors.
    pub init_seed: u64,
    pub input_mean: [f32; 3],
    pub input_std: [f32; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone_arch: BackboneArch::Resnet18,
            input_size: 224,
            feature_dim: 512,
            projector_hidden_dim: 512,
            projector_out_dim: 128,
            predictor_hidden_dim: 512,
            pretrained_checkpoint: None,
            tiny_channels: vec![16, 32, 64],
            init_seed: 0,
            input_mean: IMAGENET_MEAN,
            input_std: IMAGENET_STD,
        }
    }
}

impl EncoderConfig {
    /// A small CNN config for desk-scale runs and tests.
    pub fn tiny(channels: Vec<usize>, input_size: usize) -> Self {
        let width = *channels.last().unwrap_or(&3);
        Self {
            backbone_arch: BackboneArch::TinyCnn,
            input_size,
            feature_dim: width,
            projector_hidden_dim: 2 * width,
            projector_out_dim: width / 2,
            predictor_hidden_dim: 2 * width,
            tiny_channels: channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let width = backbone_width(self.backbone_arch, &self.tiny_channels);
        if self.feature_dim != width {
            return Err(Error::Config(format!(
                "feature_dim {} does not match backbone width {width}",
                self.feature_dim
            )));
        }
        if self.backbone_arch == BackboneArch::TinyCnn
            && (self.tiny_channels.is_empty() || self.tiny_channels.contains(&0))
        {
            return Err(Error::Config("tiny_channels must be non-empty and positive".into()));
        }
        for (name, v) in [
            ("input_size", self.input_size),
            ("projector_hidden_dim", self.projector_hidden_dim),
            ("projector_out_dim", self.projector_out_dim),
            ("predictor_hidden_dim", self.predictor_hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.input_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("input_std must be positive".into()));
        }
        Ok(())
    }

    fn tiny_depth(&self) -> usize {
        self.tiny_channels.len()
    }

    /// Full tensor layout of the online network (prefixed names).
    pub fn online_specs(&self) -> Vec<TensorSpec> {
        let mut specs = self.target_specs();
        specs.extend(head_specs(
            "predictor",
            self.projector_out_dim,
            self.predictor_hidden_dim,
            self.projector_out_dim,
        ));
        specs
    }

    /// Backbone plus projector layout, the part mirrored by the target.
    pub fn target_specs(&self) -> Vec<TensorSpec> {
        let mut specs: Vec<TensorSpec> = backbone_specs(self.backbone_arch, &self.tiny_channels)
            .into_iter()
            .map(|mut s| {
                s.name = format!("backbone.{}", s.name);
                s
            })
            .collect();
        specs.extend(head_specs(
            "projector",
            self.feature_dim,
            self.projector_hidden_dim,
            self.projector_out_dim,
        ));
        specs
    }
}

/// Which stage of the encoder an embedding is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Depth {
    Backbone,
    Projected,
    Predicted,
}

/// Row-aligned embeddings of a batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub depth: Depth,
    pub source_ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

/// Common read access to online and target networks.
pub trait Encoder {
    fn config(&self) -> &EncoderConfig;
    fn params(&self) -> &ParamStore;
    fn has_predictor(&self) -> bool;

    /// Forward to the requested depth. `track` makes weights differentiable.
    fn forward(&self, x: &Tensor, depth: Depth, mode: NormMode, track: bool) -> Result<Tensor> {
        if depth == Depth::Predicted && !self.has_predictor() {
            return Err(Error::Contract(
                "predicted depth requested from a network without predictor".into(),
            ));
        }
        let cfg = self.config();
        let fwd = arch::Forward {
            store: self.params(),
            track,
        };
        let z = fwd.backbone(cfg.backbone_arch, cfg.tiny_depth(), x)?;
        if depth == Depth::Backbone {
            return Ok(z);
        }
        let g = fwd.head("projector", &z, mode)?;
        if depth == Depth::Projected {
            return Ok(g);
        }
        fwd.head("predictor", &g, mode)
    }

    /// One head (`projector` or `predictor`) applied to `x`.
    fn head(&self, prefix: &str, x: &Tensor, mode: NormMode, track: bool) -> Result<Tensor> {
        if prefix == "predictor" && !self.has_predictor() {
            return Err(Error::Contract("network has no predictor".into()));
        }
        arch::Forward {
            store: self.params(),
            track,
        }
        .head(prefix, x, mode)
    }

    fn input_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let cfg = self.config();
        images_to_tensor(images, cfg.input_size, cfg.input_mean, cfg.input_std)
    }
}

#[derive(Debug, Clone)]
pub struct OnlineNetwork {
    config: EncoderConfig,
    params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct TargetNetwork {
    config: EncoderConfig,
    params: ParamStore,
}

impl Encoder for OnlineNetwork {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn has_predictor(&self) -> bool {
        true
    }
}

impl Encoder for TargetNetwork {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn has_predictor(&self) -> bool {
        false
    }
}

fn fresh_store(specs: &[TensorSpec], seed: u64, stream: &str) -> Result<ParamStore> {
    let mut rng = crate::rng::stream(seed, stream, 0);
    let mut store = ParamStore::new();
    for spec in specs {
        let t = arch::init_tensor(spec, &mut rng)?;
        store.insert(spec.name.clone(), &t, spec.kind)?;
    }
    Ok(store)
}

impl OnlineNetwork {
    /// Randomly initialized network; backbone and heads draw from separate
    /// streams of `config.init_seed`.
    pub fn random(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.online_specs();
        let (backbone, heads): (Vec<_>, Vec<_>) = specs
            .into_iter()
            .partition(|s| s.name.starts_with("backbone."));
        let mut params = fresh_store(&backbone, config.init_seed, "init-backbone")?;
        let head_store = fresh_store(&heads, config.init_seed, "init-heads")?;
        for (name, var, kind) in head_store.iter() {
            params.insert(name, var.as_tensor(), kind)?;
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub(crate) fn from_parts(config: EncoderConfig, params: ParamStore) -> Self {
        Self { config, params }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Scalar count of backbone weights (running statistics excluded).
    pub fn backbone_weight_count(&self) -> usize {
        self.params
            .weights()
            .filter(|(n, _)| n.starts_with("backbone."))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            params: self.params.deep_clone()?,
        })
    }
}

impl TargetNetwork {
    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            params: self.params.deep_clone()?,
        })
    }
}

/// Builds the online network, copying backbone tensors from the configured
/// checkpoint when there is one. Heads are always fresh.
///
/// Checkpoint tensors are matched by their bare backbone name
/// (`layer1.0.conv1.weight`) or with a `backbone.` prefix; extra tensors such
/// as a classifier are ignored.
pub fn load_pretrained(config: &EncoderConfig) -> Result<OnlineNetwork> {
    let net = OnlineNetwork::random(config)?;
    let Some(path) = &config.pretrained_checkpoint else {
        return Ok(net);
    };
    let tensors = load_safetensors(path)?;
    let mut offending = Vec::new();
    let mut matched = Vec::new();
    for spec in backbone_specs(config.backbone_arch, &config.tiny_channels) {
        let prefixed = format!("backbone.{}", spec.name);
        let found = tensors.get(&spec.name).or_else(|| tensors.get(&prefixed));
        match found {
            None => offending.push(format!("{} (missing)", spec.name)),
            Some(t) if t.dims() != spec.shape.as_slice() => offending.push(format!(
                "{} (expected {:?}, found {:?})",
                spec.name,
                spec.shape,
                t.dims()
            )),
            Some(t) => matched.push((prefixed, t.to_dtype(DType::F32)?)),
        }
    }
    if !offending.is_empty() {
        return Err(Error::CheckpointIncompatible { offending });
    }
    for (name, t) in matched {
        net.params.set(&name, &t)?;
    }
    Ok(net)
}

/// Target network whose backbone and projector are exact copies of `online`.
pub fn init_target(online: &OnlineNetwork) -> Result<TargetNetwork> {
    let mut params = online.params.subset("backbone.")?;
    for (name, var, kind) in online.params.subset("projector.")?.iter() {
        params.insert(name, var.as_tensor(), kind)?;
    }
    Ok(TargetNetwork {
        config: online.config.clone(),
        params,
    })
}

/// In-place update `target ← beta·target + (1 − beta)·online` for every
/// target tensor, including normalization buffers.
pub fn ema_update(target: &mut TargetNetwork, online: &OnlineNetwork, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) || beta.is_nan() {
        return Err(Error::Domain(format!("EMA beta {beta} outside [0, 1]")));
    }
    for (name, var, _) in target.params.iter() {
        let src = online.params.var(name)?;
        if src.shape() != var.shape() {
            return Err(Error::Contract(format!(
                "EMA shape mismatch for `{name}`: {:?} vs {:?}",
                var.shape(),
                src.shape()
            )));
        }
        let t = var.as_detached_tensor();
        let o = src.as_detached_tensor();
        let next = ((t * beta)? + (o * (1.0 - beta))?)?;
        var.set(&next)?;
    }
    Ok(())
}

/// Evaluation-mode embeddings of `images` at `depth`. Row order follows input
/// order; parameters are not modified.
pub fn embed<E: Encoder + ?Sized>(net: &E, images: &[Image], depth: Depth) -> Result<EmbeddingSet> {
    let ids = (0..images.len()).map(|i| i.to_string()).collect();
    embed_with_ids(net, images, depth, ids)
}

pub fn embed_with_ids<E: Encoder + ?Sized>(
    net: &E,
    images: &[Image],
    depth: Depth,
    source_ids: Vec<String>,
) -> Result<EmbeddingSet> {
    const CHUNK: usize = 64;
    if depth == Depth::Predicted && !net.has_predictor() {
        return Err(Error::Contract(
            "predicted depth requested from the target network".into(),
        ));
    }
    let mut vectors = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let x = net.input_tensor(&refs)?;
        let out = net
            .forward(&x, depth, NormMode::Running, false)?
            .to_dtype(DType::F64)?;
        vectors.extend(out.to_vec2::<f64>()?);
    }
    Ok(EmbeddingSet {
        vectors,
        depth,
        source_ids,
    })
}
