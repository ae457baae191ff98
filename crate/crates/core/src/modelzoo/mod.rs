//! CNN backbones with a replaced head, and the transfer / fine-tune freeze
//! rules.
//!
//! Variables live in one `VarMap` per model: backbone tensors under
//! `backbone.` (named as in the timm checkpoints, so published weights load
//! directly) and the new head under `head.`. BatchNorm running statistics are
//! stored alongside but are never parameters.

mod convnext;
mod densenet;
mod efficientnet;
pub mod layers;
mod resnet;
pub mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Init, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

pub use convnext::ConvNextTiny;
pub use densenet::DenseNet121;
pub use efficientnet::EfficientNetB4;
pub use resnet::ResNet50;

use crate::error::{Error, Result};
use crate::registry::Registry;
use store::SeededStore;

/// A feature extractor mapping `(B, 3, H, W)` images to `(B, feature_dim)`.
pub trait Backbone: Send + Sync {
    fn name(&self) -> &'static str;
    fn feature_dim(&self) -> usize;
    /// `train` selects batch statistics in normalization layers (and
    /// updates their running estimates).
    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor>;
}

/// Registered architectures and their penultimate widths.
pub const BACKBONES: [(&str, usize); 4] = [
    ("resnet50", ResNet50::FEATURE_DIM),
    ("densenet121", DenseNet121::FEATURE_DIM),
    ("efficientnet_b4", EfficientNetB4::FEATURE_DIM),
    ("convnext_tiny", ConvNextTiny::FEATURE_DIM),
];

pub fn backbones() -> Registry<dyn Backbone, VarBuilder<'static>> {
    let mut r: Registry<dyn Backbone, VarBuilder<'static>> = Registry::new("backbone");
    r.register("resnet50", |vb: &VarBuilder<'static>| Ok(Box::new(ResNet50::new(vb.clone())?)));
    r.register("densenet121", |vb: &VarBuilder<'static>| Ok(Box::new(DenseNet121::new(vb.clone())?)));
    r.register("efficientnet_b4", |vb: &VarBuilder<'static>| {
        Ok(Box::new(EfficientNetB4::new(vb.clone())?))
    });
    r.register("convnext_tiny", |vb: &VarBuilder<'static>| Ok(Box::new(ConvNextTiny::new(vb.clone())?)));
    r
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    #[serde(default)]
    pub pretrained: bool,
}

impl BackboneSpec {
    pub fn new(name: &str, pretrained: bool) -> Self {
        BackboneSpec {
            name: name.to_string(),
            pretrained,
        }
    }

    pub fn feature_dim(&self) -> Result<usize> {
        BACKBONES
            .iter()
            .find(|(n, _)| *n == self.name)
            .map(|(_, d)| *d)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown backbone '{}' (known: {})",
                    self.name,
                    BACKBONES.map(|(n, _)| n).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Only the head is optimized.
    Transfer,
    /// Every parameter is optimized.
    Finetune,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Transfer => "transfer",
            TrainMode::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Classifier { num_classes: usize },
    Embedder { dim: usize, l2_normalize: bool },
}

impl HeadKind {
    pub fn width(&self) -> usize {
        match *self {
            HeadKind::Classifier { num_classes } => num_classes,
            HeadKind::Embedder { dim, .. } => dim,
        }
    }
}

/// Where published backbone weights are cached and whether a cache miss may
/// be filled from the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsConfig {
    pub cache_dir: PathBuf,
    #[serde(default)]
    pub allow_download: bool,
}

pub fn weights_url(backbone: &str) -> Option<&'static str> {
    Some(match backbone {
        "resnet50" => "https://huggingface.co/timm/resnet50.tv_in1k/resolve/main/model.safetensors",
        "densenet121" => "https://huggingface.co/timm/densenet121.tv_in1k/resolve/main/model.safetensors",
        "efficientnet_b4" => {
            "https://huggingface.co/timm/efficientnet_b4.ra2_in1k/resolve/main/model.safetensors"
        }
        "convnext_tiny" => "https://huggingface.co/timm/convnext_tiny.fb_in1k/resolve/main/model.safetensors",
        _ => return None,
    })
}

/// Path of the cached weights for `backbone`, downloading them when allowed.
pub fn resolve_weights(backbone: &str, cfg: &WeightsConfig) -> Result<PathBuf> {
    let path = cfg.cache_dir.join(format!("{backbone}.safetensors"));
    if path.is_file() {
        return Ok(path);
    }
    if !cfg.allow_download {
        return Err(Error::WeightsCacheMiss { path });
    }
    let url = weights_url(backbone)
        .ok_or_else(|| Error::Config(format!("no published weights for '{backbone}'")))?;
    let network = |message: String| Error::WeightsNetwork {
        url: url.to_string(),
        message,
    };
    let resp = ureq::get(url).call().map_err(|e| network(e.to_string()))?;
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut resp.into_reader(), &mut bytes).map_err(|e| network(e.to_string()))?;
    fs::create_dir_all(&cfg.cache_dir).map_err(|e| Error::io(&cfg.cache_dir, e))?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub seed: u64,
    /// Let normalization layers of a transfer-mode backbone use and update
    /// batch statistics during training. Off keeps them strictly frozen.
    pub update_bn_stats: bool,
    pub weights: Option<WeightsConfig>,
    pub device: Device,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            seed: 0,
            update_bn_stats: false,
            weights: None,
            device: Device::Cpu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableReport {
    pub total_params: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

impl fmt::Display for TrainableReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "params: {} total, {} trainable, {} frozen",
            self.total_params, self.trainable_params, self.frozen_params
        )
    }
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

const BACKBONE_PREFIX: &str = "backbone";
const HEAD_PREFIX: &str = "head.";

/// A backbone plus a linear head (classifier logits or embeddings).
pub struct Model {
    pub varmap: VarMap,
    backbone: Box<dyn Backbone>,
    head_weight: Tensor,
    head_bias: Tensor,
    pub spec: BackboneSpec,
    pub head: HeadKind,
    pub mode: TrainMode,
    update_bn_stats: bool,
    device: Device,
}

fn build(spec: &BackboneSpec, head: HeadKind, mode: TrainMode, opts: &BuildOptions) -> Result<Model> {
    let feature_dim = spec.feature_dim()?;
    let varmap = VarMap::new();
    let vb = SeededStore::builder(&varmap, opts.seed, &opts.device);
    let backbone = backbones().build(&spec.name, &vb.pp(BACKBONE_PREFIX))?;
    debug_assert_eq!(backbone.feature_dim(), feature_dim);
    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    let bound = 1.0 / (feature_dim as f64).sqrt();
    let init = Init::Uniform {
        lo: -bound,
        up: bound,
    };
    let hvb = vb.pp("head");
    let head_weight = hvb.get_with_hints((head.width(), feature_dim), "weight", init)?;
    let head_bias = hvb.get_with_hints(head.width(), "bias", init)?;
    let model = Model {
        varmap,
        backbone,
        head_weight,
        head_bias,
        spec: spec.clone(),
        head,
        mode,
        update_bn_stats: opts.update_bn_stats,
        device: opts.device.clone(),
    };
    if spec.pretrained {
        let cfg = opts.weights.as_ref().ok_or_else(|| {
            Error::Config("pretrained weights requested but no weights cache configured".into())
        })?;
        let path = resolve_weights(&spec.name, cfg)?;
        model.load_backbone_weights(&path)?;
    }
    Ok(model)
}

pub fn build_classifier(
    spec: &BackboneSpec,
    num_classes: usize,
    mode: TrainMode,
    opts: &BuildOptions,
) -> Result<Model> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("num_classes = {num_classes}, need >= 2")));
    }
    build(spec, HeadKind::Classifier { num_classes }, mode, opts)
}

/// Embedding model; transfer mode is the intended setting, fine-tune is
/// available for comparison.
pub fn build_embedder(
    spec: &BackboneSpec,
    embed_dim: usize,
    l2_normalize: bool,
    mode: TrainMode,
    opts: &BuildOptions,
) -> Result<Model> {
    if embed_dim < 2 {
        return Err(Error::InvalidArgument(format!("embed_dim = {embed_dim}, need >= 2")));
    }
    build(spec, HeadKind::Embedder { dim: embed_dim, l2_normalize }, mode, opts)
}

impl Model {
    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// Whether normalization layers see batch statistics in a training pass.
    fn backbone_train(&self, train: bool) -> bool {
        match self.mode {
            TrainMode::Transfer => train && self.update_bn_stats,
            TrainMode::Finetune => train,
        }
    }

    /// True when backbone features depend only on the input image, so they
    /// can be computed once and reused across epochs.
    pub fn features_are_static(&self) -> bool {
        self.mode == TrainMode::Transfer && !self.update_bn_stats
    }

    /// Backbone features; detached from the graph in transfer mode.
    pub fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(Error::InvalidArgument(format!("expected 3 input channels, got {c}")));
        }
        let f = self.backbone.forward_t(x, self.backbone_train(train))?;
        Ok(match self.mode {
            TrainMode::Transfer => f.detach(),
            TrainMode::Finetune => f,
        })
    }

    /// Head applied to `(B, feature_dim)` features.
    pub fn head_forward(&self, features: &Tensor) -> Result<Tensor> {
        let y = features
            .matmul(&self.head_weight.t()?)?
            .broadcast_add(&self.head_bias)?;
        Ok(match self.head {
            HeadKind::Embedder { l2_normalize: true, .. } => {
                let norm = (y.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
                y.broadcast_div(&norm)?
            }
            _ => y,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.head_forward(&self.features(x, train)?)
    }

    fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    fn is_trainable(&self, name: &str) -> bool {
        !is_buffer(name)
            && match self.mode {
                TrainMode::Transfer => name.starts_with(HEAD_PREFIX),
                TrainMode::Finetune => true,
            }
    }

    /// Variables the optimizer may update, in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.named_vars()
            .into_iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn trainable_report(&self) -> TrainableReport {
        let mut total = 0;
        let mut trainable = 0;
        for (name, var) in self.named_vars() {
            if is_buffer(&name) {
                continue;
            }
            let n = var.elem_count();
            total += n;
            if self.is_trainable(&name) {
                trainable += n;
            }
        }
        TrainableReport {
            total_params: total,
            trainable_params: trainable,
            frozen_params: total - trainable,
        }
    }

    /// Copy of every variable (parameters and buffers), keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.named_vars()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().flatten_all()?.to_vec1::<f32>()?)))
            .collect()
    }

    /// Names of variables that never receive optimizer updates.
    pub fn frozen_names(&self) -> Vec<String> {
        self.named_vars()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !self.is_trainable(n))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.varmap.save(path)?;
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::MissingCheckpoint {
                path: path.to_path_buf(),
            });
        }
        self.varmap.clone().load(path).map_err(|e| Error::WeightsMismatch {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Overwrite backbone variables from a timm-style safetensors file. Extra
    /// tensors in the file (the original classifier, counters) are ignored.
    pub fn load_backbone_weights(&self, path: &Path) -> Result<usize> {
        let mismatch = |message: String| Error::WeightsMismatch {
            path: path.to_path_buf(),
            message,
        };
        let file = unsafe { candle_core::safetensors::MmapedSafetensors::new(path) }
            .map_err(|e| mismatch(e.to_string()))?;
        let prefix = format!("{BACKBONE_PREFIX}.");
        let mut loaded = 0;
        for (name, var) in self.named_vars() {
            let Some(key) = name.strip_prefix(&prefix) else { continue };
            let t = file
                .load(key, &self.device)
                .map_err(|_| mismatch(format!("missing tensor {key}")))?
                .to_dtype(DType::F32)?;
            if t.shape() != var.shape() {
                return Err(mismatch(format!(
                    "{key}: file has {:?}, model expects {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t)?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(b: usize, size: usize) -> Tensor {
        Tensor::zeros((b, 3, size, size), DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn unknown_backbone_is_a_config_error() {
        let err = build_classifier(&BackboneSpec::new("vit_b16", false), 3, TrainMode::Transfer, &BuildOptions::default())
            .err()
            .unwrap();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("densenet121"));
    }

    #[test]
    fn bad_head_sizes_rejected() {
        let spec = BackboneSpec::new("resnet50", false);
        assert!(build_classifier(&spec, 1, TrainMode::Transfer, &BuildOptions::default()).is_err());
        assert!(build_embedder(&spec, 1, false, TrainMode::Transfer, &BuildOptions::default()).is_err());
    }

    #[test]
    fn densenet_transfer_counts_head_only() {
        let spec = BackboneSpec::new("densenet121", false);
        let m = build_classifier(&spec, 466, TrainMode::Transfer, &BuildOptions::default()).unwrap();
        let r = m.trainable_report();
        assert_eq!(r.trainable_params, 466 * 1024 + 466);
        assert_eq!(r.total_params, r.trainable_params + r.frozen_params);
        assert!(r.frozen_params > 0);
        // torchvision DenseNet-121 has 6,953,856 parameters without its
        // classifier.
        assert_eq!(r.frozen_params, 6_953_856);
        let y = m.forward_t(&zeros(1, 64), false).unwrap();
        assert_eq!(y.dims(), &[1, 466]);
    }

    #[test]
    fn parameter_counts_match_reference_architectures() {
        // Feature-extractor parameter counts of the reference implementations.
        for (name, expected) in [
            ("resnet50", 23_508_032usize),
            ("efficientnet_b4", 17_548_616),
            ("convnext_tiny", 27_820_128),
        ] {
            let m = build_classifier(&BackboneSpec::new(name, false), 2, TrainMode::Finetune, &BuildOptions::default())
                .unwrap();
            let r = m.trainable_report();
            let head = 2 * m.feature_dim() + 2;
            assert_eq!(r.frozen_params, 0, "{name}");
            assert_eq!(r.total_params - head, expected, "{name}");
        }
    }

    #[test]
    fn embedder_shapes_and_determinism() {
        let spec = BackboneSpec::new("resnet50", false);
        let m = build_embedder(&spec, 512, false, TrainMode::Transfer, &BuildOptions::default()).unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let x2 = Tensor::cat(&[&x, &x], 0).unwrap();
        let e = m.forward_t(&x2, false).unwrap();
        assert_eq!(e.dims(), &[2, 512]);
        let rows = e.to_vec2::<f32>().unwrap();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(m.trainable_report().trainable_params, 512 * 2048 + 512);
        let n = build_embedder(&spec, 8, true, TrainMode::Transfer, &BuildOptions::default()).unwrap();
        let v = n.forward_t(&x, false).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!((v - 1.0).abs() < 1e-5);
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = BackboneSpec::new("resnet50", false);
        let opts = BuildOptions { seed: 3, ..Default::default() };
        let a = build_classifier(&spec, 4, TrainMode::Transfer, &opts).unwrap().snapshot().unwrap();
        let b = build_classifier(&spec, 4, TrainMode::Transfer, &opts).unwrap().snapshot().unwrap();
        assert!(a == b);
    }

    #[test]
    fn weights_cache_miss_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = WeightsConfig { cache_dir: dir.path().to_path_buf(), allow_download: false };
        assert!(matches!(resolve_weights("resnet50", &cfg), Err(Error::WeightsCacheMiss { .. })));

        // Export a backbone in the published naming and load it into a
        // differently seeded model.
        let spec = BackboneSpec::new("convnext_tiny", false);
        let src = build_classifier(&spec, 2, TrainMode::Transfer, &BuildOptions { seed: 1, ..Default::default() }).unwrap();
        let tensors: std::collections::HashMap<String, Tensor> = src
            .named_vars()
            .into_iter()
            .filter_map(|(n, v)| n.strip_prefix("backbone.").map(|k| (k.to_string(), v.as_tensor().clone())))
            .collect();
        let path = dir.path().join("convnext_tiny.safetensors");
        candle_core::safetensors::save(&tensors, &path).unwrap();
        assert_eq!(resolve_weights("convnext_tiny", &cfg).unwrap(), path);

        let dst = build_classifier(
            &BackboneSpec::new("convnext_tiny", true),
            2,
            TrainMode::Transfer,
            &BuildOptions { seed: 2, weights: Some(cfg), ..Default::default() },
        )
        .unwrap();
        let (a, b) = (src.snapshot().unwrap(), dst.snapshot().unwrap());
        for (k, v) in &a {
            if k.starts_with("backbone.") {
                assert_eq!(v, &b[k], "{k}");
            }
        }
        assert_ne!(a["head.weight"], b["head.weight"]);
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let m = build_classifier(&BackboneSpec::new("resnet50", false), 2, TrainMode::Transfer, &BuildOptions::default()).unwrap();
        let err = m.load(Path::new("/nonexistent/ckpt.safetensors")).unwrap_err();
        assert!(err.to_string().contains("no checkpoint in run dir"));
    }
}
