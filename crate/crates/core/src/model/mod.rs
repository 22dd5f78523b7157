//! Encoder, projection head and FC classifier.
//!
//! All weights live in one flat parameter list. Layers refer to parameters by
//! index, so a forward pass is a walk over the layer list with the parameters
//! bound into a [`Graph`] as leaves.

mod checkpoint;
mod quant;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with_extras, save_checkpoint, save_checkpoint_with_extras,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use quant::QuantizedLayerView;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CfdrError, Result};
use crate::rng;
use crate::tensor::{Graph, Parameter, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Three conv/ReLU stages with pooling, ending in global average pooling.
    Tiny,
    /// A stem conv plus two residual blocks.
    ResnetLite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub preset: Preset,
    pub embedding_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: Preset::Tiny,
            embedding_dim: 64,
            proj_hidden: 64,
            proj_dim: 32,
            num_classes: 10,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn tiny(seed: u64) -> Self {
        ModelConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("proj_hidden", self.proj_hidden),
            ("proj_dim", self.proj_dim),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(CfdrError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.embedding_dim < self.num_classes {
            log::warn!(
                "embedding_dim {} is smaller than num_classes {}",
                self.embedding_dim,
                self.num_classes
            );
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMetadata {
    /// Last training phase completed ("none", "phase_a", "phase_b", ...).
    pub phase: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Head,
    Classifier,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("encoder.") {
            ParamGroup::Encoder
        } else if name.starts_with("head.") {
            ParamGroup::Head
        } else {
            ParamGroup::Classifier
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvRef {
    name: String,
    weight: usize,
    bias: usize,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct LinearRef {
    name: String,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum EncoderLayer {
    Conv(ConvRef),
    Relu,
    MaxPool2,
    GlobalAvgPool,
    /// `relu(x + conv_b(relu(conv_a(x))))`
    Residual(ConvRef, ConvRef),
}

/// Parameters of a [`Model`] bound into a graph, in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }
}

/// Images with their integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().first() != Some(&labels.len()) {
            return Err(CfdrError::ShapeMismatch {
                op: "labeled batch",
                left: images.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        Ok(LabeledBatch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledBatch::new(self.images.gather_rows(indices)?, labels)
    }
}

/// A weight-bearing layer and its parameter count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub weight_shape: Vec<usize>,
    pub weight_count: usize,
    pub total_params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Parameter>,
    encoder: Vec<EncoderLayer>,
    head: (LinearRef, LinearRef),
    classifier: LinearRef,
    quant: BTreeMap<String, QuantizedLayerView>,
    pub metadata: ModelMetadata,
}

struct Builder {
    seed: u64,
    params: Vec<Parameter>,
}

impl Builder {
    fn he_uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let n: usize = shape.iter().product();
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let mut r = rng::substream(self.seed, "init", self.params.len() as u64);
        let data: Vec<f32> = (0..n).map(|_| r.gen_range(-bound..bound)).collect();
        self.params.push(Parameter::new(name, Tensor::new(shape, data).expect("valid init shape")));
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> usize {
        let t = Tensor::zeros(&shape).expect("valid init shape");
        self.params.push(Parameter::new(name, t));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> ConvRef {
        let weight = self.he_uniform(format!("{name}.weight"), vec![cout, cin, 3, 3], cin * 9);
        let bias = self.zeros(format!("{name}.bias"), vec![cout]);
        ConvRef {
            name: name.to_string(),
            weight,
            bias,
            pad: 1,
        }
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> LinearRef {
        let weight = self.he_uniform(format!("{name}.weight"), vec![out, inp], inp);
        let bias = self.zeros(format!("{name}.bias"), vec![out]);
        LinearRef {
            name: name.to_string(),
            weight,
            bias,
        }
    }
}

impl Model {
    /// Builds a deterministically initialized model (He-uniform weights, zero biases).
    pub fn build(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut b = Builder {
            seed: config.seed,
            params: Vec::new(),
        };
        let e = config.embedding_dim;
        let encoder = match config.preset {
            Preset::Tiny => vec![
                EncoderLayer::Conv(b.conv("encoder.conv1", IMAGE_CHANNELS, 16)),
                EncoderLayer::Relu,
                EncoderLayer::MaxPool2,
                EncoderLayer::Conv(b.conv("encoder.conv2", 16, 32)),
                EncoderLayer::Relu,
                EncoderLayer::MaxPool2,
                EncoderLayer::Conv(b.conv("encoder.conv3", 32, e)),
                EncoderLayer::Relu,
                EncoderLayer::GlobalAvgPool,
            ],
            Preset::ResnetLite => {
                let stem = b.conv("encoder.stem", IMAGE_CHANNELS, 16);
                let b1 = (b.conv("encoder.block1.conv_a", 16, 16), b.conv("encoder.block1.conv_b", 16, 16));
                let widen = b.conv("encoder.widen", 16, e);
                let b2 = (b.conv("encoder.block2.conv_a", e, e), b.conv("encoder.block2.conv_b", e, e));
                vec![
                    EncoderLayer::Conv(stem),
                    EncoderLayer::Relu,
                    EncoderLayer::MaxPool2,
                    EncoderLayer::Residual(b1.0, b1.1),
                    EncoderLayer::MaxPool2,
                    EncoderLayer::Conv(widen),
                    EncoderLayer::Relu,
                    EncoderLayer::Residual(b2.0, b2.1),
                    EncoderLayer::GlobalAvgPool,
                ]
            }
        };
        let head = (
            b.linear("head.fc1", e, config.proj_hidden),
            b.linear("head.fc2", config.proj_hidden, config.proj_dim),
        );
        let classifier = b.linear("classifier", e, config.num_classes);
        let metadata = ModelMetadata {
            phase: "none".into(),
            seed: config.seed,
            config_hash: config.hash(),
        };
        Ok(Model {
            config,
            params: b.params,
            encoder,
            head,
            classifier,
            quant: BTreeMap::new(),
            metadata,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Mutable parameters selected by `filter`, for the optimizer.
    pub fn params_where(&mut self, filter: impl Fn(&str) -> bool) -> Vec<&mut Parameter> {
        self.params.iter_mut().filter(|p| filter(&p.name)).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn reset_optimizer_state(&mut self) {
        for p in &mut self.params {
            p.reset_optimizer_state();
        }
    }

    /// Weight-bearing layers in declaration order.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut names: Vec<String> = Vec::new();
        for p in &self.params {
            if let Some(layer) = p.name.strip_suffix(".weight") {
                names.push(layer.to_string());
            }
        }
        names
            .into_iter()
            .map(|name| {
                let w = self.param(&format!("{name}.weight")).expect("weight exists");
                let bias = self.param(&format!("{name}.bias")).map_or(0, |b| b.numel());
                LayerInfo {
                    weight_shape: w.tensor.shape().to_vec(),
                    weight_count: w.numel(),
                    total_params: w.numel() + bias,
                    name,
                }
            })
            .collect()
    }

    pub fn layer(&self, name: &str) -> Result<LayerInfo> {
        self.layers()
            .into_iter()
            .find(|l| l.name == name)
            .ok_or_else(|| CfdrError::UnknownLayer(name.to_string()))
    }

    pub(crate) fn weight_index(&self, layer: &str) -> Result<usize> {
        self.param_index(&format!("{layer}.weight"))
            .ok_or_else(|| CfdrError::UnknownLayer(layer.to_string()))
    }

    /// SHA-256 over the raw bytes of every parameter selected by `filter`.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(&p.name)) {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    // ---- graph-level forward ---------------------------------------------

    /// Binds all parameters as leaves; those matching `trainable` require grad.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), trainable(&p.name)))
            .collect();
        Bound { vars }
    }

    /// Copies gradients from the graph into the parameters that required them.
    pub fn absorb_grads(&mut self, g: &Graph, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(grad) = g.grad(v) {
                p.tensor.set_grad(grad.to_vec()).expect("grad length matches");
            }
        }
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != IMAGE_CHANNELS {
            return Err(CfdrError::InvalidShape {
                shape: s.to_vec(),
                reason: "encoder expects [B, 3, H, W]".into(),
            });
        }
        if s[2] < 4 || s[3] < 4 {
            return Err(CfdrError::InvalidShape {
                shape: s.to_vec(),
                reason: "images must be at least 4x4".into(),
            });
        }
        if images.has_non_finite() {
            return Err(CfdrError::InvalidInput("image batch contains NaN or Inf".into()));
        }
        Ok(())
    }

    fn conv_on(&self, g: &mut Graph, b: &Bound, c: &ConvRef, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(c.weight), Some(b.var(c.bias)), c.pad)
    }

    /// `h = f(x)`: `[B, 3, H, W] -> [B, embedding_dim]`.
    pub fn encode_on(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        self.check_images(g.value(x))?;
        let mut h = x;
        for layer in &self.encoder {
            h = match layer {
                EncoderLayer::Conv(c) => self.conv_on(g, b, c, h)?,
                EncoderLayer::Relu => g.relu(h)?,
                EncoderLayer::MaxPool2 => g.max_pool2(h)?,
                EncoderLayer::GlobalAvgPool => g.global_avg_pool(h)?,
                EncoderLayer::Residual(ca, cb) => {
                    let a = self.conv_on(g, b, ca, h)?;
                    let a = g.relu(a)?;
                    let a = self.conv_on(g, b, cb, a)?;
                    let s = g.add(a, h)?;
                    g.relu(s)?
                }
            };
        }
        Ok(h)
    }

    fn check_embedding(&self, g: &Graph, h: Var) -> Result<()> {
        let s = g.value(h).shape();
        if s.len() != 2 || s[1] != self.config.embedding_dim {
            return Err(CfdrError::ShapeMismatch {
                op: "embedding",
                left: s.to_vec(),
                right: vec![s.first().copied().unwrap_or(0), self.config.embedding_dim],
            });
        }
        Ok(())
    }

    /// `z = g(h)`: one hidden ReLU layer.
    pub fn project_on(&self, g: &mut Graph, b: &Bound, h: Var) -> Result<Var> {
        self.check_embedding(g, h)?;
        let (l1, l2) = &self.head;
        let a = g.linear(h, b.var(l1.weight), Some(b.var(l1.bias)))?;
        let a = g.relu(a)?;
        g.linear(a, b.var(l2.weight), Some(b.var(l2.bias)))
    }

    pub fn classify_on(&self, g: &mut Graph, b: &Bound, h: Var) -> Result<Var> {
        self.check_embedding(g, h)?;
        let c = &self.classifier;
        g.linear(h, b.var(c.weight), Some(b.var(c.bias)))
    }

    // ---- inference helpers ------------------------------------------------

    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let b = self.bind(&mut g, |_| false);
        let x = g.constant(images.clone());
        let h = self.encode_on(&mut g, &b, x)?;
        Ok(g.value(h).clone())
    }

    pub fn project(&self, h: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let b = self.bind(&mut g, |_| false);
        let hv = g.constant(h.clone());
        let z = self.project_on(&mut g, &b, hv)?;
        Ok(g.value(z).clone())
    }

    pub fn classify(&self, h: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let b = self.bind(&mut g, |_| false);
        let hv = g.constant(h.clone());
        let z = self.classify_on(&mut g, &b, hv)?;
        Ok(g.value(z).clone())
    }

    /// Classifier logits for a batch of images.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let h = self.encode(images)?;
        self.classify(&h)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        self.logits(images)?.argmax_rows()
    }

    /// Predictions over a large image tensor, evaluated in chunks.
    pub fn predict_all(&self, images: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            out.extend(self.predict(&images.slice_rows(start, end)?)?);
            start = end;
        }
        Ok(out)
    }

    /// Top-1 accuracy in `[0, 1]`.
    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f32> {
        if labels.len() != images.shape()[0] {
            return Err(CfdrError::ShapeMismatch {
                op: "accuracy",
                left: images.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(CfdrError::InvalidInput("accuracy over an empty set".into()));
        }
        let preds = self.predict_all(images, 256)?;
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f32 / labels.len() as f32)
    }

    pub fn accuracy_on(&self, batch: &LabeledBatch) -> Result<f32> {
        self.accuracy(&batch.images, &batch.labels)
    }

    /// Mean cross-entropy of the classifier on a labeled batch.
    pub fn cross_entropy(&self, batch: &LabeledBatch) -> Result<f32> {
        let logits = self.logits(&batch.images)?;
        let mut g = Graph::inference();
        let l = g.constant(logits);
        let ce = g.cross_entropy(l, &batch.labels)?;
        g.value(ce).item()
    }

    // ---- quantized views --------------------------------------------------

    /// Quantizes a layer's weights to symmetric int8 and installs the
    /// dequantized values. Re-quantizing an already quantized layer returns
    /// the existing view.
    pub fn quantize_layer(&mut self, layer: &str) -> Result<&QuantizedLayerView> {
        let wi = self.weight_index(layer)?;
        if !self.quant.contains_key(layer) {
            let view = QuantizedLayerView::from_weights(layer, self.params[wi].tensor.data());
            self.params[wi].tensor.data_mut().copy_from_slice(&view.shadow);
            self.quant.insert(layer.to_string(), view);
        }
        Ok(&self.quant[layer])
    }

    pub fn quantized_view(&self, layer: &str) -> Option<&QuantizedLayerView> {
        self.quant.get(layer)
    }

    pub fn quantized_layers(&self) -> Vec<String> {
        self.quant.keys().cloned().collect()
    }

    /// XORs bit `bit` of quantized weight `index` and installs the new value.
    pub fn flip_bit(&mut self, layer: &str, index: usize, bit: u8) -> Result<()> {
        let wi = self.weight_index(layer)?;
        let view = self
            .quant
            .get_mut(layer)
            .ok_or_else(|| CfdrError::NotQuantized(layer.to_string()))?;
        let value = view.flip_bit(index, bit)?;
        self.params[wi].tensor.data_mut()[index] = value;
        Ok(())
    }

    /// Drops every quantized view, leaving the current float weights in place.
    pub fn dequantize_all(&mut self) -> Vec<String> {
        let layers = self.quantized_layers();
        self.quant.clear();
        layers
    }

    /// Forgets the quantized view of one layer, keeping its float weights.
    pub fn drop_view(&mut self, layer: &str) -> bool {
        self.quant.remove(layer).is_some()
    }

    /// Name of the FC classifier layer.
    pub fn classifier_layer(&self) -> &str {
        &self.classifier.name
    }

    pub(crate) fn insert_view(&mut self, view: QuantizedLayerView) {
        self.quant.insert(view.layer_name.clone(), view);
    }
}
