//! Backbone → head (LCA or global average pool) → linear classifier.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lca::{concept_count, glorot_bound, uniform_tensor, LcaConfig, LcaHead};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    /// Two conv3×3 → ReLU → maxpool2 stages on RGB images.
    TinyCnn,
    /// Precomputed feature maps are fed straight to the head.
    ExternalFeatures,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::TinyCnn => "tiny_cnn",
            BackboneKind::ExternalFeatures => "external_features",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tiny_cnn" => Ok(BackboneKind::TinyCnn),
            "external_features" => Ok(BackboneKind::ExternalFeatures),
            other => Err(format!("expected tiny_cnn or external_features, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Per-stage widths for `tiny_cnn`; the single feature channel count for
    /// `external_features`.
    pub channels: Vec<usize>,
    /// Spatial size of what the model is fed: images for `tiny_cnn`, feature
    /// maps for `external_features`.
    pub input_size: (usize, usize),
}

impl BackboneConfig {
    pub fn tiny_cnn(c1: usize, c2: usize, height: usize, width: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::TinyCnn,
            channels: vec![c1, c2],
            input_size: (height, width),
        }
    }

    pub fn external(channels: usize, height: usize, width: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::ExternalFeatures,
            channels: vec![channels],
            input_size: (height, width),
        }
    }

    /// Shape of one model input sample, `C×H×W`.
    pub fn input_shape(&self) -> [usize; 3] {
        let (h, w) = self.input_size;
        match self.kind {
            BackboneKind::TinyCnn => [3, h, w],
            BackboneKind::ExternalFeatures => [self.channels[0], h, w],
        }
    }

    /// Shape of the feature map handed to the head, `C×H×W`.
    pub fn feature_shape(&self) -> [usize; 3] {
        let (h, w) = self.input_size;
        match self.kind {
            // conv pad 1 keeps the size, each 2/2 maxpool floors it by half
            BackboneKind::TinyCnn => [self.channels[1], h / 2 / 2, w / 2 / 2],
            BackboneKind::ExternalFeatures => [self.channels[0], h, w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let want = match self.kind {
            BackboneKind::TinyCnn => 2,
            BackboneKind::ExternalFeatures => 1,
        };
        if self.channels.len() != want || self.channels.contains(&0) {
            return Err(Error::Config {
                key: "channels".into(),
                msg: format!("{} needs {want} positive channel counts, got {:?}", self.kind, self.channels),
            });
        }
        if h == 0 || w == 0 {
            return Err(Error::Config {
                key: "input_size".into(),
                msg: format!("must be positive, got {h}x{w}"),
            });
        }
        if self.kind == BackboneKind::TinyCnn && (h < 4 || w < 4) {
            return Err(Error::Config {
                key: "input_size".into(),
                msg: format!("tiny_cnn needs at least 4x4 inputs, got {h}x{w}"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Lca,
    Gap,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Lca => "lca",
            HeadKind::Gap => "gap",
        })
    }
}

impl FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lca" => Ok(HeadKind::Lca),
            "gap" => Ok(HeadKind::Gap),
            other => Err(format!("expected lca or gap, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    /// Only `embed_dim` and `include_one_by_k` are read; `in_channels` is
    /// always taken from the backbone.
    pub lca: LcaConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, head: HeadKind, num_classes: usize) -> Self {
        let c = backbone.feature_shape()[0];
        ModelConfig {
            backbone,
            head,
            lca: LcaConfig::new(c),
            num_classes,
        }
    }

    /// Width of the vector the classifier sees.
    pub fn head_dim(&self) -> usize {
        match self.head {
            HeadKind::Lca => self.lca.embed_dim,
            HeadKind::Gap => self.backbone.feature_shape()[0],
        }
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
enum Head {
    Lca(LcaHead),
    Gap,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    convs: Vec<Conv>,
    head: Head,
    classifier_weight: ParamId,
    classifier_bias: ParamId,
}

fn register_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut Rng,
) -> Result<Conv> {
    // He-uniform for layers feeding a ReLU
    let bound = (6.0 / (cin * 9) as f64).sqrt();
    let weight = store.register(
        &format!("backbone.{name}.weight"),
        uniform_tensor(&[cout, cin, 3, 3], bound, rng),
    )?;
    let bias = store.register(&format!("backbone.{name}.bias"), Tensor::zeros(&[cout]))?;
    Ok(Conv { weight, bias })
}

/// Builds a freshly initialized model. Initialization draws from `rng` in
/// parameter registration order.
pub fn build_model<T: Scalar>(config: &ModelConfig, rng: &mut Rng) -> Result<Model<T>> {
    config.backbone.validate()?;
    if config.num_classes < 2 {
        return Err(Error::Config {
            key: "num_classes".into(),
            msg: format!("need at least 2 classes, got {}", config.num_classes),
        });
    }
    let mut config = config.clone();
    let [feat_c, feat_h, feat_w] = config.backbone.feature_shape();
    config.lca.in_channels = feat_c;
    let mut params = ParamStore::new();

    let mut convs = Vec::new();
    if config.backbone.kind == BackboneKind::TinyCnn {
        let mut cin = 3;
        for (i, &cout) in config.backbone.channels.iter().enumerate() {
            convs.push(register_conv(&mut params, &format!("conv{}", i + 1), cin, cout, rng)?);
            cin = cout;
        }
    }

    let head = match config.head {
        HeadKind::Lca => {
            concept_count(feat_h, feat_w, &config.lca).map_err(|_| Error::Config {
                key: "head".into(),
                msg: format!("LCA head needs a feature map with local concepts, backbone yields {feat_h}x{feat_w}"),
            })?;
            Head::Lca(LcaHead::register(&mut params, "lca", config.lca.clone(), rng)?)
        }
        HeadKind::Gap => Head::Gap,
    };

    let d = config.head_dim();
    let k = config.num_classes;
    let classifier_weight = params.register(
        "classifier.weight",
        uniform_tensor(&[k, d], glorot_bound(d, k), rng),
    )?;
    let classifier_bias = params.register("classifier.bias", Tensor::zeros(&[k]))?;

    Ok(Model {
        config,
        params,
        convs,
        head,
        classifier_weight,
        classifier_bias,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let want = self.config.backbone.input_shape();
        let s = x.shape();
        if s.len() != 4 || s[1..] != want {
            return Err(Error::dim(
                "forward",
                format!("model expects B×{}×{}×{}, got {:?}", want[0], want[1], want[2], s),
            ));
        }
        Ok(s[0])
    }

    /// Backbone output, `B×C×H'×W'`.
    pub fn features(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        self.check_input(tape.value(input))?;
        let mut x = input;
        for conv in &self.convs {
            let w = tape.param(&self.params, conv.weight);
            let b = tape.param(&self.params, conv.bias);
            x = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.relu(x)?;
            x = tape.maxpool2d(x, 2, 2)?;
        }
        Ok(x)
    }

    /// Head output, `B×D`.
    pub fn embed(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let batch = tape.value(input).shape()[0];
        let feats = self.features(tape, input)?;
        match &self.head {
            Head::Lca(head) => head.forward(tape, &self.params, feats),
            Head::Gap => {
                let [c, h, w] = self.config.backbone.feature_shape();
                let pooled = tape.avgpool2d(feats, h, w, 1)?;
                tape.reshape(pooled, &[batch, c])
            }
        }
    }

    /// Class logits, `B×K`.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let z = self.embed(tape, input)?;
        let w = tape.param(&self.params, self.classifier_weight);
        let b = tape.param(&self.params, self.classifier_bias);
        tape.linear(z, w, b)
    }

    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// Arg-max class per row; ties resolve to the lowest index.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(input)?))
    }

    pub fn classifier_ids(&self) -> (ParamId, ParamId) {
        (self.classifier_weight, self.classifier_bias)
    }

    pub fn lca_params(&self) -> Option<crate::lca::LcaParams<T>> {
        match &self.head {
            Head::Lca(h) => Some(h.params(&self.params)),
            Head::Gap => None,
        }
    }

    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.params
            .set_trainable_where(|name| name.starts_with("backbone."), !frozen);
    }

    /// The same model with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            convs: self.convs.clone(),
            head: self.head.clone(),
            classifier_weight: self.classifier_weight,
            classifier_bias: self.classifier_bias,
        }
    }
}

pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
