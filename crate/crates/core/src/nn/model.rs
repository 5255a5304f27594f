use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Graph, Tensor, Var};

/// What the head predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
}

/// A network split as `head ∘ features`.
///
/// `features` produces the representation whose equivariance is measured;
/// `head` maps it to logits, `(N, K)` for classification or `(N, K, H, W)`
/// for dense prediction.
pub trait Network: Sync {
    fn features(&self, g: &mut Graph, x: Var) -> Result<Var>;
    fn head(&self, g: &mut Graph, h: Var) -> Result<Var>;
    fn num_classes(&self) -> usize;

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.features(g, x)?;
        self.head(g, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    Relu,
    GlobalAvgPool,
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
        relu: bool,
    },
}

impl Layer {
    fn conv(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        Layer::Conv {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: kernel / 2,
            relu,
        }
    }

    fn param_shapes(&self) -> Option<(&str, Vec<usize>, usize)> {
        match self {
            Layer::Conv {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                name,
                vec![*out_channels, *in_channels, *kernel, *kernel],
                *out_channels,
            )),
            Layer::Linear {
                name,
                in_features,
                out_features,
                ..
            } => Some((name, vec![*out_features, *in_features], *out_features)),
            Layer::GlobalAvgPool | Layer::Relu => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    /// `toy_cls` or `toy_seg`.
    pub arch: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    /// Index of the last layer of the feature extractor.
    pub feature_layer: usize,
}

impl ModelDescriptor {
    /// Four same-resolution 3×3 conv layers followed by a 1×1 conv head.
    pub fn toy_seg(width: usize, num_classes: usize) -> Self {
        Self::toy_seg_with_kernel(width, num_classes, 3)
    }

    /// `toy_seg` with a square odd `kernel` in the encoder (same padding).
    pub fn toy_seg_with_kernel(width: usize, num_classes: usize, kernel: usize) -> Self {
        Self {
            arch: "toy_seg".into(),
            in_channels: 3,
            num_classes,
            layers: vec![
                Layer::conv("enc1", 3, width, kernel, 1, true),
                Layer::conv("enc2", width, width, kernel, 1, true),
                Layer::conv("enc3", width, width, kernel, 1, true),
                Layer::conv("enc4", width, width, kernel, 1, false),
                Layer::Relu,
                Layer::conv("head", width, num_classes, 1, 1, false),
            ],
            feature_layer: 3,
        }
    }

    /// Three conv layers, global average pooling and a linear classifier.
    /// Features are the last conv output, before pooling.
    pub fn toy_cls(width: usize, num_classes: usize) -> Self {
        Self {
            arch: "toy_cls".into(),
            in_channels: 3,
            num_classes,
            layers: vec![
                Layer::conv("conv1", 3, width, 3, 1, true),
                Layer::conv("conv2", width, 2 * width, 3, 2, true),
                Layer::conv("conv3", 2 * width, 2 * width, 3, 1, true),
                Layer::GlobalAvgPool,
                Layer::Linear {
                    name: "fc".into(),
                    in_features: 2 * width,
                    out_features: num_classes,
                    relu: false,
                },
            ],
            feature_layer: 2,
        }
    }

    pub fn task(&self) -> Result<Task> {
        match self.arch.as_str() {
            "toy_seg" => Ok(Task::Segmentation),
            "toy_cls" => Ok(Task::Classification),
            other => Err(Error::config(format!("unknown architecture tag `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let task = self.task()?;
        if self.feature_layer + 1 >= self.layers.len() {
            return Err(Error::config(format!(
                "feature_layer {} leaves no head in a {}-layer network",
                self.feature_layer,
                self.layers.len()
            )));
        }
        // Walk the layer list tracking (channels, spatial?) to check wiring.
        let mut channels = self.in_channels;
        let mut spatial = true;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    stride,
                    kernel,
                    ..
                } => {
                    if !spatial || *in_channels != channels {
                        return Err(Error::config(format!(
                            "layer {i}: expects {in_channels} spatial channels, gets {channels}"
                        )));
                    }
                    if !(*stride == 1 || *stride == 2) || *kernel == 0 {
                        return Err(Error::config(format!(
                            "layer {i}: unsupported stride/kernel"
                        )));
                    }
                    channels = *out_channels;
                }
                Layer::Relu => {}
                Layer::GlobalAvgPool => {
                    if !spatial {
                        return Err(Error::config(format!(
                            "layer {i}: pooling a non-spatial tensor"
                        )));
                    }
                    spatial = false;
                }
                Layer::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if spatial || *in_features != channels {
                        return Err(Error::config(format!(
                            "layer {i}: expects {in_features} features, gets {channels}"
                        )));
                    }
                    channels = *out_features;
                }
            }
            if i == self.feature_layer && !spatial {
                return Err(Error::config("feature layer must produce a spatial map"));
            }
        }
        if channels != self.num_classes {
            return Err(Error::config(format!(
                "head emits {channels} channels for {} classes",
                self.num_classes
            )));
        }
        if (task == Task::Segmentation) != spatial {
            return Err(Error::config(format!(
                "{} head has the wrong output rank",
                self.arch
            )));
        }
        Ok(())
    }
}

/// Parameters for one layer: weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    descriptor: ModelDescriptor,
    task: Task,
    params: Vec<Option<LayerParams>>,
}

/// He-initialized model. Parameters are rounded to `f32` so checkpoints
/// stored as `f32` reload bit-exactly.
pub fn build_model(descriptor: &ModelDescriptor, seed: u64) -> Result<Model> {
    descriptor.validate()?;
    let mut params = Vec::with_capacity(descriptor.layers.len());
    for (i, layer) in descriptor.layers.iter().enumerate() {
        params.push(layer.param_shapes().map(|(name, wshape, out)| {
            let fan_in: usize = wshape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = seed::child_rng(seed, &format!("init.{name}"), i as u64);
            let weight = Tensor::from_fn(&wshape, |_| {
                let z: f64 = rng.sample(StandardNormal);
                round_f32(z * std)
            });
            LayerParams {
                weight,
                bias: Tensor::zeros(&[out]),
            }
        }));
    }
    Ok(Model {
        descriptor: descriptor.clone(),
        task: descriptor.task()?,
        params,
    })
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Graph handles for every layer's parameters.
pub(crate) type BoundParams = Vec<Option<(Var, Var)>>;

impl Model {
    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn layer_params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub(crate) fn layer_params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    /// Named parameter arrays in layer order (`<layer>.weight`, `<layer>.bias`).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (layer, p) in self.descriptor.layers.iter().zip(&self.params) {
            if let (Some((name, _, _)), Some(p)) = (layer.param_shapes(), p) {
                out.push((format!("{name}.weight"), &p.weight));
                out.push((format!("{name}.bias"), &p.bias));
            }
        }
        out
    }

    pub fn from_named_params(
        descriptor: &ModelDescriptor,
        arrays: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        descriptor.validate()?;
        let mut map: std::collections::HashMap<String, Tensor> = arrays.into_iter().collect();
        let mut params = Vec::with_capacity(descriptor.layers.len());
        for layer in &descriptor.layers {
            params.push(match layer.param_shapes() {
                None => None,
                Some((name, wshape, out)) => {
                    let mut take = |suffix: &str, shape: &[usize]| -> Result<Tensor> {
                        let key = format!("{name}.{suffix}");
                        let t = map
                            .remove(&key)
                            .ok_or_else(|| Error::Checkpoint(format!("missing array `{key}`")))?;
                        if t.shape() != shape {
                            return Err(Error::Checkpoint(format!(
                                "`{key}` has shape {:?}, expected {shape:?}",
                                t.shape()
                            )));
                        }
                        Ok(t)
                    };
                    Some(LayerParams {
                        weight: take("weight", &wshape)?,
                        bias: take("bias", &[out])?,
                    })
                }
            });
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array `{extra}`")));
        }
        Ok(Self {
            descriptor: descriptor.clone(),
            task: descriptor.task()?,
            params,
        })
    }

    /// Record parameters on `g`, as trainable leaves or constants.
    pub(crate) fn bind(
        &self,
        g: &mut Graph,
        trainable: bool,
        layers: std::ops::Range<usize>,
    ) -> BoundParams {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let p = p.as_ref().filter(|_| layers.contains(&i))?;
                let (w, b) = (p.weight.clone(), p.bias.clone());
                Some(if trainable {
                    (g.param(w), g.param(b))
                } else {
                    (g.constant(w), g.constant(b))
                })
            })
            .collect()
    }

    pub(crate) fn run_layers(
        &self,
        g: &mut Graph,
        mut x: Var,
        layers: std::ops::Range<usize>,
        bound: &BoundParams,
    ) -> Result<Var> {
        for i in layers {
            x = match &self.descriptor.layers[i] {
                Layer::Conv {
                    stride,
                    padding,
                    relu,
                    ..
                } => {
                    let (w, b) = bound[i].expect("conv parameters bound");
                    let y = g.conv2d(x, w, Some(b), *stride, *padding)?;
                    if *relu {
                        g.relu(y)?
                    } else {
                        y
                    }
                }
                Layer::Relu => g.relu(x)?,
                Layer::GlobalAvgPool => {
                    let y = g.avg_pool_global(x)?;
                    let s = g.value(y).shape().to_vec();
                    g.reshape(y, &s[..2])?
                }
                Layer::Linear { relu, .. } => {
                    let (w, b) = bound[i].expect("linear parameters bound");
                    let y = g.linear(x, w, Some(b))?;
                    if *relu {
                        g.relu(y)?
                    } else {
                        y
                    }
                }
            };
        }
        Ok(x)
    }

    /// Full forward with trainable parameters; returns logits and the bound
    /// parameter handles.
    pub(crate) fn forward_trainable(&self, g: &mut Graph, x: Var) -> Result<(Var, BoundParams)> {
        let n = self.descriptor.layers.len();
        let bound = self.bind(g, true, 0..n);
        let y = self.run_layers(g, x, 0..n, &bound)?;
        Ok((y, bound))
    }
}

impl Network for Model {
    fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let range = 0..self.descriptor.feature_layer + 1;
        let bound = self.bind(g, false, range.clone());
        self.run_layers(g, x, range, &bound)
    }

    fn head(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let range = self.descriptor.feature_layer + 1..self.descriptor.layers.len();
        let bound = self.bind(g, false, range.clone());
        self.run_layers(g, h, range, &bound)
    }

    fn num_classes(&self) -> usize {
        self.descriptor.num_classes
    }
}

/// Logits for a batch, no gradients.
pub fn forward(net: &dyn Network, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = net.forward(&mut g, xv)?;
    Ok(g.value(y).clone())
}

/// `(features, logits)` with `logits = head(features)`.
pub fn split_forward(net: &dyn Network, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let h = net.features(&mut g, xv)?;
    let y = net.head(&mut g, h)?;
    Ok((g.value(h).clone(), g.value(y).clone()))
}

/// Argmax labels, lower class index on ties.
pub fn predict(net: &dyn Network, x: &Tensor) -> Result<Vec<usize>> {
    Ok(forward(net, x)?.argmax_channel())
}

/// Mean cross-entropy of the network's prediction on `x` against `y`
/// (one label per image for classification, per pixel for segmentation).
pub fn task_loss(net: &dyn Network, g: &mut Graph, x: Var, y: &[usize]) -> Result<Var> {
    let logits = net.forward(g, x)?;
    g.cross_entropy(logits, y)
}
