//! Small CAM-style classifier: three 3x3 conv stages, a bias-free 1x1
//! classification conv producing per-class maps, and GAP logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Subtracted from every input pixel before the first conv.
pub const INPUT_MEAN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub num_classes: usize,
    /// Channels of the last backbone stage (D).
    pub feature_channels: usize,
    /// Total spatial downsampling; one of 1, 2 or 4.
    pub stride_total: usize,
    /// Output channels of the first two conv stages.
    pub widths: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            num_classes: 8,
            feature_channels: 32,
            stride_total: 4,
            widths: [16, 32],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride_total, 1 | 2 | 4) {
            return Err(Error::config(format!(
                "stride_total must be 1, 2 or 4, got {}",
                self.stride_total
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.stride_total) {
            return Err(Error::config(format!(
                "input_size {} must be a positive multiple of stride_total {}",
                self.input_size, self.stride_total
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.feature_channels == 0 || self.widths.contains(&0) {
            return Err(Error::config("channel widths must be positive"));
        }
        Ok(())
    }

    /// Side length of the feature and class maps.
    pub fn map_size(&self) -> usize {
        self.input_size / self.stride_total
    }

    fn pools(&self) -> usize {
        self.stride_total.trailing_zeros() as usize
    }

    fn layer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [w1, w2] = self.widths;
        let d = self.feature_channels;
        vec![
            ("conv1.weight", vec![w1, 3, 3, 3]),
            ("conv1.bias", vec![w1]),
            ("conv2.weight", vec![w2, w1, 3, 3]),
            ("conv2.bias", vec![w2]),
            ("conv3.weight", vec![d, w2, 3, 3]),
            ("conv3.bias", vec![d]),
            ("classifier.weight", vec![self.num_classes, d, 1, 1]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Trainable weights in a fixed layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<NamedTensor>,
}

/// Parameters registered as leaves of one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[N,D,H,W]`
    pub features: Var,
    /// `[N,Y,H,W]`
    pub class_maps: Var,
    /// `[N,Y]`
    pub logits: Var,
}

/// Detached forward results.
#[derive(Debug, Clone)]
pub struct Inference {
    pub features: Tensor,
    pub class_maps: Tensor,
    pub logits: Tensor,
}

/// He-style uniform init in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, zero biases.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .layer_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let mut t = Tensor::zeros(&shape);
            if shape.len() == 4 {
                let bound = (6.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt();
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-bound..bound));
            }
            NamedTensor {
                name: name.to_string(),
                tensor: t.with_grad(),
            }
        })
        .collect();
    Ok(ModelParams { tensors })
}

impl ModelParams {
    /// Rebuilds parameters from named tensors, checking them against `config`.
    pub fn from_named(config: &ModelConfig, tensors: Vec<NamedTensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.layer_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut out = Vec::with_capacity(tensors.len());
        for ((name, shape), mut nt) in expected.into_iter().zip(tensors) {
            if nt.name != name || nt.tensor.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    nt.name,
                    nt.tensor.shape()
                )));
            }
            if !nt.tensor.is_finite() {
                return Err(Error::Numeric(format!("parameter {name} is not finite")));
            }
            nt.tensor.set_requires_grad(true);
            out.push(nt);
        }
        Ok(ModelParams { tensors: out })
    }

    pub fn named(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|t| &mut t.tensor)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.tensor.is_finite())
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| g.leaf(&t.tensor)).collect(),
        }
    }

    /// Registers the weights as constants, for inference without gradients.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|t| g.constant(t.tensor.clone()))
                .collect(),
        }
    }

    /// Adds the gradients from `g` into each parameter's gradient slot.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundParams) -> Result<()> {
        for (nt, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            g.accumulate_into(v, &mut nt.tensor)?;
        }
        Ok(())
    }
}

impl BoundParams {
    /// Wraps nodes already in a graph, in `ModelParams::named` order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn forward(
    config: &ModelConfig,
    g: &mut Graph,
    params: &BoundParams,
    images: Var,
) -> Result<ForwardOutput> {
    let s = g.value(images).shape();
    if s.len() != 4 || s[1] != 3 || s[2] != config.input_size || s[3] != config.input_size {
        return Err(Error::input(format!(
            "expected images [N,3,{0},{0}], got {s:?}",
            config.input_size
        )));
    }
    let p = &params.vars;
    let pools = config.pools();
    // pixel values live in [0,1]; center them
    let shift = g.constant(Tensor::scalar(-INPUT_MEAN));
    let mut x = g.add(images, shift)?;
    for stage in 0..3 {
        let conv = g.conv2d(x, p[2 * stage], 1, 1)?;
        let biased = g.bias_add(conv, p[2 * stage + 1])?;
        x = g.relu(biased)?;
        if stage < pools {
            x = g.maxpool2(x)?;
        }
    }
    let features = x;
    let class_maps = g.conv2d(features, p[6], 1, 0)?;
    let logits = g.global_average_pool(class_maps)?;
    Ok(ForwardOutput {
        features,
        class_maps,
        logits,
    })
}

/// Forward pass without gradient bookkeeping.
pub fn infer(config: &ModelConfig, params: &ModelParams, images: &Tensor) -> Result<Inference> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let x = g.constant(images.clone());
    let out = forward(config, &mut g, &bound, x)?;
    Ok(Inference {
        features: g.value(out.features).clone(),
        class_maps: g.value(out.class_maps).clone(),
        logits: g.value(out.logits).clone(),
    })
}
