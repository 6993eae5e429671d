//! The attack target: a small convolutional K-class classifier.
//!
//! Layers are named so that intermediate activations can be addressed (the
//! ILA losses read the output of one named layer).

mod file;
mod train;

pub use file::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{accuracy, train, TrainConfig, TrainReport};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Conv2dParams, Tape, Tensor, Var};

/// One labelled image, `(C, H, W)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    AvgPool { size: usize },
    Flatten,
    Dense { inputs: usize, outputs: usize },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv { in_channels, out_channels, kernel, stride: 1, pad: 0 }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels]))
            }
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            _ => None,
        }
    }

    /// Output shape for a given input shape, or a description of the mismatch.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match (*self, input) {
            (LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad }, &[c, h, w]) => {
                if c != in_channels {
                    return Err(format!("conv expects {in_channels} channels, got {c}"));
                }
                if stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(format!("conv kernel {kernel} stride {stride} does not fit {h}x{w}"));
                }
                Ok(vec![out_channels, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1])
            }
            (LayerSpec::Relu, s) => Ok(s.to_vec()),
            (LayerSpec::AvgPool { size }, &[c, h, w]) if size >= 1 && size <= h && size <= w => {
                Ok(vec![c, h / size, w / size])
            }
            (LayerSpec::Flatten, s) => Ok(vec![s.iter().product()]),
            (LayerSpec::Dense { inputs, outputs }, &[n]) if n == inputs => Ok(vec![outputs]),
            (spec, s) => Err(format!("{spec:?} cannot take input of shape {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Classifier parameters. Immutable once trained; share freely across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    classes: usize,
    layers: Vec<Layer>,
}

/// conv(3->8, 3x3) -> relu -> avgpool 2 -> conv(8->16, 3x3) -> relu -> avgpool 2 -> flatten -> dense(K)
pub fn default_architecture(input_shape: [usize; 3], classes: usize) -> Vec<(String, LayerSpec)> {
    let [c, h, w] = input_shape;
    let (h2, w2) = (((h - 2) / 2 - 2) / 2, ((w - 2) / 2 - 2) / 2);
    vec![
        ("conv1".into(), LayerSpec::conv(c, 8, 3)),
        ("relu1".into(), LayerSpec::Relu),
        ("pool1".into(), LayerSpec::AvgPool { size: 2 }),
        ("conv2".into(), LayerSpec::conv(8, 16, 3)),
        ("relu2".into(), LayerSpec::Relu),
        ("pool2".into(), LayerSpec::AvgPool { size: 2 }),
        ("flatten".into(), LayerSpec::Flatten),
        ("dense".into(), LayerSpec::Dense { inputs: 16 * h2 * w2, outputs: classes }),
    ]
}

/// Intermediate layer read by the ILA losses when none is configured.
pub const DEFAULT_ILA_LAYER: &str = "relu2";

/// Parameter handles of a model recorded on a particular tape.
pub struct Bound {
    params: Vec<Option<(Var, Var)>>,
}

impl Bound {
    /// `(weight, bias)` vars in layer order, skipping parameterless layers.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var, Var)> + '_ {
        self.params.iter().enumerate().filter_map(|(i, p)| p.map(|(w, b)| (i, w, b)))
    }
}

impl Model {
    /// Validate the layer stack and allocate zero parameters.
    pub fn zeros(input_shape: [usize; 3], layers: Vec<(String, LayerSpec)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut shape = input_shape.to_vec();
        let mut built = Vec::with_capacity(layers.len());
        for (name, spec) in layers {
            if !seen.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate layer name `{name}`")));
            }
            shape = spec.output_shape(&shape).map_err(|detail| Error::Config(format!("layer `{name}`: {detail}")))?;
            let (weight, bias) = match spec.param_shapes() {
                Some((w, b)) => (Some(Tensor::zeros(&w)), Some(Tensor::zeros(&b))),
                None => (None, None),
            };
            built.push(Layer { name, spec, weight, bias });
        }
        let [classes] = shape[..] else {
            return Err(Error::Config(format!("final layer must output a logit vector, got {shape:?}")));
        };
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        Ok(Self { input_shape, classes, layers: built })
    }

    /// Uniform fan-in initialisation, deterministic in `seed`.
    pub fn init(input_shape: [usize; 3], layers: Vec<(String, LayerSpec)>, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(input_shape, layers)?;
        let mut rng = rng::stream(seed, &[0x1417]);
        for layer in &mut model.layers {
            let fan_in = match layer.spec {
                LayerSpec::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
                LayerSpec::Dense { inputs, .. } => inputs,
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            if let Some(w) = layer.weight.as_mut() {
                w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            }
        }
        Ok(model)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer { name: name.to_string(), valid: self.layer_names().join(", ") })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter())).map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter())).all(Tensor::all_finite)
    }

    /// Record the parameters on `tape`, as gradient-tracked leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let params = self
            .layers
            .iter()
            .map(|l| match (&l.weight, &l.bias) {
                (Some(w), Some(b)) if trainable => Some((tape.param(w.clone()), tape.param(b.clone()))),
                (Some(w), Some(b)) => Some((tape.constant(w.clone()), tape.constant(b.clone()))),
                _ => None,
            })
            .collect();
        Bound { params }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != self.input_shape {
            return Err(Error::shape(
                "classifier forward",
                format!("model expects {:?}, got {shape:?}", self.input_shape),
            ));
        }
        Ok(())
    }

    /// Forward pass on `tape`. When `capture` names a layer index, its output
    /// var is returned alongside the logits.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        capture: Option<usize>,
    ) -> Result<(Var, Option<Var>)> {
        self.check_input(tape.try_value(x)?.shape())?;
        let mut h = x;
        let mut captured = None;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer.spec {
                LayerSpec::Conv { stride, pad, .. } => {
                    let (w, b) = bound.params[i].expect("conv has params");
                    let y = tape.conv2d(h, w, Conv2dParams { stride, pad, groups: 1 })?;
                    tape.channel_bias(y, b)?
                }
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::AvgPool { size } => tape.avg_pool(h, size)?,
                LayerSpec::Flatten => {
                    let n = tape.value(h).numel();
                    tape.reshape(h, &[n])?
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let (w, b) = bound.params[i].expect("dense has params");
                    let col = tape.reshape(h, &[inputs, 1])?;
                    let y = tape.matmul(w, col)?;
                    let y = tape.reshape(y, &[outputs])?;
                    tape.add(y, b)?
                }
            };
            if capture == Some(i) {
                captured = Some(h);
            }
        }
        Ok((h, captured))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (logits, _) = self.forward_on(&mut tape, &bound, xv, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Logits plus the activation after layer `layer`, from one forward pass.
    pub fn forward_with_intermediate(&self, x: &Tensor, layer: &str) -> Result<(Tensor, Tensor)> {
        let idx = self.layer_index(layer)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (logits, feat) = self.forward_on(&mut tape, &bound, xv, Some(idx))?;
        let feat = feat.expect("captured layer");
        Ok((tape.value(logits).clone(), tape.value(feat).clone()))
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.forward(x)?.argmax())
    }
}

/// `-log softmax(logits)[y]`, recorded on the tape.
pub fn cross_entropy(tape: &mut Tape, logits: Var, y: usize) -> Result<Var> {
    let k = tape.try_value(logits)?.numel();
    if y >= k {
        return Err(Error::invalid("cross_entropy", format!("label {y} out of range for {k} classes")));
    }
    let lsm = tape.log_softmax(logits)?;
    let picked = tape.select(lsm, y)?;
    tape.neg(picked)
}

pub fn cross_entropy_value(logits: &Tensor, y: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = cross_entropy(&mut tape, l, y)?;
    Ok(tape.value(ce).item())
}

/// Arithmetic mean of the per-model cross-entropy losses at input `x`.
pub fn ensemble_loss(tape: &mut Tape, models: &[Model], x: Var, y: usize) -> Result<Var> {
    let Some(first) = models.first() else {
        return Err(Error::invalid("ensemble_loss", "empty model list"));
    };
    if models.iter().any(|m| m.input_shape != first.input_shape || m.classes != first.classes) {
        return Err(Error::invalid("ensemble_loss", "models disagree on input shape or class count"));
    }
    let mut total: Option<Var> = None;
    for model in models {
        let bound = model.bind(tape, false);
        let (logits, _) = model.forward_on(tape, &bound, x, None)?;
        let ce = cross_entropy(tape, logits, y)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.expect("non-empty");
    if models.len() == 1 {
        Ok(total)
    } else {
        tape.mul_scalar(total, 1.0 / models.len() as f64)
    }
}
