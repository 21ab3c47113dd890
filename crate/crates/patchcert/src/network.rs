//! Sequential networks of affine / convolution / ReLU / flatten layers.

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// A trainable tensor together with its gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Affine { weight: Parameter, bias: Parameter },
    Conv2d { kernel: Parameter, bias: Parameter, stride: usize },
    Relu,
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Affine { .. } => "affine",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }
}

/// Ordered layers plus the input/label geometry they were built for.
#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    labels: usize,
}

/// Computes the shape a single layer produces from `shape` (batch excluded).
fn layer_output_shape(layer: &Layer, shape: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Affine { weight, .. } => {
            let ws = weight.value.shape();
            if shape.len() != 1 || shape[0] != ws[1] {
                return Err(Error::Dimension {
                    op: "affine layer input",
                    lhs: shape.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            Ok(vec![ws[0]])
        }
        Layer::Conv2d { kernel, stride, .. } => {
            let ks = kernel.value.shape();
            if shape.len() != 3 || shape[0] != ks[1] {
                return Err(Error::Dimension {
                    op: "conv layer input",
                    lhs: shape.to_vec(),
                    rhs: ks.to_vec(),
                });
            }
            let (oh, ow) = ops::conv_out_dims(shape[1], shape[2], ks[2], ks[3], *stride)?;
            Ok(vec![ks[0], oh, ow])
        }
        Layer::Relu => Ok(shape.to_vec()),
        Layer::Flatten => Ok(vec![shape.iter().product()]),
    }
}

impl Network {
    /// Validates that consecutive layers compose and the final layer is an
    /// affine with `labels` outputs.
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, labels: usize) -> Result<Self> {
        if labels == 0 {
            return Err(Error::Config("label count must be positive".into()));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer_output_shape(layer, &shape)?;
        }
        match layers.last() {
            Some(Layer::Affine { .. }) if shape == [labels] => {}
            _ => {
                return Err(Error::Config(format!(
                    "network must end in an affine layer with {labels} outputs, got {shape:?}"
                )))
            }
        }
        Ok(Network {
            layers,
            input_shape,
            labels,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Affine { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::Conv2d { kernel, bias, .. } => {
                    out.push(kernel);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Affine { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::Conv2d { kernel, bias, .. } => {
                    out.push(kernel);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    /// Plain batched forward pass (no gradients): `[n, ...] -> [n, labels]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Affine { weight, bias } => {
                    ops::affine(&cur, &weight.value, Some(&bias.value))?
                }
                Layer::Conv2d { kernel, bias, stride } => {
                    ops::conv2d(&cur, &kernel.value, Some(&bias.value), *stride)?
                }
                Layer::Relu => ops::relu(&cur),
                Layer::Flatten => {
                    let n = cur.shape()[0];
                    let rest: usize = cur.shape()[1..].iter().product();
                    cur.reshape(&[n, rest])?
                }
            };
        }
        Ok(cur)
    }

    /// Predicted labels for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        let labels = self.labels;
        Ok(logits
            .data()
            .chunks(labels)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }

    /// Pushes all parameters onto a tape as leaves.
    pub fn stage(&self, tape: &mut Tape, requires_grad: bool) -> StagedNetwork {
        let mut staged = Vec::new();
        for layer in &self.layers {
            staged.push(match layer {
                Layer::Affine { weight, bias } => StagedLayer::Affine {
                    w: tape.leaf(weight.value.clone(), requires_grad),
                    b: tape.leaf(bias.value.clone(), requires_grad),
                },
                Layer::Conv2d { kernel, bias, stride } => StagedLayer::Conv2d {
                    k: tape.leaf(kernel.value.clone(), requires_grad),
                    b: tape.leaf(bias.value.clone(), requires_grad),
                    stride: *stride,
                },
                Layer::Relu => StagedLayer::Relu,
                Layer::Flatten => StagedLayer::Flatten,
            });
        }
        StagedNetwork { layers: staged }
    }

    /// Copies gradients accumulated on the tape back into `Parameter::grad`
    /// (parameters off the loss path get zero gradients).
    pub fn absorb_grads(&mut self, tape: &Tape, staged: &StagedNetwork) {
        let mut vars = Vec::new();
        for layer in &staged.layers {
            match layer {
                StagedLayer::Affine { w, b } => {
                    vars.push(*w);
                    vars.push(*b);
                }
                StagedLayer::Conv2d { k, b, .. } => {
                    vars.push(*k);
                    vars.push(*b);
                }
                _ => {}
            }
        }
        for (param, var) in self.parameters_mut().into_iter().zip(vars) {
            param.grad = match tape.grad(var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(param.value.shape()),
            };
        }
    }
}

/// Tape handles for a network's parameters.
pub struct StagedNetwork {
    pub layers: Vec<StagedLayer>,
}

pub enum StagedLayer {
    Affine { w: Var, b: Var },
    Conv2d { k: Var, b: Var, stride: usize },
    Relu,
    Flatten,
}

impl StagedNetwork {
    /// Point forward pass on the tape: `x` is `[n, ...]`, returns logits var.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut cur = x;
        for layer in &self.layers {
            cur = match layer {
                StagedLayer::Affine { w, b } => tape.affine(cur, *w, Some(*b))?,
                StagedLayer::Conv2d { k, b, stride } => tape.conv2d(cur, *k, Some(*b), *stride)?,
                StagedLayer::Relu => tape.relu(cur),
                StagedLayer::Flatten => {
                    let s = tape.value(cur).shape().to_vec();
                    let rest: usize = s[1..].iter().product();
                    tape.reshape(cur, &[s[0], rest])?
                }
            };
        }
        Ok(cur)
    }
}

// ---------------------------------------------------------------------------
// Architecture registry

fn affine_layer<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Layer {
    Layer::Affine {
        weight: Parameter::new(Tensor::kaiming_uniform(&[out_dim, in_dim], in_dim, rng)),
        bias: Parameter::new(Tensor::zeros(&[out_dim])),
    }
}

fn conv_layer<R: Rng>(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Layer {
    let fan_in = c_in * k * k;
    Layer::Conv2d {
        kernel: Parameter::new(Tensor::kaiming_uniform(&[c_out, c_in, k, k], fan_in, rng)),
        bias: Parameter::new(Tensor::zeros(&[c_out])),
        stride,
    }
}

/// Builds a registered architecture for the given input geometry.
///
/// Names: `mlp255`, `conv-small`, `conv-4layer`, `conv-5wide`, and
/// `conv-sparse-first-C` for first-layer kernel size C in {3, 11, 13}
/// (`conv-sparse-first(C)` is accepted too).
pub fn build_architecture<R: Rng>(
    name: &str,
    channels: usize,
    height: usize,
    width: usize,
    labels: usize,
    rng: &mut R,
) -> Result<Network> {
    let input_shape = vec![channels, height, width];
    let flat = channels * height * width;
    let conv_stack = |specs: &[(usize, usize, usize)], fc: &[usize], rng: &mut R| -> Result<Network> {
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = (channels, height, width);
        for &(c_out, k, stride) in specs {
            layers.push(conv_layer(c, c_out, k, stride, rng));
            layers.push(Layer::Relu);
            let (oh, ow) = ops::conv_out_dims(h, w, k, k, stride)?;
            c = c_out;
            h = oh;
            w = ow;
        }
        layers.push(Layer::Flatten);
        let mut dim = c * h * w;
        for &n in fc {
            layers.push(affine_layer(dim, n, rng));
            layers.push(Layer::Relu);
            dim = n;
        }
        layers.push(affine_layer(dim, labels, rng));
        Network::new(layers, input_shape.clone(), labels)
    };

    let normalized = name
        .replace('(', "-")
        .replace(')', "")
        .to_ascii_lowercase();
    match normalized.as_str() {
        "mlp255" => Network::new(
            vec![
                Layer::Flatten,
                affine_layer(flat, 255, rng),
                Layer::Relu,
                affine_layer(255, labels, rng),
            ],
            input_shape,
            labels,
        ),
        "conv-small" => conv_stack(&[(4, 4, 2), (8, 4, 2)], &[256], rng),
        "conv-4layer" => conv_stack(
            &[(4, 3, 1), (4, 4, 2), (8, 3, 1), (8, 4, 2)],
            &[256, 256],
            rng,
        ),
        "conv-5wide" => conv_stack(
            &[(64, 3, 1), (64, 3, 1), (128, 3, 2), (128, 3, 1), (128, 3, 1)],
            &[512],
            rng,
        ),
        "conv-sparse-first-3" => conv_stack(&[(4, 3, 2), (8, 4, 2)], &[256], rng),
        "conv-sparse-first-11" => conv_stack(&[(4, 11, 2), (8, 4, 2)], &[256], rng),
        "conv-sparse-first-13" => conv_stack(&[(4, 13, 2), (8, 4, 2)], &[256], rng),
        other => Err(Error::Config(format!("unknown architecture '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registry_builds_and_validates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for name in [
            "mlp255",
            "conv-small",
            "conv-4layer",
            "conv-sparse-first-11",
        ] {
            let net = build_architecture(name, 1, 28, 28, 10, &mut rng).unwrap();
            let x = Tensor::zeros(&[2, 1, 28, 28]);
            let y = net.forward(&x).unwrap();
            assert_eq!(y.shape(), &[2, 10], "{name}");
        }
        assert!(build_architecture("nope", 1, 28, 28, 10, &mut rng).is_err());
    }

    #[test]
    fn paren_form_is_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_architecture("conv-sparse-first(11)", 1, 28, 28, 10, &mut rng).is_ok());
    }

    #[test]
    fn network_requires_final_affine_with_label_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = Network::new(
            vec![Layer::Flatten, affine_layer(4, 3, &mut rng), Layer::Relu],
            vec![1, 2, 2],
            3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = build_architecture("conv-small", 1, 12, 12, 10, &mut rng).unwrap();
        let x = Tensor::uniform(&[3, 1, 12, 12], 1.0, &mut rng);
        let plain = net.forward(&x).unwrap();
        let mut tape = Tape::new();
        let staged = net.stage(&mut tape, false);
        let xv = tape.constant(x);
        let logits = staged.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(logits).data(), plain.data());
    }
}
