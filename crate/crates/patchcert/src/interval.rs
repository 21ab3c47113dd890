//! Interval bound propagation and certified margin lower bounds.
//!
//! Bounds flow through affine and convolution layers in center/half-width
//! form (`mu' = W mu + b`, `r' = |W| r`) and through monotone activations by
//! applying the activation to both ends. Margins against the true label fold
//! the final affine layer with the label-difference rows before bounding,
//! which is never looser than bounding the logits first.

use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::ops;
use crate::tensor::Tensor;

/// Paired elementwise lower/upper bounds. A leading batch extent is allowed;
/// all operations treat it opaquely.
#[derive(Clone, Debug)]
pub struct IntervalTensor {
    lower: Tensor,
    upper: Tensor,
}

impl IntervalTensor {
    /// Validates `lower <= upper` elementwise (finiteness comes with the
    /// tensors themselves).
    pub fn new(lower: Tensor, upper: Tensor) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::Dimension {
                op: "interval bounds",
                lhs: lower.shape().to_vec(),
                rhs: upper.shape().to_vec(),
            });
        }
        if let Some(i) = lower
            .data()
            .iter()
            .zip(upper.data())
            .position(|(&l, &u)| !(l <= u))
        {
            return Err(Error::Invariant(format!(
                "lower {} > upper {} at flat index {}",
                lower.data()[i],
                upper.data()[i],
                i
            )));
        }
        Ok(IntervalTensor { lower, upper })
    }

    /// Degenerate interval around a point.
    pub fn point(x: &Tensor) -> Self {
        IntervalTensor {
            lower: x.clone(),
            upper: x.clone(),
        }
    }

    /// Internal constructor for propagation outputs whose ordering holds by
    /// construction (center - radius <= center + radius with radius >= 0).
    fn from_parts(lower: Tensor, upper: Tensor) -> Self {
        debug_assert_eq!(lower.shape(), upper.shape());
        IntervalTensor { lower, upper }
    }

    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor {
        &self.upper
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    pub fn center(&self) -> Tensor {
        self.lower.zip(&self.upper, |l, u| 0.5 * (l + u)).expect("same shape")
    }

    pub fn radius(&self) -> Tensor {
        self.lower.zip(&self.upper, |l, u| 0.5 * (u - l)).expect("same shape")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Ok(IntervalTensor {
            lower: self.lower.reshape(shape)?,
            upper: self.upper.reshape(shape)?,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.lower.all_finite() && self.upper.all_finite()
    }

    /// True if `x` lies inside the interval everywhere, with `slack`.
    pub fn contains(&self, x: &Tensor, slack: f32) -> bool {
        x.shape() == self.shape()
            && x.data()
                .iter()
                .zip(self.lower.data())
                .zip(self.upper.data())
                .all(|((&v, &l), &u)| v >= l - slack && v <= u + slack)
    }
}

/// Interval image of an affine layer, exact per coordinate.
pub fn propagate_affine(z: &IntervalTensor, w: &Tensor, b: &Tensor) -> Result<IntervalTensor> {
    let mu = ops::affine(&z.center(), w, Some(b))?;
    let r = ops::affine(&z.radius(), &ops::abs(w), None)?;
    Ok(IntervalTensor::from_parts(
        ops::sub(&mu, &r)?,
        ops::add(&mu, &r)?,
    ))
}

/// Interval image of a valid convolution (the affine rule applied to the
/// convolution's linear map, without materializing it).
pub fn propagate_conv2d(
    z: &IntervalTensor,
    kernel: &Tensor,
    b: &Tensor,
    stride: usize,
) -> Result<IntervalTensor> {
    let mu = ops::conv2d(&z.center(), kernel, Some(b), stride)?;
    let r = ops::conv2d(&z.radius(), &ops::abs(kernel), None, stride)?;
    Ok(IntervalTensor::from_parts(
        ops::sub(&mu, &r)?,
        ops::add(&mu, &r)?,
    ))
}

/// Interval image of an elementwise nondecreasing activation.
pub fn propagate_monotone(z: &IntervalTensor, activation: impl Fn(&Tensor) -> Tensor) -> IntervalTensor {
    IntervalTensor::from_parts(activation(&z.lower), activation(&z.upper))
}

/// ReLU is the activation used by every architecture here.
pub fn propagate_relu(z: &IntervalTensor) -> IntervalTensor {
    propagate_monotone(z, ops::relu)
}

fn propagate_layer(z: &IntervalTensor, layer: &Layer) -> Result<IntervalTensor> {
    match layer {
        Layer::Affine { weight, bias } => propagate_affine(z, &weight.value, &bias.value),
        Layer::Conv2d { kernel, bias, stride } => {
            propagate_conv2d(z, &kernel.value, &bias.value, *stride)
        }
        Layer::Relu => Ok(propagate_relu(z)),
        Layer::Flatten => {
            let n = z.shape()[0];
            let rest: usize = z.shape()[1..].iter().product();
            z.reshape(&[n, rest])
        }
    }
}

/// Propagates a (batched) input box through a slice of layers.
/// `index_base` offsets layer indices in numeric error messages.
pub fn propagate_layers(
    z0: &IntervalTensor,
    layers: &[Layer],
    index_base: usize,
) -> Result<IntervalTensor> {
    let mut z = z0.clone();
    for (i, layer) in layers.iter().enumerate() {
        z = propagate_layer(&z, layer)?;
        if !z.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite interval bound after layer {} ({})",
                index_base + i,
                layer.kind()
            )));
        }
    }
    Ok(z)
}

/// Propagates through the whole network, yielding output-layer bounds.
pub fn propagate_network(z0: &IntervalTensor, net: &Network) -> Result<IntervalTensor> {
    propagate_layers(z0, net.layers(), 0)
}

/// Bounds entering the final affine layer (the margins fold that layer).
pub fn penultimate_interval(z0: &IntervalTensor, net: &Network) -> Result<IntervalTensor> {
    let n = net.layers().len();
    propagate_layers(z0, &net.layers()[..n - 1], 0)
}

/// The weight/bias of the final affine layer.
pub fn final_affine(net: &Network) -> (&Tensor, &Tensor) {
    match net.layers().last() {
        Some(Layer::Affine { weight, bias }) => (&weight.value, &bias.value),
        _ => unreachable!("Network::new guarantees a final affine layer"),
    }
}

/// Per-label certified margin lower bounds with `values[y_true] == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginVector {
    values: Vec<f32>,
    y_true: usize,
}

impl MarginVector {
    pub fn new(values: Vec<f32>, y_true: usize) -> Result<Self> {
        if y_true >= values.len() {
            return Err(Error::Index {
                what: "margin true label",
                index: y_true,
                len: values.len(),
            });
        }
        if values[y_true] != 0.0 {
            return Err(Error::Invariant(format!(
                "margin at the true label must be exactly 0, got {}",
                values[y_true]
            )));
        }
        Ok(MarginVector { values, y_true })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn y_true(&self) -> usize {
        self.y_true
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

/// True iff every margin is nonnegative (zero slack: ties certify).
pub fn is_certified(m: &MarginVector) -> bool {
    m.values.iter().all(|&v| v >= 0.0)
}

/// Merged weight rows `W[y_true] - W[y]` and biases `b[y_true] - b[y]`.
pub fn merged_last_layer(w: &Tensor, b: &Tensor, y_true: usize) -> Result<(Tensor, Tensor)> {
    let (labels, n) = (w.shape()[0], w.shape()[1]);
    if y_true >= labels {
        return Err(Error::Index {
            what: "true label",
            index: y_true,
            len: labels,
        });
    }
    let wd = w.data();
    let bd = b.data();
    let true_row = &wd[y_true * n..(y_true + 1) * n];
    let mut m = Vec::with_capacity(labels * n);
    for y in 0..labels {
        let row = &wd[y * n..(y + 1) * n];
        m.extend(true_row.iter().zip(row).map(|(&t, &v)| t - v));
    }
    let c: Vec<f32> = bd.iter().map(|&v| bd[y_true] - v).collect();
    Ok((Tensor::from_vec(vec![labels, n], m)?, Tensor::from_vec(vec![labels], c)?))
}

/// Margin lower bounds for a batch of penultimate intervals: `[n, pen] -> [n, labels]`,
/// all rows sharing one true label.
pub fn margin_lower_bounds_batch(
    z_pen: &IntervalTensor,
    w: &Tensor,
    b: &Tensor,
    y_true: usize,
) -> Result<Tensor> {
    let (m, c) = merged_last_layer(w, b, y_true)?;
    let mu_part = ops::affine(&z_pen.center(), &m, Some(&c))?;
    let r_part = ops::affine(&z_pen.radius(), &ops::abs(&m), None)?;
    ops::sub(&mu_part, &r_part)
}

/// Margin lower bounds for one interval entering the final affine layer.
pub fn margin_lower_bounds(
    z_pen: &IntervalTensor,
    w: &Tensor,
    b: &Tensor,
    y_true: usize,
) -> Result<MarginVector> {
    let pen: usize = z_pen.shape().iter().product();
    let z = z_pen.reshape(&[1, pen])?;
    let out = margin_lower_bounds_batch(&z, w, b, y_true)?;
    MarginVector::new(out.data().to_vec(), y_true)
}

/// The unmerged Eq.-style bound `lower_t - upper_y` per label, for
/// comparison against the merged bound.
pub fn margin_lower_bounds_unmerged(
    z_out: &IntervalTensor,
    y_true: usize,
) -> Result<Vec<f32>> {
    let labels = *z_out.shape().last().unwrap();
    if y_true >= labels {
        return Err(Error::Index {
            what: "true label",
            index: y_true,
            len: labels,
        });
    }
    let lt = z_out.lower().data()[y_true];
    Ok(z_out.upper().data().iter().map(|&u| lt - u).collect())
}
