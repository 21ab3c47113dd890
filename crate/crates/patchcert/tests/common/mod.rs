//! Independent f64 reference implementations used as test oracles.
//!
//! Everything here is written as plain loops against the math definitions,
//! deliberately sharing no code with the crate's f32 kernels. Finite
//! differences run on these f64 mirrors so truncation error stays far below
//! the tolerances being asserted.

#![allow(dead_code)]

use patchcert::network::{Layer, Network};
use patchcert::optim::Adam;
use patchcert::tape::Tape;
use patchcert::tensor::Tensor;
use patchcert::threat::PatchPlacement;

/// f64 mirror of a network's layers.
#[derive(Clone)]
pub enum RefLayer {
    Affine { w: Vec<Vec<f64>>, b: Vec<f64> },
    Conv2d { k: Vec<f64>, ks: [usize; 4], b: Vec<f64>, stride: usize },
    Relu,
    Flatten,
}

#[derive(Clone)]
pub struct RefNet {
    pub layers: Vec<RefLayer>,
    pub input_shape: Vec<usize>,
}

impl RefNet {
    pub fn from_network(net: &Network) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Affine { weight, bias } => {
                    let ws = weight.value.shape();
                    let (out, inp) = (ws[0], ws[1]);
                    let w = (0..out)
                        .map(|o| {
                            (0..inp)
                                .map(|i| f64::from(weight.value.data()[o * inp + i]))
                                .collect()
                        })
                        .collect();
                    RefLayer::Affine {
                        w,
                        b: bias.value.data().iter().map(|&v| f64::from(v)).collect(),
                    }
                }
                Layer::Conv2d { kernel, bias, stride } => {
                    let ks = kernel.value.shape();
                    RefLayer::Conv2d {
                        k: kernel.value.data().iter().map(|&v| f64::from(v)).collect(),
                        ks: [ks[0], ks[1], ks[2], ks[3]],
                        b: bias.value.data().iter().map(|&v| f64::from(v)).collect(),
                        stride: *stride,
                    }
                }
                Layer::Relu => RefLayer::Relu,
                Layer::Flatten => RefLayer::Flatten,
            })
            .collect();
        RefNet {
            layers,
            input_shape: net.input_shape().to_vec(),
        }
    }

    /// Flat list of mutable parameter coordinates, in the same order the
    /// network exposes its parameters (weight then bias per layer).
    pub fn param_coords(&mut self) -> Vec<*mut f64> {
        let mut out: Vec<*mut f64> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                RefLayer::Affine { w, b } => {
                    for row in w.iter_mut() {
                        for v in row.iter_mut() {
                            out.push(v as *mut f64);
                        }
                    }
                    for v in b.iter_mut() {
                        out.push(v as *mut f64);
                    }
                }
                RefLayer::Conv2d { k, b, .. } => {
                    for v in k.iter_mut() {
                        out.push(v as *mut f64);
                    }
                    for v in b.iter_mut() {
                        out.push(v as *mut f64);
                    }
                }
                _ => {}
            }
        }
        out
    }
}

/// Triple-loop affine: y = x W^T + b.
pub fn ref_affine(x: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            w.iter()
                .zip(b)
                .map(|(wrow, &bo)| {
                    let mut acc = bo;
                    for (xi, wi) in row.iter().zip(wrow) {
                        acc += xi * wi;
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Six-loop valid cross-correlation on one image, channel-planar flat data.
pub fn ref_conv2d(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    ks: [usize; 4],
    b: &[f64],
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let [c_out, _, kh, kw] = ks;
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut y = vec![0.0f64; c_out * oh * ow];
    for co in 0..c_out {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = b[co];
                for ci in 0..c_in {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let xv = x[ci * h * w + (oi * stride + ki) * w + (oj * stride + kj)];
                            let kv = kernel[((co * c_in + ci) * kh + ki) * kw + kj];
                            acc += xv * kv;
                        }
                    }
                }
                y[(co * oh + oi) * ow + oj] = acc;
            }
        }
    }
    (y, oh, ow)
}

/// Interval state during reference propagation (flat, with a logical shape).
#[derive(Clone)]
pub struct RefInterval {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub shape: Vec<usize>,
}

impl RefNet {
    /// Interval propagation through all but the last `skip_last` layers.
    pub fn propagate(&self, z0: &RefInterval, skip_last: usize) -> RefInterval {
        let mut z = z0.clone();
        let end = self.layers.len() - skip_last;
        for layer in &self.layers[..end] {
            z = match layer {
                RefLayer::Relu => RefInterval {
                    lo: z.lo.iter().map(|&v| v.max(0.0)).collect(),
                    hi: z.hi.iter().map(|&v| v.max(0.0)).collect(),
                    shape: z.shape.clone(),
                },
                RefLayer::Flatten => RefInterval {
                    lo: z.lo,
                    hi: z.hi,
                    shape: vec![z.shape.iter().product()],
                },
                RefLayer::Affine { w, b } => {
                    let n = z.lo.len();
                    let mut lo = Vec::with_capacity(w.len());
                    let mut hi = Vec::with_capacity(w.len());
                    for (wrow, &bo) in w.iter().zip(b) {
                        let mut mu = bo;
                        let mut r = 0.0;
                        for i in 0..n {
                            let c = 0.5 * (z.lo[i] + z.hi[i]);
                            let rad = 0.5 * (z.hi[i] - z.lo[i]);
                            mu += wrow[i] * c;
                            r += wrow[i].abs() * rad;
                        }
                        lo.push(mu - r);
                        hi.push(mu + r);
                    }
                    RefInterval {
                        shape: vec![lo.len()],
                        lo,
                        hi,
                    }
                }
                RefLayer::Conv2d { k, ks, b, stride } => {
                    let (c_in, h, w) = (z.shape[0], z.shape[1], z.shape[2]);
                    let center: Vec<f64> =
                        z.lo.iter().zip(&z.hi).map(|(&l, &u)| 0.5 * (l + u)).collect();
                    let radius: Vec<f64> =
                        z.lo.iter().zip(&z.hi).map(|(&l, &u)| 0.5 * (u - l)).collect();
                    let (mu, oh, ow) = ref_conv2d(&center, c_in, h, w, k, *ks, b, *stride);
                    let abs_k: Vec<f64> = k.iter().map(|v| v.abs()).collect();
                    let zero_b = vec![0.0; ks[0]];
                    let (r, _, _) = ref_conv2d(&radius, c_in, h, w, &abs_k, *ks, &zero_b, *stride);
                    RefInterval {
                        lo: mu.iter().zip(&r).map(|(m, rr)| m - rr).collect(),
                        hi: mu.iter().zip(&r).map(|(m, rr)| m + rr).collect(),
                        shape: vec![ks[0], oh, ow],
                    }
                }
            };
        }
        z
    }

    /// Point forward pass on a flat image.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let z = RefInterval {
            lo: x.to_vec(),
            hi: x.to_vec(),
            shape: self.input_shape.clone(),
        };
        self.propagate(&z, 0).lo
    }

    /// Merged margin lower bounds from the penultimate interval.
    pub fn merged_margins(&self, z_pen: &RefInterval, y_true: usize) -> Vec<f64> {
        let Some(RefLayer::Affine { w, b }) = self.layers.last() else {
            panic!("reference net must end in an affine layer");
        };
        let labels = w.len();
        (0..labels)
            .map(|y| {
                let mut mu = b[y_true] - b[y];
                let mut r = 0.0;
                for i in 0..z_pen.lo.len() {
                    let m = w[y_true][i] - w[y][i];
                    let c = 0.5 * (z_pen.lo[i] + z_pen.hi[i]);
                    let rad = 0.5 * (z_pen.hi[i] - z_pen.lo[i]);
                    mu += m * c;
                    r += m.abs() * rad;
                }
                mu - r
            })
            .collect()
    }
}

/// Patch input box for a flat image: masked cells interpolate toward the
/// full [0, 1] range by eps.
pub fn ref_patch_interval(
    image: &[f64],
    cells: &[usize],
    eps: f64,
    shape: &[usize],
) -> RefInterval {
    let mut lo = image.to_vec();
    let mut hi = image.to_vec();
    for &j in cells {
        lo[j] = (1.0 - eps) * image[j];
        hi[j] = (1.0 - eps) * image[j] + eps;
    }
    RefInterval {
        lo,
        hi,
        shape: shape.to_vec(),
    }
}

/// Mean cross-entropy of the negated worst-case margins over a batch:
/// the full certificate loss pipeline in f64.
pub fn ref_certificate_loss_patch(
    net: &RefNet,
    images: &[Vec<f64>],
    targets: &[usize],
    selections: &[Vec<Vec<usize>>], // per image, per placement: flat cells
    eps: f64,
) -> f64 {
    let mut total = 0.0;
    for ((image, &t), cells_list) in images.iter().zip(targets).zip(selections) {
        let labels = match net.layers.last() {
            Some(RefLayer::Affine { w, .. }) => w.len(),
            _ => unreachable!(),
        };
        let mut worst = vec![f64::INFINITY; labels];
        for cells in cells_list {
            let z0 = ref_patch_interval(image, cells, eps, &net.input_shape);
            let z_pen = net.propagate(&z0, 1);
            let m = net.merged_margins(&z_pen, t);
            for (wv, mv) in worst.iter_mut().zip(m) {
                if mv < *wv {
                    *wv = mv;
                }
            }
        }
        total += ref_cross_entropy_of_negated(&worst, t);
    }
    total / images.len() as f64
}

/// Sparse-k certificate loss in f64 (single-channel pixel grouping is the
/// identity; multi-channel aggregates |W| per pixel).
pub fn ref_certificate_loss_sparse(
    net: &RefNet,
    images: &[Vec<f64>],
    targets: &[usize],
    k: usize,
    channels: usize,
) -> f64 {
    let (w1, b1) = match &net.layers[1] {
        RefLayer::Affine { w, b } => (w, b),
        _ => panic!("sparse reference expects flatten-then-affine"),
    };
    let mut total = 0.0;
    for (image, &t) in images.iter().zip(targets) {
        let d = image.len();
        let pixels = d / channels;
        let mut lo = Vec::with_capacity(w1.len());
        let mut hi = Vec::with_capacity(w1.len());
        for (wrow, &bo) in w1.iter().zip(b1) {
            let mut center = bo;
            for i in 0..d {
                center += wrow[i] * image[i];
            }
            let mut agg: Vec<f64> = (0..pixels)
                .map(|p| (0..channels).map(|c| wrow[c * pixels + p].abs()).sum())
                .collect();
            agg.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let half: f64 = agg[..k].iter().sum();
            lo.push(center - half);
            hi.push(center + half);
        }
        let z1 = RefInterval {
            shape: vec![lo.len()],
            lo,
            hi,
        };
        // propagate the tail (skipping flatten + first affine + drop last)
        let tail = RefNet {
            layers: net.layers[2..].to_vec(),
            input_shape: vec![z1.lo.len()],
        };
        let z_pen = tail.propagate(&z1, 1);
        let full = RefNet {
            layers: net.layers.clone(),
            input_shape: net.input_shape.clone(),
        };
        let m = full.merged_margins(&z_pen, t);
        total += ref_cross_entropy_of_negated(&m, t);
    }
    total / images.len() as f64
}

pub fn ref_cross_entropy_of_negated(margins: &[f64], target: usize) -> f64 {
    let logits: Vec<f64> = margins.iter().map(|&m| -m).collect();
    let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&v| (v - peak).exp()).sum();
    z.ln() - (logits[target] - peak)
}

/// Central finite differences of `f` over every parameter coordinate of a
/// reference net. `h` is the step in parameter space.
pub fn fd_gradients(net: &RefNet, h: f64, mut f: impl FnMut(&RefNet) -> f64) -> Vec<f64> {
    let mut work = net.clone();
    let coords = work.param_coords();
    let mut grads = Vec::with_capacity(coords.len());
    for &c in &coords {
        unsafe {
            let orig = *c;
            *c = orig + h;
            let up = f(&work);
            *c = orig - h;
            let down = f(&work);
            *c = orig;
            grads.push((up - down) / (2.0 * h));
        }
    }
    grads
}

/// Gradient comparison: `|a - b| <= tol * max(|a|, |b|, floor)`.
pub fn close_rel(a: f64, b: f64, tol: f64, floor: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(floor)
}

/// Pushes every ReLU pre-activation of `net` on `inputs` at least `margin`
/// away from zero by shifting biases, so finite differences never cross a
/// kink. Per feature, the shift is found by scanning for a value that clears
/// the whole band at once (a uniform shift can otherwise walk other units
/// into the band).
pub fn nudge_away_from_kinks(net: &mut Network, inputs: &Tensor, margin: f32) {
    'outer: for _ in 0..16 {
        let mut cur = inputs.clone();
        let n_layers = net.layers().len();
        for li in 0..n_layers {
            if matches!(net.layers()[li], Layer::Relu) {
                // `cur` holds the pre-activation entering this relu
                if let Some(features) = bias_len_before_relu(net, li) {
                    let per = cur.len() / cur.shape()[0];
                    let span = per / features;
                    let mut per_feature: Vec<Vec<f32>> = vec![Vec::new(); features];
                    for (i, &v) in cur.data().iter().enumerate() {
                        per_feature[(i % per) / span].push(v);
                    }
                    let mut shift = vec![0.0f32; features];
                    let mut any = false;
                    for (f, pre) in per_feature.iter().enumerate() {
                        if pre.iter().any(|&v| v.abs() < margin) {
                            shift[f] = clearing_shift(pre, margin);
                            any = true;
                        }
                    }
                    if any {
                        apply_bias_shift(net, li, &shift);
                        continue 'outer; // recompute from the start
                    }
                }
            }
            cur = forward_one(&net.layers()[li], &cur);
        }
        return; // clean pass
    }
}

/// Smallest-magnitude shift `s` such that every `p + s` is at least `margin`
/// from zero.
fn clearing_shift(pre: &[f32], margin: f32) -> f32 {
    let step = 2.5 * margin;
    for k in 1..400 {
        for sign in [1.0f32, -1.0] {
            let s = sign * step * k as f32;
            if pre.iter().all(|&p| (p + s).abs() >= margin) {
                return s;
            }
        }
    }
    // dense pre-activation spectrum; fall back to a large positive shift
    pre.iter().cloned().fold(0.0, f32::max) + 2.0 * margin
}

fn forward_one(layer: &Layer, x: &Tensor) -> Tensor {
    use patchcert::ops;
    match layer {
        Layer::Affine { weight, bias } => ops::affine(x, &weight.value, Some(&bias.value)).unwrap(),
        Layer::Conv2d { kernel, bias, stride } => {
            ops::conv2d(x, &kernel.value, Some(&bias.value), *stride).unwrap()
        }
        Layer::Relu => ops::relu(x),
        Layer::Flatten => {
            let n = x.shape()[0];
            let rest: usize = x.shape()[1..].iter().product();
            x.reshape(&[n, rest]).unwrap()
        }
    }
}

fn bias_len_before_relu(net: &Network, relu_idx: usize) -> Option<usize> {
    if relu_idx == 0 {
        return None;
    }
    match &net.layers()[relu_idx - 1] {
        Layer::Affine { bias, .. } | Layer::Conv2d { bias, .. } => Some(bias.value.len()),
        _ => None,
    }
}

fn apply_bias_shift(net: &mut Network, relu_idx: usize, shift: &[f32]) {
    // parameters_mut is ordered weight, bias per linear layer; find the bias
    // belonging to the layer right before this relu
    let mut linear_seen = 0;
    let mut target_linear = None;
    for (i, layer) in net.layers().iter().enumerate() {
        if matches!(layer, Layer::Affine { .. } | Layer::Conv2d { .. }) {
            if i + 1 == relu_idx {
                target_linear = Some(linear_seen);
            }
            linear_seen += 1;
        }
    }
    let Some(t) = target_linear else { return };
    let mut linear = 0;
    for param in net.parameters_mut() {
        // biases are rank-1; weights rank-2 or rank-4
        if param.value.shape().len() == 1 {
            if linear == t {
                for (v, &s) in param.value.data_mut().iter_mut().zip(shift) {
                    *v += s;
                }
                return;
            }
            linear += 1;
        }
    }
}

/// A small deterministic two-class dataset: class 0 is bright in the top
/// half, class 1 in the bottom half, plus noise. Learnable by tiny nets.
pub fn synthetic_dataset(
    n: usize,
    channels: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> (Tensor, Vec<usize>) {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let per = channels * h * w;
    let mut data = vec![0.0f32; n * per];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        labels.push(label);
        for c in 0..channels {
            for r in 0..h {
                for col in 0..w {
                    let bright = if label == 0 { r < h / 2 } else { r >= h / 2 };
                    let base: f32 = if bright { 0.8 } else { 0.15 };
                    let noise: f32 = rng.random_range(-0.1..0.1);
                    data[i * per + c * h * w + r * w + col] = (base + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    (
        Tensor::from_vec(vec![n, channels, h, w], data).unwrap(),
        labels,
    )
}

/// Flat cell indices of a placement, matching the crate's layout.
pub fn placement_cells(p: &PatchPlacement, channels: usize, h: usize, w: usize) -> Vec<usize> {
    p.flat_indices(channels, h, w)
}

/// Plain (non-certificate) training: cross-entropy on point logits.
pub fn train_plain(
    net: &mut Network,
    images: &Tensor,
    labels: &[usize],
    epochs: usize,
    lr: f32,
    seed: u64,
) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let n = images.shape()[0];
    let per: usize = images.shape()[1..].iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(64) {
            let mut data = Vec::with_capacity(batch.len() * per);
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
                targets.push(labels[i]);
            }
            let mut shape = vec![batch.len()];
            shape.extend_from_slice(&images.shape()[1..]);
            let mut tape = Tape::new();
            let staged = net.stage(&mut tape, true);
            let x = tape.constant(Tensor::from_vec(shape, data).unwrap());
            let logits = staged.forward(&mut tape, x).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &targets).unwrap();
            tape.backward(loss).unwrap();
            net.absorb_grads(&tape, &staged);
            opt.step(&mut net.parameters_mut(), lr).unwrap();
        }
    }
}

