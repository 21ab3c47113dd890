//! Certification by exhaustive placement sweep or sparse first-layer bounds.

use crate::error::{Error, Result};
use crate::interval::{
    self, final_affine, margin_lower_bounds_batch, IntervalTensor, MarginVector,
};
use crate::network::{Layer, Network};
use crate::ops::{self, PatchFamily};
use crate::tensor::Tensor;
use crate::threat::{
    enumerate_placements, patch_input_interval, sparse_first_layer_bounds, PatchPlacement,
    ThreatKind, ThreatModel,
};
use rayon::prelude::*;
use std::time::Instant;

/// Placements evaluated per batch during a sweep; bounds memory, not results.
pub const DEFAULT_SWEEP_CHUNK: usize = 128;

#[derive(Clone, Debug)]
pub struct CertOptions {
    pub chunk: usize,
    /// Stop the sweep once certification is already impossible. The recorded
    /// margins are then flagged partial: they are not global minima. Keep
    /// disabled when full margin maps are needed (guided-training targets).
    pub early_exit: bool,
}

impl Default for CertOptions {
    fn default() -> Self {
        CertOptions {
            chunk: DEFAULT_SWEEP_CHUNK,
            early_exit: false,
        }
    }
}

/// Outcome of certifying one image against one threat.
#[derive(Clone, Debug)]
pub struct CertResult {
    pub certified: bool,
    pub worst_margins: MarginVector,
    /// Per label, the placement attaining its worst margin (none for the
    /// true label, whose margin is identically zero, and none under sparse
    /// threats).
    pub worst_placement: Vec<Option<PatchPlacement>>,
    pub elapsed: f64,
    /// True when an early exit cut the sweep short of the full placement set.
    pub partial: bool,
}

/// True when the network starts `[Flatten, Affine, ...]`, enabling the
/// sparse-correction first layer for patch families.
fn mlp_fast_path(net: &Network) -> Option<(&Tensor, &Tensor)> {
    match net.layers() {
        [Layer::Flatten, Layer::Affine { weight, bias }, ..] => {
            Some((&weight.value, &bias.value))
        }
        _ => None,
    }
}

fn patch_family_for(
    image_flat: &Tensor,
    placements: &[PatchPlacement],
    threat: &ThreatModel,
    eps: f32,
    channels: usize,
    h: usize,
    w: usize,
) -> PatchFamily {
    PatchFamily {
        images: image_flat.clone(),
        rows: placements
            .iter()
            .map(|p| (0usize, p.flat_indices(channels, h, w)))
            .collect(),
        eps,
        mid: threat.mid(),
        half: threat.half(),
        channel_size: h * w,
    }
}

/// Interval bounds right after the first linear layer for every placement of
/// one image, plus the number of layers consumed. MLP-shaped networks use
/// the O(mask)-per-placement first layer; anything else takes the dense
/// route. Used by the bound-pooling sweep, which pools at this point.
pub fn first_linear_intervals(
    net: &Network,
    image: &Tensor,
    placements: &[PatchPlacement],
    threat: &ThreatModel,
    eps: f32,
) -> Result<(IntervalTensor, usize)> {
    let s = image.shape();
    let (channels, h, w) = (s[0], s[1], s[2]);
    if let Some((w1, b1)) = mlp_fast_path(net) {
        let flat = image.reshape(&[1, channels * h * w])?;
        let family = patch_family_for(&flat, placements, threat, eps, channels, h, w);
        let mu = ops::patch_affine_center(w1, Some(b1), &family)?;
        let r = ops::patch_affine_radius(w1, &family)?;
        return Ok((
            IntervalTensor::new(ops::sub(&mu, &r)?, ops::add(&mu, &r)?)?,
            2,
        ));
    }
    let first_linear = net
        .layers()
        .iter()
        .position(|l| matches!(l, Layer::Affine { .. } | Layer::Conv2d { .. }))
        .ok_or_else(|| Error::Config("network has no linear layer".into()))?;
    let per = channels * h * w;
    let mut lower = Vec::with_capacity(placements.len() * per);
    let mut upper = Vec::with_capacity(placements.len() * per);
    for p in placements {
        let z = patch_input_interval(image, p, &threat.range, eps)?;
        lower.extend_from_slice(z.lower().data());
        upper.extend_from_slice(z.upper().data());
    }
    let z0 = IntervalTensor::new(
        Tensor::from_vec(vec![placements.len(), channels, h, w], lower)?,
        Tensor::from_vec(vec![placements.len(), channels, h, w], upper)?,
    )?;
    Ok((
        interval::propagate_layers(&z0, &net.layers()[..=first_linear], 0)?,
        first_linear + 1,
    ))
}

/// Margin lower bounds for each placement of one image: `[placements, labels]`.
///
/// Walks the network once per call with the placements stacked as a batch;
/// MLP-shaped networks get the O(mask)-per-placement first layer.
pub fn placement_margins(
    net: &Network,
    image: &Tensor,
    y_true: usize,
    placements: &[PatchPlacement],
    threat: &ThreatModel,
    eps: f32,
) -> Result<Tensor> {
    let s = image.shape();
    let (channels, h, w) = (s[0], s[1], s[2]);
    let (last_w, last_b) = final_affine(net);
    let n_layers = net.layers().len();

    if let Some((w1, b1)) = mlp_fast_path(net) {
        let flat = image.reshape(&[1, channels * h * w])?;
        let family = patch_family_for(&flat, placements, threat, eps, channels, h, w);
        if n_layers == 2 {
            // the first affine is the output layer: bound the merged rows
            // directly, which is the merging trick applied at the input
            let (m, c) = interval::merged_last_layer(last_w, last_b, y_true)?;
            let mu = ops::patch_affine_center(&m, Some(&c), &family)?;
            let r = ops::patch_affine_radius(&m, &family)?;
            return ops::sub(&mu, &r);
        }
        let mu = ops::patch_affine_center(w1, Some(b1), &family)?;
        let r = ops::patch_affine_radius(w1, &family)?;
        let z1 = IntervalTensor::new(ops::sub(&mu, &r)?, ops::add(&mu, &r)?)?;
        let z_pen = interval::propagate_layers(&z1, &net.layers()[2..n_layers - 1], 2)?;
        return margin_lower_bounds_batch(&z_pen, last_w, last_b, y_true);
    }

    // generic path: stack the dense input boxes
    let per = channels * h * w;
    let mut lower = Vec::with_capacity(placements.len() * per);
    let mut upper = Vec::with_capacity(placements.len() * per);
    for p in placements {
        let z = patch_input_interval(image, p, &threat.range, eps)?;
        lower.extend_from_slice(z.lower().data());
        upper.extend_from_slice(z.upper().data());
    }
    let z0 = IntervalTensor::new(
        Tensor::from_vec(vec![placements.len(), channels, h, w], lower)?,
        Tensor::from_vec(vec![placements.len(), channels, h, w], upper)?,
    )?;
    let z_pen = interval::propagate_layers(&z0, &net.layers()[..n_layers - 1], 0)?;
    margin_lower_bounds_batch(&z_pen, last_w, last_b, y_true)
}

/// Certifies one image against a patch threat by sweeping all placements and
/// taking the elementwise worst margin per label.
pub fn certify_patch(
    net: &Network,
    image: &Tensor,
    y_true: usize,
    threat: &ThreatModel,
    opts: &CertOptions,
) -> Result<CertResult> {
    let start = Instant::now();
    threat.validate()?;
    let mask = match &threat.kind {
        ThreatKind::Patch(mask) => mask,
        ThreatKind::Sparse { .. } => {
            return Err(Error::Config("certify_patch needs a patch threat".into()))
        }
    };
    if net.labels() < 2 {
        return Err(Error::Config(
            "certification needs at least two labels".into(),
        ));
    }
    let s = image.shape();
    let placements = enumerate_placements((s[1], s[2]), mask)?;
    let labels = net.labels();
    let mut worst = vec![f32::INFINITY; labels];
    let mut arg = vec![usize::MAX; labels];
    let mut partial = false;
    let mut seen = 0usize;

    'sweep: for chunk in placements.chunks(opts.chunk.max(1)) {
        let margins = placement_margins(net, image, y_true, chunk, threat, threat.eps_scale)?;
        for (p, row) in margins.data().chunks(labels).enumerate() {
            for (y, &m) in row.iter().enumerate() {
                if m < worst[y] {
                    worst[y] = m;
                    arg[y] = seen + p;
                }
            }
        }
        seen += chunk.len();
        if opts.early_exit && worst.iter().any(|&m| m < 0.0) {
            partial = seen < placements.len();
            break 'sweep;
        }
    }

    // the true label's margin is identically zero over every placement
    worst[y_true] = 0.0;
    let worst_placement = (0..labels)
        .map(|y| {
            if y == y_true || arg[y] == usize::MAX {
                None
            } else {
                Some(placements[arg[y]].clone())
            }
        })
        .collect();
    let worst_margins = MarginVector::new(worst, y_true)?;
    Ok(CertResult {
        certified: interval::is_certified(&worst_margins),
        worst_margins,
        worst_placement,
        elapsed: start.elapsed().as_secs_f64(),
        partial,
    })
}

/// Certifies one image against a sparse-k adversary. `k = 0` degenerates to
/// the clean forward pass (used by tests).
pub fn certify_sparse(
    net: &Network,
    image: &Tensor,
    y_true: usize,
    k: usize,
) -> Result<CertResult> {
    let start = Instant::now();
    let s = image.shape();
    let (channels, h, w) = (s[0], s[1], s[2]);
    let (last_w, last_b) = final_affine(net);
    let n_layers = net.layers().len();
    let labels = net.labels();

    let margins: Tensor = match net.layers() {
        [Layer::Flatten, Layer::Affine { .. }] => {
            // single affine layer: apply the sparse bound to the merged rows,
            // which is tighter than bounding logits first
            let (m, c) = interval::merged_last_layer(last_w, last_b, y_true)?;
            let flat = image.reshape(&[1, channels * h * w])?;
            let center = ops::affine(&flat, &m, Some(&c))?;
            let (half, _) = ops::topk_abs_row_sums(&m, k, channels)?;
            let data = center
                .data()
                .iter()
                .zip(half.data())
                .map(|(&v, &hw)| v - hw)
                .collect();
            Tensor::from_vec(vec![1, labels], data)?
        }
        [Layer::Flatten, Layer::Affine { weight, bias }, ..] => {
            let flat = image.reshape(&[channels * h * w])?;
            let z1 = sparse_first_layer_bounds(&flat, &weight.value, &bias.value, k, channels)?;
            let z_pen = interval::propagate_layers(&z1, &net.layers()[2..n_layers - 1], 2)?;
            margin_lower_bounds_batch(&z_pen, last_w, last_b, y_true)?
        }
        [Layer::Conv2d { kernel, bias, stride }, ..] => {
            // every valid-conv output unit sees the same kernel window, so the
            // per-unit top-k is one top-k over kernel cells per out channel,
            // saturated at the window's pixel count
            let ks = kernel.value.shape();
            let window = ks[2] * ks[3];
            let kmat = kernel.value.reshape(&[ks[0], ks[1] * window])?;
            let (half, _) = ops::topk_abs_row_sums(&kmat, k.min(window), ks[1])?;
            let batch = image.reshape(&[1, channels, h, w])?;
            let center = ops::conv2d(&batch, &kernel.value, Some(&bias.value), *stride)?;
            let cs = center.shape().to_vec();
            let mut lower = center.data().to_vec();
            let mut upper = center.data().to_vec();
            let ocells = cs[2] * cs[3];
            for (c, &hw) in half.data().iter().enumerate() {
                for v in &mut lower[c * ocells..(c + 1) * ocells] {
                    *v -= hw;
                }
                for v in &mut upper[c * ocells..(c + 1) * ocells] {
                    *v += hw;
                }
            }
            let z1 = IntervalTensor::new(
                Tensor::from_vec(cs.clone(), lower)?,
                Tensor::from_vec(cs, upper)?,
            )?;
            let z_pen = interval::propagate_layers(&z1, &net.layers()[1..n_layers - 1], 1)?;
            margin_lower_bounds_batch(&z_pen, last_w, last_b, y_true)?
        }
        _ => {
            return Err(Error::Config(
                "sparse certification needs an affine or convolutional first layer".into(),
            ))
        }
    };

    let worst_margins = MarginVector::new(margins.data().to_vec(), y_true)?;
    Ok(CertResult {
        certified: interval::is_certified(&worst_margins),
        worst_margins,
        worst_placement: vec![None; labels],
        elapsed: start.elapsed().as_secs_f64(),
        partial: false,
    })
}

/// Certifies an image under either threat kind.
pub fn certify(
    net: &Network,
    image: &Tensor,
    y_true: usize,
    threat: &ThreatModel,
    opts: &CertOptions,
) -> Result<CertResult> {
    match threat.kind {
        ThreatKind::Patch(_) => certify_patch(net, image, y_true, threat, opts),
        ThreatKind::Sparse { k } => certify_sparse(net, image, y_true, k),
    }
}

/// One line of the certification report.
#[derive(Clone, Debug)]
pub struct CertRecord {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub certified: bool,
    pub min_margin: f32,
    pub anchor: Option<(usize, usize)>,
    pub partial: bool,
}

#[derive(Clone, Debug)]
pub struct CertSummary {
    pub clean_accuracy: f64,
    pub certified_accuracy: f64,
    pub records: Vec<CertRecord>,
}

/// Fraction of images that are both correctly classified and certified.
/// Images run in parallel; records come back in dataset order.
pub fn certified_accuracy(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    threat: &ThreatModel,
    opts: &CertOptions,
) -> Result<CertSummary> {
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::Config(format!(
            "dataset with {n} images and {} labels",
            labels.len()
        )));
    }
    let per: usize = images.shape()[1..].iter().product();
    let shape = images.shape()[1..].to_vec();
    let predictions = net.predict(images)?;
    let records: Vec<CertRecord> = (0..n)
        .into_par_iter()
        .map(|i| {
            let image = Tensor::from_vec(
                shape.clone(),
                images.data()[i * per..(i + 1) * per].to_vec(),
            )
            .expect("image slice");
            let res = certify(net, &image, labels[i], threat, opts)?;
            let min_label = res
                .worst_margins
                .values()
                .iter()
                .enumerate()
                .filter(|&(y, _)| y != labels[i])
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(y, _)| y);
            Ok(CertRecord {
                index: i,
                label: labels[i],
                predicted: predictions[i],
                certified: res.certified,
                min_margin: res.worst_margins.min(),
                anchor: min_label
                    .and_then(|y| res.worst_placement[y].as_ref().map(|p| p.anchor)),
                partial: res.partial,
            })
        })
        .collect::<Result<_>>()?;

    let clean = records.iter().filter(|r| r.predicted == r.label).count();
    let both = records
        .iter()
        .filter(|r| r.predicted == r.label && r.certified)
        .count();
    Ok(CertSummary {
        clean_accuracy: clean as f64 / n as f64,
        certified_accuracy: both as f64 / n as f64,
        records,
    })
}
