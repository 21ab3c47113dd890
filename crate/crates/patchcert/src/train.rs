//! Certificate training: cross-entropy on negated margin lower bounds, with
//! all-patch, random-patch, guided-patch and bound-pooling strategies plus
//! the epsilon warm-up schedule.
//!
//! The gradient of a worst-case margin flows only to the placement attaining
//! the minimum, so the expensive strategies run in two passes: a no-grad
//! sweep finds per-label argmin placements (ties to the lowest placement
//! index), then the differentiable pass recomputes just those placements.
//! The tape values equal the full-sweep minima exactly.

use crate::certify::{self, CertOptions};
use crate::config::{Strategy, TrainConfig};
use crate::error::{Error, Result};
use crate::interval::{IntervalTensor, MarginVector};
use crate::network::{Network, StagedLayer, StagedNetwork};
use crate::ops::{self, PatchFamily};
use crate::optim::Adam;
use crate::predictor::MarginPredictor;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::threat::{
    enumerate_placements, PatchPlacement, ThreatKind, ThreatModel,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Linear warm-up of the perturbation set: 0 at epoch 0, 1 from `warmup`
/// epochs on. `epoch` may be fractional (per-batch ramping).
pub fn epsilon_schedule(epoch: f64, warmup_epochs: usize) -> f32 {
    if warmup_epochs == 0 {
        return 1.0;
    }
    (epoch / warmup_epochs as f64).clamp(0.0, 1.0) as f32
}

/// Cross-entropy of the negated margin vector against the true label.
pub fn certificate_loss(margins: &MarginVector) -> f32 {
    let neg: Vec<f32> = margins.values().iter().map(|&v| -v).collect();
    let logits = Tensor::from_vec(vec![1, neg.len()], neg).expect("margin vector");
    let (loss, _) = ops::softmax_cross_entropy(&logits, &[margins.y_true()]).expect("valid label");
    loss
}

/// Worst-case margins over a placement set at perturbation scale `eps`
/// (elementwise minimum per label, computed in bounded chunks).
pub fn margins_all_patches(
    net: &Network,
    image: &Tensor,
    y_true: usize,
    placements: &[PatchPlacement],
    threat: &ThreatModel,
    eps: f32,
) -> Result<MarginVector> {
    if placements.is_empty() {
        return Err(Error::Config("margins over an empty placement set".into()));
    }
    let labels = net.labels();
    let mut worst = vec![f32::INFINITY; labels];
    for chunk in placements.chunks(certify::DEFAULT_SWEEP_CHUNK) {
        let margins = certify::placement_margins(net, image, y_true, chunk, threat, eps)?;
        for row in margins.data().chunks(labels) {
            for (w, &m) in worst.iter_mut().zip(row) {
                if m < *w {
                    *w = m;
                }
            }
        }
    }
    worst[y_true] = 0.0;
    MarginVector::new(worst, y_true)
}

/// Uniform sample of `count` placement indices without replacement.
/// Returns the (sorted) subset and whether `count` was clamped to the set.
pub fn sample_random_patches<R: Rng>(
    total: usize,
    count: usize,
    rng: &mut R,
) -> (Vec<usize>, bool) {
    if count >= total {
        return ((0..total).collect(), count > total);
    }
    let mut idx = rand::seq::index::sample(rng, total, count).into_vec();
    idx.sort_unstable();
    (idx, false)
}

/// Samples one anchor per label from the softmax of the negated predicted
/// margin grid (low predicted margin = dangerous = likely to be picked).
/// `temperature = 0` degenerates to argmin selection. Labels whose
/// predictions are not finite fall back to uniform sampling; the number of
/// such fallbacks is returned.
pub fn guided_select<R: Rng>(
    predicted: &Tensor, // [labels, gh, gw]
    temperature: f32,
    rng: &mut R,
) -> (Vec<(usize, usize)>, usize) {
    let s = predicted.shape();
    let (labels, gh, gw) = (s[0], s[1], s[2]);
    let cells = gh * gw;
    let mut anchors = Vec::with_capacity(labels);
    let mut fallbacks = 0;
    for y in 0..labels {
        let grid = &predicted.data()[y * cells..(y + 1) * cells];
        let finite = grid.iter().all(|v| v.is_finite());
        let pick = if !finite {
            fallbacks += 1;
            rng.random_range(0..cells)
        } else if temperature == 0.0 {
            grid.iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        } else {
            // softmax(-m / T) with max subtraction
            let hi = grid
                .iter()
                .fold(f32::NEG_INFINITY, |a, &v| a.max(-v / temperature));
            let weights: Vec<f32> = grid
                .iter()
                .map(|&v| (-v / temperature - hi).exp())
                .collect();
            let total: f32 = weights.iter().sum();
            let mut draw = rng.random_range(0.0..1.0f32) * total;
            let mut chosen = cells - 1;
            for (i, &w) in weights.iter().enumerate() {
                if draw < w {
                    chosen = i;
                    break;
                }
                draw -= w;
            }
            chosen
        };
        anchors.push((pick / gw, pick % gw));
    }
    (anchors, fallbacks)
}

/// Pools per-placement intervals into one interval per group: elementwise
/// minimum of lowers and maximum of uppers. Groups must partition the set.
pub fn pool_bounds(
    intervals: &[IntervalTensor],
    groups: &[Vec<usize>],
) -> Result<Vec<IntervalTensor>> {
    let n = intervals.len();
    let mut seen = vec![false; n];
    for g in groups {
        for &i in g {
            if i >= n || seen[i] {
                return Err(Error::Config(format!(
                    "groups must partition the placement set (index {i})"
                )));
            }
            seen[i] = true;
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::Config(
            "groups must cover every placement exactly once".into(),
        ));
    }
    groups
        .iter()
        .map(|g| {
            if g.is_empty() {
                return Err(Error::Config("empty pooling group".into()));
            }
            let mut lo = intervals[g[0]].lower().clone();
            let mut hi = intervals[g[0]].upper().clone();
            for &i in &g[1..] {
                lo = ops::min_pair(&lo, intervals[i].lower())?;
                hi = ops::max_pair(&hi, intervals[i].upper())?;
            }
            IntervalTensor::new(lo, hi)
        })
        .collect()
}

/// Tiles the anchor grid into adjacent `gh x gw` blocks (edge blocks may be
/// smaller); returns per-group placement indices in placement order.
pub fn adjacent_anchor_groups(
    grid: (usize, usize),
    group: (usize, usize),
) -> Result<Vec<Vec<usize>>> {
    let (rows, cols) = grid;
    let (gh, gw) = group;
    if gh == 0 || gw == 0 {
        return Err(Error::Config(
            "pooling group extents must be positive".into(),
        ));
    }
    let mut groups = Vec::new();
    for br in (0..rows).step_by(gh) {
        for bc in (0..cols).step_by(gw) {
            let mut g = Vec::new();
            for r in br..(br + gh).min(rows) {
                for c in bc..(bc + gw).min(cols) {
                    g.push(r * cols + c);
                }
            }
            groups.push(g);
        }
    }
    Ok(groups)
}

// ---------------------------------------------------------------------------
// Tape graph construction

struct IntervalVars {
    lo: Var,
    hi: Var,
}

/// Propagates interval vars through staged layers.
fn interval_through(
    tape: &mut Tape,
    layers: &[StagedLayer],
    iv: IntervalVars,
) -> Result<IntervalVars> {
    let mut iv = iv;
    for layer in layers {
        iv = match layer {
            StagedLayer::Relu => IntervalVars {
                lo: tape.relu(iv.lo),
                hi: tape.relu(iv.hi),
            },
            StagedLayer::Flatten => {
                let s = tape.value(iv.lo).shape().to_vec();
                let rest: usize = s[1..].iter().product();
                IntervalVars {
                    lo: tape.reshape(iv.lo, &[s[0], rest])?,
                    hi: tape.reshape(iv.hi, &[s[0], rest])?,
                }
            }
            StagedLayer::Affine { w, b } => {
                let sum = tape.add(iv.lo, iv.hi)?;
                let mu = tape.scale(sum, 0.5);
                let diff = tape.sub(iv.hi, iv.lo)?;
                let r = tape.scale(diff, 0.5);
                let absw = tape.abs(*w);
                let mu2 = tape.affine(mu, *w, Some(*b))?;
                let r2 = tape.affine(r, absw, None)?;
                IntervalVars {
                    lo: tape.sub(mu2, r2)?,
                    hi: tape.add(mu2, r2)?,
                }
            }
            StagedLayer::Conv2d { k, b, stride } => {
                let sum = tape.add(iv.lo, iv.hi)?;
                let mu = tape.scale(sum, 0.5);
                let diff = tape.sub(iv.hi, iv.lo)?;
                let r = tape.scale(diff, 0.5);
                let absk = tape.abs(*k);
                let mu2 = tape.conv2d(mu, *k, Some(*b), *stride)?;
                let r2 = tape.conv2d(r, absk, None, *stride)?;
                IntervalVars {
                    lo: tape.sub(mu2, r2)?,
                    hi: tape.add(mu2, r2)?,
                }
            }
        };
    }
    Ok(iv)
}

/// Merged margin rows for `iv_pen` (`[rows, pen]`) against the staged final
/// affine layer: `[rows, labels]`, differentiable through `|W_t - W_y|`.
fn merged_margins_on_tape(
    tape: &mut Tape,
    iv_pen: &IntervalVars,
    w_last: Var,
    b_last: Var,
    labels: usize,
    y_true: usize,
) -> Result<Var> {
    let wt = tape.gather_rows(w_last, vec![y_true; labels])?;
    let merged = tape.sub(wt, w_last)?;
    let abs_merged = tape.abs(merged);
    let b_col = tape.reshape(b_last, &[labels, 1])?;
    let bt = tape.gather_rows(b_col, vec![y_true; labels])?;
    let b_merged_col = tape.sub(bt, b_col)?;
    let b_merged = tape.reshape(b_merged_col, &[labels])?;

    let sum = tape.add(iv_pen.lo, iv_pen.hi)?;
    let mu = tape.scale(sum, 0.5);
    let diff = tape.sub(iv_pen.hi, iv_pen.lo)?;
    let r = tape.scale(diff, 0.5);
    let mu_part = tape.affine(mu, merged, Some(b_merged))?;
    let r_part = tape.affine(r, abs_merged, None)?;
    tape.sub(mu_part, r_part)
}

/// Per-image placement selections turned into patch-family rows.
struct BatchRows {
    /// (image index within batch, flat input cells) per row.
    rows: Vec<(usize, Vec<usize>)>,
    /// Row range of each image.
    spans: Vec<std::ops::Range<usize>>,
}

fn batch_rows(
    selected: &[Vec<&PatchPlacement>],
    channels: usize,
    h: usize,
    w: usize,
) -> BatchRows {
    let mut rows = Vec::new();
    let mut spans = Vec::with_capacity(selected.len());
    for (i, sel) in selected.iter().enumerate() {
        let start = rows.len();
        for p in sel {
            rows.push((i, p.flat_indices(channels, h, w)));
        }
        spans.push(start..rows.len());
    }
    BatchRows { rows, spans }
}

/// Differentiable per-image margins. Returns the stacked per-image minima
/// `[batch, labels]` and, per image, the label-group margin matrix it lives
/// in plus its row range there (used as guided-training targets).
#[allow(clippy::too_many_arguments)]
fn patch_margin_graph(
    tape: &mut Tape,
    staged: &StagedNetwork,
    flat_images: &Tensor, // [batch, d]
    batch_targets: &[usize],
    rows: BatchRows,
    threat: &ThreatModel,
    eps: f32,
    geometry: (usize, usize, usize),
    pool_members: Option<&[Vec<usize>]>, // per group: row ids to pool
) -> Result<(Var, Vec<(Var, std::ops::Range<usize>)>)> {
    let (channels, h, w) = geometry;
    let labels = match staged.layers.last() {
        Some(StagedLayer::Affine { w, .. }) => tape.value(*w).shape()[0],
        _ => unreachable!("networks end in an affine layer"),
    };
    let family = PatchFamily {
        images: flat_images.clone(),
        rows: rows.rows,
        eps,
        mid: threat.mid(),
        half: threat.half(),
        channel_size: h * w,
    };

    // first linear layer (the fast path needs a hidden layer after it)
    let (mut iv, consumed) = match staged.layers.as_slice() {
        [StagedLayer::Flatten, StagedLayer::Affine { w, b }, _, ..] => {
            let radius_family = family.clone();
            let mu = tape.patch_affine_center(*w, Some(*b), family)?;
            let r = tape.patch_affine_radius(*w, radius_family)?;
            (
                IntervalVars {
                    lo: tape.sub(mu, r)?,
                    hi: tape.add(mu, r)?,
                },
                2usize,
            )
        }
        _ => {
            // generic first layer: materialize the dense input boxes
            let n = family.rows.len();
            let d = channels * h * w;
            let mut lower = Vec::with_capacity(n * d);
            let mut upper = Vec::with_capacity(n * d);
            for (img, cells) in &family.rows {
                let image_row = &family.images.data()[img * d..(img + 1) * d];
                let mut lo = image_row.to_vec();
                let mut hi = image_row.to_vec();
                for &j in cells {
                    let shift = family.center_shift(image_row, j);
                    let rad = family.radius(j);
                    lo[j] = image_row[j] + shift - rad;
                    hi[j] = image_row[j] + shift + rad;
                }
                lower.extend_from_slice(&lo);
                upper.extend_from_slice(&hi);
            }
            let lo = tape.constant(Tensor::from_vec(vec![n, channels, h, w], lower)?);
            let hi = tape.constant(Tensor::from_vec(vec![n, channels, h, w], upper)?);
            let iv = interval_through(tape, &staged.layers[..1], IntervalVars { lo, hi })?;
            (iv, 1usize)
        }
    };

    // optional bound pooling right after the first linear layer
    let mut spans = rows.spans;
    if let Some(groups) = pool_members {
        // activations may be 4-d after a conv layer; pool in 2-d view
        let full_shape = tape.value(iv.lo).shape().to_vec();
        let feat: usize = full_shape[1..].iter().product();
        let lo2 = tape.reshape(iv.lo, &[full_shape[0], feat])?;
        let hi2 = tape.reshape(iv.hi, &[full_shape[0], feat])?;
        let mut lo_parts = Vec::with_capacity(groups.len());
        let mut hi_parts = Vec::with_capacity(groups.len());
        for g in groups {
            let mut lo = tape.gather_rows(lo2, vec![g[0]])?;
            let mut hi = tape.gather_rows(hi2, vec![g[0]])?;
            for &m in &g[1..] {
                let lo_m = tape.gather_rows(lo2, vec![m])?;
                let hi_m = tape.gather_rows(hi2, vec![m])?;
                lo = tape.min_pair(lo, lo_m)?;
                hi = tape.max_pair(hi, hi_m)?;
            }
            lo_parts.push(lo);
            hi_parts.push(hi);
        }
        let lo_stack = tape.stack_rows(lo_parts)?;
        let hi_stack = tape.stack_rows(hi_parts)?;
        let mut pooled_shape = vec![groups.len()];
        pooled_shape.extend_from_slice(&full_shape[1..]);
        iv = IntervalVars {
            lo: tape.reshape(lo_stack, &pooled_shape)?,
            hi: tape.reshape(hi_stack, &pooled_shape)?,
        };
        spans = pooled_spans_from_groups(groups, &spans);
    }

    let n_layers = staged.layers.len();
    let iv_pen = interval_through(tape, &staged.layers[consumed..n_layers - 1], iv)?;
    let (w_last, b_last) = match staged.layers.last() {
        Some(StagedLayer::Affine { w, b }) => (*w, *b),
        _ => unreachable!(),
    };

    // merged margins batched per distinct true label: one merged matrix per
    // label instead of per image keeps the tape small and the matmuls big
    let batch_len = batch_targets.len();
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); labels];
    for (i, &t) in batch_targets.iter().enumerate() {
        by_label[t].push(i);
    }
    let mut group_parts = Vec::new(); // per label group: minima [n_t, labels]
    let mut margin_of_image: Vec<(usize, usize)> = vec![(0, 0); batch_len]; // (part, row)
    let mut image_margins: Vec<Option<(Var, std::ops::Range<usize>)>> = vec![None; batch_len];
    for (t, members) in by_label.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut row_ids = Vec::new();
        let mut group_spans = Vec::with_capacity(members.len());
        for (gi, &i) in members.iter().enumerate() {
            let start = row_ids.len();
            row_ids.extend(spans[i].clone());
            group_spans.push(start..row_ids.len());
            margin_of_image[i] = (group_parts.len(), gi);
        }
        let lo_t = tape.gather_rows(iv_pen.lo, row_ids.clone())?;
        let hi_t = tape.gather_rows(iv_pen.hi, row_ids)?;
        let m = merged_margins_on_tape(
            tape,
            &IntervalVars { lo: lo_t, hi: hi_t },
            w_last,
            b_last,
            labels,
            t,
        )?;
        for (gi, &i) in members.iter().enumerate() {
            image_margins[i] = Some((m, group_spans[gi].clone()));
        }
        group_parts.push(tape.segment_min_rows(m, &group_spans)?);
    }
    // reassemble batch order with a permutation gather
    let stacked = tape.stack_rows(group_parts.clone())?;
    let mut offsets = Vec::with_capacity(group_parts.len());
    let mut acc = 0;
    for &p in &group_parts {
        offsets.push(acc);
        acc += tape.value(p).shape()[0];
    }
    let perm: Vec<usize> = (0..batch_len)
        .map(|i| {
            let (part, row) = margin_of_image[i];
            offsets[part] + row
        })
        .collect();
    let batch_margins = tape.gather_rows(stacked, perm)?;
    let per_image = image_margins
        .into_iter()
        .map(|m| m.expect("every image belongs to a label group"))
        .collect();
    Ok((batch_margins, per_image))
}

/// After pooling, each image's span becomes the contiguous run of groups
/// whose member rows live inside its original span.
fn pooled_spans_from_groups(
    groups: &[Vec<usize>],
    spans: &[std::ops::Range<usize>],
) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::with_capacity(spans.len());
    let mut g = 0usize;
    for span in spans {
        let start = g;
        while g < groups.len() && groups[g].first().is_some_and(|&r| span.contains(&r)) {
            g += 1;
        }
        out.push(start..g);
    }
    out
}

/// Differentiable margins for a sparse-k adversary: `[batch, labels]`.
fn sparse_margin_graph(
    tape: &mut Tape,
    staged: &StagedNetwork,
    flat_images: &Tensor,
    batch_targets: &[usize],
    k: usize,
    channels: usize,
) -> Result<Var> {
    let (w1, b1) = match staged.layers.as_slice() {
        [StagedLayer::Flatten, StagedLayer::Affine { w, b }, _, ..] => (*w, *b),
        _ => {
            return Err(Error::Config(
                "sparse training needs a flatten-then-affine first layer and a hidden layer".into(),
            ))
        }
    };
    let (w_last, b_last, labels) = match staged.layers.last() {
        Some(StagedLayer::Affine { w, b }) => (*w, *b, tape.value(*w).shape()[0]),
        _ => unreachable!(),
    };
    let x = tape.constant(flat_images.clone());
    let center = tape.affine(x, w1, Some(b1))?;
    let half = tape.sparse_half_width(w1, k, channels)?;
    let neg_half = tape.scale(half, -1.0);
    let lo = tape.add_row_broadcast(center, neg_half)?;
    let hi = tape.add_row_broadcast(center, half)?;
    let n_layers = staged.layers.len();
    let iv_pen = interval_through(
        tape,
        &staged.layers[2..n_layers - 1],
        IntervalVars { lo, hi },
    )?;
    // one merged matrix per distinct label, batch order restored by a gather
    let batch_len = batch_targets.len();
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); labels];
    for (i, &t) in batch_targets.iter().enumerate() {
        by_label[t].push(i);
    }
    let mut parts = Vec::new();
    let mut pos_of_image = vec![(0usize, 0usize); batch_len];
    for (t, members) in by_label.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        for (gi, &i) in members.iter().enumerate() {
            pos_of_image[i] = (parts.len(), gi);
        }
        let lo_t = tape.gather_rows(iv_pen.lo, members.clone())?;
        let hi_t = tape.gather_rows(iv_pen.hi, members.clone())?;
        parts.push(merged_margins_on_tape(
            tape,
            &IntervalVars { lo: lo_t, hi: hi_t },
            w_last,
            b_last,
            labels,
            t,
        )?);
    }
    let stacked = tape.stack_rows(parts.clone())?;
    let mut offsets = Vec::with_capacity(parts.len());
    let mut acc = 0;
    for &p in &parts {
        offsets.push(acc);
        acc += tape.value(p).shape()[0];
    }
    let perm: Vec<usize> = (0..batch_len)
        .map(|i| {
            let (part, row) = pos_of_image[i];
            offsets[part] + row
        })
        .collect();
    tape.gather_rows(stacked, perm)
}

/// One masked-MSE Adam step on the predictor, restricted to the selected
/// (anchor, label) entries. Classifier parameters are untouched.
pub fn predictor_update(
    predictor: &mut MarginPredictor,
    opt: &mut Adam,
    images: &Tensor,
    targets: &Tensor,
    mask: &Tensor,
    lr: f32,
) -> Result<f32> {
    let mut tape = Tape::new();
    let staged = predictor.stage(&mut tape, true);
    let x = tape.constant(images.clone());
    let pred = predictor.forward_on_tape(&mut tape, x, &staged)?;
    let loss = tape.masked_mse(pred, targets.clone(), mask.clone())?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    predictor.absorb_grads(&tape, &staged);
    opt.step(&mut predictor.parameters_mut(), lr)?;
    Ok(value)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub eps: f32,
    pub lr: f32,
    pub loss: f32,
    pub clean_acc: f64,
    pub cert_acc: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub predictor: Option<MarginPredictor>,
    pub warnings: Vec<String>,
}

/// Learning rate at an epoch: fixed during warm-up, then halved every
/// `halve_every` epochs.
pub fn lr_at(base: f32, epoch: usize, warmup: usize, halve_every: usize) -> f32 {
    if epoch < warmup || halve_every == 0 {
        base
    } else {
        base * 0.5f32.powi(1 + ((epoch - warmup) / halve_every) as i32)
    }
}

/// Clean accuracy of the network on a labeled set.
pub fn accuracy(net: &Network, images: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = net.predict(images)?;
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn train(
    net: &mut Network,
    train_images: &Tensor,
    train_labels: &[usize],
    eval_images: &Tensor,
    eval_labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = train_images.shape()[0];
    if n == 0 || train_labels.len() != n {
        return Err(Error::Config("empty or inconsistent training set".into()));
    }
    let shape = net.input_shape().to_vec();
    let (channels, h, w) = (shape[0], shape[1], shape[2]);
    let d = channels * h * w;
    let labels = net.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new();
    let mut warnings: Vec<String> = Vec::new();

    let placements: Vec<PatchPlacement> = match &config.threat.kind {
        ThreatKind::Patch(mask) => enumerate_placements((h, w), mask)?,
        ThreatKind::Sparse { .. } => Vec::new(),
    };
    let grid = match &config.threat.kind {
        ThreatKind::Patch(mask) => {
            let (mh, mw) = mask.bounding_box();
            (h - mh + 1, w - mw + 1)
        }
        ThreatKind::Sparse { .. } => (0, 0),
    };

    let pool_groups = if let Strategy::Pooled { group } = config.strategy {
        Some(adjacent_anchor_groups(grid, group)?)
    } else {
        None
    };

    let mut predictor = if let Strategy::Guided { count } = config.strategy {
        if count != labels {
            warnings.push(format!(
                "guided strategy selects one placement per label ({labels}), requested {count}"
            ));
        }
        Some(MarginPredictor::new(channels, h, w, grid, labels, &mut rng)?)
    } else {
        None
    };
    let mut predictor_opt = Adam::new();

    let batches_per_epoch = n.div_ceil(config.batch_size);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = lr_at(config.lr, epoch, config.warmup_epochs, config.lr_halve_every);
        let mut loss_sum = 0.0f64;
        let mut eps_last = 0.0f32;

        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let eps = epsilon_schedule(
                epoch as f64 + batch_idx as f64 / batches_per_epoch as f64,
                config.warmup_epochs,
            );
            eps_last = eps;
            let batch_targets: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let mut flat = Vec::with_capacity(batch.len() * d);
            for &i in batch {
                flat.extend_from_slice(&train_images.data()[i * d..(i + 1) * d]);
            }
            let flat_images = Tensor::from_vec(vec![batch.len(), d], flat)?;

            let loss = train_batch(
                net,
                &flat_images,
                &batch_targets,
                config,
                &placements,
                grid,
                pool_groups.as_deref(),
                predictor.as_mut(),
                &mut predictor_opt,
                eps,
                lr,
                &mut rng,
                &mut opt,
                &mut warnings,
                (channels, h, w),
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("{msg} (epoch {epoch}, batch {batch_idx})"))
                }
                other => other,
            })?;
            loss_sum += f64::from(loss);
        }

        let clean_acc = accuracy(net, eval_images, eval_labels)?;
        let cert_acc = if config.cert_every > 0
            && ((epoch + 1) % config.cert_every == 0 || epoch + 1 == config.epochs)
        {
            let count = config.cert_sample.min(eval_labels.len());
            let mut sample_shape = vec![count];
            sample_shape.extend_from_slice(&eval_images.shape()[1..]);
            let sample =
                Tensor::from_vec(sample_shape, eval_images.data()[..count * d].to_vec())?;
            let threat = config.threat.clone().with_eps(1.0);
            let summary = certify::certified_accuracy(
                net,
                &sample,
                &eval_labels[..count],
                &threat,
                &CertOptions {
                    early_exit: true,
                    ..CertOptions::default()
                },
            )?;
            Some(summary.certified_accuracy)
        } else {
            None
        };

        metrics.push(EpochMetrics {
            epoch,
            eps: eps_last,
            lr,
            loss: (loss_sum / batches_per_epoch as f64) as f32,
            clean_acc,
            cert_acc,
        });
    }

    Ok(TrainOutcome {
        metrics,
        predictor,
        warnings,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    net: &mut Network,
    flat_images: &Tensor,
    batch_targets: &[usize],
    config: &TrainConfig,
    placements: &[PatchPlacement],
    grid: (usize, usize),
    pool_groups: Option<&[Vec<usize>]>,
    predictor: Option<&mut MarginPredictor>,
    predictor_opt: &mut Adam,
    eps: f32,
    lr: f32,
    rng: &mut ChaCha8Rng,
    opt: &mut Adam,
    warnings: &mut Vec<String>,
    geometry: (usize, usize, usize),
) -> Result<f32> {
    let (channels, h, w) = geometry;
    let batch_len = batch_targets.len();
    let mut tape = Tape::new();
    let staged = net.stage(&mut tape, true);

    // (label, anchor) picks per image, kept for the predictor step
    let mut guided_selections: Option<Vec<Vec<(usize, (usize, usize))>>> = None;
    // per image: sorted dedup'd anchors, aligned with the margin matrix rows
    let mut guided_row_anchors: Option<Vec<Vec<(usize, usize)>>> = None;

    type ImageMargins = Vec<(Var, std::ops::Range<usize>)>;
    let (margins_var, per_image_margins): (Var, ImageMargins) =
        match (&config.threat.kind, &config.strategy) {
            (ThreatKind::Sparse { k }, _) => {
                let m = sparse_margin_graph(
                    &mut tape,
                    &staged,
                    flat_images,
                    batch_targets,
                    *k,
                    channels,
                )?;
                (m, Vec::new())
            }
            (ThreatKind::Patch(_), strategy) => {
                let selected: Vec<Vec<&PatchPlacement>> = match strategy {
                    Strategy::Random { count } => {
                        let mut all = Vec::with_capacity(batch_len);
                        for _ in 0..batch_len {
                            let (idx, clamped) =
                                sample_random_patches(placements.len(), *count, rng);
                            if clamped && warnings.iter().all(|w| !w.contains("clamped")) {
                                warnings.push(format!(
                                    "random patch count {count} clamped to {} placements",
                                    placements.len()
                                ));
                            }
                            all.push(idx.iter().map(|&i| &placements[i]).collect());
                        }
                        all
                    }
                    Strategy::All | Strategy::Pooled { .. } => select_by_sweep(
                        net,
                        flat_images,
                        batch_targets,
                        placements,
                        &config.threat,
                        eps,
                        pool_groups,
                        geometry,
                    )?,
                    Strategy::Guided { .. } => {
                        let pred = predictor
                            .as_deref()
                            .expect("guided training owns a predictor");
                        let images4 = flat_images.reshape(&[batch_len, channels, h, w])?;
                        let grids = pred.forward(&images4)?; // [B, L, gh, gw]
                        let labels = pred.labels();
                        let cells = grid.0 * grid.1;
                        let mut all = Vec::with_capacity(batch_len);
                        let mut picks = Vec::with_capacity(batch_len);
                        let mut row_anchors = Vec::with_capacity(batch_len);
                        let mut fallbacks = 0usize;
                        for i in 0..batch_len {
                            let per = Tensor::from_vec(
                                vec![labels, grid.0, grid.1],
                                grids.data()[i * labels * cells..(i + 1) * labels * cells]
                                    .to_vec(),
                            )?;
                            let (anchors, fb) = guided_select(&per, config.temperature, rng);
                            fallbacks += fb;
                            let mut uniq = anchors.clone();
                            uniq.sort_unstable();
                            uniq.dedup();
                            all.push(
                                uniq.iter()
                                    .map(|&(r, c)| &placements[r * grid.1 + c])
                                    .collect::<Vec<_>>(),
                            );
                            picks.push(anchors.into_iter().enumerate().collect::<Vec<_>>());
                            row_anchors.push(uniq);
                        }
                        if fallbacks > 0 {
                            warnings.push(format!(
                                "guided selection fell back to uniform sampling {fallbacks} times"
                            ));
                        }
                        guided_selections = Some(picks);
                        guided_row_anchors = Some(row_anchors);
                        all
                    }
                };

                let rows = batch_rows(&selected, channels, h, w);
                let pooled_members = match (strategy, pool_groups) {
                    (Strategy::Pooled { .. }, Some(groups)) => Some(selected_group_members(
                        &selected,
                        groups,
                        placements,
                        grid,
                    )),
                    _ => None,
                };

                patch_margin_graph(
                    &mut tape,
                    &staged,
                    flat_images,
                    batch_targets,
                    rows,
                    &config.threat,
                    eps,
                    geometry,
                    pooled_members.as_deref(),
                )?
            }
        };

    let neg = tape.scale(margins_var, -1.0);
    let loss_var = tape.softmax_cross_entropy(neg, batch_targets)?;
    let loss = tape.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training diverged, loss {loss}")));
    }

    // actual margins at the selected anchors, read off the classifier pass
    // before any parameter update
    let predictor_batch = match (&guided_selections, &guided_row_anchors) {
        (Some(picks), Some(row_anchors)) => {
            let labels = net.labels();
            let cells = grid.0 * grid.1;
            let mut targets = vec![0.0f32; batch_len * labels * cells];
            let mut mask = vec![0.0f32; batch_len * labels * cells];
            for i in 0..batch_len {
                let (group, span) = &per_image_margins[i];
                let margins = tape.value(*group);
                for &(y, (r, c)) in &picks[i] {
                    let local = row_anchors[i]
                        .binary_search(&(r, c))
                        .expect("selected anchor is a margin row");
                    let idx = ((i * labels) + y) * cells + r * grid.1 + c;
                    targets[idx] = margins.data()[(span.start + local) * labels + y];
                    mask[idx] = 1.0;
                }
            }
            Some((
                Tensor::from_vec(vec![batch_len, labels, grid.0, grid.1], targets)?,
                Tensor::from_vec(vec![batch_len, labels, grid.0, grid.1], mask)?,
            ))
        }
        _ => None,
    };

    tape.backward(loss_var)?;
    net.absorb_grads(&tape, &staged);
    opt.step(&mut net.parameters_mut(), lr)?;

    if let (Some((targets, mask)), Some(pred)) = (predictor_batch, predictor) {
        let images4 = flat_images.reshape(&[batch_len, channels, h, w])?;
        predictor_update(pred, predictor_opt, &images4, &targets, &mask, lr)?;
    }

    Ok(loss)
}

/// No-grad sweep selecting, per image, the argmin placements (all-patch) or
/// all members of the argmin groups (pooled). Runs images in parallel.
#[allow(clippy::too_many_arguments)]
fn select_by_sweep<'p>(
    net: &Network,
    flat_images: &Tensor,
    batch_targets: &[usize],
    placements: &'p [PatchPlacement],
    threat: &ThreatModel,
    eps: f32,
    pool_groups: Option<&[Vec<usize>]>,
    geometry: (usize, usize, usize),
) -> Result<Vec<Vec<&'p PatchPlacement>>> {
    let (channels, h, w) = geometry;
    let d = channels * h * w;
    let labels = net.labels();
    (0..batch_targets.len())
        .into_par_iter()
        .map(|i| {
            let image = Tensor::from_vec(
                vec![channels, h, w],
                flat_images.data()[i * d..(i + 1) * d].to_vec(),
            )?;
            let y = batch_targets[i];
            match pool_groups {
                None => {
                    // argmin placement per label (ties to lowest index)
                    let mut worst = vec![f32::INFINITY; labels];
                    let mut arg = vec![0usize; labels];
                    let mut seen = 0usize;
                    for chunk in placements.chunks(certify::DEFAULT_SWEEP_CHUNK) {
                        let m =
                            certify::placement_margins(net, &image, y, chunk, threat, eps)?;
                        for (p, row) in m.data().chunks(labels).enumerate() {
                            for (yy, &v) in row.iter().enumerate() {
                                if v < worst[yy] {
                                    worst[yy] = v;
                                    arg[yy] = seen + p;
                                }
                            }
                        }
                        seen += chunk.len();
                    }
                    let mut ids: Vec<usize> = (0..labels)
                        .filter(|&yy| yy != y)
                        .map(|yy| arg[yy])
                        .collect();
                    ids.sort_unstable();
                    ids.dedup();
                    Ok(ids.iter().map(|&p| &placements[p]).collect())
                }
                Some(groups) => {
                    // argmin group per label, then every member of those groups
                    let margins = pooled_group_margins(
                        net, &image, y, placements, groups, threat, eps,
                    )?;
                    let mut worst = vec![f32::INFINITY; labels];
                    let mut arg = vec![0usize; labels];
                    for (g, row) in margins.chunks(labels).enumerate() {
                        for (yy, &v) in row.iter().enumerate() {
                            if v < worst[yy] {
                                worst[yy] = v;
                                arg[yy] = g;
                            }
                        }
                    }
                    let mut gids: Vec<usize> = (0..labels)
                        .filter(|&yy| yy != y)
                        .map(|yy| arg[yy])
                        .collect();
                    gids.sort_unstable();
                    gids.dedup();
                    let mut out = Vec::new();
                    for g in gids {
                        for &p in &groups[g] {
                            out.push(&placements[p]);
                        }
                    }
                    Ok(out)
                }
            }
        })
        .collect()
}

/// Margins per pooled group, flattened `[groups * labels]`, no gradients.
/// Layer-1 intervals come from the fast placement path; pooling happens on
/// those rows, then one interval per group flows through the rest.
pub fn pooled_group_margins(
    net: &Network,
    image: &Tensor,
    y_true: usize,
    placements: &[PatchPlacement],
    groups: &[Vec<usize>],
    threat: &ThreatModel,
    eps: f32,
) -> Result<Vec<f32>> {
    use crate::interval::{final_affine, margin_lower_bounds_batch, propagate_layers};
    let (last_w, last_b) = final_affine(net);
    let (z1, consumed) = certify::first_linear_intervals(net, image, placements, threat, eps)?;
    let feat_shape = z1.shape()[1..].to_vec();
    let per_feat: usize = feat_shape.iter().product();

    let mut pooled_lo: Vec<f32> = Vec::with_capacity(groups.len() * per_feat);
    let mut pooled_hi: Vec<f32> = Vec::with_capacity(groups.len() * per_feat);
    for g in groups {
        let base = g[0] * per_feat;
        let mut lo = z1.lower().data()[base..base + per_feat].to_vec();
        let mut hi = z1.upper().data()[base..base + per_feat].to_vec();
        for &m in &g[1..] {
            let row = m * per_feat;
            for f in 0..per_feat {
                lo[f] = lo[f].min(z1.lower().data()[row + f]);
                hi[f] = hi[f].max(z1.upper().data()[row + f]);
            }
        }
        pooled_lo.extend_from_slice(&lo);
        pooled_hi.extend_from_slice(&hi);
    }
    let mut shape = vec![groups.len()];
    shape.extend_from_slice(&feat_shape);
    let z_pool = IntervalTensor::new(
        Tensor::from_vec(shape.clone(), pooled_lo)?,
        Tensor::from_vec(shape, pooled_hi)?,
    )?;
    let n_layers = net.layers().len();
    let z_pen = propagate_layers(&z_pool, &net.layers()[consumed..n_layers - 1], consumed)?;
    let m = margin_lower_bounds_batch(&z_pen, last_w, last_b, y_true)?;
    Ok(m.data().to_vec())
}

/// Row indices (within the selected-row list) of each selected group's
/// members; rows were built per image with group members consecutive.
fn selected_group_members(
    selected: &[Vec<&PatchPlacement>],
    groups: &[Vec<usize>],
    placements: &[PatchPlacement],
    grid: (usize, usize),
) -> Vec<Vec<usize>> {
    let idx_of = |p: &PatchPlacement| p.anchor.0 * grid.1 + p.anchor.1;
    let group_of: Vec<usize> = {
        let mut g = vec![0usize; placements.len()];
        for (gi, members) in groups.iter().enumerate() {
            for &m in members {
                g[m] = gi;
            }
        }
        g
    };
    let mut out = Vec::new();
    let mut row = 0usize;
    for sel in selected {
        let mut current: Option<(usize, Vec<usize>)> = None;
        for p in sel {
            let gi = group_of[idx_of(p)];
            match &mut current {
                Some((cg, rows)) if *cg == gi => rows.push(row),
                Some((_, rows)) => {
                    out.push(std::mem::take(rows));
                    current = Some((gi, vec![row]));
                }
                None => current = Some((gi, vec![row])),
            }
            row += 1;
        }
        if let Some((_, rows)) = current {
            out.push(rows);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn epsilon_schedule_cases() {
        assert_eq!(epsilon_schedule(0.0, 10), 0.0);
        assert_eq!(epsilon_schedule(10.0, 10), 1.0);
        assert_eq!(epsilon_schedule(25.0, 10), 1.0);
        assert_abs_diff_eq!(epsilon_schedule(5.0, 10), 0.5, epsilon = 1e-6);
        assert_eq!(epsilon_schedule(0.0, 0), 1.0);
    }

    #[test]
    fn lr_schedule_halves_after_warmup() {
        assert_eq!(lr_at(1.0, 0, 61, 10), 1.0);
        assert_eq!(lr_at(1.0, 60, 61, 10), 1.0);
        assert_eq!(lr_at(1.0, 61, 61, 10), 0.5);
        assert_eq!(lr_at(1.0, 70, 61, 10), 0.5);
        assert_eq!(lr_at(1.0, 71, 61, 10), 0.25);
    }

    #[test]
    fn certificate_loss_values() {
        let strong = MarginVector::new(vec![0.0, 10.0, 10.0], 0).unwrap();
        assert!(certificate_loss(&strong) < 1e-3);
        let uniform = MarginVector::new(vec![0.0; 10], 0).unwrap();
        assert_abs_diff_eq!(certificate_loss(&uniform), 10.0f32.ln(), epsilon = 1e-5);
    }

    #[test]
    fn random_sampling_is_deterministic_and_clamps() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let (s1, c1) = sample_random_patches(729, 10, &mut a);
        let (s2, _) = sample_random_patches(729, 10, &mut b);
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 10);
        assert!(!c1);
        let (all, clamped) = sample_random_patches(5, 9, &mut a);
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(clamped);
        let (full, not_clamped) = sample_random_patches(5, 5, &mut a);
        assert_eq!(full.len(), 5);
        assert!(!not_clamped);
    }

    #[test]
    fn guided_select_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // one cell 100 lower than the rest: picked essentially always at T=1
        let mut grid = vec![0.0f32; 2 * 9];
        grid[4] = -100.0;
        grid[9 + 7] = -100.0;
        let pred = Tensor::from_vec(vec![2, 3, 3], grid).unwrap();
        let mut hits = 0;
        for _ in 0..200 {
            let (anchors, fb) = guided_select(&pred, 1.0, &mut rng);
            assert_eq!(fb, 0);
            if anchors[0] == (1, 1) {
                hits += 1;
            }
            assert_eq!(anchors[1], (2, 1));
        }
        assert!(hits >= 199, "picked {hits}/200");
        // temperature 0 = argmin
        let (anchors, _) = guided_select(&pred, 0.0, &mut rng);
        assert_eq!(anchors, vec![(1, 1), (2, 1)]);
        // non-finite predictions fall back to uniform
        let mut nan_grid = Tensor::zeros(&[1, 2, 2]);
        nan_grid.data_mut()[0] = f32::NAN;
        let (_, fb) = guided_select(&nan_grid, 1.0, &mut rng);
        assert_eq!(fb, 1);
    }

    #[test]
    fn pool_bounds_identity_and_validation() {
        let iv = |lo: f32, hi: f32| {
            IntervalTensor::new(Tensor::full(&[2], lo), Tensor::full(&[2], hi)).unwrap()
        };
        let ivs = vec![iv(0.0, 1.0), iv(-1.0, 0.5), iv(0.2, 0.3)];
        // singleton groups reproduce the inputs
        let pooled = pool_bounds(&ivs, &[vec![0], vec![1], vec![2]]).unwrap();
        for (p, orig) in pooled.iter().zip(&ivs) {
            assert_eq!(p.lower().data(), orig.lower().data());
            assert_eq!(p.upper().data(), orig.upper().data());
        }
        // two identical intervals pool to themselves
        let same = pool_bounds(&[iv(0.1, 0.4), iv(0.1, 0.4)], &[vec![0, 1]]).unwrap();
        assert_eq!(same[0].lower().data(), &[0.1, 0.1]);
        assert_eq!(same[0].upper().data(), &[0.4, 0.4]);
        // non-partition -> config error
        assert!(pool_bounds(&ivs, &[vec![0, 1]]).is_err());
        assert!(pool_bounds(&ivs, &[vec![0, 0], vec![1], vec![2]]).is_err());
        // pooling widens
        let wide = pool_bounds(&ivs, &[vec![0, 1, 2]]).unwrap();
        assert_eq!(wide[0].lower().data(), &[-1.0, -1.0]);
        assert_eq!(wide[0].upper().data(), &[1.0, 1.0]);
    }

    #[test]
    fn anchor_groups_tile_the_grid() {
        let groups = adjacent_anchor_groups((4, 4), (2, 2)).unwrap();
        assert_eq!(groups.len(), 4);
        assert_eq!(groups[0], vec![0, 1, 4, 5]);
        // 27x27 grid with 2x2 groups: edge tiles are smaller but cover all
        let groups = adjacent_anchor_groups((27, 27), (2, 2)).unwrap();
        assert_eq!(groups.len(), 14 * 14);
        let covered: usize = groups.iter().map(|g| g.len()).sum();
        assert_eq!(covered, 27 * 27);
    }
}
