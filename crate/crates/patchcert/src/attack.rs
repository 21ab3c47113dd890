//! Empirical attacks: masked IFGSM patch attacks against plain and
//! LGS-defended models, including the defense-aware variant that
//! backpropagates through the smoothing step.

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::threat::{enumerate_placements, PatchPlacement, ShapeMask};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Local Gradient Smoothing parameters (`x * (1 - lambda * g)` where `g` is
/// the block-normalized, thresholded image-gradient magnitude).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LgsParams {
    pub lambda: f32,
    pub window: usize,
    pub threshold: f32,
}

impl LgsParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("LGS lambda must be nonnegative".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("LGS window must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("LGS threshold must lie in [0,1]".into()));
        }
        Ok(())
    }
}

impl Default for LgsParams {
    fn default() -> Self {
        // defaults picked by the recorded grid search (tune_lgs)
        LgsParams {
            lambda: 4.0,
            window: 4,
            threshold: 0.1,
        }
    }
}

/// The suppression factors `1 - lambda * g(x)` per pixel, shared by the
/// forward pass and the defense-aware backward pass. `g` is the first-
/// difference gradient magnitude of the per-pixel channel mean, max-
/// normalized inside non-overlapping `window x window` blocks, with entries
/// below `threshold` zeroed.
pub fn lgs_suppression(image: &Tensor, params: &LgsParams) -> Result<Tensor> {
    params.validate()?;
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension {
            op: "lgs_suppression",
            lhs: s.to_vec(),
            rhs: vec![3],
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let data = image.data();
    // channel-mean intensity
    let mut gray = vec![0.0f32; h * w];
    for ch in 0..c {
        for i in 0..h * w {
            gray[i] += data[ch * h * w + i] / c as f32;
        }
    }
    // forward-difference gradient magnitude
    let mut g = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let gx = if j + 1 < w {
                gray[i * w + j + 1] - gray[i * w + j]
            } else {
                0.0
            };
            let gy = if i + 1 < h {
                gray[(i + 1) * w + j] - gray[i * w + j]
            } else {
                0.0
            };
            g[i * w + j] = (gx * gx + gy * gy).sqrt();
        }
    }
    // block max-normalization
    let win = params.window;
    for bi in (0..h).step_by(win) {
        for bj in (0..w).step_by(win) {
            let mut peak = 0.0f32;
            for i in bi..(bi + win).min(h) {
                for j in bj..(bj + win).min(w) {
                    peak = peak.max(g[i * w + j]);
                }
            }
            if peak > 0.0 {
                for i in bi..(bi + win).min(h) {
                    for j in bj..(bj + win).min(w) {
                        g[i * w + j] /= peak;
                    }
                }
            }
        }
    }
    // thresholding and suppression factor
    let factors = g
        .iter()
        .map(|&v| {
            let v = if v < params.threshold { 0.0 } else { v };
            1.0 - params.lambda * v
        })
        .collect();
    Tensor::from_vec(vec![h * w], factors)
}

/// Applies Local Gradient Smoothing: `clamp_01(x * (1 - lambda * g(x)))`.
pub fn lgs_preprocess(image: &Tensor, params: &LgsParams) -> Result<Tensor> {
    let factors = lgs_suppression(image, params)?;
    let s = image.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut out = image.data().to_vec();
    for ch in 0..c {
        for i in 0..hw {
            out[ch * hw + i] = (out[ch * hw + i] * factors.data()[i]).clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(s.to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocationSet {
    All,
    Corners,
}

#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: f32,
    pub restarts: usize,
    pub locations: LocationSet,
    /// Subsample the location set by this stride (1 = every placement).
    pub stride: usize,
    pub defense: Option<LgsParams>,
    /// Attack through the defense (gradients taken through the smoothing,
    /// thresholding treated as identity on the backward pass).
    pub defense_aware: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 50,
            step_size: 0.05,
            restarts: 1,
            locations: LocationSet::All,
            stride: 1,
            defense: None,
            defense_aware: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Config("attack step size must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("location stride must be at least 1".into()));
        }
        if let Some(d) = &self.defense {
            d.validate()?;
        }
        Ok(())
    }
}

/// The model's prediction under the configured inference-time defense.
pub fn defended_predict(
    net: &Network,
    image: &Tensor,
    defense: Option<&LgsParams>,
) -> Result<usize> {
    let input = match defense {
        Some(params) => lgs_preprocess(image, params)?,
        None => image.clone(),
    };
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    Ok(net.predict(&input.reshape(&shape)?)?[0])
}

/// Vector-Jacobian product of the smoothing step `x * (1 - lambda * g(x))`
/// with respect to the raw image. The multiplication is differentiated
/// exactly (both factors); thresholding passes gradients as identity and the
/// per-block peak used for normalization is held constant, so masked pixels
/// still receive signal through their effect on neighboring suppression.
fn lgs_backward(image: &Tensor, params: &LgsParams, upstream: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let data = image.data();
    // recompute gray, raw magnitudes and per-pixel peaks
    let mut gray = vec![0.0f32; hw];
    for ch in 0..c {
        for i in 0..hw {
            gray[i] += data[ch * hw + i] / c as f32;
        }
    }
    let mut gx = vec![0.0f32; hw];
    let mut gy = vec![0.0f32; hw];
    let mut mag = vec![0.0f32; hw];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            gx[p] = if j + 1 < w { gray[p + 1] - gray[p] } else { 0.0 };
            gy[p] = if i + 1 < h { gray[p + w] - gray[p] } else { 0.0 };
            mag[p] = (gx[p] * gx[p] + gy[p] * gy[p]).sqrt();
        }
    }
    let win = params.window;
    let mut peak = vec![0.0f32; hw];
    for bi in (0..h).step_by(win) {
        for bj in (0..w).step_by(win) {
            let mut m = 0.0f32;
            for i in bi..(bi + win).min(h) {
                for j in bj..(bj + win).min(w) {
                    m = m.max(mag[i * w + j]);
                }
            }
            for i in bi..(bi + win).min(h) {
                for j in bj..(bj + win).min(w) {
                    peak[i * w + j] = m;
                }
            }
        }
    }
    let factors = lgs_suppression(image, params)?;

    // diagonal term: upstream * (1 - lambda g), plus the scalar field that
    // feeds the gradient-magnitude path
    let mut out = vec![0.0f32; c * hw];
    let mut dmag = vec![0.0f32; hw];
    for i in 0..hw {
        let mut s_i = 0.0f32;
        for ch in 0..c {
            let u = upstream.data()[ch * hw + i];
            out[ch * hw + i] = u * factors.data()[i];
            s_i += u * data[ch * hw + i];
        }
        // d x_hat / d g = -lambda * x; normalization by the (constant) peak
        if peak[i] > 0.0 {
            dmag[i] = -params.lambda * s_i / peak[i];
        }
    }
    // through the magnitude to the forward differences, then to gray
    let mut dgray = vec![0.0f32; hw];
    for p in 0..hw {
        if mag[p] > 0.0 && dmag[p] != 0.0 {
            let dgx = dmag[p] * gx[p] / mag[p];
            let dgy = dmag[p] * gy[p] / mag[p];
            if p % w + 1 < w {
                dgray[p + 1] += dgx;
                dgray[p] -= dgx;
            }
            if p / w + 1 < h {
                dgray[p + w] += dgy;
                dgray[p] -= dgy;
            }
        }
    }
    for ch in 0..c {
        for i in 0..hw {
            out[ch * hw + i] += dgray[i] / c as f32;
        }
    }
    Tensor::from_vec(s.to_vec(), out)
}

/// Gradient of the cross-entropy loss w.r.t. the input image, optionally
/// through the LGS defense (the smoothing step is incorporated in the
/// backward pass; thresholding and output clamping act as identity).
fn input_gradient(
    net: &Network,
    image: &Tensor,
    y_true: usize,
    defense_aware: Option<&LgsParams>,
) -> Result<(Tensor, f32)> {
    let forward_input = match defense_aware {
        Some(params) => lgs_preprocess(image, params)?,
        None => image.clone(),
    };
    let mut tape = Tape::new();
    let staged = net.stage(&mut tape, false);
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = tape.leaf(forward_input.reshape(&shape)?, true);
    let logits = staged.forward(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(logits, &[y_true])?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grad = tape
        .grad(x)
        .ok_or_else(|| Error::TapeState("input gradient missing".into()))?
        .reshape(image.shape())?;
    match defense_aware {
        Some(params) => Ok((lgs_backward(image, params, &grad)?, loss_value)),
        None => Ok((grad, loss_value)),
    }
}

/// Outcome of attacking one image at one placement.
#[derive(Clone, Debug)]
pub struct AttackRecord {
    pub index: usize,
    pub anchor: (usize, usize),
    pub success: bool,
    pub final_loss: f32,
    pub prediction: usize,
}

/// IFGSM restricted to the placement's mask: ascends the loss by signed
/// gradient steps on masked pixels, clipping to [0, 1]. Pixels outside the
/// mask never change. Restart 0 starts at the clean image, later restarts
/// at uniform random patch content. Returns as soon as an iterate flips the
/// (defended) prediction; otherwise the highest-loss final iterate.
pub fn ifgsm_patch(
    net: &Network,
    image: &Tensor,
    y_true: usize,
    placement: &PatchPlacement,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, f32)> {
    cfg.validate()?;
    let s = image.shape();
    let cells = placement.flat_indices(s[0], s[1], s[2]);
    let defense_aware = match (&cfg.defense, cfg.defense_aware) {
        (Some(params), true) => Some(params),
        _ => None,
    };
    let mut best = image.clone();
    let mut best_loss = f32::NEG_INFINITY;
    for restart in 0..cfg.restarts.max(1) {
        let mut adv = image.clone();
        if restart > 0 {
            for &j in &cells {
                adv.data_mut()[j] = rng.random_range(0.0..=1.0);
            }
        }
        let mut loss_now = f32::NEG_INFINITY;
        for step in 0..cfg.steps {
            if step > 0 || restart > 0 {
                // the clean image's prediction is the caller's concern
                if defended_predict(net, &adv, cfg.defense.as_ref())? != y_true {
                    return Ok((adv, loss_now.max(0.0)));
                }
            }
            let (grad, loss) = input_gradient(net, &adv, y_true, defense_aware)?;
            loss_now = loss;
            for &j in &cells {
                let g = grad.data()[j];
                let delta = if g > 0.0 {
                    cfg.step_size
                } else if g < 0.0 {
                    -cfg.step_size
                } else {
                    0.0
                };
                adv.data_mut()[j] = (adv.data()[j] + delta).clamp(0.0, 1.0);
            }
        }
        if cfg.steps == 0 {
            loss_now = input_gradient(net, &adv, y_true, defense_aware)?.1;
        }
        if defended_predict(net, &adv, cfg.defense.as_ref())? != y_true {
            return Ok((adv, loss_now));
        }
        if loss_now > best_loss {
            best_loss = loss_now;
            best = adv;
        }
    }
    Ok((best, best_loss))
}

/// Attacks every placement at once with the rows stacked as a batch: each
/// row runs its own IFGSM trajectory (the summed loss has independent
/// per-row gradients, so trajectories match the one-at-a-time attack).
/// Returns the first placement whose attack flips the label together with
/// the flipped prediction, or None if the image survives all of them. Not
/// used when a defense is configured (LGS works per image).
fn ifgsm_sweep_undefended(
    net: &Network,
    image: &Tensor,
    y_true: usize,
    placements: &[PatchPlacement],
    cfg: &AttackConfig,
) -> Result<Option<(usize, usize)>> {
    let s = image.shape();
    let per: usize = s.iter().product();
    let n = placements.len();
    let cells: Vec<Vec<usize>> = placements
        .iter()
        .map(|p| p.flat_indices(s[0], s[1], s[2]))
        .collect();
    let mut shape = vec![n];
    shape.extend_from_slice(s);
    let mut adv = Vec::with_capacity(n * per);
    for _ in 0..n {
        adv.extend_from_slice(image.data());
    }
    let targets = vec![y_true; n];
    for step in 0..=cfg.steps {
        let batch = Tensor::from_vec(shape.clone(), adv.clone())?;
        // predictions first: stop at the first flipped row
        let preds = net.predict(&batch)?;
        if let Some(hit) = preds.iter().position(|&p| p != y_true) {
            return Ok(Some((hit, preds[hit])));
        }
        if step == cfg.steps {
            break;
        }
        let mut tape = Tape::new();
        let staged = net.stage(&mut tape, false);
        let x = tape.leaf(batch, true);
        let logits = staged.forward(&mut tape, x)?;
        let loss = tape.softmax_cross_entropy(logits, &targets)?;
        tape.backward(loss)?;
        let grad = tape
            .grad(x)
            .ok_or_else(|| Error::TapeState("input gradient missing".into()))?;
        for (row, row_cells) in cells.iter().enumerate() {
            for &j in row_cells {
                let g = grad.data()[row * per + j];
                let delta = if g > 0.0 {
                    cfg.step_size
                } else if g < 0.0 {
                    -cfg.step_size
                } else {
                    0.0
                };
                let v = &mut adv[row * per + j];
                *v = (*v + delta).clamp(0.0, 1.0);
            }
        }
    }
    Ok(None)
}

/// The placements the attacker tries for a mask on an image.
pub fn attack_locations(
    image_dims: (usize, usize),
    mask: &ShapeMask,
    cfg: &AttackConfig,
) -> Result<Vec<PatchPlacement>> {
    let all = enumerate_placements(image_dims, mask)?;
    let picked = match cfg.locations {
        LocationSet::All => all
            .into_iter()
            .enumerate()
            .filter(|(i, _)| i % cfg.stride == 0)
            .map(|(_, p)| p)
            .collect(),
        LocationSet::Corners => {
            let (h, w) = image_dims;
            let (mh, mw) = mask.bounding_box();
            let corners = [(0, 0), (0, w - mw), (h - mh, 0), (h - mh, w - mw)];
            let mut out: Vec<PatchPlacement> = corners
                .iter()
                .map(|&anchor| PatchPlacement {
                    mask: mask.clone(),
                    anchor,
                })
                .collect();
            out.dedup();
            out
        }
    };
    Ok(picked)
}

#[derive(Clone, Debug)]
pub struct AttackSummary {
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub records: Vec<AttackRecord>,
}

/// Empirical adversarial accuracy: the fraction of images that are correctly
/// classified (under the defense, if any) and survive IFGSM at every tried
/// placement. Images run in parallel in dataset order.
pub fn empirical_adversarial_accuracy(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    mask: &ShapeMask,
    cfg: &AttackConfig,
) -> Result<AttackSummary> {
    cfg.validate()?;
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::Config("empty or inconsistent attack sample".into()));
    }
    let shape = images.shape()[1..].to_vec();
    let per: usize = shape.iter().product();
    let dims = (shape[1], shape[2]);
    let locations = attack_locations(dims, mask, cfg)?;

    // undefended, single-restart attacks run all placements as one batch
    let batched = cfg.defense.is_none() && cfg.restarts <= 1;
    let per_image: Vec<(bool, bool, Vec<AttackRecord>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let image = Tensor::from_vec(
                shape.clone(),
                images.data()[i * per..(i + 1) * per].to_vec(),
            )?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
            let clean_pred = defended_predict(net, &image, cfg.defense.as_ref())?;
            let clean_ok = clean_pred == labels[i];
            let mut records = Vec::new();
            let mut survived = clean_ok;
            if clean_ok && batched {
                match ifgsm_sweep_undefended(net, &image, labels[i], &locations, cfg)? {
                    Some((hit, pred)) => {
                        survived = false;
                        records.push(AttackRecord {
                            index: i,
                            anchor: locations[hit].anchor,
                            success: true,
                            final_loss: 0.0,
                            prediction: pred,
                        });
                    }
                    None => records.push(AttackRecord {
                        index: i,
                        anchor: (0, 0),
                        success: false,
                        final_loss: 0.0,
                        prediction: labels[i],
                    }),
                }
            } else if clean_ok {
                for placement in &locations {
                    let (adv, loss) =
                        ifgsm_patch(net, &image, labels[i], placement, cfg, &mut rng)?;
                    let pred = defended_predict(net, &adv, cfg.defense.as_ref())?;
                    let success = pred != labels[i];
                    records.push(AttackRecord {
                        index: i,
                        anchor: placement.anchor,
                        success,
                        final_loss: loss,
                        prediction: pred,
                    });
                    if success {
                        survived = false;
                        break;
                    }
                }
            }
            Ok((clean_ok, survived, records))
        })
        .collect::<Result<_>>()?;

    let clean = per_image.iter().filter(|r| r.0).count();
    let surv = per_image.iter().filter(|r| r.1).count();
    let records = per_image.into_iter().flat_map(|r| r.2).collect();
    Ok(AttackSummary {
        clean_accuracy: clean as f64 / n as f64,
        adversarial_accuracy: surv as f64 / n as f64,
        records,
    })
}

/// Grid-searches LGS parameters to maximize defended accuracy against the
/// defense-unaware attack on a small sample. Returns the winner and the
/// whole grid with scores, for the report.
pub fn tune_lgs(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    mask: &ShapeMask,
    base: &AttackConfig,
) -> Result<(LgsParams, Vec<(LgsParams, f64)>)> {
    let mut grid = Vec::new();
    for &lambda in &[1.0f32, 2.0, 4.0] {
        for &window in &[2usize, 4, 8] {
            for &threshold in &[0.0f32, 0.1, 0.2] {
                grid.push(LgsParams {
                    lambda,
                    window,
                    threshold,
                });
            }
        }
    }
    let mut scored = Vec::with_capacity(grid.len());
    let mut best = (LgsParams::default(), f64::NEG_INFINITY);
    for params in grid {
        let cfg = AttackConfig {
            defense: Some(params),
            defense_aware: false,
            ..base.clone()
        };
        let summary = empirical_adversarial_accuracy(net, images, labels, mask, &cfg)?;
        scored.push((params, summary.adversarial_accuracy));
        if summary.adversarial_accuracy > best.1 {
            best = (params, summary.adversarial_accuracy);
        }
    }
    Ok((best.0, scored))
}
