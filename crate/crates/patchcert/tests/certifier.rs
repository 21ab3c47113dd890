//! Certifier oracles: per-placement recomputation, attack cross-checks, and
//! brute-force sparse verification on tiny models.

mod common;

use common::*;
use patchcert::attack::{ifgsm_patch, AttackConfig};
use patchcert::certify::{certify_patch, certify_sparse, CertOptions};
use patchcert::network::{build_architecture, Layer, Network, Parameter};
use patchcert::tensor::Tensor;
use patchcert::threat::{enumerate_placements, ShapeMask, ThreatModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 6x6 image, 2x2 patch, 2-layer net (seed 9): the swept worst-case margins
/// must equal an independent per-placement recomputation in f64, and a
/// certificate implies IFGSM fails at all 25 placements.
#[test]
fn toy_sweep_matches_reference_and_resists_attack() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = Network::new(
        vec![
            Layer::Flatten,
            Layer::Affine {
                weight: Parameter::new(Tensor::kaiming_uniform(&[12, 36], 36, &mut rng)),
                bias: Parameter::new(Tensor::zeros(&[12])),
            },
            Layer::Relu,
            Layer::Affine {
                weight: Parameter::new(Tensor::kaiming_uniform(&[3, 12], 12, &mut rng)),
                bias: Parameter::new(Tensor::zeros(&[3])),
            },
        ],
        vec![1, 6, 6],
        3,
    )
    .unwrap();
    let image = Tensor::uniform(&[1, 6, 6], 0.5, &mut rng).map(|v| v.abs());
    let mask = ShapeMask::square(2).unwrap();
    let threat = ThreatModel::patch(mask.clone(), 1);
    let placements = enumerate_placements((6, 6), &mask).unwrap();
    assert_eq!(placements.len(), 25);

    for y_true in 0..3 {
        let result = certify_patch(&net, &image, y_true, &threat, &CertOptions::default()).unwrap();

        // independent per-placement recomputation in f64
        let reference = RefNet::from_network(&net);
        let img64: Vec<f64> = image.data().iter().map(|&v| f64::from(v)).collect();
        let mut worst = vec![f64::INFINITY; 3];
        for p in &placements {
            let cells = p.flat_indices(1, 6, 6);
            let z0 = ref_patch_interval(&img64, &cells, 1.0, &[1, 6, 6]);
            let z_pen = reference.propagate(&z0, 1);
            let margins = reference.merged_margins(&z_pen, y_true);
            for (w, m) in worst.iter_mut().zip(margins) {
                if m < *w {
                    *w = m;
                }
            }
        }
        for (y, (&got, &expect)) in result
            .worst_margins
            .values()
            .iter()
            .zip(&worst)
            .enumerate()
        {
            if y == y_true {
                assert_eq!(got, 0.0);
            } else {
                assert!(
                    (f64::from(got) - expect).abs() < 1e-4,
                    "label {y}: swept {got} vs reference {expect}"
                );
            }
        }

        // certified => exhaustive IFGSM at every placement fails to flip
        if result.certified {
            let cfg = AttackConfig {
                steps: 40,
                step_size: 0.1,
                restarts: 2,
                ..AttackConfig::default()
            };
            let mut arng = ChaCha8Rng::seed_from_u64(123);
            for p in &placements {
                let (adv, _) = ifgsm_patch(&net, &image, y_true, p, &cfg, &mut arng).unwrap();
                let pred = net
                    .predict(&adv.reshape(&[1, 1, 6, 6]).unwrap())
                    .unwrap()[0];
                assert_eq!(
                    pred, y_true,
                    "certified image flipped by attack at {:?}",
                    p.anchor
                );
            }
        }
    }
}

/// Random small net, k=1, 4x4 image: certified implies a brute-force sweep
/// over all single-pixel modifications on a 21-value grid never flips.
#[test]
fn sparse_certificate_survives_grid_search() {
    let mut certified_seen = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = build_architecture("mlp255", 1, 4, 4, 3, &mut rng).unwrap();
        let image = Tensor::uniform(&[1, 4, 4], 0.35, &mut rng).map(|v| v.abs() + 0.3);
        let y_true = net.predict(&image.reshape(&[1, 1, 4, 4]).unwrap()).unwrap()[0];
        // random nets have no robustness margin; widen the true logit's bias
        // until the certificate fires (the net still varies with its input,
        // so an unsound bound would still be caught by the grid search)
        for boost in [2.0f32, 6.0, 20.0] {
            let bias = net.parameters_mut().pop().unwrap();
            bias.value.data_mut()[y_true] += boost;
            if certify_sparse(&net, &image, y_true, 1).unwrap().certified {
                break;
            }
        }
        let res = certify_sparse(&net, &image, y_true, 1).unwrap();
        if !res.certified {
            continue;
        }
        certified_seen += 1;
        // the sparse model perturbs one pixel by +-1 around its value
        for pixel in 0..16 {
            for step in 0..=20 {
                let delta = -1.0 + 0.1 * step as f32;
                let mut modified = image.clone();
                modified.data_mut()[pixel] += delta;
                let pred = net
                    .predict(&modified.reshape(&[1, 1, 4, 4]).unwrap())
                    .unwrap()[0];
                assert_eq!(
                    pred, y_true,
                    "seed {seed}: certified but pixel {pixel} delta {delta} flips"
                );
            }
        }
    }
    assert!(certified_seen >= 3, "grid oracle needs certified cases, saw {certified_seen}");
}

/// The sparse threat with k = all pixels frees every pixel by a unit radius,
/// strictly containing the whole-image patch box ([0,1] for in-range images),
/// so its margins can only be smaller.
#[test]
fn sparse_saturation_is_dominated_by_whole_image_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = build_architecture("mlp255", 1, 4, 4, 3, &mut rng).unwrap();
    let image = Tensor::uniform(&[1, 4, 4], 0.4, &mut rng).map(|v| v.abs());
    let sparse = certify_sparse(&net, &image, 0, 16).unwrap();
    let threat = ThreatModel::patch(ShapeMask::square(4).unwrap(), 1);
    let patch = certify_patch(&net, &image, 0, &threat, &CertOptions::default()).unwrap();
    for (y, (s, p)) in sparse
        .worst_margins
        .values()
        .iter()
        .zip(patch.worst_margins.values())
        .enumerate()
    {
        assert!(*s <= p + 1e-5, "label {y}: sparse {s} > patch {p}");
    }
}

/// Early exit never changes the certified verdict, only the margin detail.
#[test]
fn early_exit_preserves_the_verdict() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = build_architecture("mlp255", 1, 6, 6, 4, &mut rng).unwrap();
        let image = Tensor::uniform(&[1, 6, 6], 0.5, &mut rng).map(|v| v.abs());
        let threat = ThreatModel::patch(ShapeMask::square(2).unwrap(), 1);
        let full = certify_patch(&net, &image, 0, &threat, &CertOptions::default()).unwrap();
        let quick = certify_patch(
            &net,
            &image,
            0,
            &threat,
            &CertOptions {
                early_exit: true,
                ..CertOptions::default()
            },
        )
        .unwrap();
        assert_eq!(full.certified, quick.certified);
        if !quick.partial {
            assert_eq!(full.worst_margins.values(), quick.worst_margins.values());
        }
    }
}
