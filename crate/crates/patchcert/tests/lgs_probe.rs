//! Manual probe for the defense-aware LGS gap (run with --ignored).

mod common;


use patchcert::attack::{empirical_adversarial_accuracy, tune_lgs, AttackConfig, LocationSet};
use patchcert::data::{load_dataset, DatasetKind, Split};
use patchcert::network::build_architecture;
use patchcert::tensor::Tensor;
use patchcert::threat::ShapeMask;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn probe_lgs_gap_on_mnist() {
    let data = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist");
    let train_ds = load_dataset(DatasetKind::Mnist, data.as_ref(), Split::Train).unwrap();
    let test_ds = load_dataset(DatasetKind::Mnist, data.as_ref(), Split::Test).unwrap();
    let (train_images, train_labels) = train_ds.take(20000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = build_architecture("mlp255", 1, 28, 28, 10, &mut rng).unwrap();
    common::train_plain(&mut net, &train_images, &train_labels, 6, 1e-3, 1);

    let (images, labels) = test_ds.take(100).unwrap();
    let clean = patchcert::train::accuracy(&net, &images, &labels).unwrap();
    eprintln!("clean accuracy {clean:.4}");

    let mask = ShapeMask::square(5).unwrap();
    let base = AttackConfig {
        steps: 50,
        step_size: 0.05,
        restarts: 3,
        locations: LocationSet::Corners,
        ..AttackConfig::default()
    };

    // undefended attack
    let undefended =
        empirical_adversarial_accuracy(&net, &images, &labels, &mask, &base).unwrap();
    eprintln!("undefended adversarial accuracy {:.4}", undefended.adversarial_accuracy);

    // grid-search LGS against the unaware attacker on a small slice
    let tune_images = Tensor::from_vec(
        vec![30, 1, 28, 28],
        images.data()[..30 * 784].to_vec(),
    )
    .unwrap();
    let (tuned, grid) = tune_lgs(
        &net,
        &tune_images,
        &labels[..30],
        &mask,
        &AttackConfig {
            steps: 20,
            ..base.clone()
        },
    )
    .unwrap();
    for (p, acc) in &grid {
        eprintln!(
            "  grid lambda={} window={} threshold={} -> {:.3}",
            p.lambda, p.window, p.threshold, acc
        );
    }
    eprintln!(
        "tuned: lambda={} window={} threshold={}",
        tuned.lambda, tuned.window, tuned.threshold
    );

    let unaware = empirical_adversarial_accuracy(
        &net,
        &images,
        &labels,
        &mask,
        &AttackConfig {
            defense: Some(tuned),
            defense_aware: false,
            ..base.clone()
        },
    )
    .unwrap();
    let aware = empirical_adversarial_accuracy(
        &net,
        &images,
        &labels,
        &mask,
        &AttackConfig {
            defense: Some(tuned),
            defense_aware: true,
            ..base
        },
    )
    .unwrap();
    eprintln!(
        "LGS-defended: unaware {:.4} aware {:.4} (gap {:.1} points)",
        unaware.adversarial_accuracy,
        aware.adversarial_accuracy,
        100.0 * (unaware.adversarial_accuracy - aware.adversarial_accuracy)
    );
}
