//! Training configuration and the flat key-value config file format.

use crate::error::{Error, Result};
use crate::threat::{ShapeMask, ThreatKind, ThreatModel};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    All,
    Random { count: usize },
    Guided { count: usize },
    Pooled { group: (usize, usize) },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::All => "all",
            Strategy::Random { .. } => "random",
            Strategy::Guided { .. } => "guided",
            Strategy::Pooled { .. } => "pooled",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub threat: ThreatModel,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f32,
    pub lr_halve_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Guided softmax temperature.
    pub temperature: f32,
    /// Epochs between certified-accuracy samples in the metric log (0 = never).
    pub cert_every: usize,
    /// Held-out images per certified-accuracy sample.
    pub cert_sample: usize,
}

impl TrainConfig {
    /// MNIST defaults: lr 5e-4, 100 epochs, warm-up 61, halving every 10.
    pub fn mnist_defaults(strategy: Strategy, threat: ThreatModel) -> Self {
        TrainConfig {
            strategy,
            threat,
            epochs: 100,
            warmup_epochs: 61,
            lr: 5e-4,
            lr_halve_every: 10,
            batch_size: 128,
            seed: 0,
            temperature: 1.0,
            cert_every: 0,
            cert_sample: 200,
        }
    }

    /// CIFAR-10 defaults: lr 1e-3, 200 epochs, warm-up 121.
    pub fn cifar_defaults(strategy: Strategy, threat: ThreatModel) -> Self {
        TrainConfig {
            epochs: 200,
            warmup_epochs: 121,
            lr: 1e-3,
            ..TrainConfig::mnist_defaults(strategy, threat)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.threat.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) cannot exceed epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        match self.strategy {
            Strategy::Random { count } | Strategy::Guided { count } if count == 0 => {
                return Err(Error::Config("strategy patch count must be at least 1".into()));
            }
            _ => {}
        }
        if self.temperature < 0.0 {
            return Err(Error::Config("temperature must be nonnegative".into()));
        }
        if matches!(self.strategy, Strategy::Guided { .. })
            && matches!(self.threat.kind, ThreatKind::Sparse { .. })
        {
            return Err(Error::Config(
                "guided strategy applies to patch threats only".into(),
            ));
        }
        Ok(())
    }

    /// Parses a `key = value` config file. Unknown keys are errors.
    ///
    /// Recognized keys: strategy, patches, pool-groups, patch-size, sparse,
    /// dataset, epochs, warmup, lr, lr-halve-every, batch-size, seed,
    /// temperature, cert-every, cert-sample.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_key_values(&text).map_err(|detail| Error::Format {
            path: path.display().to_string(),
            detail,
            offset: 0,
        })
    }

    pub fn from_key_values(text: &str) -> std::result::Result<Self, String> {
        let mut strategy_name = "all".to_string();
        let mut patches = 10usize;
        let mut pool_groups = (2usize, 2usize);
        let mut patch_size = 2usize;
        let mut sparse: Option<usize> = None;
        let mut dataset = "mnist".to_string();
        let mut epochs: Option<usize> = None;
        let mut warmup: Option<usize> = None;
        let mut lr: Option<f32> = None;
        let mut lr_halve_every = 10usize;
        let mut batch_size = 128usize;
        let mut seed = 0u64;
        let mut temperature = 1.0f32;
        let mut cert_every = 0usize;
        let mut cert_sample = 200usize;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = value'", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| format!("line {}: bad {what} '{value}'", lineno + 1);
            match key {
                "strategy" => strategy_name = value.to_string(),
                "patches" => patches = value.parse().map_err(|_| bad("count"))?,
                "pool-groups" => {
                    let (a, b) = value
                        .split_once('x')
                        .ok_or_else(|| bad("pool geometry (want GxG)"))?;
                    pool_groups = (
                        a.trim().parse().map_err(|_| bad("pool rows"))?,
                        b.trim().parse().map_err(|_| bad("pool cols"))?,
                    );
                }
                "patch-size" => patch_size = value.parse().map_err(|_| bad("patch size"))?,
                "sparse" => sparse = Some(value.parse().map_err(|_| bad("sparse k"))?),
                "dataset" => dataset = value.to_string(),
                "epochs" => epochs = Some(value.parse().map_err(|_| bad("epochs"))?),
                "warmup" => warmup = Some(value.parse().map_err(|_| bad("warmup"))?),
                "lr" => lr = Some(value.parse().map_err(|_| bad("learning rate"))?),
                "lr-halve-every" => {
                    lr_halve_every = value.parse().map_err(|_| bad("halving period"))?
                }
                "batch-size" => batch_size = value.parse().map_err(|_| bad("batch size"))?,
                "seed" => seed = value.parse().map_err(|_| bad("seed"))?,
                "temperature" => temperature = value.parse().map_err(|_| bad("temperature"))?,
                "cert-every" => cert_every = value.parse().map_err(|_| bad("period"))?,
                "cert-sample" => cert_sample = value.parse().map_err(|_| bad("sample size"))?,
                other => return Err(format!("line {}: unknown key '{other}'", lineno + 1)),
            }
        }

        let channels = match dataset.as_str() {
            "mnist" => 1,
            "cifar10" => 3,
            other => return Err(format!("unknown dataset '{other}'")),
        };
        let strategy = match strategy_name.as_str() {
            "all" => Strategy::All,
            "random" => Strategy::Random { count: patches },
            "guided" => Strategy::Guided { count: patches },
            "pooled" => Strategy::Pooled { group: pool_groups },
            other => return Err(format!("unknown strategy '{other}'")),
        };
        let threat = match sparse {
            Some(k) => ThreatModel::sparse(k, channels),
            None => {
                let mask = ShapeMask::square(patch_size).map_err(|e| e.to_string())?;
                ThreatModel::patch(mask, channels)
            }
        };
        let mut config = if dataset == "cifar10" {
            TrainConfig::cifar_defaults(strategy, threat)
        } else {
            TrainConfig::mnist_defaults(strategy, threat)
        };
        if let Some(e) = epochs {
            config.epochs = e;
        }
        if let Some(w) = warmup {
            config.warmup_epochs = w;
        }
        if let Some(l) = lr {
            config.lr = l;
        }
        config.lr_halve_every = lr_halve_every;
        config.batch_size = batch_size;
        config.seed = seed;
        config.temperature = temperature;
        config.cert_every = cert_every;
        config.cert_sample = cert_sample;
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let text = "\
# certificate training
strategy = random
patches = 10
patch-size = 2
dataset = mnist
epochs = 40
warmup = 25
lr = 5e-4
seed = 7
";
        let c = TrainConfig::from_key_values(text).unwrap();
        assert_eq!(c.strategy, Strategy::Random { count: 10 });
        assert_eq!(c.epochs, 40);
        assert_eq!(c.warmup_epochs, 25);
        assert_eq!(c.seed, 7);
        assert_eq!(c.batch_size, 128);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = TrainConfig::from_key_values("epocs = 40\n").unwrap_err();
        assert!(err.contains("unknown key 'epocs'"), "{err}");
    }

    #[test]
    fn warmup_cannot_exceed_epochs() {
        let err = TrainConfig::from_key_values("epochs = 10\nwarmup = 20\n").unwrap_err();
        assert!(err.contains("warmup"), "{err}");
    }

    #[test]
    fn guided_sparse_combination_is_rejected() {
        let err = TrainConfig::from_key_values("strategy = guided\nsparse = 1\n").unwrap_err();
        assert!(err.contains("guided"), "{err}");
    }
}
