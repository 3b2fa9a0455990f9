//! Experiment configuration: one TOML document that resolves everything a
//! run needs — dataset, model, training schedules, evaluation payloads, and
//! defense settings — plus the presets the CLI ships with.
//!
//! All randomness flows from the single top-level `seed`: the nested
//! training sections carry their own seed fields so a serialized config is
//! a complete record, and [`ExperimentConfig::reseed`] rederives them from
//! the top-level value whenever it changes (`--seed` override, presets).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pasta_core::eval::PayloadSpec;
use pasta_core::rng::{derive_seed, sample_distinct, stage_rng};
use pasta_core::trainer::{AttackConfig, PretrainConfig};
use pasta_core::trigger::PatchIndex;
use pasta_core::vit::ModelConfig;
use serde::{Deserialize, Serialize};

/// Where the images come from.
///
/// `Synthetic` generates a deterministic ten-class dataset in the standard
/// CIFAR-10 binary layout under `root` (six batch files) on first use, so
/// the same ingestion path serves real and generated data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Cifar10 { root: PathBuf },
    ImageFolder { root: PathBuf, image_size: usize },
    Synthetic { root: PathBuf },
}

impl DatasetSource {
    pub fn root(&self) -> &Path {
        match self {
            Self::Cifar10 { root } | Self::ImageFolder { root, .. } | Self::Synthetic { root } => {
                root
            }
        }
    }
}

/// Dataset section: source, deterministic subset sizes (`None` keeps every
/// record), and per-channel normalization statistics on the 0–1 scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// How trigger copies are placed at evaluation time. `Fixed` lists explicit
/// patch coordinates; `FixedK` draws one `k`-location set from the seed and
/// reuses it for every image; `Random` redraws per image.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PayloadSelector {
    Fixed { locations: Vec<(usize, usize)> },
    FixedK { k: usize },
    Random { k: usize },
}

impl PayloadSelector {
    /// Parses the `--payload` flag: `fixed:1,2;3,4` (explicit row,col list),
    /// `fixed:k=10` (one seeded draw of 10 locations), `random:20` or
    /// `random:k=20` (fresh 20-location draw per image).
    pub fn parse(flag: &str) -> Result<Self> {
        let (kind, rest) = flag
            .split_once(':')
            .with_context(|| format!("payload `{flag}` is not of the form kind:spec"))?;
        let parse_k = |s: &str| -> Result<usize> {
            let digits = s.strip_prefix("k=").unwrap_or(s);
            digits
                .parse::<usize>()
                .with_context(|| format!("payload count `{digits}` is not an integer"))
        };
        match kind {
            "random" => Ok(Self::Random { k: parse_k(rest)? }),
            "fixed" => {
                if rest.starts_with("k=") {
                    return Ok(Self::FixedK { k: parse_k(rest)? });
                }
                let mut locations = Vec::new();
                for pair in rest.split(';') {
                    let (r, c) = pair
                        .split_once(',')
                        .with_context(|| format!("location `{pair}` is not row,col"))?;
                    locations.push((
                        r.trim().parse().with_context(|| format!("bad row in `{pair}`"))?,
                        c.trim().parse().with_context(|| format!("bad col in `{pair}`"))?,
                    ));
                }
                Ok(Self::Fixed { locations })
            }
            other => bail!("unknown payload kind `{other}` (expected fixed or random)"),
        }
    }

    /// Resolves to a concrete payload on a `grid×grid` patch layout. Seeded
    /// draws are keyed by the selector's own `k` so differently sized
    /// payloads in one run never share locations by accident.
    pub fn resolve(&self, grid: usize, seed: u64) -> Result<PayloadSpec> {
        let spec = match self {
            Self::Fixed { locations } => PayloadSpec::Fixed {
                locations: locations
                    .iter()
                    .map(|&(row, col)| PatchIndex { row, col })
                    .collect(),
            },
            Self::FixedK { k } => {
                if *k == 0 || *k > grid * grid {
                    bail!("fixed payload k={k} out of range for a {grid}x{grid} grid");
                }
                let mut rng = stage_rng(seed, "payload-fixed", *k as u64);
                let locations = sample_distinct(grid * grid, *k, &mut rng)
                    .into_iter()
                    .map(|flat| PatchIndex::from_flat(flat, grid))
                    .collect();
                PayloadSpec::Fixed { locations }
            }
            Self::Random { k } => PayloadSpec::random(*k, derive_seed(seed, "payload-random", *k as u64)),
        };
        spec.validate(grid)?;
        Ok(spec)
    }

    /// Short form used in CSV rows and file names.
    pub fn label(&self) -> String {
        match self {
            Self::Fixed { locations } => format!("fixed[{}]", locations.len()),
            Self::FixedK { k } => format!("fixed-k{k}"),
            Self::Random { k } => format!("random-k{k}"),
        }
    }
}

/// Evaluation section: how many test images the metrics run over (`None`
/// keeps the whole test split) and which payloads to report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub subset: Option<usize>,
    pub payloads: Vec<PayloadSelector>,
}

/// Which defense protocols `defend` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    PatchOps,
    Dbavt,
    Bavt,
    Gaussian,
}

/// Defense section shared by `defend`, `strip`, and `prune`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub enabled: Vec<DefenseKind>,
    /// Perturbation repetitions per image for patch ops and DBAVT.
    pub repetitions: usize,
    pub gaussian_windows: Vec<usize>,
    /// Clean images blended into each probe by the entropy test.
    pub strip_blends: usize,
    pub strip_bins: usize,
    pub prune_ratios: Vec<f64>,
    /// Clean images used to calibrate detection thresholds and unit
    /// activity rankings.
    pub calibration: usize,
}

/// The whole experiment: everything a run reads, and the exact document the
/// manifest snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    pub defense: DefenseConfig,
}

impl ExperimentConfig {
    /// Desk-scale default: real CIFAR-10 from `data/cifar-10-batches-bin`,
    /// 10k-train/2k-test subsets, a six-block model, ten attack epochs.
    pub fn desk() -> Self {
        let mut cfg = Self {
            seed: 7,
            output_dir: PathBuf::from("runs/desk"),
            dataset: DatasetConfig {
                source: DatasetSource::Cifar10 {
                    root: PathBuf::from("data/cifar-10-batches-bin"),
                },
                train_subset: Some(10_000),
                test_subset: Some(2_000),
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
            model: ModelConfig::desk(),
            pretrain: PretrainConfig {
                epochs: 30,
                ..PretrainConfig::standard(0)
            },
            attack: AttackConfig {
                total_epochs: 10,
                ..AttackConfig::standard(0)
            },
            eval: EvalConfig {
                subset: Some(512),
                payloads: vec![
                    PayloadSelector::Random { k: 1 },
                    PayloadSelector::FixedK { k: 10 },
                    PayloadSelector::Random { k: 20 },
                ],
            },
            defense: DefenseConfig {
                enabled: vec![
                    DefenseKind::PatchOps,
                    DefenseKind::Dbavt,
                    DefenseKind::Bavt,
                    DefenseKind::Gaussian,
                ],
                repetitions: 100,
                gaussian_windows: vec![3, 5],
                strip_blends: 16,
                strip_bins: 20,
                prune_ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
                calibration: 256,
            },
        };
        cfg.reseed(cfg.seed);
        cfg
    }

    /// Bench-scale preset: generated data, a four-block model, schedules
    /// sized so a full pretrain-attack-evaluate cycle fits in minutes on one
    /// CPU core.
    pub fn bench() -> Self {
        let mut cfg = Self::desk();
        cfg.output_dir = PathBuf::from("runs/bench");
        cfg.dataset.source = DatasetSource::Synthetic {
            root: PathBuf::from("data/synthetic-cifar"),
        };
        cfg.dataset.train_subset = Some(2_000);
        cfg.dataset.test_subset = Some(512);
        cfg.dataset.mean = vec![0.5, 0.5, 0.5];
        cfg.dataset.std = vec![0.25, 0.25, 0.25];
        cfg.model = ModelConfig {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 64,
            num_heads: 4,
            depth: 4,
            mlp_ratio: 4,
            num_classes: 10,
        };
        cfg.pretrain.epochs = 6;
        cfg.attack.total_epochs = 6;
        cfg.attack.poison_ratio = 0.05;
        cfg.eval.subset = Some(256);
        cfg.defense.repetitions = 20;
        cfg.defense.calibration = 128;
        cfg.reseed(cfg.seed);
        cfg
    }

    /// Smoke-test preset: everything shrunk until a full command finishes in
    /// seconds; useful output quality is not a goal.
    pub fn tiny() -> Self {
        let mut cfg = Self::bench();
        cfg.output_dir = PathBuf::from("runs/tiny");
        cfg.dataset.train_subset = Some(256);
        cfg.dataset.test_subset = Some(96);
        cfg.model = ModelConfig {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 32,
            num_heads: 2,
            depth: 2,
            mlp_ratio: 2,
            num_classes: 10,
        };
        cfg.pretrain.epochs = 1;
        cfg.attack.total_epochs = 1;
        cfg.attack.trigger_passes = 1;
        cfg.attack.model_passes = 1;
        cfg.attack.poison_ratio = 0.1;
        cfg.attack.trigger_fraction = 0.1;
        cfg.eval.subset = Some(64);
        cfg.eval.payloads = vec![
            PayloadSelector::Random { k: 1 },
            PayloadSelector::FixedK { k: 4 },
            PayloadSelector::Random { k: 8 },
        ];
        cfg.defense.repetitions = 3;
        cfg.defense.strip_blends = 4;
        cfg.defense.calibration = 32;
        cfg.defense.prune_ratios = vec![0.0, 0.5];
        cfg.reseed(cfg.seed);
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "bench" => Ok(Self::bench()),
            "tiny" => Ok(Self::tiny()),
            other => bail!("unknown preset `{other}` (expected desk, bench, or tiny)"),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing experiment config")
    }

    /// Sets the top-level seed and rederives every nested stage seed from
    /// it, keeping the "all randomness flows from one seed" contract.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = derive_seed(seed, "pretrain", 0);
        self.attack.seed = derive_seed(seed, "attack", 0);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.attack.validate()?;
        let channels = self.model.channels;
        if self.dataset.mean.len() != channels || self.dataset.std.len() != channels {
            bail!(
                "normalization stats cover {} channels, model expects {channels}",
                self.dataset.mean.len().min(self.dataset.std.len())
            );
        }
        if self.eval.payloads.is_empty() {
            bail!("at least one evaluation payload is required");
        }
        let grid = self.model.grid_size();
        for payload in &self.eval.payloads {
            payload.resolve(grid, self.seed)?;
        }
        if self.defense.repetitions == 0 {
            bail!("defense repetitions must be positive");
        }
        for &window in &self.defense.gaussian_windows {
            if window % 2 == 0 || window == 0 {
                bail!("gaussian window {window} must be odd");
            }
        }
        for &ratio in &self.defense.prune_ratios {
            if !(0.0..1.0).contains(&ratio) {
                bail!("prune ratio {ratio} outside [0, 1)");
            }
        }
        if let DatasetSource::ImageFolder { image_size, .. } = self.dataset.source {
            if image_size != self.model.image_size {
                bail!(
                    "image folder resize {image_size} disagrees with model input {}",
                    self.model.image_size
                );
            }
        }
        Ok(())
    }

    /// Payloads resolved against this config's grid and seed, labeled for
    /// reporting.
    pub fn resolved_payloads(&self) -> Result<Vec<(String, PayloadSpec)>> {
        let grid = self.model.grid_size();
        self.eval
            .payloads
            .iter()
            .map(|sel| Ok((sel.label(), sel.resolve(grid, self.seed)?)))
            .collect()
    }
}
