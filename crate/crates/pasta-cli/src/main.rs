use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use pasta_cli::config::{ExperimentConfig, PayloadSelector};
use pasta_cli::drivers::{
    cmd_attack, cmd_defend, cmd_eval_stealth, cmd_eval_tre, cmd_observe, cmd_pretrain, cmd_prune,
    cmd_strip, cmd_sweep_alpha, AttackVariant,
};
use pasta_core::trigger::PatchIndex;

/// Patch-wise backdoor workbench: train, attack, evaluate, defend.
#[derive(Parser)]
#[command(name = "pasta", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment document (TOML); mutually exclusive with --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: desk, bench, or tiny.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the global seed (nested stage seeds are rederived).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut config = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => bail!("--config and --preset are mutually exclusive"),
            (Some(path), None) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => ExperimentConfig::preset("desk")?,
        };
        if let Some(seed) = self.seed {
            config.reseed(seed);
        }
        config.validate()?;
        let out = self.out.clone().unwrap_or_else(|| config.output_dir.clone());
        Ok((config, out))
    }
}

fn parse_location(text: &str) -> Result<PatchIndex> {
    let Some((row, col)) = text.split_once(',') else {
        bail!("location `{text}` is not row,col");
    };
    Ok(PatchIndex {
        row: row.trim().parse()?,
        col: col.trim().parse()?,
    })
}

#[derive(Subcommand)]
enum Command {
    /// Train a clean model and save it as clean.ckpt.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Run the backdoor attack (or a named baseline) from a clean model.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Clean starting checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "pasta")]
        variant: AttackVariant,
        /// Fixed insertion location `row,col` for the location-pinned
        /// variants; defaults to the central patch.
        #[arg(long)]
        location: Option<String>,
        /// Overrides the pixel-disparity weight in both phases.
        #[arg(long)]
        alpha1: Option<f64>,
        /// Overrides the attention-disparity weight in both phases.
        #[arg(long)]
        alpha2: Option<f64>,
    },
    /// Response heatmap of a trained trigger over every patch location.
    EvalTre {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trigger: PathBuf,
    },
    /// Visual and attention stealthiness tables.
    EvalStealth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trigger: PathBuf,
        /// Replaces the configured payload list, e.g. fixed:k=10,
        /// fixed:1,2;3,4, or random:20.
        #[arg(long)]
        payload: Option<String>,
    },
    /// Patch-perturbation, flip-count, attention-blanking, and smoothing
    /// defenses.
    Defend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trigger: PathBuf,
        #[arg(long)]
        payload: Option<String>,
        /// Restricts the smoothing defense to one window size.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Blend-entropy screening histogram.
    Strip {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trigger: PathBuf,
        #[arg(long)]
        payload: Option<String>,
    },
    /// Unit-pruning sweep on the final MLP block.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trigger: PathBuf,
        #[arg(long)]
        payload: Option<String>,
    },
    /// Grid of attacks over the two stealthiness weights.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Pixel-disparity weights, one flag per value.
        #[arg(long = "alpha1", default_values_t = [0.5, 1.0, 2.0])]
        alpha1: Vec<f64>,
        /// Attention-disparity weights, one flag per value.
        #[arg(long = "alpha2", default_values_t = [0.001, 0.005, 0.05])]
        alpha2: Vec<f64>,
    },
    /// The four observation families: replacement vs addition, norm
    /// sweep, and center/corner location pairs.
    Observe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
}

fn override_payload(config: &mut ExperimentConfig, payload: &Option<String>) -> Result<()> {
    if let Some(text) = payload {
        config.eval.payloads = vec![PayloadSelector::parse(text)?];
        config.validate()?;
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain { common } => {
            let (config, out) = common.resolve()?;
            cmd_pretrain(&config, &out)?;
        }
        Command::Attack {
            common,
            model,
            variant,
            location,
            alpha1,
            alpha2,
        } => {
            let (mut config, out) = common.resolve()?;
            if let Some(a1) = alpha1 {
                config.attack.trigger_weights.visual = a1;
                config.attack.model_weights.visual = a1;
            }
            if let Some(a2) = alpha2 {
                config.attack.trigger_weights.attention = a2;
                config.attack.model_weights.attention = a2;
            }
            config.validate()?;
            let location = location.as_deref().map(parse_location).transpose()?;
            cmd_attack(&config, &out, &model, variant, location)?;
        }
        Command::EvalTre {
            common,
            model,
            trigger,
        } => {
            let (config, out) = common.resolve()?;
            cmd_eval_tre(&config, &out, &model, &trigger)?;
        }
        Command::EvalStealth {
            common,
            model,
            trigger,
            payload,
        } => {
            let (mut config, out) = common.resolve()?;
            override_payload(&mut config, &payload)?;
            cmd_eval_stealth(&config, &out, &model, &trigger)?;
        }
        Command::Defend {
            common,
            model,
            trigger,
            payload,
            window,
        } => {
            let (mut config, out) = common.resolve()?;
            override_payload(&mut config, &payload)?;
            if let Some(w) = window {
                if w % 2 == 0 {
                    bail!("--window {w} must be odd");
                }
            }
            cmd_defend(&config, &out, &model, &trigger, window)?;
        }
        Command::Strip {
            common,
            model,
            trigger,
            payload,
        } => {
            let (mut config, out) = common.resolve()?;
            override_payload(&mut config, &payload)?;
            cmd_strip(&config, &out, &model, &trigger)?;
        }
        Command::Prune {
            common,
            model,
            trigger,
            payload,
        } => {
            let (mut config, out) = common.resolve()?;
            override_payload(&mut config, &payload)?;
            cmd_prune(&config, &out, &model, &trigger)?;
        }
        Command::SweepAlpha {
            common,
            model,
            alpha1,
            alpha2,
        } => {
            let (config, out) = common.resolve()?;
            cmd_sweep_alpha(&config, &out, &model, &alpha1, &alpha2)?;
        }
        Command::Observe { common, model } => {
            let (config, out) = common.resolve()?;
            cmd_observe(&config, &out, &model)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
