//! Command implementations. Each driver loads what it needs, runs the
//! protocol, writes its artifacts plus a manifest into the output
//! directory, and returns the manifest for inspection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array2, Array3};
use pasta_core::data::ImageBatch;
use pasta_core::defense::{
    bavt_evaluation, dbavt_detect, entropy_histogram, fine_prune, gaussian_evaluation,
    patch_op_evaluation, strip_entropy, write_entropy_histogram_csv, DBAVTConfig, DefenseOutcome,
    PatchOp, PatchOpConfig,
};
use pasta_core::eval::{
    accuracy, apply_payload, asr, attention_stealth, emit_heatmap, predict_labels, rep_visual_l2,
    tre_heatmap, visual_stealth, PayloadSpec, TREHeatmap,
};
use pasta_core::formats::{
    load_checkpoint, load_trigger, save_checkpoint, save_trigger, write_loss_log_csv,
};
use pasta_core::rng::{derive_seed, stage_rng};
use pasta_core::trainer::{
    pretrain_clean, run_badnets_rep_baseline, run_no_attn_ablation, run_pasta,
    run_pasta_with_sampler, run_single_location_baseline, NoSink, TrainResult,
};
use pasta_core::trigger::{
    clamp_trigger, default_mis, insert_rep, LocationSampler, MISConfig, PatchIndex, Trigger,
};
use pasta_core::vit::ViTParams;
use rand::Rng;

use crate::config::{DefenseKind, ExperimentConfig};
use crate::data_io::{load_dataset, LoadedData};
use crate::manifest::{dataset_digest, RunManifest};

/// Which training recipe `attack` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AttackVariant {
    /// Full attack: hierarchical multi-location sampling, both
    /// stealthiness terms.
    Pasta,
    /// One fixed insertion location end to end.
    SingleLocation,
    /// Patch-replacement baseline with a fixed random pattern; the
    /// additive trigger stays zero.
    BadnetsRep,
    /// Full attack with the attention term weighted zero (still logged).
    NoAttn,
}

impl AttackVariant {
    fn name(self) -> &'static str {
        match self {
            Self::Pasta => "pasta",
            Self::SingleLocation => "single-location",
            Self::BadnetsRep => "badnets-rep",
            Self::NoAttn => "no-attn",
        }
    }
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn load_model_checked(config: &ExperimentConfig, path: &Path) -> Result<ViTParams<f32>> {
    let (params, _) =
        load_checkpoint(path).with_context(|| format!("loading model {}", path.display()))?;
    if *params.config() != config.model {
        bail!(
            "checkpoint {} was trained as {:?}, the config expects {:?}",
            path.display(),
            params.config(),
            config.model
        );
    }
    Ok(params)
}

fn load_trigger_checked(config: &ExperimentConfig, path: &Path) -> Result<Trigger<f32>> {
    let (trigger, _, _) =
        load_trigger(path).with_context(|| format!("loading trigger {}", path.display()))?;
    if trigger.channels() != config.model.channels || trigger.patch_size() != config.model.patch_size
    {
        bail!(
            "trigger {} is {}x{}x{}, the model expects {}x{}x{}",
            path.display(),
            trigger.channels(),
            trigger.patch_size(),
            trigger.patch_size(),
            config.model.channels,
            config.model.patch_size,
            config.model.patch_size
        );
    }
    Ok(trigger)
}

/// The deterministic slice of the test split the metrics run over.
fn eval_slice(config: &ExperimentConfig, test: &ImageBatch<f32>) -> ImageBatch<f32> {
    match config.eval.subset {
        Some(n) => test.head(n.min(test.len())),
        None => test.head(test.len()),
    }
}

/// Fixed replacement pattern for the patch-replacement baseline: uniform
/// over the data value range, drawn once from the attack seed.
fn rep_pattern(config: &ExperimentConfig, data: &ImageBatch<f32>) -> Array3<f32> {
    let (low, upp) = match config.attack.trigger_bounds {
        Some((lo, hi)) => (lo as f32, hi as f32),
        None => data.value_range(),
    };
    let p = config.model.patch_size;
    let mut rng = stage_rng(config.attack.seed, "rep-pattern", 0);
    Array3::from_shape_simple_fn((config.model.channels, p, p), || {
        low + (upp - low) * rng.gen::<f32>()
    })
}

/// Attack success rate of patch replacement at one location: the fraction
/// of non-target images steered to the target once the patch is
/// overwritten with `pattern`.
fn rep_asr(
    params: &ViTParams<f32>,
    pattern: &Array3<f32>,
    location: PatchIndex,
    data: &ImageBatch<f32>,
    target: u8,
) -> Result<f64> {
    let eligible: Vec<usize> = (0..data.len())
        .filter(|&i| data.labels[i] != target)
        .collect();
    if eligible.is_empty() {
        bail!("no sample off the target class to measure");
    }
    let subset = data.subset(&eligible);
    let batch = ImageBatch {
        images: insert_rep(&subset.images, pattern, location)?,
        labels: subset.labels.clone(),
    };
    let predictions = predict_labels(params, &batch)?;
    let hits = predictions.iter().filter(|&&p| p == target).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean pixel-space disparity the replacement pattern causes at one
/// location, in normalized units (the additive analog is the trigger
/// norm).
fn rep_disparity_l2(
    data: &ImageBatch<f32>,
    pattern: &Array3<f32>,
    location: PatchIndex,
) -> Result<f64> {
    let replaced = insert_rep(&data.images, pattern, location)?;
    let diff = &replaced - &data.images;
    let per_image: Vec<f64> = diff
        .outer_iter()
        .map(|img| img.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
        .collect();
    Ok(per_image.iter().sum::<f64>() / per_image.len().max(1) as f64)
}

/// Replacement analog of the trigger-response heatmap: one replacement ASR
/// per patch location.
fn rep_tre_heatmap(
    params: &ViTParams<f32>,
    pattern: &Array3<f32>,
    data: &ImageBatch<f32>,
    target: u8,
) -> Result<TREHeatmap> {
    let grid = params.config().grid_size();
    let mut rates = Array2::<f64>::zeros((grid, grid));
    for row in 0..grid {
        for col in 0..grid {
            rates[[row, col]] = rep_asr(params, pattern, PatchIndex { row, col }, data, target)?;
        }
    }
    TREHeatmap::from_grid(rates).map_err(Into::into)
}

/// Scales a trigger to a target l2 norm and reprojects it into its bounds;
/// the achieved norm can fall short when the bounds bite.
fn rescale_trigger(trigger: &Trigger<f32>, target_l2: f64) -> Result<Trigger<f32>> {
    let norm = f64::from(trigger.l2());
    if norm <= 0.0 {
        bail!("cannot rescale a zero trigger");
    }
    let factor = (target_l2 / norm) as f32;
    let scaled = Trigger::new(
        trigger.values.mapv(|v| (v * factor).clamp(trigger.low, trigger.upp)),
        trigger.low,
        trigger.upp,
    )?;
    Ok(clamp_trigger(&scaled))
}

fn write_text(manifest: &mut RunManifest, out: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = out.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.record_file(out, &path)?;
    Ok(path)
}

fn record_heatmap(
    manifest: &mut RunManifest,
    out: &Path,
    name: &str,
    heatmap: &TREHeatmap,
) -> Result<()> {
    let (csv, pgm) = emit_heatmap(heatmap, &out.join(name))?;
    manifest.record_file(out, &csv)?;
    manifest.record_file(out, &pgm)?;
    Ok(())
}

fn outcomes_csv(rows: &[DefenseOutcome]) -> String {
    let mut text = String::from("defense,acc_before,asr_before,acc_after,asr_after\n");
    for row in rows {
        let _ = writeln!(
            text,
            "{},{:.6},{:.6},{:.6},{:.6}",
            row.defense, row.acc_before, row.asr_before, row.acc_after, row.asr_after
        );
    }
    text
}

/// Labeled value grid (alpha sweeps): CSV with axis headers plus a
/// grayscale map scaled to the grid maximum.
fn write_grid(
    manifest: &mut RunManifest,
    out: &Path,
    name: &str,
    row_label: &str,
    rows: &[f64],
    cols: &[f64],
    values: &Array2<f64>,
) -> Result<()> {
    let mut text = String::new();
    let _ = write!(text, "{row_label}");
    for col in cols {
        let _ = write!(text, ",{col}");
    }
    text.push('\n');
    for (i, row) in rows.iter().enumerate() {
        let _ = write!(text, "{row}");
        for j in 0..cols.len() {
            let _ = write!(text, ",{:.6}", values[[i, j]]);
        }
        text.push('\n');
    }
    write_text(manifest, out, &format!("{name}.csv"), &text)?;

    let peak = values.iter().cloned().fold(0.0f64, f64::max);
    let mut pgm = format!("P2\n{} {}\n255\n", cols.len(), rows.len());
    for i in 0..rows.len() {
        let line: Vec<String> = (0..cols.len())
            .map(|j| {
                let v = if peak > 0.0 { values[[i, j]] / peak } else { 0.0 };
                format!("{}", (v * 255.0).round().clamp(0.0, 255.0) as u8)
            })
            .collect();
        pgm.push_str(&line.join(" "));
        pgm.push('\n');
    }
    write_text(manifest, out, &format!("{name}.pgm"), &pgm)?;
    Ok(())
}

fn load_stage(config: &ExperimentConfig, manifest: &mut RunManifest) -> Result<LoadedData> {
    let data = manifest.stage("load-data", || load_dataset(config))?;
    manifest.dataset_digest = dataset_digest(&data.train, &data.test);
    manifest.classes = data.classes.clone();
    Ok(data)
}

/// Trains a clean model and persists it as `clean.ckpt` with its per-epoch
/// loss curve.
pub fn cmd_pretrain(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    ensure_out(out)?;
    let mut manifest = RunManifest::new("pretrain", config)?;
    let data = load_stage(config, &mut manifest)?;
    let result = manifest.stage("pretrain", || {
        pretrain_clean(&config.model, &data.train, &data.test, &config.pretrain)
            .map_err(Into::into)
    })?;

    let ckpt = out.join("clean.ckpt");
    save_checkpoint(&result.params, config.seed, &ckpt)?;
    manifest.record_file(out, &ckpt)?;

    let mut curve = String::from("epoch,train_loss\n");
    for (epoch, loss) in result.epoch_losses.iter().enumerate() {
        let _ = writeln!(curve, "{epoch},{loss:.12e}");
    }
    write_text(&mut manifest, out, "pretrain_losses.csv", &curve)?;

    manifest.record_metric("val_accuracy", result.val_accuracy);
    manifest.write(out)?;
    println!(
        "pretrain: validation accuracy {:.4} ({} epochs) -> {}",
        result.val_accuracy,
        config.pretrain.epochs,
        ckpt.display()
    );
    Ok(manifest)
}

/// Runs the attack (or a named baseline) from a clean checkpoint, writing
/// the backdoored model, the trained trigger, and the full loss log.
pub fn cmd_attack(
    config: &ExperimentConfig,
    out: &Path,
    model: &Path,
    variant: AttackVariant,
    location: Option<PatchIndex>,
) -> Result<RunManifest> {
    ensure_out(out)?;
    let mut manifest = RunManifest::new("attack", config)?;
    let data = load_stage(config, &mut manifest)?;
    let params0 = load_model_checked(config, model)?;
    let grid = config.model.grid_size();
    let center = PatchIndex {
        row: grid / 2,
        col: grid / 2,
    };
    let fixed = location.unwrap_or(center);
    fixed.validate(grid)?;

    let attack = &config.attack;
    let result: TrainResult<f32> = manifest.stage("attack", || {
        let run = match variant {
            AttackVariant::Pasta => run_pasta(&params0, &data.train, attack),
            AttackVariant::SingleLocation => {
                run_single_location_baseline(&params0, &data.train, attack, fixed)
            }
            AttackVariant::BadnetsRep => {
                let pattern = rep_pattern(config, &data.train);
                run_badnets_rep_baseline(&params0, &data.train, attack, &pattern, fixed)
            }
            AttackVariant::NoAttn => run_no_attn_ablation(&params0, &data.train, attack),
        };
        run.map_err(Into::into)
    })?;
    manifest
        .stage_seconds
        .insert("attack-trigger-phase".into(), result.trigger_secs);
    manifest
        .stage_seconds
        .insert("attack-model-phase".into(), result.model_secs);

    let ckpt = out.join("backdoored.ckpt");
    save_checkpoint(&result.params, config.seed, &ckpt)?;
    manifest.record_file(out, &ckpt)?;

    let mis: Option<MISConfig> = match variant {
        AttackVariant::Pasta | AttackVariant::NoAttn => Some(match &attack.mis {
            Some(m) => m.clone(),
            None => default_mis(&config.model)?,
        }),
        AttackVariant::SingleLocation | AttackVariant::BadnetsRep => None,
    };
    let trig = out.join("trigger.trig");
    save_trigger(&result.trigger, mis.as_ref(), config.seed, &trig)?;
    manifest.record_file(out, &trig)?;

    let losses = out.join("losses.csv");
    write_loss_log_csv(&result.log, &losses)?;
    manifest.record_file(out, &losses)?;

    if variant == AttackVariant::BadnetsRep {
        let pattern = rep_pattern(config, &data.train);
        manifest.record_metric(
            "rep_pattern_display_l2",
            rep_visual_l2(&eval_slice(config, &data.test), &pattern, fixed, &data.norm)?,
        );
    }
    if matches!(variant, AttackVariant::SingleLocation | AttackVariant::BadnetsRep) {
        manifest.record_metric("location_row", fixed.row as f64);
        manifest.record_metric("location_col", fixed.col as f64);
    }

    let subset = eval_slice(config, &data.test);
    let acc_clean_model = manifest.stage("eval-quick", || {
        let before = accuracy(&params0, &subset)?;
        let after = accuracy(&result.params, &subset)?;
        manifest_metrics_quick(&result, before, after)
    })?;
    for (name, value) in acc_clean_model {
        manifest.record_metric(&name, value);
    }

    manifest.write(out)?;
    println!(
        "attack[{}]: model -> {}, trigger l2 {:.4}, loss rows {}",
        variant.name(),
        ckpt.display(),
        result.trigger.l2(),
        result.log.len()
    );
    Ok(manifest)
}

fn manifest_metrics_quick(
    result: &TrainResult<f32>,
    acc_before: f64,
    acc_after: f64,
) -> Result<Vec<(String, f64)>> {
    Ok(vec![
        ("acc_clean_before".into(), acc_before),
        ("acc_clean_after".into(), acc_after),
        ("trigger_l2".into(), f64::from(result.trigger.l2())),
        ("poisoned".into(), result.partition.bd.len() as f64),
    ])
}

/// Trigger-response heatmap over every patch location.
pub fn cmd_eval_tre(
    config: &ExperimentConfig,
    out: &Path,
    model: &Path,
    trigger_path: &Path,
) -> Result<RunManifest> {
    ensure_out(out)?;
    let mut manifest = RunManifest::new("eval-tre", config)?;
    let data = load_stage(config, &mut manifest)?;
    let params = load_model_checked(config, model)?;
    let trigger = load_trigger_checked(config, trigger_path)?;
    let subset = eval_slice(config, &data.test);

    let heatmap = manifest.stage("tre", || {
        tre_heatmap(&params, &trigger, &subset, config.attack.target).map_err(Into::into)
    })?;
    record_heatmap(&mut manifest, out, "tre", &heatmap)?;
    manifest.record_metric("tre", heatmap.tre);
    manifest.record_metric("eval_images", subset.len() as f64);
    manifest.write(out)?;
    println!("eval-tre: mean response {:.4} over {} locations", heatmap.tre, heatmap.grid.len());
    Ok(manifest)
}

/// Visual and attention disparity tables for every configured payload.
pub fn cmd_eval_stealth(
    config: &ExperimentConfig,
    out: &Path,
    model: &Path,
    trigger_path: &Path,
) -> Result<RunManifest> {
    ensure_out(out)?;
    let mut manifest = RunManifest::new("eval-stealth", config)?;
    let data = load_stage(config, &mut manifest)?;
    let params = load_model_checked(config, model)?;
    let trigger = load_trigger_checked(config, trigger_path)?;
    let subset = eval_slice(config, &data.test);
    let layer = config.attack.disparity_layer_for(&config.model);
    let payloads = config.resolved_payloads()?;

    let mut summary = String::from("payload,visual_l2,psnr_db,ssim,attention_l2,apsnr_db,ares\n");
    let mut per_image = String::from("payload,index,visual_l2,psnr_db,ssim,attention_l2\n");
    for (label, payload) in &payloads {
        let (visual, attention) = manifest.stage(&format!("stealth-{label}"), || {
            let visual = visual_stealth(&subset, &trigger, payload, &data.norm)?;
            let attention = attention_stealth(&params, &subset, &trigger, payload, layer)?;
            Ok((visual, attention))
        })?;
        let _ = writeln!(
            summary,
            "{label},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            visual.mean.l2,
            visual.mean.psnr_db,
            visual.mean.ssim,
            attention.mean.l2,
            attention.mean.apsnr_db,
            attention.mean.ares
        );
        for (index, (v, a)) in visual.per_image.iter().zip(&attention.per_image).enumerate() {
            let _ = writeln!(
                per_image,
                "{label},{index},{:.6},{:.6},{:.6},{:.6}",
                v.l2, v.psnr_db, v.ssim, a.l2
            );
        }
        manifest.record_metric(&format!("visual_l2[{label}]"), visual.mean.l2);
        manifest.record_metric(&format!("attention_l2[{label}]"), attention.mean.l2);
    }
    write_text(&mut manifest, out, "stealth.csv", &summary)?;
    write_text(&mut manifest, out, "stealth_per_image.csv", &per_image)?;

    let pattern = rep_pattern(config, &data.train);
    let grid = config.model.grid_size();
    let center = PatchIndex { row: grid / 2, col: grid / 2 };
    manifest.record_metric(
        "rep_pattern_display_l2",
        rep_visual_l2(&subset, &pattern, center, &data.norm)?,
    );
    manifest.record_metric("trigger_l2", f64::from(trigger.l2()));
    manifest.write(out)?;
    println!("eval-stealth: {} payloads over {} images", payloads.len(), subset.len());
    Ok(manifest)
}

/// Inference-time defense suite: patch perturbations, flip-count
/// detection, attention-guided blanking, and Gaussian smoothing.
pub fn cmd_defend(
    config: &ExperimentConfig,
    out: &Path,
    model: &Path,
    trigger_path: &Path,
    window_override: Option<usize>,
) -> Result<RunManifest> {
    ensure_out(out)?;
    let mut manifest = RunManifest::new("defend", config)?;
    let data = load_stage(config, &mut manifest)?;
    let params = load_model_checked(config, model)?;
    let trigger = load_trigger_checked(config, trigger_path)?;
    let subset = eval_slice(config, &data.test);
    let payloads = config.resolved_payloads()?;
    let specs: Vec<PayloadSpec> = payloads.iter().map(|(_, p)| p.clone()).collect();
    let target = config.attack.target;

    let mut rows: Vec<DefenseOutcome> = Vec::new();
    if config.defense.enabled.contains(&DefenseKind::PatchOps) {
        let ops = [
            PatchOp::Identity,
            PatchOp::Drop,
            PatchOp::Shuffle,
            PatchOp::DropAndShuffle,
        ];
        let op_config = PatchOpConfig {
            repetitions: config.defense.repetitions,
            seed: derive_seed(config.seed, "defend-patch-ops", 0),
        };
        let mut outcome = manifest.stage("patch-ops", || {
            patch_op_evaluation(&params, &trigger, &subset, &specs, target, &ops, &op_config)
                .map_err(Into::into)
        })?;
        rows.append(&mut outcome);
    }

    if config.defense.enabled.contains(&DefenseKind::Bavt) {
        for (label, payload) in &payloads {
            let outcome = manifest.stage(&format!("bavt-{label}"), || {
                bavt_evaluation(&params, &trigger, &subset, payload, target).map_err(Into::into)
            })?;
            rows.push(outcome);
        }
    }

    if config.defense.enabled.contains(&DefenseKind::Gaussian) {
        let windows = match window_override {
            Some(w) => vec![w],
            None => config.defense.gaussian_windows.clone(),
        };
        for window in windows {
            for (label, payload) in &payloads {
                let outcome = manifest.stage(&format!("gaussian{window}-{label}"), || {
                    gaussian_evaluation(&params, &trigger, &subset, payload, target, window)
                        .map_err(Into::into)
                })?;
                rows.push(outcome);
            }
        }
    }
    write_text(&mut manifest, out, "defense.csv", &outcomes_csv(&rows))?;

    if config.defense.enabled.contains(&DefenseKind::Dbavt) {
        let calib = data.train.head(config.defense.calibration.min(data.train.len()));
        let poisoned = apply_payload(&subset, &trigger, &specs[0], 0)?;
        let dbavt_config = DBAVTConfig {
            repetitions: config.defense.repetitions,
            seed: derive_seed(config.seed, "defend-dbavt", 0),
        };
        let report = manifest.stage("dbavt", || {
            dbavt_detect(&params, &calib, &subset, &poisoned, &dbavt_config).map_err(Into::into)
        })?;
        let text = format!(
            "drop_threshold,shuffle_threshold,fnr,tpr\n{},{},{:.6},{:.6}\n",
            report.drop_threshold, report.shuffle_threshold, report.fnr, report.tpr
        );
        write_text(&mut manifest, out, "dbavt.csv", &text)?;
        manifest.record_metric("dbavt_fnr", report.fnr);
        manifest.record_metric("dbavt_tpr", report.tpr);
    }

    manifest.write(out)?;
    println!("defend: {} outcome rows over {} images", rows.len(), subset.len());
    Ok(manifest)
}

/// Blend-entropy screening: per-sample prediction entropy under clean
/// blending, histogrammed for clean versus poisoned inputs.
pub fn cmd_strip(
    config: &ExperimentConfig,
    out: &Path,
    model: &Path,
    trigger_path: &Path,
) -> Result<RunManifest> {
    ensure_out(out)?;
    let mut manifest = RunManifest::new("strip", config)?;
    let data = load_stage(config, &mut manifest)?;
    let params = load_model_checked(config, model)?;
    let trigger = load_trigger_checked(config, trigger_path)?;
    let subset = eval_slice(config, &data.test);
    let pool = data.train.head(config.defense.calibration.min(data.train.len()));
    let payload = &config.resolved_payloads()?[0].1;
    let poisoned = apply_payload(&subset, &trigger, payload, 0)?;
    let blends = config.defense.strip_blends;

    let (clean_entropy, poisoned_entropy) = manifest.stage("strip", || {
        let mut clean_entropy = Vec::with_capacity(subset.len());
        let mut poisoned_entropy = Vec::with_capacity(subset.len());
        for index in 0..subset.len() {
            let mut rng = stage_rng(config.seed, "strip-clean", index as u64);
            let values =
                strip_entropy(&params, &subset.images.index_axis(ndarray::Axis(0), index).to_owned(), &pool, blends, &mut rng)?;
            clean_entropy.push(values.iter().sum::<f64>() / values.len() as f64);
            let mut rng = stage_rng(config.seed, "strip-poisoned", index as u64);
            let values = strip_entropy(
                &params,
                &poisoned.images.index_axis(ndarray::Axis(0), index).to_owned(),
                &pool,
                blends,
                &mut rng,
            )?;
            poisoned_entropy.push(values.iter().sum::<f64>() / values.len() as f64);
        }
        Ok((clean_entropy, poisoned_entropy))
    })?;

    let histogram = entropy_histogram(&clean_entropy, &poisoned_entropy, config.defense.strip_bins)?;
    let path = out.join("strip.csv");
    write_entropy_histogram_csv(&histogram, &path)?;
    manifest.record_file(out, &path)?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    manifest.record_metric("mean_clean_entropy", mean(&clean_entropy));
    manifest.record_metric("mean_poisoned_entropy", mean(&poisoned_entropy));
    manifest.write(out)?;
    println!(
        "strip: mean entropy clean {:.4} vs poisoned {:.4} ({} probes, {} blends)",
        mean(&clean_entropy),
        mean(&poisoned_entropy),
        subset.len(),
        blends
    );
    Ok(manifest)
}

/// Unit-pruning sweep: zeroes the least-active hidden units of the final
/// block's MLP at each configured ratio and reports the rates.
pub fn cmd_prune(
    config: &ExperimentConfig,
    out: &Path,
    model: &Path,
    trigger_path: &Path,
) -> Result<RunManifest> {
    ensure_out(out)?;
    let mut manifest = RunManifest::new("prune", config)?;
    let data = load_stage(config, &mut manifest)?;
    let params = load_model_checked(config, model)?;
    let trigger = load_trigger_checked(config, trigger_path)?;
    let subset = eval_slice(config, &data.test);
    let calib = data.train.head(config.defense.calibration.min(data.train.len()));
    let payload = &config.resolved_payloads()?[0].1;
    let target = config.attack.target;

    let mut text = String::from("ratio,pruned_units,acc,asr\n");
    for &ratio in &config.defense.prune_ratios {
        let (acc, attack_rate, pruned) = manifest.stage(&format!("prune-{ratio}"), || {
            let (pruned_params, removed) = fine_prune(&params, &calib, ratio)?;
            let acc = accuracy(&pruned_params, &subset)?;
            let attack_rate = asr(&pruned_params, &trigger, &subset, payload, target)?;
            Ok((acc, attack_rate, removed.len()))
        })?;
        let _ = writeln!(text, "{ratio},{pruned},{acc:.6},{attack_rate:.6}");
    }
    write_text(&mut manifest, out, "prune.csv", &text)?;
    manifest.write(out)?;
    println!("prune: {} ratios over {} images", config.defense.prune_ratios.len(), subset.len());
    Ok(manifest)
}

/// Grid of short attacks over the two stealthiness weights; emits ACC,
/// ASR, visual-norm, and attention-disparity grids plus one manifest per
/// cell.
pub fn cmd_sweep_alpha(
    config: &ExperimentConfig,
    out: &Path,
    model: &Path,
    alpha1: &[f64],
    alpha2: &[f64],
) -> Result<RunManifest> {
    ensure_out(out)?;
    if alpha1.is_empty() || alpha2.is_empty() {
        bail!("both alpha grids need at least one value");
    }
    let mut manifest = RunManifest::new("sweep-alpha", config)?;
    let data = load_stage(config, &mut manifest)?;
    let params0 = load_model_checked(config, model)?;
    let subset = eval_slice(config, &data.test);
    let payload = &config.resolved_payloads()?[0].1;
    let layer = config.attack.disparity_layer_for(&config.model);
    let target = config.attack.target;

    let shape = (alpha1.len(), alpha2.len());
    let mut acc_grid = Array2::<f64>::zeros(shape);
    let mut asr_grid = Array2::<f64>::zeros(shape);
    let mut visual_grid = Array2::<f64>::zeros(shape);
    let mut attention_grid = Array2::<f64>::zeros(shape);

    for (i, &a1) in alpha1.iter().enumerate() {
        for (j, &a2) in alpha2.iter().enumerate() {
            let cell_dir = out.join(format!("a1_{a1}-a2_{a2}"));
            ensure_out(&cell_dir)?;
            let mut cell = RunManifest::new("sweep-alpha-cell", config)?;
            cell.dataset_digest = manifest.dataset_digest.clone();
            cell.classes = manifest.classes.clone();
            cell.record_metric("alpha1", a1);
            cell.record_metric("alpha2", a2);

            let mut attack = config.attack.clone();
            attack.trigger_weights.visual = a1;
            attack.trigger_weights.attention = a2;
            attack.model_weights.visual = a1;
            attack.model_weights.attention = a2;
            attack.validate()?;

            let result = cell.stage("attack", || {
                run_pasta(&params0, &data.train, &attack).map_err(Into::into)
            })?;

            let ckpt = cell_dir.join("backdoored.ckpt");
            save_checkpoint(&result.params, config.seed, &ckpt)?;
            cell.record_file(&cell_dir, &ckpt)?;
            let trig = cell_dir.join("trigger.trig");
            let mis = match &attack.mis {
                Some(m) => m.clone(),
                None => default_mis(&config.model)?,
            };
            save_trigger(&result.trigger, Some(&mis), config.seed, &trig)?;
            cell.record_file(&cell_dir, &trig)?;
            let losses = cell_dir.join("losses.csv");
            write_loss_log_csv(&result.log, &losses)?;
            cell.record_file(&cell_dir, &losses)?;

            let (acc, rate, visual, attention) = cell.stage("eval", || {
                let acc = accuracy(&result.params, &subset)?;
                let rate = asr(&result.params, &result.trigger, &subset, payload, target)?;
                let visual = visual_stealth(&subset, &result.trigger, payload, &data.norm)?;
                let attention =
                    attention_stealth(&result.params, &subset, &result.trigger, payload, layer)?;
                Ok((acc, rate, visual.mean.l2, attention.mean.l2))
            })?;
            acc_grid[[i, j]] = acc;
            asr_grid[[i, j]] = rate;
            visual_grid[[i, j]] = visual;
            attention_grid[[i, j]] = attention;
            cell.record_metric("acc", acc);
            cell.record_metric("asr", rate);
            cell.record_metric("visual_l2", visual);
            cell.record_metric("attention_l2", attention);
            let cell_manifest = cell.write(&cell_dir)?;
            manifest.record_file(out, &cell_manifest)?;
            println!(
                "sweep-alpha[{a1},{a2}]: acc {acc:.4} asr {rate:.4} visual {visual:.4} attention {attention:.6}"
            );
        }
    }

    write_grid(&mut manifest, out, "acc_grid", "alpha1/alpha2", alpha1, alpha2, &acc_grid)?;
    write_grid(&mut manifest, out, "asr_grid", "alpha1/alpha2", alpha1, alpha2, &asr_grid)?;
    write_grid(&mut manifest, out, "visual_l2_grid", "alpha1/alpha2", alpha1, alpha2, &visual_grid)?;
    write_grid(
        &mut manifest,
        out,
        "attention_l2_grid",
        "alpha1/alpha2",
        alpha1,
        alpha2,
        &attention_grid,
    )?;
    manifest.write(out)?;
    println!("sweep-alpha: {} cells", alpha1.len() * alpha2.len());
    Ok(manifest)
}

/// The four observation families behind the attack design: replacement
/// versus addition at a fixed location, the norm sweep, and paired
/// center/corner insertion. Each family trains from the supplied clean
/// model and reports a response heatmap.
pub fn cmd_observe(config: &ExperimentConfig, out: &Path, model: &Path) -> Result<RunManifest> {
    ensure_out(out)?;
    let mut manifest = RunManifest::new("observe", config)?;
    let data = load_stage(config, &mut manifest)?;
    let params0 = load_model_checked(config, model)?;
    let subset = eval_slice(config, &data.test);
    let target = config.attack.target;
    let grid = config.model.grid_size();
    let center = PatchIndex { row: grid / 2, col: grid / 2 };
    let off_center = PatchIndex { row: grid / 2 - 1, col: grid / 2 - 1 };
    let corner_a = PatchIndex { row: 0, col: 0 };
    let corner_b = PatchIndex { row: grid - 1, col: grid - 1 };

    let mut summary = String::from("family,label,trigger_l2,tre\n");
    let add_row = |summary: &mut String, family: &str, label: &str, l2: f64, tre: f64| {
        let _ = writeln!(summary, "{family},{label},{l2:.6},{tre:.6}");
    };

    let pattern = rep_pattern(config, &data.train);
    let rep_result = manifest.stage("rep-fixed", || {
        run_badnets_rep_baseline(&params0, &data.train, &config.attack, &pattern, center)
            .map_err(Into::into)
    })?;
    let rep_heat = rep_tre_heatmap(&rep_result.params, &pattern, &subset, target)?;
    record_heatmap(&mut manifest, out, "observe_rep_center", &rep_heat)?;
    let rep_l2 = rep_disparity_l2(&subset, &pattern, center)?;
    add_row(&mut summary, "insertion-style", "rep-center", rep_l2, rep_heat.tre);

    let sup_result = manifest.stage("sup-fixed", || {
        run_single_location_baseline(&params0, &data.train, &config.attack, center)
            .map_err(Into::into)
    })?;
    let sup_heat = tre_heatmap(&sup_result.params, &sup_result.trigger, &subset, target)?;
    record_heatmap(&mut manifest, out, "observe_sup_center", &sup_heat)?;
    add_row(&mut summary, "insertion-style", "sup-center", f64::from(sup_result.trigger.l2()), sup_heat.tre);

    let norm_targets = [0.125, 0.25, 0.5, 1.0];
    for &norm_target in &norm_targets {
        let scaled = rescale_trigger(&sup_result.trigger, norm_target)?;
        let name = format!("observe_l2_{:04}", (norm_target * 1000.0).round() as u32);
        let heat = manifest.stage(&format!("norm-sweep-{norm_target}"), || {
            tre_heatmap(&sup_result.params, &scaled, &subset, target).map_err(Into::into)
        })?;
        record_heatmap(&mut manifest, out, &name, &heat)?;
        add_row(&mut summary, "norm-sweep", &format!("l2={norm_target}"), f64::from(scaled.l2()), heat.tre);
    }

    for (label, pair, stem) in [
        ("pair-center", (center, off_center), "observe_pair_center"),
        ("pair-corner", (corner_a, corner_b), "observe_pair_corner"),
    ] {
        let mis = MISConfig {
            centers: vec![pair.0],
            corners: vec![pair.1],
        };
        let result = manifest.stage(label, || {
            run_pasta_with_sampler(
                &params0,
                &data.train,
                &config.attack,
                LocationSampler::Hierarchical(mis.clone()),
                &mut NoSink,
            )
            .map_err(Into::into)
        })?;
        let heat = tre_heatmap(&result.params, &result.trigger, &subset, target)?;
        record_heatmap(&mut manifest, out, stem, &heat)?;
        add_row(&mut summary, "location-pairs", label, f64::from(result.trigger.l2()), heat.tre);
    }

    write_text(&mut manifest, out, "observe_summary.csv", &summary)?;
    manifest.write(out)?;
    println!("observe: four families over {} images", subset.len());
    Ok(manifest)
}
