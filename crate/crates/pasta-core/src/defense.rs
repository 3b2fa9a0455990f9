//! Inference-time defenses evaluated against the attack: randomized patch
//! operations, flip-count percentile detection, attention-peak blocking,
//! Gaussian low-pass filtering, blend-entropy screening, and activation
//! pruning. All defenses run over frozen parameters.

use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{CoreError, Result};
use crate::eval::{accuracy, apply_payload, asr, predict_labels, PayloadSpec};
use crate::rng::stage_rng;
use crate::tensor::{Scalar, Tape};
use crate::trigger::{PatchIndex, Trigger};
use crate::vit::{
    attention_rollout, forward, forward_on_tape, tensor_names, ForwardOptions, ViTParams,
};

/// Samples per inference chunk.
const EVAL_BATCH: usize = 64;

/// Before/after rates of one defense configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseOutcome {
    /// Defense identifier with its parameters, e.g. `patch-drop[k=1,reps=100]`.
    pub defense: String,
    pub acc_before: f64,
    pub asr_before: f64,
    pub acc_after: f64,
    pub asr_after: f64,
}

impl DefenseOutcome {
    pub fn new(
        defense: String,
        acc_before: f64,
        asr_before: f64,
        acc_after: f64,
        asr_after: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("acc_before", acc_before),
            ("asr_before", asr_before),
            ("acc_after", acc_after),
            ("asr_after", asr_after),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::InvalidArgument(format!(
                    "{name} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            defense,
            acc_before,
            asr_before,
            acc_after,
            asr_after,
        })
    }
}

fn grid_of<F: Scalar>(x: &Array3<F>, patch: usize) -> Result<usize> {
    let (_, h, w) = x.dim();
    if patch == 0 || h != w || h % patch != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "image {h}x{w} not divisible into {patch}-pixel patches"
        )));
    }
    Ok(h / patch)
}

/// Sets one patch of the image to the fill value.
pub fn blank_patch<F: Scalar>(
    x: &Array3<F>,
    location: PatchIndex,
    patch: usize,
    fill: F,
) -> Result<Array3<F>> {
    let grid = grid_of(x, patch)?;
    location.validate(grid)?;
    let mut out = x.clone();
    out.slice_mut(s![
        ..,
        location.row * patch..(location.row + 1) * patch,
        location.col * patch..(location.col + 1) * patch
    ])
    .fill(fill);
    Ok(out)
}

/// Swaps the contents of two patches.
pub fn swap_patches<F: Scalar>(
    x: &Array3<F>,
    a: PatchIndex,
    b: PatchIndex,
    patch: usize,
) -> Result<Array3<F>> {
    let grid = grid_of(x, patch)?;
    a.validate(grid)?;
    b.validate(grid)?;
    let mut out = x.clone();
    let pa = x
        .slice(s![
            ..,
            a.row * patch..(a.row + 1) * patch,
            a.col * patch..(a.col + 1) * patch
        ])
        .to_owned();
    let pb = x
        .slice(s![
            ..,
            b.row * patch..(b.row + 1) * patch,
            b.col * patch..(b.col + 1) * patch
        ])
        .to_owned();
    out.slice_mut(s![
        ..,
        a.row * patch..(a.row + 1) * patch,
        a.col * patch..(a.col + 1) * patch
    ])
    .assign(&pb);
    out.slice_mut(s![
        ..,
        b.row * patch..(b.row + 1) * patch,
        b.col * patch..(b.col + 1) * patch
    ])
    .assign(&pa);
    Ok(out)
}

/// Blanks one uniformly chosen patch.
pub fn patch_drop<F: Scalar, R: rand::Rng>(
    x: &Array3<F>,
    patch: usize,
    fill: F,
    rng: &mut R,
) -> Result<Array3<F>> {
    let grid = grid_of(x, patch)?;
    let flat = rng.gen_range(0..grid * grid);
    blank_patch(x, PatchIndex::from_flat(flat, grid), patch, fill)
}

/// Swaps one uniformly chosen unordered patch pair.
pub fn patch_shuffle<F: Scalar, R: rand::Rng>(
    x: &Array3<F>,
    patch: usize,
    rng: &mut R,
) -> Result<Array3<F>> {
    let grid = grid_of(x, patch)?;
    let n = grid * grid;
    if n < 2 {
        return Err(CoreError::InvalidArgument(
            "patch shuffle needs at least two patches".into(),
        ));
    }
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    swap_patches(
        x,
        PatchIndex::from_flat(a, grid),
        PatchIndex::from_flat(b, grid),
        patch,
    )
}

/// Patch shuffle followed by patch drop, in that order.
pub fn drop_and_shuffle<F: Scalar, R: rand::Rng>(
    x: &Array3<F>,
    patch: usize,
    fill: F,
    rng: &mut R,
) -> Result<Array3<F>> {
    let shuffled = patch_shuffle(x, patch, rng)?;
    patch_drop(&shuffled, patch, fill, rng)
}

/// Randomized per-image transformations applied before inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchOp {
    /// Control row: no perturbation.
    Identity,
    Drop,
    Shuffle,
    DropAndShuffle,
}

impl std::fmt::Display for PatchOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::Identity => "identity",
            Self::Drop => "patch-drop",
            Self::Shuffle => "patch-shuffle",
            Self::DropAndShuffle => "drop-and-shuffle",
        };
        write!(f, "{name}")
    }
}

impl PatchOp {
    fn apply<F: Scalar, R: rand::Rng>(
        &self,
        x: &Array3<F>,
        patch: usize,
        fill: F,
        rng: &mut R,
    ) -> Result<Array3<F>> {
        match self {
            Self::Identity => Ok(x.clone()),
            Self::Drop => patch_drop(x, patch, fill, rng),
            Self::Shuffle => patch_shuffle(x, patch, rng),
            Self::DropAndShuffle => drop_and_shuffle(x, patch, fill, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PatchOpConfig {
    pub repetitions: usize,
    pub seed: u64,
}

impl PatchOpConfig {
    pub fn standard(seed: u64) -> Self {
        Self {
            repetitions: 100,
            seed,
        }
    }
}

/// Applies `op` to every image of the batch with one independent stream
/// per (sample, repetition) pair; `first_index` anchors sample identity
/// when the batch is a chunk of a larger set.
fn perturb_batch<F: Scalar>(
    batch: &ImageBatch<F>,
    op: PatchOp,
    patch: usize,
    fill: F,
    stage: &str,
    seed: u64,
    repetitions: usize,
    rep: usize,
    first_index: usize,
) -> Result<ImageBatch<F>> {
    let mut images = batch.images.clone();
    for s in 0..batch.len() {
        let stream = ((first_index + s) as u64) * repetitions as u64 + rep as u64;
        let mut rng = stage_rng(seed, stage, stream);
        let out = op.apply(
            &batch.images.index_axis(Axis(0), s).to_owned(),
            patch,
            fill,
            &mut rng,
        )?;
        images.index_axis_mut(Axis(0), s).assign(&out);
    }
    Ok(ImageBatch {
        images,
        labels: batch.labels.clone(),
    })
}

/// Accuracy on the clean set and success rate on payload-poisoned eligible
/// samples, with `defend` applied to every batch just before inference.
fn defended_rates<F: Scalar>(
    params: &ViTParams<F>,
    trigger: &Trigger<F>,
    clean: &ImageBatch<F>,
    payload: &PayloadSpec,
    target: u8,
    defend: &mut dyn FnMut(&ImageBatch<F>, usize) -> Result<ImageBatch<F>>,
) -> Result<(f64, f64)> {
    if clean.is_empty() {
        return Err(CoreError::InvalidArgument(
            "defense evaluation over an empty set".into(),
        ));
    }
    let idx: Vec<usize> = (0..clean.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let defended = defend(&clean.subset(chunk), chunk[0])?;
        let predicted = predict_labels(params, &defended)?;
        correct += predicted
            .iter()
            .zip(&defended.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    let acc = correct as f64 / clean.len() as f64;

    let eligible: Vec<usize> = (0..clean.len())
        .filter(|&i| clean.labels[i] != target)
        .collect();
    if eligible.is_empty() {
        return Err(CoreError::InvalidArgument(
            "no samples eligible for the success rate (all carry the target label)".into(),
        ));
    }
    let mut hits = 0usize;
    for (chunk_id, chunk) in eligible.chunks(EVAL_BATCH).enumerate() {
        let batch = clean.subset(chunk);
        let first = chunk_id * EVAL_BATCH;
        let poisoned = apply_payload(&batch, trigger, payload, first)?;
        let defended = defend(&poisoned, first)?;
        let predicted = predict_labels(params, &defended)?;
        hits += predicted.iter().filter(|&&p| p == target).count();
    }
    Ok((acc, hits as f64 / eligible.len() as f64))
}

/// Before/after table over every (operation, payload) combination, the
/// after side averaged over independently perturbed repetitions.
pub fn patch_op_evaluation<F: Scalar>(
    params: &ViTParams<F>,
    trigger: &Trigger<F>,
    clean: &ImageBatch<F>,
    payloads: &[PayloadSpec],
    target: u8,
    ops: &[PatchOp],
    config: &PatchOpConfig,
) -> Result<Vec<DefenseOutcome>> {
    if config.repetitions == 0 {
        return Err(CoreError::InvalidArgument(
            "repetitions must be positive".into(),
        ));
    }
    let patch = trigger.patch_size();
    let fill = clean.value_range().0;
    let acc_before = accuracy(params, clean)?;
    let mut rows = Vec::with_capacity(ops.len() * payloads.len());
    for op in ops {
        for payload in payloads {
            let asr_before = asr(params, trigger, clean, payload, target)?;
            let (mut acc_sum, mut asr_sum) = (0.0, 0.0);
            for rep in 0..config.repetitions {
                let stage = format!("{op}");
                let (acc, rate) = defended_rates(
                    params,
                    trigger,
                    clean,
                    payload,
                    target,
                    &mut |batch, first| {
                        perturb_batch(
                            batch,
                            *op,
                            patch,
                            fill,
                            &stage,
                            config.seed,
                            config.repetitions,
                            rep,
                            first,
                        )
                    },
                )?;
                acc_sum += acc;
                asr_sum += rate;
            }
            let reps = config.repetitions as f64;
            rows.push(DefenseOutcome::new(
                format!("{op}[k={},reps={}]", payload.k(), config.repetitions),
                acc_before,
                asr_before,
                acc_sum / reps,
                asr_sum / reps,
            )?);
        }
    }
    Ok(rows)
}

/// Prediction-flip counts of one sample under repeated drops and shuffles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipCounts {
    pub drop: usize,
    pub shuffle: usize,
}

/// Flip-count percentile detection results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Drop-flip calibration count at the 90th percentile; more flips
    /// flag a sample.
    pub drop_threshold: usize,
    /// Shuffle-flip calibration count at the 10th percentile; fewer flips
    /// flag a sample.
    pub shuffle_threshold: usize,
    pub clean_flips: Vec<FlipCounts>,
    pub poisoned_flips: Vec<FlipCounts>,
    /// Fraction of clean test samples flagged poisoned.
    pub fnr: f64,
    /// Fraction of poisoned test samples flagged poisoned.
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DBAVTConfig {
    pub repetitions: usize,
    pub seed: u64,
}

impl DBAVTConfig {
    pub fn standard(seed: u64) -> Self {
        Self {
            repetitions: 100,
            seed,
        }
    }
}

/// Nearest-rank percentile of a count multiset.
pub fn percentile_nearest_rank(counts: &[usize], pct: f64) -> Result<usize> {
    if counts.is_empty() {
        return Err(CoreError::InvalidArgument(
            "percentile of an empty set".into(),
        ));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(CoreError::InvalidArgument(format!(
            "percentile {pct} outside [0, 100]"
        )));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let rank = ((pct / 100.0 * sorted.len() as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}

/// Counts, per sample, how many of `repetitions` perturbed copies change
/// the model's prediction relative to the unperturbed input.
fn flip_counts<F: Scalar>(
    params: &ViTParams<F>,
    data: &ImageBatch<F>,
    op: PatchOp,
    patch: usize,
    fill: F,
    stage: &str,
    config: &DBAVTConfig,
) -> Result<Vec<usize>> {
    let base = predict_labels(params, data)?;
    let mut counts = vec![0usize; data.len()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for rep in 0..config.repetitions {
        for chunk in idx.chunks(EVAL_BATCH) {
            let perturbed = perturb_batch(
                &data.subset(chunk),
                op,
                patch,
                fill,
                stage,
                config.seed,
                config.repetitions,
                rep,
                chunk[0],
            )?;
            let predicted = predict_labels(params, &perturbed)?;
            for (local, &global) in chunk.iter().enumerate() {
                if predicted[local] != base[global] {
                    counts[global] += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Flip-count percentile detection: thresholds come from a clean
/// calibration split; a test sample is flagged when its drop flips exceed
/// the 90th calibration percentile or its shuffle flips fall below the
/// 10th.
pub fn dbavt_detect<F: Scalar>(
    params: &ViTParams<F>,
    calib_clean: &ImageBatch<F>,
    test_clean: &ImageBatch<F>,
    test_poisoned: &ImageBatch<F>,
    config: &DBAVTConfig,
) -> Result<DetectionReport> {
    if calib_clean.is_empty() {
        return Err(CoreError::InvalidArgument(
            "empty calibration set".into(),
        ));
    }
    if test_clean.is_empty() || test_poisoned.is_empty() {
        return Err(CoreError::InvalidArgument("empty test set".into()));
    }
    if config.repetitions == 0 {
        return Err(CoreError::InvalidArgument(
            "repetitions must be positive".into(),
        ));
    }
    let patch = params.config().patch_size;
    let fill = calib_clean.value_range().0;

    let pair_counts = |data: &ImageBatch<F>, tag: &str| -> Result<Vec<FlipCounts>> {
        let drops = flip_counts(
            params,
            data,
            PatchOp::Drop,
            patch,
            fill,
            &format!("dbavt-drop-{tag}"),
            config,
        )?;
        let shuffles = flip_counts(
            params,
            data,
            PatchOp::Shuffle,
            patch,
            fill,
            &format!("dbavt-shuffle-{tag}"),
            config,
        )?;
        Ok(drops
            .into_iter()
            .zip(shuffles)
            .map(|(drop, shuffle)| FlipCounts { drop, shuffle })
            .collect())
    };

    let calib = pair_counts(calib_clean, "calib")?;
    let clean_flips = pair_counts(test_clean, "clean")?;
    let poisoned_flips = pair_counts(test_poisoned, "poison")?;

    let drop_counts: Vec<usize> = calib.iter().map(|f| f.drop).collect();
    let shuffle_counts: Vec<usize> = calib.iter().map(|f| f.shuffle).collect();
    let drop_threshold = percentile_nearest_rank(&drop_counts, 90.0)?;
    let shuffle_threshold = percentile_nearest_rank(&shuffle_counts, 10.0)?;

    let flagged =
        |f: &FlipCounts| f.drop > drop_threshold || f.shuffle < shuffle_threshold;
    let fnr = clean_flips.iter().filter(|f| flagged(f)).count() as f64
        / clean_flips.len() as f64;
    let tpr = poisoned_flips.iter().filter(|f| flagged(f)).count() as f64
        / poisoned_flips.len() as f64;

    Ok(DetectionReport {
        drop_threshold,
        shuffle_threshold,
        clean_flips,
        poisoned_flips,
        fnr,
        tpr,
    })
}

/// Blanks, per image, the patch with the highest attention-rollout value;
/// ties resolve to the lowest flattened patch index. Returns the blocked
/// batch and the chosen locations.
pub fn bavt_block<F: Scalar>(
    params: &ViTParams<F>,
    batch: &ImageBatch<F>,
    fill: F,
) -> Result<(ImageBatch<F>, Vec<PatchIndex>)> {
    let cfg = params.config();
    let grid = cfg.grid_size();
    let (_, stack) = forward(params, batch)?;
    let rollout = attention_rollout(&stack, grid)?;
    let mut images = batch.images.clone();
    let mut locations = Vec::with_capacity(batch.len());
    for s in 0..batch.len() {
        let map = rollout.index_axis(Axis(0), s);
        let mut best = 0usize;
        for flat in 1..grid * grid {
            if map[[flat / grid, flat % grid]] > map[[best / grid, best % grid]] {
                best = flat;
            }
        }
        let loc = PatchIndex::from_flat(best, grid);
        let blocked = blank_patch(
            &batch.images.index_axis(Axis(0), s).to_owned(),
            loc,
            cfg.patch_size,
            fill,
        )?;
        images.index_axis_mut(Axis(0), s).assign(&blocked);
        locations.push(loc);
    }
    Ok((
        ImageBatch {
            images,
            labels: batch.labels.clone(),
        },
        locations,
    ))
}

/// Before/after rates with attention-peak blocking applied at inference.
pub fn bavt_evaluation<F: Scalar>(
    params: &ViTParams<F>,
    trigger: &Trigger<F>,
    clean: &ImageBatch<F>,
    payload: &PayloadSpec,
    target: u8,
) -> Result<DefenseOutcome> {
    let fill = clean.value_range().0;
    let acc_before = accuracy(params, clean)?;
    let asr_before = asr(params, trigger, clean, payload, target)?;
    let (acc_after, asr_after) = defended_rates(
        params,
        trigger,
        clean,
        payload,
        target,
        &mut |batch, _| Ok(bavt_block(params, batch, fill)?.0),
    )?;
    DefenseOutcome::new(
        format!("bavt[k={}]", payload.k()),
        acc_before,
        asr_before,
        acc_after,
        asr_after,
    )
}

/// Filter width → standard deviation, the common window/σ convention.
pub fn gaussian_sigma(window: usize) -> f64 {
    0.3 * ((window as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Normalized 1-D sampled Gaussian kernel for an odd window.
pub fn gaussian_kernel(window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "gaussian window must be odd, got {window}"
        )));
    }
    let sigma = gaussian_sigma(window);
    let radius = (window / 2) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| centered_gaussian(i as f64, sigma))
        .collect();
    let total: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= total;
    }
    Ok(kernel)
}

fn centered_gaussian(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp()
}

/// Index into `0..n` with half-sample reflection at both borders.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -1 - i
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    j as usize
}

/// Separable per-channel Gaussian blur with reflect padding.
pub fn gaussian_filter<F: Scalar>(x: &Array3<F>, window: usize) -> Result<Array3<F>> {
    let kernel = gaussian_kernel(window)?;
    let (c, h, w) = x.dim();
    let radius = (window / 2) as isize;
    if radius as usize >= h || radius as usize >= w {
        return Err(CoreError::InvalidArgument(format!(
            "window {window} too large for a {h}x{w} image"
        )));
    }
    let mut rows = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (k, g) in kernel.iter().enumerate() {
                    let src = reflect(col as isize + k as isize - radius, w);
                    acc += g * x[[ch, r, src]].to_f64().unwrap();
                }
                rows[[ch, r, col]] = acc;
            }
        }
    }
    let mut out = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (k, g) in kernel.iter().enumerate() {
                    let src = reflect(r as isize + k as isize - radius, h);
                    acc += g * rows[[ch, src, col]];
                }
                out[[ch, r, col]] = F::from(acc).unwrap();
            }
        }
    }
    Ok(out)
}

/// Blurs every image of the batch.
pub fn gaussian_filter_batch<F: Scalar>(
    batch: &ImageBatch<F>,
    window: usize,
) -> Result<ImageBatch<F>> {
    let mut images = batch.images.clone();
    for s in 0..batch.len() {
        let blurred = gaussian_filter(&batch.images.index_axis(Axis(0), s).to_owned(), window)?;
        images.index_axis_mut(Axis(0), s).assign(&blurred);
    }
    Ok(ImageBatch {
        images,
        labels: batch.labels.clone(),
    })
}

/// Before/after rates with Gaussian filtering applied at inference.
pub fn gaussian_evaluation<F: Scalar>(
    params: &ViTParams<F>,
    trigger: &Trigger<F>,
    clean: &ImageBatch<F>,
    payload: &PayloadSpec,
    target: u8,
    window: usize,
) -> Result<DefenseOutcome> {
    let acc_before = accuracy(params, clean)?;
    let asr_before = asr(params, trigger, clean, payload, target)?;
    let (acc_after, asr_after) = defended_rates(
        params,
        trigger,
        clean,
        payload,
        target,
        &mut |batch, _| gaussian_filter_batch(batch, window),
    )?;
    DefenseOutcome::new(
        format!("gaussian[window={window},k={}]", payload.k()),
        acc_before,
        asr_before,
        acc_after,
        asr_after,
    )
}

/// Softmax entropy (natural log) of each logit row.
fn softmax_entropies<F: Scalar>(logits: &Array2<F>) -> Vec<f64> {
    logits
        .outer_iter()
        .map(|row| {
            let vals: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.iter()
                .map(|e| {
                    let p = e / total;
                    if p > 0.0 {
                        -p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Entropy of the model's prediction on `blends` pixelwise-mean blends of
/// the input with random clean-pool images.
pub fn strip_entropy<F: Scalar, R: rand::Rng>(
    params: &ViTParams<F>,
    image: &Array3<F>,
    clean_pool: &ImageBatch<F>,
    blends: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if clean_pool.is_empty() {
        return Err(CoreError::InvalidArgument("empty blend pool".into()));
    }
    if blends == 0 {
        return Err(CoreError::InvalidArgument(
            "blends must be positive".into(),
        ));
    }
    let (c, h, w) = image.dim();
    let pool_shape = clean_pool.images.shape();
    if [c, h, w] != pool_shape[1..] {
        return Err(CoreError::ShapeMismatch(format!(
            "image {:?} does not match pool images {:?}",
            [c, h, w],
            &pool_shape[1..]
        )));
    }
    let half = F::from(0.5).unwrap();
    let mut blended = Array4::<F>::zeros((blends, c, h, w));
    for b in 0..blends {
        let pick = rng.gen_range(0..clean_pool.len());
        let mix =
            (image + &clean_pool.images.index_axis(Axis(0), pick)).mapv(|v| v * half);
        blended.index_axis_mut(Axis(0), b).assign(&mix);
    }
    let batch = ImageBatch {
        images: blended,
        labels: vec![0; blends],
    };
    let mut entropies = Vec::with_capacity(blends);
    let idx: Vec<usize> = (0..blends).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = crate::vit::predict(params, &batch.subset(chunk))?;
        entropies.extend(softmax_entropies(&logits));
    }
    Ok(entropies)
}

/// Shared-bin histogram of clean vs poisoned entropy samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyHistogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub clean: Vec<usize>,
    pub poisoned: Vec<usize>,
}

pub fn entropy_histogram(
    clean: &[f64],
    poisoned: &[f64],
    bins: usize,
) -> Result<EntropyHistogram> {
    if clean.is_empty() || poisoned.is_empty() {
        return Err(CoreError::InvalidArgument(
            "histogram needs samples on both sides".into(),
        ));
    }
    if bins == 0 {
        return Err(CoreError::InvalidArgument("bins must be positive".into()));
    }
    let all = clean.iter().chain(poisoned);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in all {
        if !v.is_finite() {
            return Err(CoreError::NonFinite("entropy sample".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let bin_of = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    let mut clean_counts = vec![0usize; bins];
    for &v in clean {
        clean_counts[bin_of(v)] += 1;
    }
    let mut poisoned_counts = vec![0usize; bins];
    for &v in poisoned {
        poisoned_counts[bin_of(v)] += 1;
    }
    Ok(EntropyHistogram {
        edges,
        clean: clean_counts,
        poisoned: poisoned_counts,
    })
}

/// Writes the histogram as `bin_low,bin_high,clean,poisoned` rows.
pub fn write_entropy_histogram_csv(hist: &EntropyHistogram, path: &Path) -> Result<()> {
    let mut text = String::from("bin_low,bin_high,clean,poisoned\n");
    for i in 0..hist.clean.len() {
        text.push_str(&format!(
            "{:.6},{:.6},{},{}\n",
            hist.edges[i],
            hist.edges[i + 1],
            hist.clean[i],
            hist.poisoned[i]
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Mean absolute post-activation value of every hidden unit in the final
/// block's MLP, over all tokens of the calibration set.
pub fn mlp_hidden_mean_abs<F: Scalar>(
    params: &ViTParams<F>,
    calib: &ImageBatch<F>,
) -> Result<Vec<f64>> {
    if calib.is_empty() {
        return Err(CoreError::InvalidArgument(
            "empty calibration set".into(),
        ));
    }
    let cfg = *params.config();
    let layer = cfg.depth - 1;
    let hidden_dim = cfg.hidden_dim();
    let mut sums = vec![0.0f64; hidden_dim];
    let mut rows = 0usize;
    let idx: Vec<usize> = (0..calib.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = calib.subset(chunk);
        let mut tape = Tape::new();
        let images = tape.constant(batch.images.clone().into_dyn());
        let opts = ForwardOptions {
            train_params: false,
            retain_attention: false,
            capture_hidden: Some(layer),
        };
        let fwd = forward_on_tape(&mut tape, params, images, &opts);
        let hidden = tape.value(fwd.hidden.expect("hidden state captured"));
        let hidden = hidden
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("hidden state rank 2");
        for row in hidden.outer_iter() {
            for (u, v) in row.iter().enumerate() {
                sums[u] += v.to_f64().unwrap().abs();
            }
            rows += 1;
        }
    }
    Ok(sums.into_iter().map(|s| s / rows as f64).collect())
}

/// Zeroes the final-block MLP hidden units with the lowest mean absolute
/// activation over the calibration set: their input column and bias in
/// the first linear layer and their output row in the second. Returns the
/// pruned parameters and the pruned unit indices in ranking order.
pub fn fine_prune<F: Scalar>(
    params: &ViTParams<F>,
    calib: &ImageBatch<F>,
    ratio: f64,
) -> Result<(ViTParams<F>, Vec<usize>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CoreError::InvalidArgument(format!(
            "prune ratio {ratio} outside [0, 1)"
        )));
    }
    let cfg = *params.config();
    let hidden_dim = cfg.hidden_dim();
    let count = (ratio * hidden_dim as f64).floor() as usize;
    let mut pruned = params.clone();
    if count == 0 {
        return Ok((pruned, Vec::new()));
    }
    let means = mlp_hidden_mean_abs(params, calib)?;
    let mut order: Vec<usize> = (0..hidden_dim).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    let selected = order[..count].to_vec();

    let layer = cfg.depth - 1;
    let names = tensor_names(&cfg);
    let index_of = |suffix: &str| -> usize {
        let want = format!("blocks.{layer}.mlp.{suffix}");
        names
            .iter()
            .position(|n| *n == want)
            .expect("schema contains the final-block MLP tensors")
    };
    let (fc1_w, fc1_b, fc2_w) = (
        index_of("fc1.weight"),
        index_of("fc1.bias"),
        index_of("fc2.weight"),
    );
    let tensors = pruned.tensors_mut();
    for &u in &selected {
        tensors[fc1_w]
            .slice_mut(s![.., u])
            .fill(F::zero());
        tensors[fc1_b][[u]] = F::zero();
        tensors[fc2_w]
            .slice_mut(s![u, ..])
            .fill(F::zero());
    }
    Ok((pruned, selected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stage_rng;
    use crate::vit::{init_model, predict, tensor_names, ModelConfig};
    use ndarray::Array4;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            channels: 2,
            patch_size: 8,
            embed_dim: 16,
            num_heads: 2,
            depth: 2,
            mlp_ratio: 2,
            num_classes: 4,
        }
    }

    fn toy_data(n: usize, cfg: &ModelConfig, seed: u64) -> ImageBatch<f32> {
        let mut rng = stage_rng(seed, "defense-toy", 0);
        let mut images = Array4::<f32>::zeros((n, cfg.channels, cfg.image_size, cfg.image_size));
        let mut labels = Vec::with_capacity(n);
        for s in 0..n {
            labels.push((s % cfg.num_classes) as u8);
            for v in images.index_axis_mut(Axis(0), s).iter_mut() {
                *v = rng.gen_range(0.1..0.9);
            }
        }
        ImageBatch::new(images, labels, cfg.num_classes).unwrap()
    }

    fn small_trigger(cfg: &ModelConfig) -> Trigger<f32> {
        let p = cfg.patch_size;
        let values = Array3::from_shape_fn((cfg.channels, p, p), |(c, r, q)| {
            ((c + r + q) % 3) as f32 * 0.01
        });
        Trigger::new(values, -1.0, 1.0).unwrap()
    }

    fn zeroed_tensors(cfg: ModelConfig, seed: u64, pattern: &str) -> ViTParams<f32> {
        let mut params = init_model::<f32>(cfg, seed).unwrap();
        let names = tensor_names(&cfg);
        for (i, name) in names.iter().enumerate() {
            if name.contains(pattern) {
                params.tensors_mut()[i].fill(0.0);
            }
        }
        params
    }

    /// Four distinct constant patches laid out [a b; c d] on a 2×2 grid.
    fn quadrant_image() -> Array3<f32> {
        let mut x = Array3::<f32>::zeros((2, 16, 16));
        for (flat, value) in [0.1f32, 0.2, 0.3, 0.4].iter().enumerate() {
            x.slice_mut(s![
                ..,
                (flat / 2) * 8..(flat / 2 + 1) * 8,
                (flat % 2) * 8..(flat % 2 + 1) * 8
            ])
            .fill(*value);
        }
        x
    }

    #[test]
    fn blank_patch_changes_exactly_one_patch() {
        let x = quadrant_image();
        let out = blank_patch(&x, PatchIndex::new(0, 1), 8, -1.0).unwrap();
        let mut changed_positions = 0;
        for r in 0..16 {
            for c in 0..16 {
                if (0..2).any(|ch| out[[ch, r, c]] != x[[ch, r, c]]) {
                    changed_positions += 1;
                    assert!(r < 8 && c >= 8, "change leaked outside the patch");
                    assert!((0..2).all(|ch| out[[ch, r, c]] == -1.0));
                }
            }
        }
        assert_eq!(changed_positions, 64);
    }

    #[test]
    fn whole_image_grid_drop_blanks_everything() {
        let x = quadrant_image();
        let mut rng = stage_rng(1, "drop", 0);
        let out = patch_drop(&x, 16, 0.0, &mut rng).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drop_choices_are_uniform_over_patches() {
        let x = quadrant_image();
        let n_draws = 10_000;
        let mut counts = [0usize; 4];
        for i in 0..n_draws {
            let mut rng = stage_rng(2, "drop-freq", i);
            let out = patch_drop(&x, 8, -1.0, &mut rng).unwrap();
            for flat in 0..4 {
                if out[[0, (flat / 2) * 8, (flat % 2) * 8]] == -1.0 {
                    counts[flat] += 1;
                }
            }
        }
        let expected = n_draws as f64 / 4.0;
        let sigma = (n_draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!(
                (c as f64 - expected).abs() <= 3.0 * sigma,
                "patch frequency {c} outside {expected} ± {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn shuffle_is_an_involution_and_preserves_pixels() {
        let x = quadrant_image();
        let (a, b) = (PatchIndex::new(0, 0), PatchIndex::new(1, 1));
        let once = swap_patches(&x, a, b, 8).unwrap();
        assert_ne!(once, x);
        assert_eq!(swap_patches(&once, a, b, 8).unwrap(), x);

        let mut rng = stage_rng(3, "shuffle", 0);
        let shuffled = patch_shuffle(&x, 8, &mut rng).unwrap();
        let mut before: Vec<f32> = x.iter().copied().collect();
        let mut after: Vec<f32> = shuffled.iter().copied().collect();
        before.sort_by(f32::total_cmp);
        after.sort_by(f32::total_cmp);
        assert_eq!(before, after);
    }

    #[test]
    fn shuffle_needs_two_patches_and_picks_pairs_uniformly() {
        let x = quadrant_image();
        assert!(patch_shuffle(&x, 16, &mut stage_rng(4, "s", 0)).is_err());

        // 2×2 grid → 6 unordered pairs; identify the swapped pair by the
        // two quadrants whose constant value changed.
        let n_draws = 10_000;
        let mut counts = std::collections::HashMap::new();
        for i in 0..n_draws {
            let mut rng = stage_rng(5, "pair-freq", i);
            let out = patch_shuffle(&x, 8, &mut rng).unwrap();
            let mut moved = Vec::new();
            for flat in 0..4 {
                if out[[0, (flat / 2) * 8, (flat % 2) * 8]]
                    != x[[0, (flat / 2) * 8, (flat % 2) * 8]]
                {
                    moved.push(flat);
                }
            }
            assert_eq!(moved.len(), 2);
            *counts.entry((moved[0], moved[1])).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let q = 1.0 / 6.0;
        let expected = n_draws as f64 * q;
        let sigma = (n_draws as f64 * q * (1.0 - q)).sqrt();
        for (&pair, &c) in &counts {
            assert!(
                (c as f64 - expected).abs() <= 3.0 * sigma,
                "pair {pair:?} frequency {c} outside {expected} ± {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn drop_and_shuffle_composes_in_order() {
        let x = quadrant_image();
        // Shuffle-then-drop with a replayed stream must equal the manual
        // composition using the same draws.
        let mut rng = stage_rng(6, "compose", 0);
        let combined = drop_and_shuffle(&x, 8, -1.0, &mut rng).unwrap();
        let mut replay = stage_rng(6, "compose", 0);
        let manual = {
            let shuffled = patch_shuffle(&x, 8, &mut replay).unwrap();
            patch_drop(&shuffled, 8, -1.0, &mut replay).unwrap()
        };
        assert_eq!(combined, manual);

        // Manual construction: swap the top row pair, then blank (0,0)
        // — the value at (0,0) is the old (0,1) before blanking, so the
        // result differs from drop-first-then-shuffle.
        let swapped = swap_patches(&x, PatchIndex::new(0, 0), PatchIndex::new(0, 1), 8).unwrap();
        let shuffle_then_drop = blank_patch(&swapped, PatchIndex::new(0, 0), 8, -1.0).unwrap();
        let dropped = blank_patch(&x, PatchIndex::new(0, 0), 8, -1.0).unwrap();
        let drop_then_shuffle =
            swap_patches(&dropped, PatchIndex::new(0, 0), PatchIndex::new(0, 1), 8).unwrap();
        assert_ne!(shuffle_then_drop, drop_then_shuffle);
        assert_eq!(shuffle_then_drop[[0, 0, 0]], -1.0);
        assert_eq!(shuffle_then_drop[[0, 0, 8]], 0.1);

        // Composition touches at most 3 patches.
        for i in 0..100u64 {
            let mut rng = stage_rng(7, "diff-count", i);
            let out = drop_and_shuffle(&x, 8, -1.0, &mut rng).unwrap();
            let mut differing = 0;
            for flat in 0..4 {
                let (r0, c0) = ((flat / 2) * 8, (flat % 2) * 8);
                let patch_differs = (0..8).any(|r| {
                    (0..8).any(|c| (0..2).any(|ch| out[[ch, r0 + r, c0 + c]] != x[[ch, r0 + r, c0 + c]]))
                });
                if patch_differs {
                    differing += 1;
                }
            }
            assert!(differing <= 3, "draw {i} changed {differing} patches");
        }
    }

    #[test]
    fn identity_op_reproduces_plain_rates() {
        let cfg = tiny_cfg();
        let data = toy_data(12, &cfg, 8);
        let params = init_model::<f32>(cfg, 9).unwrap();
        let trigger = small_trigger(&cfg);
        let payload = PayloadSpec::single(PatchIndex::new(0, 0));
        let rows = patch_op_evaluation(
            &params,
            &trigger,
            &data,
            &[payload.clone()],
            1,
            &[PatchOp::Identity],
            &PatchOpConfig {
                repetitions: 1,
                seed: 10,
            },
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].acc_after, rows[0].acc_before);
        assert_eq!(rows[0].asr_after, rows[0].asr_before);
        assert_eq!(rows[0].acc_before, accuracy(&params, &data).unwrap());
        assert_eq!(
            rows[0].asr_before,
            asr(&params, &trigger, &data, &payload, 1).unwrap()
        );
    }

    #[test]
    fn patch_op_average_matches_per_repetition_recomputation() {
        let cfg = tiny_cfg();
        let data = toy_data(8, &cfg, 11);
        let params = init_model::<f32>(cfg, 12).unwrap();
        let trigger = small_trigger(&cfg);
        let payload = PayloadSpec::single(PatchIndex::new(1, 1));
        let config = PatchOpConfig {
            repetitions: 3,
            seed: 13,
        };
        let rows = patch_op_evaluation(
            &params,
            &trigger,
            &data,
            &[payload.clone()],
            1,
            &[PatchOp::Drop],
            &config,
        )
        .unwrap();

        // Recompute each repetition's rates directly from the same
        // per-(sample, repetition) streams and average.
        let fill = data.value_range().0;
        let mut acc_sum = 0.0;
        let mut asr_sum = 0.0;
        for rep in 0..config.repetitions {
            let perturbed = perturb_batch(
                &data,
                PatchOp::Drop,
                8,
                fill,
                "patch-drop",
                config.seed,
                config.repetitions,
                rep,
                0,
            )
            .unwrap();
            acc_sum += accuracy(&params, &perturbed).unwrap();

            let eligible: Vec<usize> =
                (0..data.len()).filter(|&i| data.labels[i] != 1).collect();
            let poisoned =
                apply_payload(&data.subset(&eligible), &trigger, &payload, 0).unwrap();
            let defended = perturb_batch(
                &poisoned,
                PatchOp::Drop,
                8,
                fill,
                "patch-drop",
                config.seed,
                config.repetitions,
                rep,
                0,
            )
            .unwrap();
            let predicted = predict_labels(&params, &defended).unwrap();
            asr_sum += predicted.iter().filter(|&&p| p == 1).count() as f64
                / eligible.len() as f64;
        }
        let reps = config.repetitions as f64;
        assert!((rows[0].acc_after - acc_sum / reps).abs() < 1e-12);
        assert!((rows[0].asr_after - asr_sum / reps).abs() < 1e-12);
    }

    #[test]
    fn percentile_matches_sorted_recomputation() {
        let counts = vec![7, 1, 4, 4, 0, 9, 2, 5, 3, 8];
        let mut sorted = counts.clone();
        sorted.sort_unstable();
        assert_eq!(
            percentile_nearest_rank(&counts, 90.0).unwrap(),
            sorted[((0.9f64 * 10.0).ceil() as usize) - 1]
        );
        assert_eq!(percentile_nearest_rank(&counts, 10.0).unwrap(), sorted[0]);
        assert_eq!(percentile_nearest_rank(&counts, 100.0).unwrap(), 9);
        assert_eq!(percentile_nearest_rank(&[5], 50.0).unwrap(), 5);
        assert!(percentile_nearest_rank(&[], 50.0).is_err());
    }

    #[test]
    fn constant_model_never_flips_and_flags_nothing() {
        let cfg = tiny_cfg();
        let params = zeroed_tensors(cfg, 14, "head.");
        let calib = toy_data(10, &cfg, 15);
        let clean = toy_data(6, &cfg, 16);
        let poisoned = toy_data(6, &cfg, 17);
        let report = dbavt_detect(
            &params,
            &calib,
            &clean,
            &poisoned,
            &DBAVTConfig {
                repetitions: 5,
                seed: 18,
            },
        )
        .unwrap();
        // Predictions are constant, so every flip count is zero; the
        // shuffle rule (strictly fewer than the 10th percentile, which is
        // zero) can never fire.
        assert_eq!(report.drop_threshold, 0);
        assert_eq!(report.shuffle_threshold, 0);
        assert!(report.clean_flips.iter().all(|f| f.drop == 0 && f.shuffle == 0));
        assert_eq!(report.fnr, 0.0);
        assert_eq!(report.tpr, 0.0);
    }

    #[test]
    fn dbavt_thresholds_come_from_calibration_order_statistics() {
        let cfg = tiny_cfg();
        let params = init_model::<f32>(cfg, 19).unwrap();
        let calib = toy_data(12, &cfg, 20);
        let clean = toy_data(6, &cfg, 21);
        let poisoned = toy_data(6, &cfg, 22);
        let config = DBAVTConfig {
            repetitions: 4,
            seed: 23,
        };
        let report = dbavt_detect(&params, &calib, &clean, &poisoned, &config).unwrap();

        let fill = calib.value_range().0;
        let drops = flip_counts(
            &params,
            &calib,
            PatchOp::Drop,
            8,
            fill,
            "dbavt-drop-calib",
            &config,
        )
        .unwrap();
        let shuffles = flip_counts(
            &params,
            &calib,
            PatchOp::Shuffle,
            8,
            fill,
            "dbavt-shuffle-calib",
            &config,
        )
        .unwrap();
        assert_eq!(
            report.drop_threshold,
            percentile_nearest_rank(&drops, 90.0).unwrap()
        );
        assert_eq!(
            report.shuffle_threshold,
            percentile_nearest_rank(&shuffles, 10.0).unwrap()
        );
        let flagged = report
            .clean_flips
            .iter()
            .filter(|f| f.drop > report.drop_threshold || f.shuffle < report.shuffle_threshold)
            .count();
        assert_eq!(report.fnr, flagged as f64 / 6.0);

        assert!(dbavt_detect(
            &params,
            &calib.subset(&[]),
            &clean,
            &poisoned,
            &config
        )
        .is_err());
    }

    #[test]
    fn bavt_blanks_the_rollout_argmax_patch() {
        let cfg = tiny_cfg();
        let params = init_model::<f32>(cfg, 24).unwrap();
        let data = toy_data(3, &cfg, 25);
        let fill = data.value_range().0;
        let (blocked, locations) = bavt_block(&params, &data, fill).unwrap();

        let (_, stack) = forward(&params, &data).unwrap();
        let rollout = attention_rollout(&stack, 2).unwrap();
        for s in 0..3 {
            let map = rollout.index_axis(Axis(0), s);
            let mut best = 0usize;
            for flat in 1..4 {
                if map[[flat / 2, flat % 2]] > map[[best / 2, best % 2]] {
                    best = flat;
                }
            }
            assert_eq!(locations[s].flat(2), best);
            let expected = blank_patch(
                &data.images.index_axis(Axis(0), s).to_owned(),
                locations[s],
                8,
                fill,
            )
            .unwrap();
            assert_eq!(blocked.images.index_axis(Axis(0), s), expected.view());
        }
    }

    #[test]
    fn uniform_rollout_tie_breaks_to_the_first_patch() {
        let cfg = tiny_cfg();
        let params = zeroed_tensors(cfg, 26, "qkv");
        let data = toy_data(2, &cfg, 27);
        let (_, locations) = bavt_block(&params, &data, 0.0).unwrap();
        assert!(locations.iter().all(|l| l.flat(2) == 0));
    }

    #[test]
    fn gaussian_kernel_is_normalized_with_documented_sigmas() {
        assert!((gaussian_sigma(3) - 0.8).abs() < 1e-12);
        assert!((gaussian_sigma(5) - 1.1).abs() < 1e-12);
        for window in [1, 3, 5, 7] {
            let k = gaussian_kernel(window).unwrap();
            assert_eq!(k.len(), window);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-7);
            for i in 0..window / 2 {
                assert!((k[i] - k[window - 1 - i]).abs() < 1e-12, "kernel symmetric");
            }
        }
        assert!(gaussian_kernel(4).is_err());
        assert!(gaussian_kernel(0).is_err());
    }

    #[test]
    fn gaussian_filter_fixes_constant_images_and_matches_bruteforce() {
        let constant = Array3::<f32>::from_elem((2, 12, 12), 0.37);
        let blurred = gaussian_filter(&constant, 5).unwrap();
        for (a, b) in blurred.iter().zip(constant.iter()) {
            assert!((a - b).abs() < 1e-6);
        }

        // Separable pass vs direct 2-D convolution with the outer-product
        // kernel and the same reflect padding.
        let mut rng = stage_rng(28, "blur", 0);
        let x = Array3::<f32>::from_shape_fn((1, 6, 7), |_| rng.gen_range(-1.0..1.0f32));
        let window = 5;
        let out = gaussian_filter(&x, window).unwrap();
        let k = gaussian_kernel(window).unwrap();
        let radius = (window / 2) as isize;
        for r in 0..6isize {
            for c in 0..7isize {
                let mut acc = 0.0f64;
                for kr in 0..window as isize {
                    for kc in 0..window as isize {
                        let src_r = reflect(r + kr - radius, 6);
                        let src_c = reflect(c + kc - radius, 7);
                        acc += k[kr as usize]
                            * k[kc as usize]
                            * x[[0, src_r, src_c]] as f64;
                    }
                }
                assert!((out[[0, r as usize, c as usize]] as f64 - acc).abs() < 1e-6);
            }
        }

        assert!(gaussian_filter(&x, 4).is_err());
        assert!(gaussian_filter(&x, 13).is_err());
    }

    #[test]
    fn strip_entropy_is_ln_kappa_for_uniform_and_zero_for_confident() {
        let cfg = tiny_cfg();
        let pool = toy_data(5, &cfg, 29);
        let image = pool.images.index_axis(Axis(0), 0).to_owned();

        let uniform = zeroed_tensors(cfg, 30, "head.");
        let mut rng = stage_rng(31, "strip", 0);
        let entropies = strip_entropy(&uniform, &image, &pool, 10, &mut rng).unwrap();
        assert_eq!(entropies.len(), 10);
        for e in &entropies {
            assert!((e - 4.0f64.ln()).abs() < 1e-6, "entropy {e} vs ln 4");
        }

        let mut confident = zeroed_tensors(cfg, 32, "head.");
        let names = tensor_names(&cfg);
        for (i, name) in names.iter().enumerate() {
            if name == "head.bias" {
                confident.tensors_mut()[i][[0]] = 50.0;
            }
        }
        let mut rng = stage_rng(33, "strip", 0);
        let entropies = strip_entropy(&confident, &image, &pool, 10, &mut rng).unwrap();
        for e in &entropies {
            assert!(*e < 1e-6, "entropy {e} should vanish");
        }

        let empty = pool.subset(&[]);
        assert!(strip_entropy(&uniform, &image, &empty, 10, &mut rng).is_err());
    }

    #[test]
    fn strip_entropies_match_scalar_recomputation_of_the_same_blends() {
        let cfg = tiny_cfg();
        let pool = toy_data(6, &cfg, 34);
        let image = pool.images.index_axis(Axis(0), 2).to_owned();
        let params = init_model::<f32>(cfg, 35).unwrap();

        let mut rng = stage_rng(36, "strip-oracle", 0);
        let entropies = strip_entropy(&params, &image, &pool, 7, &mut rng).unwrap();

        let mut replay = stage_rng(36, "strip-oracle", 0);
        for (b, reported) in entropies.iter().enumerate() {
            let pick = replay.gen_range(0..pool.len());
            let blend = (&image + &pool.images.index_axis(Axis(0), pick)).mapv(|v| v * 0.5);
            let mut images = Array4::<f32>::zeros((1, 2, 16, 16));
            images.index_axis_mut(Axis(0), 0).assign(&blend);
            let logits = predict(&params, &ImageBatch { images, labels: vec![0] }).unwrap();
            let row: Vec<f64> = logits.row(0).iter().map(|&v| v as f64).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let expected: f64 = exps
                .iter()
                .map(|e| {
                    let p = e / total;
                    -p * p.ln()
                })
                .sum();
            assert!(
                (reported - expected).abs() < 1e-9,
                "blend {b}: {reported} vs {expected}"
            );
        }
    }

    #[test]
    fn entropy_histogram_counts_and_serializes() {
        let clean = [0.1, 0.2, 0.9, 0.95];
        let poisoned = [0.0, 0.05, 0.5];
        let hist = entropy_histogram(&clean, &poisoned, 2).unwrap();
        assert_eq!(hist.edges.len(), 3);
        assert_eq!(hist.clean.iter().sum::<usize>(), 4);
        assert_eq!(hist.poisoned.iter().sum::<usize>(), 3);
        // Range [0, 0.95], bin split at 0.475.
        assert_eq!(hist.clean, vec![2, 2]);
        assert_eq!(hist.poisoned, vec![2, 1]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("strip.csv");
        write_entropy_histogram_csv(&hist, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("bin_low,bin_high,clean,poisoned\n"));
        assert_eq!(text.lines().count(), 3);

        assert!(entropy_histogram(&[], &poisoned, 2).is_err());
        assert!(entropy_histogram(&clean, &poisoned, 0).is_err());
    }

    #[test]
    fn fine_prune_zeroes_the_lowest_activation_units() {
        let cfg = tiny_cfg();
        let params = init_model::<f32>(cfg, 37).unwrap();
        let calib = toy_data(6, &cfg, 38);

        let (unchanged, pruned_units) = fine_prune(&params, &calib, 0.0).unwrap();
        assert!(pruned_units.is_empty());
        for (a, b) in unchanged.tensors().iter().zip(params.tensors()) {
            assert_eq!(a, b);
        }
        assert!(fine_prune(&params, &calib, 1.0).is_err());
        assert!(fine_prune(&params, &calib, -0.1).is_err());

        let ratio = 0.5;
        let (pruned, units) = fine_prune(&params, &calib, ratio).unwrap();
        let hidden_dim = cfg.hidden_dim();
        assert_eq!(units.len(), hidden_dim / 2);

        // Ranking oracle: the pruned set is exactly the lowest half by
        // mean absolute activation.
        let means = mlp_hidden_mean_abs(&params, &calib).unwrap();
        let mut order: Vec<usize> = (0..hidden_dim).collect();
        order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
        assert_eq!(units, order[..hidden_dim / 2].to_vec());

        // Surgery audit: zeroed exactly where claimed, untouched elsewhere.
        let names = tensor_names(&cfg);
        let layer = cfg.depth - 1;
        let pos = |n: &str| names.iter().position(|x| x == n).unwrap();
        let fc1_w = pos(&format!("blocks.{layer}.mlp.fc1.weight"));
        let fc1_b = pos(&format!("blocks.{layer}.mlp.fc1.bias"));
        let fc2_w = pos(&format!("blocks.{layer}.mlp.fc2.weight"));
        for u in 0..hidden_dim {
            let zeroed = units.contains(&u);
            let col_zero = pruned.tensors()[fc1_w]
                .slice(s![.., u])
                .iter()
                .all(|&v| v == 0.0);
            let row_zero = pruned.tensors()[fc2_w]
                .slice(s![u, ..])
                .iter()
                .all(|&v| v == 0.0);
            if zeroed {
                assert!(col_zero && row_zero);
                assert_eq!(pruned.tensors()[fc1_b][[u]], 0.0);
            } else {
                assert_eq!(
                    pruned.tensors()[fc1_w].slice(s![.., u]),
                    params.tensors()[fc1_w].slice(s![.., u])
                );
                assert_eq!(
                    pruned.tensors()[fc2_w].slice(s![u, ..]),
                    params.tensors()[fc2_w].slice(s![u, ..])
                );
            }
        }
        for (i, (a, b)) in pruned.tensors().iter().zip(params.tensors()).enumerate() {
            if ![fc1_w, fc1_b, fc2_w].contains(&i) {
                assert_eq!(a, b, "tensor {i} modified unexpectedly");
            }
        }
    }

    #[test]
    fn full_mlp_prune_equals_removing_the_final_mlp_contribution() {
        let cfg = tiny_cfg();
        let params = init_model::<f32>(cfg, 39).unwrap();
        let calib = toy_data(4, &cfg, 40);
        let hidden_dim = cfg.hidden_dim();
        let ratio = (hidden_dim as f64 - 0.5) / hidden_dim as f64;
        let (pruned, units) = fine_prune(&params, &calib, ratio).unwrap();
        assert_eq!(units.len(), hidden_dim - 1);

        // Manually ablate the whole final MLP and prune the one surviving
        // unit's output row on top: predictions must agree exactly with a
        // model whose surviving unit is also silenced at the output.
        let mut ablated = params.clone();
        let names = tensor_names(&cfg);
        let layer = cfg.depth - 1;
        for (i, name) in names.iter().enumerate() {
            if name.starts_with(&format!("blocks.{layer}.mlp.")) {
                ablated.tensors_mut()[i].fill(0.0);
            }
        }
        let survivor = (0..hidden_dim).find(|u| !units.contains(u)).unwrap();
        let mut silenced = pruned.clone();
        let fc2_w = names
            .iter()
            .position(|n| *n == format!("blocks.{layer}.mlp.fc2.weight"))
            .unwrap();
        silenced.tensors_mut()[fc2_w]
            .slice_mut(s![survivor, ..])
            .fill(0.0);
        // fc1.bias of the survivor stays, but with its fc2 row silenced
        // the two models' logits coincide up to the ablated model's GELU(0)
        // offset — both route zero through the final MLP.
        let a = predict(&silenced, &calib).unwrap();
        let b = predict(&ablated, &calib).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }

        let empty = calib.subset(&[]);
        assert!(fine_prune(&params, &empty, 0.5).is_err());
    }

    #[test]
    fn defense_outcome_rejects_out_of_range_rates() {
        assert!(DefenseOutcome::new("x".into(), 0.5, 0.5, 1.2, 0.5).is_err());
        assert!(DefenseOutcome::new("x".into(), -0.1, 0.5, 0.5, 0.5).is_err());
        assert!(DefenseOutcome::new("x".into(), 1.0, 0.0, 0.25, 0.75).is_ok());
    }

    #[test]
    fn bavt_and_gaussian_drivers_produce_valid_rows() {
        let cfg = tiny_cfg();
        let data = toy_data(8, &cfg, 41);
        let params = init_model::<f32>(cfg, 42).unwrap();
        let trigger = small_trigger(&cfg);
        let payload = PayloadSpec::single(PatchIndex::new(0, 0));

        let bavt = bavt_evaluation(&params, &trigger, &data, &payload, 1).unwrap();
        assert!(bavt.defense.starts_with("bavt"));
        assert_eq!(bavt.acc_before, accuracy(&params, &data).unwrap());

        let gauss = gaussian_evaluation(&params, &trigger, &data, &payload, 1, 3).unwrap();
        assert!(gauss.defense.contains("window=3"));
        // Same before-side sample sets and seeds across drivers.
        assert_eq!(gauss.acc_before, bavt.acc_before);
        assert_eq!(gauss.asr_before, bavt.asr_before);
    }
}
