//! Attack-effectiveness metrics (accuracy, attack success rate, per-patch
//! success heatmaps) and twofold stealthiness metrics (pixel-space l2 /
//! PSNR / SSIM, attention-space l2 / APSNR / ARES).
//!
//! Pixel metrics operate on displayable images — denormalized, scaled to
//! `[0, 255]`, and clamped — so values are comparable across
//! normalizations. Attention metrics operate on composed attention maps;
//! l2 is taken on the raw maps, APSNR and ARES on max-normalized maps with
//! peak 1.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, Normalization};
use crate::error::{CoreError, Result};
use crate::rng::{sample_distinct, stage_rng};
use crate::tensor::Scalar;
use crate::trigger::{insert_rep, PatchIndex, Trigger};
use crate::vit::{attention_map, forward, predict, ViTParams};

/// Samples per inference chunk; keeps peak memory flat on large sets.
const EVAL_BATCH: usize = 64;

/// How poisoned inputs place trigger copies at inference time: a fixed
/// location list shared by every image, or `k` fresh distinct locations
/// per image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadSpec {
    Fixed { locations: Vec<PatchIndex> },
    Random { k: usize, seed: u64 },
}

impl PayloadSpec {
    /// One trigger copy at one fixed location.
    pub fn single(location: PatchIndex) -> Self {
        Self::Fixed {
            locations: vec![location],
        }
    }

    pub fn random(k: usize, seed: u64) -> Self {
        Self::Random { k, seed }
    }

    /// Trigger copies per image.
    pub fn k(&self) -> usize {
        match self {
            Self::Fixed { locations } => locations.len(),
            Self::Random { k, .. } => *k,
        }
    }

    pub fn validate(&self, grid: usize) -> Result<()> {
        let patches = grid * grid;
        if self.k() == 0 || self.k() > patches {
            return Err(CoreError::InvalidArgument(format!(
                "payload needs between 1 and {patches} locations, got {}",
                self.k()
            )));
        }
        if let Self::Fixed { locations } = self {
            for (i, loc) in locations.iter().enumerate() {
                loc.validate(grid)?;
                if locations[..i].contains(loc) {
                    return Err(CoreError::InvalidArgument(format!(
                        "duplicate payload location ({}, {})",
                        loc.row, loc.col
                    )));
                }
            }
        }
        Ok(())
    }

    /// Insertion locations for the sample at `index`. Fixed payloads ignore
    /// the index; random payloads derive a per-sample stream from it, so
    /// results do not depend on how a set was chunked into batches.
    pub fn locations_for(&self, index: usize, grid: usize) -> Vec<PatchIndex> {
        match self {
            Self::Fixed { locations } => locations.clone(),
            Self::Random { k, seed } => {
                let mut rng = stage_rng(*seed, "payload-locations", index as u64);
                sample_distinct(grid * grid, *k, &mut rng)
                    .into_iter()
                    .map(|flat| PatchIndex::from_flat(flat, grid))
                    .collect()
            }
        }
    }
}

/// Superimposes the trigger per the payload onto every image of the batch,
/// keeping labels. `first_index` is the position of the batch's first
/// sample in the full set, anchoring per-sample random draws.
pub fn apply_payload<F: Scalar>(
    batch: &ImageBatch<F>,
    trigger: &Trigger<F>,
    payload: &PayloadSpec,
    first_index: usize,
) -> Result<ImageBatch<F>> {
    let p = trigger.patch_size();
    let shape = batch.images.shape();
    if shape[1] != trigger.channels() {
        return Err(CoreError::ShapeMismatch(format!(
            "images have {} channels, trigger has {}",
            shape[1],
            trigger.channels()
        )));
    }
    if shape[2] != shape[3] || shape[2] % p != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "image size {}x{} not divisible into {p}-pixel patches",
            shape[2], shape[3]
        )));
    }
    let grid = shape[2] / p;
    payload.validate(grid)?;

    let mut images = batch.images.clone();
    for sample in 0..batch.len() {
        for loc in payload.locations_for(first_index + sample, grid) {
            let mut window = images.slice_mut(s![
                sample,
                ..,
                loc.row * p..(loc.row + 1) * p,
                loc.col * p..(loc.col + 1) * p
            ]);
            window += &trigger.values;
        }
    }
    Ok(ImageBatch {
        images,
        labels: batch.labels.clone(),
    })
}

/// Argmax class per sample, evaluated in fixed-size chunks. Ties resolve
/// to the lowest class index.
pub fn predict_labels<F: Scalar>(params: &ViTParams<F>, data: &ImageBatch<F>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = predict(params, &data.subset(chunk))?;
        for row in logits.outer_iter() {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy<F: Scalar>(params: &ViTParams<F>, data: &ImageBatch<F>) -> Result<f64> {
    if data.is_empty() {
        return Err(CoreError::InvalidArgument(
            "accuracy over an empty set".into(),
        ));
    }
    let predicted = predict_labels(params, data)?;
    let correct = predicted
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Attack success rate: fraction of poisoned samples classified as the
/// target. Samples whose ground truth already is the target class are
/// excluded from the denominator.
pub fn asr<F: Scalar>(
    params: &ViTParams<F>,
    trigger: &Trigger<F>,
    data: &ImageBatch<F>,
    payload: &PayloadSpec,
    target: u8,
) -> Result<f64> {
    let eligible: Vec<usize> = (0..data.len())
        .filter(|&i| data.labels[i] != target)
        .collect();
    if eligible.is_empty() {
        return Err(CoreError::InvalidArgument(
            "no samples eligible for the success rate (all carry the target label)".into(),
        ));
    }
    let mut hits = 0usize;
    for (chunk_id, chunk) in eligible.chunks(EVAL_BATCH).enumerate() {
        let batch = data.subset(chunk);
        let poisoned = apply_payload(&batch, trigger, payload, chunk_id * EVAL_BATCH)?;
        let predicted = predict_labels(params, &poisoned)?;
        hits += predicted.iter().filter(|&&p| p == target).count();
    }
    Ok(hits as f64 / eligible.len() as f64)
}

/// Per-patch attack success rates and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TREHeatmap {
    /// Row-major `g×g` grid; entry `(r, c)` is the success rate with one
    /// trigger copy fixed at that patch.
    pub grid: Array2<f64>,
    /// Arithmetic mean of the grid.
    pub tre: f64,
}

impl TREHeatmap {
    pub fn from_grid(grid: Array2<f64>) -> Result<Self> {
        if grid.is_empty() || grid.nrows() != grid.ncols() {
            return Err(CoreError::InvalidArgument(format!(
                "heatmap grid must be square and non-empty, got {:?}",
                grid.shape()
            )));
        }
        if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::InvalidArgument(
                "heatmap entries must lie in [0, 1]".into(),
            ));
        }
        let tre = grid.iter().sum::<f64>() / grid.len() as f64;
        Ok(Self { grid, tre })
    }
}

/// Success rate with a single trigger copy at every patch in turn.
pub fn tre_heatmap<F: Scalar>(
    params: &ViTParams<F>,
    trigger: &Trigger<F>,
    data: &ImageBatch<F>,
    target: u8,
) -> Result<TREHeatmap> {
    let p = trigger.patch_size();
    let size = data.images.shape()[2];
    if size % p != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "image size {size} not divisible into {p}-pixel patches"
        )));
    }
    let grid = size / p;
    let mut rates = Array2::<f64>::zeros((grid, grid));
    for flat in 0..grid * grid {
        let loc = PatchIndex::from_flat(flat, grid);
        let payload = PayloadSpec::single(loc);
        rates[[loc.row, loc.col]] = asr(params, trigger, data, &payload, target)?;
    }
    TREHeatmap::from_grid(rates)
}

/// Pixel-space disparity of one image pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisualMetrics {
    pub l2: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Attention-space disparity of one image pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionMetrics {
    pub l2: f64,
    pub apsnr_db: f64,
    pub ares: f64,
}

#[derive(Debug, Clone)]
pub struct VisualStealth {
    pub per_image: Vec<VisualMetrics>,
    pub mean: VisualMetrics,
}

#[derive(Debug, Clone)]
pub struct AttentionStealth {
    pub per_image: Vec<AttentionMetrics>,
    pub mean: AttentionMetrics,
}

/// PSNR in dB for a given mean squared error and peak value; infinite at
/// zero error.
pub fn psnr_db(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let mut w = Array2::<f64>::zeros((size, size));
    for r in 0..size {
        for c in 0..size {
            let (dr, dc) = (r as f64 - center, c as f64 - center);
            w[[r, c]] = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = w.iter().sum();
    w.mapv_inplace(|v| v / total);
    w
}

fn ssim_window_size(min_dim: usize) -> usize {
    let w = min_dim.min(11);
    (if w % 2 == 0 { w - 1 } else { w }).max(1)
}

/// Structural similarity of two single-channel images: Gaussian-weighted
/// window statistics (11×11, σ=1.5, shrunk to fit small images), stability
/// constants `C1=(0.01·peak)²`, `C2=(0.03·peak)²`, averaged over all fully
/// interior window positions.
pub fn ssim_single(a: ArrayView2<f64>, b: ArrayView2<f64>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "ssim inputs {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = a.dim();
    if h == 0 || w == 0 {
        return Err(CoreError::InvalidArgument("ssim on an empty image".into()));
    }
    let win = ssim_window_size(h.min(w));
    let weights = gaussian_window(win, 1.5);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);

    let mut sum = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - win {
        for c0 in 0..=w - win {
            let (mut ux, mut uy) = (0.0, 0.0);
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for r in 0..win {
                for c in 0..win {
                    let g = weights[[r, c]];
                    let x = a[[r0 + r, c0 + c]];
                    let y = b[[r0 + r, c0 + c]];
                    ux += g * x;
                    uy += g * y;
                    sxx += g * x * x;
                    syy += g * y * y;
                    sxy += g * x * y;
                }
            }
            let vx = sxx - ux * ux;
            let vy = syy - uy * uy;
            let cov = sxy - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Images as the viewer would see them: denormalized, scaled to `[0, 255]`
/// per channel, clamped.
fn display_images<F: Scalar>(images: &Array4<F>, norm: &Normalization) -> Result<Array4<f64>> {
    let shape = images.raw_dim();
    if shape[1] != norm.channels() {
        return Err(CoreError::ShapeMismatch(format!(
            "images have {} channels, normalization has {}",
            shape[1],
            norm.channels()
        )));
    }
    let mut out = Array4::<f64>::zeros((shape[0], shape[1], shape[2], shape[3]));
    for ((b, c, h, w), &v) in images.indexed_iter() {
        out[[b, c, h, w]] = norm.to_display(v, c).to_f64().unwrap();
    }
    Ok(out)
}

fn visual_pair_metrics(clean: &Array3<f64>, poisoned: &Array3<f64>) -> Result<VisualMetrics> {
    let diff = poisoned - clean;
    let sq_sum: f64 = diff.iter().map(|d| d * d).sum();
    let l2 = sq_sum.sqrt();
    let mse = sq_sum / diff.len() as f64;
    let channels = clean.shape()[0];
    let mut ssim_sum = 0.0;
    for c in 0..channels {
        ssim_sum += ssim_single(
            clean.index_axis(ndarray::Axis(0), c),
            poisoned.index_axis(ndarray::Axis(0), c),
            255.0,
        )?;
    }
    Ok(VisualMetrics {
        l2,
        psnr_db: psnr_db(mse, 255.0),
        ssim: ssim_sum / channels as f64,
    })
}

/// Pixel-space stealthiness of payload insertion over a clean set.
pub fn visual_stealth<F: Scalar>(
    clean: &ImageBatch<F>,
    trigger: &Trigger<F>,
    payload: &PayloadSpec,
    norm: &Normalization,
) -> Result<VisualStealth> {
    if clean.is_empty() {
        return Err(CoreError::InvalidArgument(
            "stealthiness over an empty set".into(),
        ));
    }
    let mut per_image = Vec::with_capacity(clean.len());
    let idx: Vec<usize> = (0..clean.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = clean.subset(chunk);
        let poisoned = apply_payload(&batch, trigger, payload, chunk[0])?;
        let clean_disp = display_images(&batch.images, norm)?;
        let poison_disp = display_images(&poisoned.images, norm)?;
        for s in 0..batch.len() {
            per_image.push(visual_pair_metrics(
                &clean_disp.index_axis(ndarray::Axis(0), s).to_owned(),
                &poison_disp.index_axis(ndarray::Axis(0), s).to_owned(),
            )?);
        }
    }
    let mean = VisualMetrics {
        l2: per_image.iter().map(|m| m.l2).sum::<f64>() / per_image.len() as f64,
        psnr_db: per_image.iter().map(|m| m.psnr_db).sum::<f64>() / per_image.len() as f64,
        ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / per_image.len() as f64,
    };
    Ok(VisualStealth { per_image, mean })
}

fn max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let mx = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx > 0.0 {
        map.mapv(|v| v / mx)
    } else {
        Array2::zeros(map.raw_dim())
    }
}

/// Attention-space stealthiness: disparity between the composed attention
/// maps of clean and poisoned inputs through the given block.
pub fn attention_stealth<F: Scalar>(
    params: &ViTParams<F>,
    clean: &ImageBatch<F>,
    trigger: &Trigger<F>,
    payload: &PayloadSpec,
    layer: usize,
) -> Result<AttentionStealth> {
    if clean.is_empty() {
        return Err(CoreError::InvalidArgument(
            "stealthiness over an empty set".into(),
        ));
    }
    let mut per_image = Vec::with_capacity(clean.len());
    let idx: Vec<usize> = (0..clean.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = clean.subset(chunk);
        let poisoned = apply_payload(&batch, trigger, payload, chunk[0])?;
        let (_, clean_stack) = forward(params, &batch)?;
        let (_, poison_stack) = forward(params, &poisoned)?;
        let clean_maps = attention_map(&clean_stack, layer)?;
        let poison_maps = attention_map(&poison_stack, layer)?;
        for s in 0..batch.len() {
            let cm = clean_maps
                .index_axis(ndarray::Axis(0), s)
                .mapv(|v| v.to_f64().unwrap());
            let pm = poison_maps
                .index_axis(ndarray::Axis(0), s)
                .mapv(|v| v.to_f64().unwrap());
            let raw_sq: f64 = (&pm - &cm).iter().map(|d| d * d).sum();
            let cn = max_normalize(&cm);
            let pn = max_normalize(&pm);
            let norm_diff = &pn - &cn;
            let mse = norm_diff.iter().map(|d| d * d).sum::<f64>() / norm_diff.len() as f64;
            let ares =
                norm_diff.iter().map(|d| d.abs()).sum::<f64>() / norm_diff.len() as f64;
            per_image.push(AttentionMetrics {
                l2: raw_sq.sqrt(),
                apsnr_db: psnr_db(mse, 1.0),
                ares,
            });
        }
    }
    let mean = AttentionMetrics {
        l2: per_image.iter().map(|m| m.l2).sum::<f64>() / per_image.len() as f64,
        apsnr_db: per_image.iter().map(|m| m.apsnr_db).sum::<f64>() / per_image.len() as f64,
        ares: per_image.iter().map(|m| m.ares).sum::<f64>() / per_image.len() as f64,
    };
    Ok(AttentionStealth { per_image, mean })
}

/// Mean per-image pixel-space l2 caused by replacing one patch with a
/// fixed pattern; the yardstick superimposed-trigger norms are compared
/// against.
pub fn rep_visual_l2<F: Scalar>(
    clean: &ImageBatch<F>,
    pattern: &Array3<F>,
    location: PatchIndex,
    norm: &Normalization,
) -> Result<f64> {
    if clean.is_empty() {
        return Err(CoreError::InvalidArgument(
            "stealthiness over an empty set".into(),
        ));
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..clean.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = clean.subset(chunk);
        let replaced = insert_rep(&batch.images, pattern, location)?;
        let clean_disp = display_images(&batch.images, norm)?;
        let rep_disp = display_images(&replaced, norm)?;
        let diff = &rep_disp - &clean_disp;
        for s in 0..batch.len() {
            let sq: f64 = diff
                .index_axis(ndarray::Axis(0), s)
                .iter()
                .map(|d| d * d)
                .sum();
            total += sq.sqrt();
        }
    }
    Ok(total / clean.len() as f64)
}

/// Writes `{base}.csv` (6-decimal fixed point, one row per grid row) and
/// `{base}.pgm` (portable graymap, values scaled to 0–255), returning the
/// two paths.
pub fn emit_heatmap(heatmap: &TREHeatmap, base: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv_path = base.with_extension("csv");
    let pgm_path = base.with_extension("pgm");
    let g = heatmap.grid.nrows();

    let mut csv = String::new();
    for row in heatmap.grid.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv)?;

    let mut pgm = format!("P2\n{g} {g}\n255\n");
    for row in heatmap.grid.rows() {
        let line: Vec<String> = row
            .iter()
            .map(|v| format!("{}", (v * 255.0).round().clamp(0.0, 255.0) as u8))
            .collect();
        let _ = writeln!(pgm, "{}", line.join(" "));
    }
    std::fs::write(&pgm_path, pgm)?;
    Ok((csv_path, pgm_path))
}

/// Reads a heatmap back from its CSV form.
pub fn read_heatmap_csv(path: &Path) -> Result<TREHeatmap> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| CoreError::Format(format!("bad heatmap entry: {e}")))?);
    }
    let g = rows.len();
    if g == 0 || rows.iter().any(|r| r.len() != g) {
        return Err(CoreError::Format(
            "heatmap CSV must be a non-empty square grid".into(),
        ));
    }
    let mut grid = Array2::<f64>::zeros((g, g));
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            grid[[r, c]] = v;
        }
    }
    TREHeatmap::from_grid(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stage_rng;
    use crate::trigger::insert_sup_multi;
    use crate::vit::{init_model, tensor_names, ModelConfig};
    use ndarray::{Array3, Array4, Axis};
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
        let mut rng = stage_rng(seed, "eval-toy", 0);
        let mut images = Array4::<f32>::zeros((n, cfg.channels, cfg.image_size, cfg.image_size));
        let mut labels = Vec::with_capacity(n);
        for s in 0..n {
            labels.push((s % cfg.num_classes) as u8);
            for v in images.index_axis_mut(Axis(0), s).iter_mut() {
                *v = rng.gen_range(0.3..0.5);
            }
        }
        ImageBatch::new(images, labels, cfg.num_classes).unwrap()
    }

    fn small_trigger(cfg: &ModelConfig, scale: f32) -> Trigger<f32> {
        let p = cfg.patch_size;
        let values = Array3::from_shape_fn((cfg.channels, p, p), |(c, r, q)| {
            scale * ((c + r + q) % 3) as f32 * 0.01
        });
        Trigger::new(values, -1.0, 1.0).unwrap()
    }

    /// Model whose classifier head is zeroed: logits are constant, so the
    /// argmax is always class 0.
    fn zero_head_model(cfg: ModelConfig, seed: u64) -> ViTParams<f32> {
        let mut params = init_model::<f32>(cfg, seed).unwrap();
        let names = tensor_names(&cfg);
        for (i, name) in names.iter().enumerate() {
            if name == "head.weight" || name == "head.bias" {
                params.tensors_mut()[i].fill(0.0);
            }
        }
        params
    }

    fn identity_norm(channels: usize) -> Normalization {
        Normalization::new(vec![0.0; channels], vec![1.0; channels]).unwrap()
    }

    #[test]
    fn payload_validation_catches_bad_specs() {
        let dup = PayloadSpec::Fixed {
            locations: vec![PatchIndex::new(0, 0), PatchIndex::new(0, 0)],
        };
        assert!(dup.validate(2).is_err());
        assert!(PayloadSpec::random(0, 1).validate(2).is_err());
        assert!(PayloadSpec::random(5, 1).validate(2).is_err());
        assert!(PayloadSpec::random(4, 1).validate(2).is_ok());
        assert!(PayloadSpec::single(PatchIndex::new(2, 0)).validate(2).is_err());
    }

    #[test]
    fn random_payload_draws_are_distinct_indexed_and_deterministic() {
        let payload = PayloadSpec::random(3, 9);
        let a = payload.locations_for(5, 4);
        let b = payload.locations_for(5, 4);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let mut flats: Vec<usize> = a.iter().map(|l| l.flat(4)).collect();
        flats.sort_unstable();
        flats.dedup();
        assert_eq!(flats.len(), 3);
        assert!(a.iter().all(|l| l.row < 4 && l.col < 4));
        let c = payload.locations_for(6, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn accuracy_of_constant_classifier_is_class_share() {
        let cfg = tiny_cfg();
        let data = toy_data(16, &cfg, 1);
        let params = zero_head_model(cfg, 3);
        // Balanced labels over 4 classes; constant prediction of class 0.
        assert_eq!(accuracy(&params, &data).unwrap(), 0.25);
        let empty = ImageBatch::<f32> {
            images: Array4::zeros((0, 2, 16, 16)),
            labels: vec![],
        };
        assert!(accuracy(&params, &empty).is_err());
    }

    #[test]
    fn asr_excludes_target_labels_and_handles_never_target_models() {
        let cfg = tiny_cfg();
        let data = toy_data(16, &cfg, 1);
        let params = zero_head_model(cfg, 3);
        let trigger = small_trigger(&cfg, 0.0);
        let payload = PayloadSpec::single(PatchIndex::new(0, 0));
        // Constant class-0 model never hits target 1.
        assert_eq!(asr(&params, &trigger, &data, &payload, 1).unwrap(), 0.0);
        // ... and always "hits" target 0 on the eligible (non-0) samples.
        assert_eq!(asr(&params, &trigger, &data, &payload, 0).unwrap(), 1.0);

        let all_target = ImageBatch::new(
            Array4::<f32>::zeros((3, 2, 16, 16)),
            vec![1, 1, 1],
            4,
        )
        .unwrap();
        assert!(asr(&params, &trigger, &all_target, &payload, 1).is_err());
    }

    #[test]
    fn full_grid_payload_equals_whole_image_insertion() {
        let cfg = tiny_cfg();
        let data = toy_data(3, &cfg, 2);
        let trigger = small_trigger(&cfg, 1.0);
        let all: Vec<PatchIndex> = (0..4).map(|f| PatchIndex::from_flat(f, 2)).collect();
        let payload = PayloadSpec::Fixed {
            locations: all.clone(),
        };
        let poisoned = apply_payload(&data, &trigger, &payload, 0).unwrap();
        let direct = insert_sup_multi(&data.images, &trigger, &all).unwrap();
        assert_eq!(poisoned.images, direct);
        assert_eq!(poisoned.labels, data.labels);
    }

    #[test]
    fn tre_equals_mean_of_grid_and_per_patch_rates() {
        let cfg = tiny_cfg();
        let data = toy_data(12, &cfg, 4);
        let params = init_model::<f32>(cfg, 5).unwrap();
        let trigger = small_trigger(&cfg, 1.0);
        let heat = tre_heatmap(&params, &trigger, &data, 1).unwrap();

        assert_eq!(heat.grid.dim(), (2, 2));
        let mean = heat.grid.iter().sum::<f64>() / 4.0;
        assert_eq!(heat.tre, mean);
        for flat in 0..4 {
            let loc = PatchIndex::from_flat(flat, 2);
            let single = asr(&params, &trigger, &data, &PayloadSpec::single(loc), 1).unwrap();
            assert_eq!(heat.grid[[loc.row, loc.col]], single);
        }
    }

    #[test]
    fn zero_trigger_gives_perfect_visual_scores() {
        let cfg = tiny_cfg();
        let data = toy_data(4, &cfg, 6);
        let trigger = small_trigger(&cfg, 0.0);
        let payload = PayloadSpec::single(PatchIndex::new(1, 1));
        let report = visual_stealth(&data, &trigger, &payload, &identity_norm(2)).unwrap();
        for m in &report.per_image {
            assert_eq!(m.l2, 0.0);
            assert!(m.psnr_db.is_infinite());
            assert!((m.ssim - 1.0).abs() < 1e-12);
        }
        assert_eq!(report.mean.l2, 0.0);
        assert!(report.mean.psnr_db.is_infinite());
    }

    #[test]
    fn visual_l2_matches_scaled_trigger_norm_without_clamping() {
        let cfg = tiny_cfg();
        let data = toy_data(3, &cfg, 7);
        let trigger = small_trigger(&cfg, 1.0);
        let payload = PayloadSpec::single(PatchIndex::new(0, 1));
        let report = visual_stealth(&data, &trigger, &payload, &identity_norm(2)).unwrap();
        let expected = 255.0 * trigger.l2() as f64;
        for m in &report.per_image {
            assert!(
                (m.l2 - expected).abs() < 1e-3,
                "l2 {} vs expected {expected}",
                m.l2
            );
        }
    }

    #[test]
    fn psnr_strictly_decreases_as_l2_grows() {
        let cfg = tiny_cfg();
        let data = toy_data(3, &cfg, 8);
        let payload = PayloadSpec::single(PatchIndex::new(0, 0));
        let norm = identity_norm(2);
        let small = visual_stealth(&data, &small_trigger(&cfg, 1.0), &payload, &norm).unwrap();
        let large = visual_stealth(&data, &small_trigger(&cfg, 2.0), &payload, &norm).unwrap();
        assert!(large.mean.l2 > small.mean.l2);
        assert!(large.mean.psnr_db < small.mean.psnr_db);
        // Doubling the perturbation quadruples the MSE: −10·log10(4) dB,
        // up to the f32 rounding of the insertions themselves.
        let drop = small.mean.psnr_db - large.mean.psnr_db;
        assert!((drop - 20.0 * 2.0f64.log10()).abs() < 2e-3);
    }

    #[test]
    fn ssim_is_one_on_identical_and_symmetric() {
        let mut rng = stage_rng(11, "ssim", 0);
        let a = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..255.0));
        let b = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..255.0));
        assert!((ssim_single(a.view(), a.view(), 255.0).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim_single(a.view(), b.view(), 255.0).unwrap();
        let ba = ssim_single(b.view(), a.view(), 255.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn attention_stealth_is_zero_for_zero_trigger() {
        let cfg = tiny_cfg();
        let data = toy_data(3, &cfg, 9);
        let params = init_model::<f32>(cfg, 10).unwrap();
        let trigger = small_trigger(&cfg, 0.0);
        let payload = PayloadSpec::single(PatchIndex::new(1, 0));
        let report = attention_stealth(&params, &data, &trigger, &payload, 2).unwrap();
        for m in &report.per_image {
            assert_eq!(m.l2, 0.0);
            assert!(m.apsnr_db.is_infinite());
            assert_eq!(m.ares, 0.0);
        }
    }

    #[test]
    fn constant_attention_model_hides_any_trigger() {
        let cfg = tiny_cfg();
        let data = toy_data(3, &cfg, 12);
        let mut params = init_model::<f32>(cfg, 13).unwrap();
        let names = tensor_names(&cfg);
        for (i, name) in names.iter().enumerate() {
            if name.contains("qkv") {
                params.tensors_mut()[i].fill(0.0);
            }
        }
        let trigger = small_trigger(&cfg, 50.0);
        let payload = PayloadSpec::single(PatchIndex::new(0, 0));
        let report = attention_stealth(&params, &data, &trigger, &payload, 2).unwrap();
        for m in &report.per_image {
            assert!(m.l2 < 1e-5, "disparity {} should vanish", m.l2);
            assert!(m.ares < 1e-6);
        }
    }

    #[test]
    fn attention_stealth_matches_two_forward_recomputation() {
        let cfg = tiny_cfg();
        let data = toy_data(2, &cfg, 14);
        let params = init_model::<f32>(cfg, 15).unwrap();
        let trigger = small_trigger(&cfg, 3.0);
        let loc = PatchIndex::new(1, 1);
        let payload = PayloadSpec::single(loc);
        let report = attention_stealth(&params, &data, &trigger, &payload, 2).unwrap();

        let poisoned = ImageBatch::<f32> {
            images: insert_sup_multi(&data.images, &trigger, &[loc]).unwrap(),
            labels: data.labels.clone(),
        };
        let (_, cs) = forward(&params, &data).unwrap();
        let (_, ps) = forward(&params, &poisoned).unwrap();
        let cm = attention_map(&cs, 2).unwrap();
        let pm = attention_map(&ps, 2).unwrap();
        for s in 0..2 {
            let c = cm.index_axis(Axis(0), s).mapv(f64::from);
            let p = pm.index_axis(Axis(0), s).mapv(f64::from);
            let l2 = (&p - &c).iter().map(|d| d * d).sum::<f64>().sqrt();
            assert!((report.per_image[s].l2 - l2).abs() < 1e-9);
        }
        assert!(report.mean.l2 > 0.0);
    }

    #[test]
    fn heatmap_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = ndarray::array![[1.0, 0.25], [0.5, 0.125]];
        let heat = TREHeatmap::from_grid(grid.clone()).unwrap();
        let base = dir.path().join("heat");
        let (csv_path, pgm_path) = emit_heatmap(&heat, &base).unwrap();

        let read = read_heatmap_csv(&csv_path).unwrap();
        assert_eq!(read.grid, grid);
        assert_eq!(read.tre, heat.tre);

        let pgm = std::fs::read_to_string(&pgm_path).unwrap();
        let mut lines = pgm.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("2 2"));
        assert_eq!(lines.next(), Some("255"));
        assert_eq!(lines.next(), Some("255 64"));
        assert_eq!(lines.next(), Some("128 32"));
    }

    #[test]
    fn heatmap_rejects_out_of_range_grids() {
        assert!(TREHeatmap::from_grid(ndarray::array![[1.5]]).is_err());
        assert!(TREHeatmap::from_grid(Array2::zeros((0, 0))).is_err());
    }

    #[test]
    fn replacement_changes_more_pixels_than_a_small_trigger() {
        let cfg = tiny_cfg();
        let data = toy_data(4, &cfg, 16);
        let norm = identity_norm(2);
        let pattern = Array3::<f32>::from_elem((2, 8, 8), 0.95);
        let rep = rep_visual_l2(&data, &pattern, PatchIndex::new(0, 0), &norm).unwrap();
        let sup = visual_stealth(
            &data,
            &small_trigger(&cfg, 1.0),
            &PayloadSpec::single(PatchIndex::new(0, 0)),
            &norm,
        )
        .unwrap();
        assert!(rep > 0.0);
        assert!(sup.mean.l2 < rep);
    }
}
