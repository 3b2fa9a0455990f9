//! The four loss terms and their phase aggregations.
//!
//! Clean and backdoor classification use mean cross-entropy; visual
//! stealthiness penalizes the pixel-space distance between an image and its
//! poisoned counterpart; attention stealthiness penalizes the Frobenius
//! distance between composed attention maps of the two. The trigger phase
//! minimizes `L_bd + w_vis·L_vis + w_attn·L_attn` in the trigger alone, the
//! model phase `L_c + L_bd + w_attn·L_attn` in the parameters alone.

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{CoreError, Result};
use crate::tensor::{fl, Scalar, Tape, Var};
use crate::trigger::{insert_on_tape, mis_sample, MISConfig, PatchIndex, Trigger};
use crate::vit::{
    attention_map, attention_map_on_tape, forward, forward_with_vars, register_params,
    ForwardOptions, ModelConfig, ViTParams,
};

/// Weights of the two stealthiness terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Scales the pixel-space disparity term (the `--alpha1` knob).
    pub visual: f64,
    /// Scales the attention-disparity term (the `--alpha2` knob).
    pub attention: f64,
}

impl LossWeights {
    pub fn new(visual: f64, attention: f64) -> Result<Self> {
        if visual < 0.0 || attention < 0.0 || !visual.is_finite() || !attention.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "loss weights must be non-negative and finite, got {visual} / {attention}"
            )));
        }
        Ok(Self { visual, attention })
    }

    /// Reference defaults: visual weight 1.0, attention weight 0.005.
    pub fn standard() -> Self {
        Self {
            visual: 1.0,
            attention: 0.005,
        }
    }
}

/// Scalar loss components of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub clean: f64,
    pub backdoor: f64,
    pub visual: f64,
    pub attention: f64,
    pub aggregate: f64,
}

impl LossReport {
    pub fn assert_finite(&self) -> Result<()> {
        for (name, v) in [
            ("clean", self.clean),
            ("backdoor", self.backdoor),
            ("visual", self.visual),
            ("attention", self.attention),
            ("aggregate", self.aggregate),
        ] {
            if !v.is_finite() {
                return Err(CoreError::NonFinite(format!("{name} loss")));
            }
        }
        Ok(())
    }
}

/// Draws one insertion location per sample from the hierarchical sampler.
pub fn sample_locations<R: Rng>(mis: &MISConfig, count: usize, rng: &mut R) -> Vec<PatchIndex> {
    (0..count).map(|_| mis_sample(mis, rng)).collect()
}

pub(crate) fn validate_poison_setup<F: Scalar>(
    cfg: &ModelConfig,
    trigger: &Trigger<F>,
    target: u8,
    layer: usize,
) -> Result<()> {
    if usize::from(target) >= cfg.num_classes {
        return Err(CoreError::InvalidArgument(format!(
            "target class {target} outside 0..{}",
            cfg.num_classes
        )));
    }
    if layer < 1 || layer > cfg.depth {
        return Err(CoreError::InvalidArgument(format!(
            "disparity layer {layer} outside 1..={}",
            cfg.depth
        )));
    }
    if trigger.values.shape() != [cfg.channels, cfg.patch_size, cfg.patch_size] {
        return Err(CoreError::ShapeMismatch(format!(
            "trigger {:?} does not match one {}-channel {}x{} patch",
            trigger.values.shape(),
            cfg.channels,
            cfg.patch_size,
            cfg.patch_size
        )));
    }
    Ok(())
}

fn validate_setup<F: Scalar>(
    cfg: &ModelConfig,
    trigger: &Trigger<F>,
    mis: &MISConfig,
    target: u8,
    layer: usize,
) -> Result<()> {
    validate_poison_setup(cfg, trigger, target, layer)?;
    mis.validate(cfg.grid_size())
}

fn zero_scalar<F: Scalar>(tape: &mut Tape<F>) -> Var {
    tape.constant(ArrayD::from_elem(IxDyn(&[]), F::zero()))
}

/// Variable handles for the loss terms of one poisoned batch.
struct PoisonTerms {
    backdoor: Var,
    visual: Var,
    attention: Var,
}

/// Builds insertion, poisoned forward, and the three backdoor-side loss
/// terms over shared parameter handles. `clean_maps`, when given, stands in
/// for the clean composed attention maps (valid while parameters are
/// frozen); otherwise a second forward computes them in-graph.
#[allow(clippy::too_many_arguments)]
fn poison_terms_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    param_vars: &[Var],
    images: &Array4<F>,
    trigger_var: Var,
    locations: &[PatchIndex],
    target: u8,
    layer: usize,
    want_attention: bool,
    clean_maps: Option<&Array3<F>>,
) -> PoisonTerms {
    let bsz = images.shape()[0];
    let pixels: usize = images.shape()[1..].iter().product();
    let clean = tape.constant(images.clone().into_dyn());
    let poisoned = insert_on_tape(tape, clean, trigger_var, locations, cfg.patch_size);

    let opts = ForwardOptions {
        train_params: false,
        retain_attention: want_attention,
        capture_hidden: None,
    };
    let fwd = forward_with_vars(tape, cfg, param_vars.to_vec(), poisoned, &opts);
    let target_labels = vec![target; bsz];
    let backdoor = tape.cross_entropy_mean(fwd.logits, &target_labels);

    let diff = tape.sub(poisoned, clean);
    let flat = tape.reshape(diff, &[bsz, pixels]);
    let visual = tape.l2_norm_rows_mean(flat);

    let attention = if want_attention {
        let map_poisoned = attention_map_on_tape(tape, &fwd, layer);
        let map_clean = match clean_maps {
            Some(maps) => tape.constant(maps.clone().into_dyn()),
            None => {
                let fwd_clean = forward_with_vars(tape, cfg, param_vars.to_vec(), clean, &opts);
                attention_map_on_tape(tape, &fwd_clean, layer)
            }
        };
        let t = cfg.seq_len();
        let gap = tape.sub(map_poisoned, map_clean);
        let gap_rows = tape.reshape(gap, &[bsz, t * t]);
        tape.l2_norm_rows_mean(gap_rows)
    } else {
        zero_scalar(tape)
    };

    PoisonTerms {
        backdoor,
        visual,
        attention,
    }
}

/// Mean cross-entropy of the model on a clean batch.
pub fn loss_clean<F: Scalar>(params: &ViTParams<F>, batch: &ImageBatch<F>) -> Result<f64> {
    let mut tape = Tape::new();
    let images = tape.constant(batch.images.clone().into_dyn());
    let opts = ForwardOptions {
        retain_attention: false,
        ..Default::default()
    };
    let fwd = crate::vit::forward_on_tape(&mut tape, params, images, &opts);
    let loss = tape.cross_entropy_mean(fwd.logits, &batch.labels);
    Ok(tape.scalar(loss).to_f64().unwrap())
}

/// Mean cross-entropy toward the target class on MIS-poisoned copies of the
/// batch; returns the sampled insertion locations alongside the value.
pub fn loss_backdoor<F: Scalar, R: Rng>(
    params: &ViTParams<F>,
    batch: &ImageBatch<F>,
    trigger: &Trigger<F>,
    mis: &MISConfig,
    target: u8,
    rng: &mut R,
) -> Result<(f64, Vec<PatchIndex>)> {
    let cfg = params.config();
    validate_setup(cfg, trigger, mis, target, 1)?;
    let locations = sample_locations(mis, batch.len(), rng);
    let mut tape = Tape::new();
    let param_vars = register_params(&mut tape, params, false);
    let trigger_var = tape.constant(trigger.values.clone().into_dyn());
    let terms = poison_terms_on_tape(
        &mut tape,
        cfg,
        &param_vars,
        &batch.images,
        trigger_var,
        &locations,
        target,
        1,
        false,
        None,
    );
    Ok((tape.scalar(terms.backdoor).to_f64().unwrap(), locations))
}

/// Mean pixel-space distance between each image and its poisoned copy.
/// With additive single-patch insertion this equals the trigger norm for
/// every sample and location.
pub fn loss_visual<F: Scalar, R: Rng>(
    batch: &ImageBatch<F>,
    trigger: &Trigger<F>,
    mis: &MISConfig,
    rng: &mut R,
) -> Result<(f64, Vec<PatchIndex>)> {
    let locations = sample_locations(mis, batch.len(), rng);
    let poisoned = crate::trigger::insert_sup_each(&batch.images, trigger, &locations)?;
    let mut total = 0.0;
    for b in 0..batch.len() {
        let mut sq = 0.0;
        for (a, c) in poisoned
            .index_axis(ndarray::Axis(0), b)
            .iter()
            .zip(batch.images.index_axis(ndarray::Axis(0), b).iter())
        {
            let d = (*a - *c).to_f64().unwrap();
            sq += d * d;
        }
        total += sq.sqrt();
    }
    Ok((total / batch.len() as f64, locations))
}

/// Mean Frobenius distance between the composed attention maps of clean
/// and poisoned inputs, propagated through the first `layer` layers.
pub fn loss_attention<F: Scalar, R: Rng>(
    params: &ViTParams<F>,
    batch: &ImageBatch<F>,
    trigger: &Trigger<F>,
    mis: &MISConfig,
    layer: usize,
    rng: &mut R,
) -> Result<(f64, Vec<PatchIndex>)> {
    let cfg = params.config();
    validate_setup(cfg, trigger, mis, 0, layer)?;
    let locations = sample_locations(mis, batch.len(), rng);
    let mut tape = Tape::new();
    let param_vars = register_params(&mut tape, params, false);
    let trigger_var = tape.constant(trigger.values.clone().into_dyn());
    let terms = poison_terms_on_tape(
        &mut tape,
        cfg,
        &param_vars,
        &batch.images,
        trigger_var,
        &locations,
        0,
        layer,
        true,
        None,
    );
    Ok((tape.scalar(terms.attention).to_f64().unwrap(), locations))
}

/// Composed clean attention maps `[B, T, T]` for reuse across a phase in
/// which the parameters stay frozen.
pub fn clean_attention_maps<F: Scalar>(
    params: &ViTParams<F>,
    images: &Array4<F>,
    layer: usize,
) -> Result<Array3<F>> {
    let labels = vec![0u8; images.shape()[0]];
    let batch = ImageBatch::new(images.clone(), labels, params.config().num_classes)?;
    let (_, stack) = forward(params, &batch)?;
    attention_map(&stack, layer)
}

/// Lower-level objective: `L_bd + w_vis·L_vis + w_attn·L_attn`, gradients
/// confined to the trigger.
#[allow(clippy::too_many_arguments)]
pub fn trigger_objective<F: Scalar, R: Rng>(
    params: &ViTParams<F>,
    batch: &ImageBatch<F>,
    trigger: &Trigger<F>,
    weights: &LossWeights,
    mis: &MISConfig,
    target: u8,
    layer: usize,
    rng: &mut R,
) -> Result<LossReport> {
    let (report, _, _) =
        trigger_objective_with_grad(params, batch, trigger, weights, mis, target, layer, None, rng)?;
    Ok(report)
}

/// Like [`trigger_objective`] but also returns `∂aggregate/∂t` and the
/// sampled locations. `clean_maps` may carry precomputed composed clean
/// attention maps for these images.
#[allow(clippy::too_many_arguments)]
pub fn trigger_objective_with_grad<F: Scalar, R: Rng>(
    params: &ViTParams<F>,
    batch: &ImageBatch<F>,
    trigger: &Trigger<F>,
    weights: &LossWeights,
    mis: &MISConfig,
    target: u8,
    layer: usize,
    clean_maps: Option<&Array3<F>>,
    rng: &mut R,
) -> Result<(LossReport, Array3<F>, Vec<PatchIndex>)> {
    validate_setup(params.config(), trigger, mis, target, layer)?;
    let locations = sample_locations(mis, batch.len(), rng);
    let (report, grad) = trigger_objective_at(
        params, batch, trigger, weights, &locations, target, layer, false, clean_maps,
    )?;
    Ok((report, grad, locations))
}

/// Lower-level objective at explicit insertion locations (one per sample).
/// Setting `record_attention` computes the attention term for the report
/// even when its weight is zero, without adding it to the aggregate.
#[allow(clippy::too_many_arguments)]
pub fn trigger_objective_at<F: Scalar>(
    params: &ViTParams<F>,
    batch: &ImageBatch<F>,
    trigger: &Trigger<F>,
    weights: &LossWeights,
    locations: &[PatchIndex],
    target: u8,
    layer: usize,
    record_attention: bool,
    clean_maps: Option<&Array3<F>>,
) -> Result<(LossReport, Array3<F>)> {
    let cfg = params.config();
    if locations.len() != batch.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} locations for {} samples",
            locations.len(),
            batch.len()
        )));
    }
    let mut tape = Tape::new();
    let param_vars = register_params(&mut tape, params, false);
    let trigger_var = tape.leaf(trigger.values.clone().into_dyn());
    let weighted = weights.attention > 0.0;
    let want_attention = weighted || record_attention;
    let terms = poison_terms_on_tape(
        &mut tape,
        cfg,
        &param_vars,
        &batch.images,
        trigger_var,
        locations,
        target,
        layer,
        want_attention,
        clean_maps,
    );
    let mut aggregate = terms.backdoor;
    if weights.visual > 0.0 {
        aggregate = tape.add_scaled(aggregate, terms.visual, fl(weights.visual));
    }
    if weighted {
        aggregate = tape.add_scaled(aggregate, terms.attention, fl(weights.attention));
    }

    let report = LossReport {
        clean: 0.0,
        backdoor: tape.scalar(terms.backdoor).to_f64().unwrap(),
        visual: tape.scalar(terms.visual).to_f64().unwrap(),
        attention: tape.scalar(terms.attention).to_f64().unwrap(),
        aggregate: tape.scalar(aggregate).to_f64().unwrap(),
    };
    report.assert_finite()?;

    let mut grads = tape.backward(aggregate);
    let grad = grads
        .take(trigger_var)
        .unwrap_or_else(|| ArrayD::zeros(IxDyn(trigger.values.shape())))
        .into_dimensionality()
        .expect("trigger gradient rank 3");
    Ok((report, grad))
}

/// Upper-level objective: `L_c + L_bd + w_attn·L_attn`, gradients confined
/// to the model parameters. The visual term is reported unweighted for the
/// log but does not enter the aggregate.
#[allow(clippy::too_many_arguments)]
pub fn model_objective<F: Scalar, R: Rng>(
    params: &ViTParams<F>,
    clean_batch: &ImageBatch<F>,
    poison_batch: &ImageBatch<F>,
    trigger: &Trigger<F>,
    weights: &LossWeights,
    mis: &MISConfig,
    target: u8,
    layer: usize,
    rng: &mut R,
) -> Result<LossReport> {
    let (report, _, _) = model_objective_with_grad(
        params,
        clean_batch,
        poison_batch,
        trigger,
        weights,
        mis,
        target,
        layer,
        rng,
    )?;
    Ok(report)
}

/// Like [`model_objective`] but also returns `∂aggregate/∂θ` aligned with
/// [`ViTParams::tensors`] and the sampled locations.
#[allow(clippy::too_many_arguments)]
pub fn model_objective_with_grad<F: Scalar, R: Rng>(
    params: &ViTParams<F>,
    clean_batch: &ImageBatch<F>,
    poison_batch: &ImageBatch<F>,
    trigger: &Trigger<F>,
    weights: &LossWeights,
    mis: &MISConfig,
    target: u8,
    layer: usize,
    rng: &mut R,
) -> Result<(LossReport, Vec<ArrayD<F>>, Vec<PatchIndex>)> {
    validate_setup(params.config(), trigger, mis, target, layer)?;
    if clean_batch.len() == 0 {
        return Err(CoreError::InvalidArgument(
            "model objective needs a non-empty clean batch".into(),
        ));
    }
    let locations = sample_locations(mis, poison_batch.len(), rng);
    let (report, grads) = model_objective_at(
        params,
        clean_batch,
        poison_batch,
        trigger,
        weights,
        &locations,
        target,
        layer,
        false,
    )?;
    Ok((report, grads, locations))
}

/// Lower-level model objective at explicit insertion locations. Either batch
/// may be empty (but not both); an empty side contributes zero to the
/// aggregate. `record_attention` computes the attention term for the report
/// even at weight zero, without adding it to the aggregate.
#[allow(clippy::too_many_arguments)]
pub fn model_objective_at<F: Scalar>(
    params: &ViTParams<F>,
    clean_batch: &ImageBatch<F>,
    poison_batch: &ImageBatch<F>,
    trigger: &Trigger<F>,
    weights: &LossWeights,
    locations: &[PatchIndex],
    target: u8,
    layer: usize,
    record_attention: bool,
) -> Result<(LossReport, Vec<ArrayD<F>>)> {
    let cfg = params.config();
    if clean_batch.len() == 0 && poison_batch.len() == 0 {
        return Err(CoreError::InvalidArgument(
            "model objective needs at least one non-empty batch".into(),
        ));
    }
    if locations.len() != poison_batch.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} locations for {} poison samples",
            locations.len(),
            poison_batch.len()
        )));
    }

    let mut tape = Tape::new();
    let param_vars = register_params(&mut tape, params, true);
    let opts = ForwardOptions {
        train_params: true,
        retain_attention: false,
        capture_hidden: None,
    };
    let clean = if clean_batch.len() > 0 {
        let clean_images = tape.constant(clean_batch.images.clone().into_dyn());
        let fwd = forward_with_vars(&mut tape, cfg, param_vars.clone(), clean_images, &opts);
        Some(tape.cross_entropy_mean(fwd.logits, &clean_batch.labels))
    } else {
        None
    };

    let weighted = weights.attention > 0.0;
    let want_attention = weighted || record_attention;
    let (backdoor_value, attention_value, aggregate) = if poison_batch.len() > 0 {
        let trigger_var = tape.constant(trigger.values.clone().into_dyn());
        let terms = poison_terms_on_tape(
            &mut tape,
            cfg,
            &param_vars,
            &poison_batch.images,
            trigger_var,
            locations,
            target,
            layer,
            want_attention,
            None,
        );
        let mut agg = match clean {
            Some(c) => tape.add(c, terms.backdoor),
            None => terms.backdoor,
        };
        if weighted {
            agg = tape.add_scaled(agg, terms.attention, fl(weights.attention));
        }
        (
            tape.scalar(terms.backdoor).to_f64().unwrap(),
            tape.scalar(terms.attention).to_f64().unwrap(),
            agg,
        )
    } else {
        (0.0, 0.0, clean.expect("clean batch present when poison empty"))
    };

    let report = LossReport {
        clean: clean.map_or(0.0, |c| tape.scalar(c).to_f64().unwrap()),
        backdoor: backdoor_value,
        visual: trigger.l2().to_f64().unwrap(),
        attention: attention_value,
        aggregate: tape.scalar(aggregate).to_f64().unwrap(),
    };
    report.assert_finite()?;

    let mut grads = tape.backward(aggregate);
    let grad_vec = param_vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            grads.take(v).unwrap_or_else(|| {
                ArrayD::zeros(IxDyn(params.tensors()[i].shape()))
            })
        })
        .collect();
    Ok((report, grad_vec))
}

/// Joint single-level aggregation `L_c + L_bd + w_vis·L_vis + w_attn·L_attn`
/// over both variable groups, kept as the baseline the alternating scheme
/// is compared against.
#[allow(clippy::too_many_arguments)]
pub fn single_level_objective<F: Scalar, R: Rng>(
    params: &ViTParams<F>,
    clean_batch: &ImageBatch<F>,
    poison_batch: &ImageBatch<F>,
    trigger: &Trigger<F>,
    weights: &LossWeights,
    mis: &MISConfig,
    target: u8,
    layer: usize,
    rng: &mut R,
) -> Result<LossReport> {
    let cfg = params.config();
    validate_setup(cfg, trigger, mis, target, layer)?;
    if clean_batch.len() == 0 || poison_batch.len() == 0 {
        return Err(CoreError::InvalidArgument(
            "single-level objective needs non-empty batches".into(),
        ));
    }
    let locations = sample_locations(mis, poison_batch.len(), rng);

    let mut tape = Tape::new();
    let param_vars = register_params(&mut tape, params, true);
    let clean_images = tape.constant(clean_batch.images.clone().into_dyn());
    let opts = ForwardOptions {
        train_params: true,
        retain_attention: false,
        capture_hidden: None,
    };
    let fwd_clean = forward_with_vars(&mut tape, cfg, param_vars.clone(), clean_images, &opts);
    let clean = tape.cross_entropy_mean(fwd_clean.logits, &clean_batch.labels);

    let trigger_var = tape.leaf(trigger.values.clone().into_dyn());
    let want_attention = weights.attention > 0.0;
    let terms = poison_terms_on_tape(
        &mut tape,
        cfg,
        &param_vars,
        &poison_batch.images,
        trigger_var,
        &locations,
        target,
        layer,
        want_attention,
        None,
    );
    let mut aggregate = tape.add(clean, terms.backdoor);
    if weights.visual > 0.0 {
        aggregate = tape.add_scaled(aggregate, terms.visual, fl(weights.visual));
    }
    if want_attention {
        aggregate = tape.add_scaled(aggregate, terms.attention, fl(weights.attention));
    }

    let report = LossReport {
        clean: tape.scalar(clean).to_f64().unwrap(),
        backdoor: tape.scalar(terms.backdoor).to_f64().unwrap(),
        visual: tape.scalar(terms.visual).to_f64().unwrap(),
        attention: tape.scalar(terms.attention).to_f64().unwrap(),
        aggregate: tape.scalar(aggregate).to_f64().unwrap(),
    };
    report.assert_finite()?;
    Ok(report)
}
