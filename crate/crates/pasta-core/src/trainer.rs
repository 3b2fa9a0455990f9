//! Alternating bi-level optimization of trigger and model.
//!
//! Each epoch first runs a trigger phase — several passes over a small
//! clean subset taking SGD steps on the trigger with the network frozen —
//! then a model phase — several passes over the full clean set plus
//! poisoned copies of a fixed subset, taking AdamW steps on the network
//! with the trigger frozen. Poisoned inputs are regenerated from clean
//! sources at every step with fresh location draws. All randomness derives
//! from the configured seed, so identical configurations reproduce
//! identical logs and digests bit for bit.

use std::fmt;
use std::time::Instant;

use ndarray::{azip, s, Array3, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{CoreError, Result};
use crate::objectives::{
    clean_attention_maps, loss_clean, model_objective_at, trigger_objective_at,
    validate_poison_setup, LossReport, LossWeights,
};
use crate::rng::{derive_seed, fnv1a64, sample_distinct, shuffle, stage_rng};
use crate::tensor::{fl, Scalar, Tape};
use crate::trigger::{
    clamp_trigger, default_mis, LocationSampler, MISConfig, PatchIndex, Trigger,
};
use crate::vit::{forward_on_tape, init_model, predict, ForwardOptions, ModelConfig, ViTParams};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// Fine-tuning settings used during the attack's model phase.
    pub fn attack() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.99,
            beta2: 0.99,
            eps: 1e-6,
            weight_decay: 2e-5,
        }
    }

    /// Warm-up settings for supervised training from scratch.
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(CoreError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(CoreError::InvalidConfig("eps must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CoreError::InvalidConfig(
                "weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// AdamW state over a fixed list of tensors; moments persist across phases
/// and epochs.
#[derive(Debug, Clone)]
pub struct AdamW<F: Scalar> {
    config: AdamWConfig,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    steps: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, tensors: &[ArrayD<F>]) -> Self {
        Self {
            config,
            m: tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
            v: tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over all tensors: `p ← p − lr·(m̂/(√v̂+ε) + wd·p)`.
    pub fn step(&mut self, tensors: &mut [ArrayD<F>], grads: &[ArrayD<F>]) -> Result<()> {
        if tensors.len() != self.m.len() || grads.len() != tensors.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                tensors.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (fl::<F>(c.beta1), fl::<F>(c.beta2));
        let (ob1, ob2) = (fl::<F>(1.0 - c.beta1), fl::<F>(1.0 - c.beta2));
        let ibc1 = fl::<F>(1.0 / (1.0 - c.beta1.powi(self.steps as i32)));
        let ibc2 = fl::<F>(1.0 / (1.0 - c.beta2.powi(self.steps as i32)));
        let (lr, eps, wd) = (fl::<F>(c.lr), fl::<F>(c.eps), fl::<F>(c.weight_decay));
        for i in 0..tensors.len() {
            if tensors[i].shape() != grads[i].shape() {
                return Err(CoreError::ShapeMismatch(format!(
                    "tensor {} is {:?} but its gradient is {:?}",
                    i,
                    tensors[i].shape(),
                    grads[i].shape()
                )));
            }
            azip!((w in &mut tensors[i], m in &mut self.m[i], v in &mut self.v[i], &g in &grads[i]) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mhat = *m * ibc1;
                let vhat = *v * ibc2;
                *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            });
        }
        Ok(())
    }
}

/// Which half of the alternation a log row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Trigger,
    Model,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Trigger => write!(f, "trigger"),
            Phase::Model => write!(f, "model"),
        }
    }
}

/// One pass over the data within a phase: batch-averaged losses plus the
/// derived seed that drove its shuffling and location draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub epoch: usize,
    pub phase: Phase,
    pub pass: usize,
    pub seed: u64,
    pub report: LossReport,
}

/// Index sets drawn once per run: `bd` is poisoned during the model phase,
/// `trig` is the small clean subset the trigger phase iterates over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonPartition {
    pub bd: Vec<usize>,
    pub trig: Vec<usize>,
}

/// Draws the two subsets independently and uniformly, sorted for stable
/// iteration. Sizes round to the nearest sample with a floor of one.
pub fn poison_partition(
    n: usize,
    poison_ratio: f64,
    trigger_fraction: f64,
    seed: u64,
) -> Result<PoisonPartition> {
    if n == 0 {
        return Err(CoreError::InvalidArgument(
            "cannot partition an empty dataset".into(),
        ));
    }
    for (name, v) in [
        ("poison ratio", poison_ratio),
        ("trigger fraction", trigger_fraction),
    ] {
        if !(v.is_finite() && v > 0.0 && v <= 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "{name} must lie in (0, 1], got {v}"
            )));
        }
    }
    let count = |f: f64| ((f * n as f64).round() as usize).clamp(1, n);
    let mut bd = sample_distinct(n, count(poison_ratio), &mut stage_rng(seed, "poison-subset", 0));
    bd.sort_unstable();
    let mut trig = sample_distinct(
        n,
        count(trigger_fraction),
        &mut stage_rng(seed, "trigger-subset", 0),
    );
    trig.sort_unstable();
    Ok(PoisonPartition { bd, trig })
}

/// Everything that defines one attack run. `None` fields resolve against
/// the model and dataset at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Outer epochs `T`.
    pub total_epochs: usize,
    /// Trigger-phase passes per epoch `T_t`; zero freezes the trigger at
    /// its initialization.
    pub trigger_passes: usize,
    /// Model-phase passes per epoch `T_m`.
    pub model_passes: usize,
    /// SGD step size for the trigger.
    pub trigger_lr: f64,
    /// Model-phase optimizer settings.
    pub optimizer: AdamWConfig,
    /// Fraction of the dataset whose poisoned copies join the model phase.
    pub poison_ratio: f64,
    /// Fraction of the dataset the trigger phase iterates over.
    pub trigger_fraction: f64,
    /// Class every poisoned sample is steered toward.
    pub target: u8,
    pub batch_size: usize,
    /// Stealthiness weights of the trigger phase.
    pub trigger_weights: LossWeights,
    /// Stealthiness weights of the model phase (only the attention weight
    /// enters its aggregate).
    pub model_weights: LossWeights,
    /// Candidate insertion locations; `None` uses the grid's defaults.
    pub mis: Option<MISConfig>,
    /// Block whose composed attention map the disparity term compares;
    /// `None` uses the deepest block.
    pub disparity_layer: Option<usize>,
    /// Elementwise trigger bounds; `None` uses the dataset value range.
    pub trigger_bounds: Option<(f64, f64)>,
    pub seed: u64,
}

impl AttackConfig {
    /// Reference schedule: 20 epochs of 3 trigger and 5 model passes,
    /// trigger SGD at 0.01, fine-tuning AdamW, 2% poisoned, 5% trigger
    /// subset, target class 7, batches of 64.
    pub fn standard(seed: u64) -> Self {
        Self {
            total_epochs: 20,
            trigger_passes: 3,
            model_passes: 5,
            trigger_lr: 0.01,
            optimizer: AdamWConfig::attack(),
            poison_ratio: 0.02,
            trigger_fraction: 0.05,
            target: 7,
            batch_size: 64,
            trigger_weights: LossWeights::standard(),
            model_weights: LossWeights::standard(),
            mis: None,
            disparity_layer: None,
            trigger_bounds: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(CoreError::InvalidConfig("zero epochs".into()));
        }
        if self.trigger_passes + self.model_passes == 0 {
            return Err(CoreError::InvalidConfig(
                "need at least one trigger or model pass per epoch".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("zero batch size".into()));
        }
        if !(self.trigger_lr.is_finite() && self.trigger_lr > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "trigger learning rate must be positive, got {}",
                self.trigger_lr
            )));
        }
        self.optimizer.validate()?;
        for (name, v) in [
            ("poison ratio", self.poison_ratio),
            ("trigger fraction", self.trigger_fraction),
        ] {
            if !(v.is_finite() && v > 0.0 && v <= 1.0) {
                return Err(CoreError::InvalidConfig(format!(
                    "{name} must lie in (0, 1], got {v}"
                )));
            }
        }
        LossWeights::new(self.trigger_weights.visual, self.trigger_weights.attention)?;
        LossWeights::new(self.model_weights.visual, self.model_weights.attention)?;
        if let Some((lo, hi)) = self.trigger_bounds {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(CoreError::InvalidConfig(format!(
                    "trigger bounds ({lo}, {hi}) are not an interval"
                )));
            }
        }
        Ok(())
    }

    pub fn disparity_layer_for(&self, cfg: &ModelConfig) -> usize {
        self.disparity_layer.unwrap_or(cfg.depth)
    }

    fn resolved_bounds<F: Scalar>(&self, data: &ImageBatch<F>) -> (F, F) {
        match self.trigger_bounds {
            Some((lo, hi)) => (fl(lo), fl(hi)),
            None => data.value_range(),
        }
    }

    fn sampler_for(&self, cfg: &ModelConfig) -> Result<LocationSampler> {
        let mis = match &self.mis {
            Some(m) => m.clone(),
            None => default_mis(cfg)?,
        };
        mis.validate(cfg.grid_size())?;
        Ok(LocationSampler::Hierarchical(mis))
    }
}

/// Final state of a run plus its full loss log and bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainResult<F: Scalar> {
    pub params: ViTParams<F>,
    pub trigger: Trigger<F>,
    /// One row per pass; `total_epochs · (trigger_passes + model_passes)`
    /// rows for the full attack.
    pub log: Vec<LossLogRow>,
    pub partition: PoisonPartition,
    /// Every insertion location drawn, in draw order.
    pub locations: Vec<PatchIndex>,
    pub trigger_secs: f64,
    pub model_secs: f64,
}

/// Receives the state at the end of every epoch (checkpointing hook).
pub trait EpochSink<F: Scalar> {
    fn on_epoch(
        &mut self,
        epoch: usize,
        params: &ViTParams<F>,
        trigger: &Trigger<F>,
    ) -> Result<()>;
}

/// Discards epoch snapshots.
pub struct NoSink;

impl<F: Scalar> EpochSink<F> for NoSink {
    fn on_epoch(&mut self, _: usize, _: &ViTParams<F>, _: &Trigger<F>) -> Result<()> {
        Ok(())
    }
}

/// Adapts a closure into an [`EpochSink`].
pub struct FnSink<T>(pub T);

impl<F: Scalar, T> EpochSink<F> for FnSink<T>
where
    T: FnMut(usize, &ViTParams<F>, &Trigger<F>) -> Result<()>,
{
    fn on_epoch(
        &mut self,
        epoch: usize,
        params: &ViTParams<F>,
        trigger: &Trigger<F>,
    ) -> Result<()> {
        (self.0)(epoch, params, trigger)
    }
}

/// FNV-1a digest over the exact bit patterns of all parameter scalars.
pub fn params_digest<F: Scalar>(params: &ViTParams<F>) -> u64 {
    digest_scalars(params.tensors().iter().flat_map(|t| t.iter().copied()))
}

/// FNV-1a digest over trigger values and bounds.
pub fn trigger_digest<F: Scalar>(trigger: &Trigger<F>) -> u64 {
    digest_scalars(
        trigger
            .values
            .iter()
            .copied()
            .chain([trigger.low, trigger.upp]),
    )
}

fn digest_scalars<F: Scalar>(values: impl Iterator<Item = F>) -> u64 {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_f64().unwrap().to_bits().to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Supervised warm-up settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn standard(seed: u64) -> Self {
        Self {
            epochs: 8,
            batch_size: 64,
            optimizer: AdamWConfig::pretrain(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("zero batch size".into()));
        }
        self.optimizer.validate()
    }
}

/// Warm-up output: trained parameters, per-epoch mean training loss, and
/// accuracy on the held-out set.
#[derive(Debug, Clone)]
pub struct PretrainResult<F: Scalar> {
    pub params: ViTParams<F>,
    pub epoch_losses: Vec<f64>,
    pub val_accuracy: f64,
}

/// Trains a fresh initialization on clean data. Zero epochs return the
/// initialization untouched (accuracy still measured); a non-finite loss
/// aborts with the failing epoch named.
pub fn pretrain_clean<F: Scalar>(
    config: &ModelConfig,
    train: &ImageBatch<F>,
    val: &ImageBatch<F>,
    opts: &PretrainConfig,
) -> Result<PretrainResult<F>> {
    opts.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::InvalidArgument(
            "pretraining needs non-empty train and validation sets".into(),
        ));
    }
    let mut params: ViTParams<F> = init_model(*config, opts.seed)?;
    let mut opt = AdamW::new(opts.optimizer, params.tensors());
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut rng = stage_rng(opts.seed, "pretrain-order", epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let batch = train.subset(chunk);
            let (loss, grads) = supervised_step(&params, &batch)?;
            if !loss.is_finite() {
                return Err(CoreError::NonFinite(format!("pretraining epoch {epoch}")));
            }
            opt.step(params.tensors_mut(), &grads)?;
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    params.assert_finite()?;
    let val_accuracy = batched_accuracy(&params, val, opts.batch_size)?;
    Ok(PretrainResult {
        params,
        epoch_losses,
        val_accuracy,
    })
}

fn supervised_step<F: Scalar>(
    params: &ViTParams<F>,
    batch: &ImageBatch<F>,
) -> Result<(f64, Vec<ArrayD<F>>)> {
    let mut tape = Tape::new();
    let images = tape.constant(batch.images.clone().into_dyn());
    let opts = ForwardOptions {
        train_params: true,
        retain_attention: false,
        capture_hidden: None,
    };
    let fwd = forward_on_tape(&mut tape, params, images, &opts);
    let loss = tape.cross_entropy_mean(fwd.logits, &batch.labels);
    let value = tape.scalar(loss).to_f64().unwrap();
    let mut grads = tape.backward(loss);
    let grad_vec = fwd
        .param_vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            grads
                .take(v)
                .unwrap_or_else(|| ArrayD::zeros(params.tensors()[i].raw_dim()))
        })
        .collect();
    Ok((value, grad_vec))
}

fn batched_accuracy<F: Scalar>(
    params: &ViTParams<F>,
    data: &ImageBatch<F>,
    batch_size: usize,
) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.subset(chunk);
        let logits = predict(params, &batch)?;
        for (row, &label) in logits.outer_iter().zip(&batch.labels) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == usize::from(label) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Full attack with hierarchical location sampling.
pub fn run_pasta<F: Scalar>(
    params0: &ViTParams<F>,
    data: &ImageBatch<F>,
    attack: &AttackConfig,
) -> Result<TrainResult<F>> {
    run_pasta_with_sink(params0, data, attack, &mut NoSink)
}

/// Like [`run_pasta`] but reporting the state after every epoch.
pub fn run_pasta_with_sink<F: Scalar>(
    params0: &ViTParams<F>,
    data: &ImageBatch<F>,
    attack: &AttackConfig,
    sink: &mut dyn EpochSink<F>,
) -> Result<TrainResult<F>> {
    let sampler = attack.sampler_for(params0.config())?;
    run_pasta_with_sampler(params0, data, attack, sampler, sink)
}

/// The same schedule under an explicit location sampler; the hook the
/// single-location equivalence checks build on.
pub fn run_pasta_with_sampler<F: Scalar>(
    params0: &ViTParams<F>,
    data: &ImageBatch<F>,
    attack: &AttackConfig,
    sampler: LocationSampler,
    sink: &mut dyn EpochSink<F>,
) -> Result<TrainResult<F>> {
    run_attack(
        params0,
        data,
        attack,
        RunPlan {
            sampler,
            rep_pattern: None,
            trigger_weights: attack.trigger_weights,
            model_weights: attack.model_weights,
            trigger_passes: attack.trigger_passes,
            record_attention: false,
        },
        sink,
    )
}

/// Ablation keeping one constant insertion location end to end.
pub fn run_single_location_baseline<F: Scalar>(
    params0: &ViTParams<F>,
    data: &ImageBatch<F>,
    attack: &AttackConfig,
    location: PatchIndex,
) -> Result<TrainResult<F>> {
    run_pasta_with_sampler(
        params0,
        data,
        attack,
        LocationSampler::Fixed(location),
        &mut NoSink,
    )
}

/// Patch-replacement baseline: a fixed pattern overwrites one patch of
/// every poisoned sample, the additive trigger stays zero, and no
/// stealthiness term is optimized or logged.
pub fn run_badnets_rep_baseline<F: Scalar>(
    params0: &ViTParams<F>,
    data: &ImageBatch<F>,
    attack: &AttackConfig,
    pattern: &Array3<F>,
    location: PatchIndex,
) -> Result<TrainResult<F>> {
    let zero = LossWeights::new(0.0, 0.0).expect("zero weights are valid");
    run_attack(
        params0,
        data,
        attack,
        RunPlan {
            sampler: LocationSampler::Fixed(location),
            rep_pattern: Some(pattern),
            trigger_weights: zero,
            model_weights: zero,
            trigger_passes: 0,
            record_attention: false,
        },
        &mut NoSink,
    )
}

/// Full attack with the attention term weighted zero in both phases; the
/// term is still computed and logged for comparison, it just never enters
/// an aggregate.
pub fn run_no_attn_ablation<F: Scalar>(
    params0: &ViTParams<F>,
    data: &ImageBatch<F>,
    attack: &AttackConfig,
) -> Result<TrainResult<F>> {
    let sampler = attack.sampler_for(params0.config())?;
    let mut trigger_weights = attack.trigger_weights;
    trigger_weights.attention = 0.0;
    let mut model_weights = attack.model_weights;
    model_weights.attention = 0.0;
    run_attack(
        params0,
        data,
        attack,
        RunPlan {
            sampler,
            rep_pattern: None,
            trigger_weights,
            model_weights,
            trigger_passes: attack.trigger_passes,
            record_attention: true,
        },
        &mut NoSink,
    )
}

/// How a concrete run deviates from the full attack: location sampling,
/// insertion style, per-phase weights, and logging of unweighted terms.
struct RunPlan<'a, F: Scalar> {
    sampler: LocationSampler,
    rep_pattern: Option<&'a Array3<F>>,
    trigger_weights: LossWeights,
    model_weights: LossWeights,
    trigger_passes: usize,
    record_attention: bool,
}

fn run_attack<F: Scalar>(
    params0: &ViTParams<F>,
    data: &ImageBatch<F>,
    attack: &AttackConfig,
    plan: RunPlan<'_, F>,
    sink: &mut dyn EpochSink<F>,
) -> Result<TrainResult<F>> {
    attack.validate()?;
    let cfg = *params0.config();
    if data.is_empty() {
        return Err(CoreError::InvalidArgument("empty training set".into()));
    }
    let layer = attack.disparity_layer_for(&cfg);
    plan.sampler.validate(cfg.grid_size())?;

    let (low, upp) = attack.resolved_bounds(data);
    let mut trigger = match plan.rep_pattern {
        Some(pattern) => {
            if pattern.shape() != [cfg.channels, cfg.patch_size, cfg.patch_size] {
                return Err(CoreError::ShapeMismatch(format!(
                    "replacement pattern {:?} does not match one {}-channel {}x{} patch",
                    pattern.shape(),
                    cfg.channels,
                    cfg.patch_size,
                    cfg.patch_size
                )));
            }
            Trigger::new(
                Array3::zeros((cfg.channels, cfg.patch_size, cfg.patch_size)),
                low.min(F::zero()),
                upp.max(F::zero()),
            )?
        }
        None => Trigger::init(&cfg, low, upp, &mut stage_rng(attack.seed, "trigger-init", 0))?,
    };
    validate_poison_setup(&cfg, &trigger, attack.target, layer)?;

    let partition = poison_partition(
        data.len(),
        attack.poison_ratio,
        attack.trigger_fraction,
        attack.seed,
    )?;
    let trig_set = data.subset(&partition.trig);

    let mut params = params0.clone();
    let mut opt = AdamW::new(attack.optimizer, params.tensors());
    let rows_per_epoch = plan.trigger_passes + attack.model_passes;
    let mut log: Vec<LossLogRow> = Vec::with_capacity(attack.total_epochs * rows_per_epoch);
    let mut locations: Vec<PatchIndex> = Vec::new();
    let mut trigger_secs = 0.0f64;
    let mut model_secs = 0.0f64;
    let trigger_lr = fl::<F>(attack.trigger_lr);
    // Rolling clean loss shown on trigger rows, seeded from one batch.
    let mut last_clean = loss_clean(&params, &data.head(attack.batch_size))?;

    for epoch in 0..attack.total_epochs {
        let started = Instant::now();
        let theta_digest = params_digest(&params);
        if plan.trigger_passes > 0 {
            // The network is frozen for the whole phase, so the clean maps
            // of the trigger subset are computed once per epoch.
            let maps = if plan.trigger_weights.attention > 0.0 || plan.record_attention {
                Some(attention_maps_chunked(
                    &params,
                    &trig_set.images,
                    layer,
                    attack.batch_size,
                )?)
            } else {
                None
            };
            for pass in 0..plan.trigger_passes {
                let row_seed = derive_seed(
                    attack.seed,
                    "trigger-pass",
                    (epoch * plan.trigger_passes + pass) as u64,
                );
                let mut rng = ChaCha8Rng::seed_from_u64(row_seed);
                let mut order: Vec<usize> = (0..trig_set.len()).collect();
                shuffle(&mut order, &mut rng);
                let mut acc = ReportAccumulator::default();
                for chunk in order.chunks(attack.batch_size) {
                    let batch = trig_set.subset(chunk);
                    let locs = plan.sampler.sample_many(chunk.len(), &mut rng);
                    let batch_maps = maps.as_ref().map(|m| m.select(Axis(0), chunk));
                    let (report, grad) = trigger_objective_at(
                        &params,
                        &batch,
                        &trigger,
                        &plan.trigger_weights,
                        &locs,
                        attack.target,
                        layer,
                        plan.record_attention,
                        batch_maps.as_ref(),
                    )?;
                    trigger = sgd_step(&trigger, &grad, trigger_lr)?;
                    locations.extend_from_slice(&locs);
                    acc.add(&report, 0.0, chunk.len() as f64);
                }
                log.push(LossLogRow {
                    epoch,
                    phase: Phase::Trigger,
                    pass,
                    seed: row_seed,
                    report: acc.mean(last_clean),
                });
            }
        }
        if params_digest(&params) != theta_digest {
            return Err(CoreError::Invariant(
                "model parameters changed during the trigger phase".into(),
            ));
        }
        trigger_secs += started.elapsed().as_secs_f64();

        let started = Instant::now();
        let frozen_trigger = trigger_digest(&trigger);
        let virtual_len = data.len() + partition.bd.len();
        for pass in 0..attack.model_passes {
            let row_seed = derive_seed(
                attack.seed,
                "model-pass",
                (epoch * attack.model_passes + pass) as u64,
            );
            let mut rng = ChaCha8Rng::seed_from_u64(row_seed);
            let mut order: Vec<usize> = (0..virtual_len).collect();
            shuffle(&mut order, &mut rng);
            let mut acc = ReportAccumulator::default();
            for chunk in order.chunks(attack.batch_size) {
                let clean_idx: Vec<usize> =
                    chunk.iter().copied().filter(|&i| i < data.len()).collect();
                let poison_src: Vec<usize> = chunk
                    .iter()
                    .filter(|&&i| i >= data.len())
                    .map(|&i| partition.bd[i - data.len()])
                    .collect();
                let clean_batch = data.subset(&clean_idx);
                let locs = plan.sampler.sample_many(poison_src.len(), &mut rng);
                let poison_batch =
                    poison_batch_for(data, &poison_src, plan.rep_pattern, &locs, attack.target)?;
                let (report, grads) = model_objective_at(
                    &params,
                    &clean_batch,
                    &poison_batch,
                    &trigger,
                    &plan.model_weights,
                    &locs,
                    attack.target,
                    layer,
                    plan.record_attention,
                )?;
                opt.step(params.tensors_mut(), &grads)?;
                locations.extend_from_slice(&locs);
                acc.add(&report, clean_idx.len() as f64, poison_src.len() as f64);
            }
            let row = acc.mean(last_clean);
            last_clean = row.clean;
            log.push(LossLogRow {
                epoch,
                phase: Phase::Model,
                pass,
                seed: row_seed,
                report: row,
            });
        }
        if trigger_digest(&trigger) != frozen_trigger {
            return Err(CoreError::Invariant(
                "trigger changed during the model phase".into(),
            ));
        }
        model_secs += started.elapsed().as_secs_f64();

        sink.on_epoch(epoch, &params, &trigger)?;
    }

    debug_assert_eq!(log.len(), attack.total_epochs * rows_per_epoch);
    Ok(TrainResult {
        params,
        trigger,
        log,
        partition,
        locations,
        trigger_secs,
        model_secs,
    })
}

/// One SGD step on the trigger followed by projection into its bounds.
fn sgd_step<F: Scalar>(t: &Trigger<F>, grad: &Array3<F>, lr: F) -> Result<Trigger<F>> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(CoreError::NonFinite("trigger gradient".into()));
    }
    let (low, upp) = (t.low, t.upp);
    let mut values = t.values.clone();
    azip!((v in &mut values, &g in grad) { *v = (*v - lr * g).max(low).min(upp) });
    let stepped = clamp_trigger(&Trigger::new(values, low, upp)?);
    if stepped
        .values
        .iter()
        .any(|&v| v < stepped.low || v > stepped.upp)
    {
        return Err(CoreError::Invariant(
            "trigger left its bounds after clamping".into(),
        ));
    }
    Ok(stepped)
}

/// Gathers the poisoned inputs of one step: raw clean sources for the
/// superimposed trigger, or pattern-replaced copies for the replacement
/// baseline. Labels are all the target class.
fn poison_batch_for<F: Scalar>(
    data: &ImageBatch<F>,
    sources: &[usize],
    rep_pattern: Option<&Array3<F>>,
    locations: &[PatchIndex],
    target: u8,
) -> Result<ImageBatch<F>> {
    let src = data.subset(sources);
    let images = match rep_pattern {
        None => src.images,
        Some(pattern) => {
            let p = pattern.shape()[1];
            let mut out = src.images;
            for (s, loc) in locations.iter().enumerate() {
                out.slice_mut(s![
                    s,
                    ..,
                    loc.row * p..(loc.row + 1) * p,
                    loc.col * p..(loc.col + 1) * p
                ])
                .assign(pattern);
            }
            out
        }
    };
    ImageBatch::new(images, vec![target; sources.len()], usize::from(target) + 1)
}

/// Composed clean attention maps of a large set, computed in batch-sized
/// chunks to bound graph memory.
fn attention_maps_chunked<F: Scalar>(
    params: &ViTParams<F>,
    images: &Array4<F>,
    layer: usize,
    batch_size: usize,
) -> Result<Array3<F>> {
    let n = images.shape()[0];
    let tokens = params.config().seq_len();
    let mut out = Array3::zeros((n, tokens, tokens));
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let chunk = images.slice(s![start..end, .., .., ..]).to_owned();
        let maps = clean_attention_maps(params, &chunk, layer)?;
        out.slice_mut(s![start..end, .., ..]).assign(&maps);
        start = end;
    }
    Ok(out)
}

#[derive(Default)]
struct WeightedSum {
    sum: f64,
    weight: f64,
}

impl WeightedSum {
    fn add(&mut self, value: f64, weight: f64) {
        if weight > 0.0 {
            self.sum += value * weight;
            self.weight += weight;
        }
    }

    fn mean_or(&self, fallback: f64) -> f64 {
        if self.weight > 0.0 {
            self.sum / self.weight
        } else {
            fallback
        }
    }
}

/// Per-column weighted averages over the steps of one pass: clean by clean
/// sample count, backdoor/attention by poisoned sample count, visual and
/// aggregate by step.
#[derive(Default)]
struct ReportAccumulator {
    clean: WeightedSum,
    backdoor: WeightedSum,
    visual: WeightedSum,
    attention: WeightedSum,
    aggregate: WeightedSum,
}

impl ReportAccumulator {
    fn add(&mut self, report: &LossReport, clean_weight: f64, poison_weight: f64) {
        self.clean.add(report.clean, clean_weight);
        self.backdoor.add(report.backdoor, poison_weight);
        self.attention.add(report.attention, poison_weight);
        self.visual.add(report.visual, 1.0);
        self.aggregate.add(report.aggregate, 1.0);
    }

    fn mean(&self, fallback_clean: f64) -> LossReport {
        LossReport {
            clean: self.clean.mean_or(fallback_clean),
            backdoor: self.backdoor.mean_or(0.0),
            visual: self.visual.mean_or(0.0),
            attention: self.attention.mean_or(0.0),
            aggregate: self.aggregate.mean_or(0.0),
        }
    }
}
