//! Compact Vision Transformer with per-layer attention capture.
//!
//! The forward pass is built on the reverse-mode tape from [`crate::tensor`],
//! so gradients flow to both the parameters and the input pixels. Every
//! attention matrix (per layer, per head) can be retained for the
//! attention-disparity loss, rollout visualization, and defenses.

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{CoreError, Result};
use crate::tensor::{cast_array, fl, matmul2, Scalar, Tape, Var};

/// Epsilon used by every layer norm in the model.
pub const LAYERNORM_EPS: f64 = 1e-6;

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters; all tensor shapes derive from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Desk-scale default: a six-block transformer small enough to train
    /// from scratch on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 128,
            num_heads: 4,
            depth: 6,
            mlp_ratio: 4,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.channels == 0 || self.patch_size == 0 {
            return Err(CoreError::InvalidConfig(
                "image_size, channels and patch_size must be positive".into(),
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.depth < 1 {
            return Err(CoreError::InvalidConfig("depth must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(CoreError::InvalidConfig(
                "num_classes must be at least 2".into(),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(CoreError::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Token sequence length: one class token plus all patch tokens.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Flattened per-patch pixel count, the patch-embedding input width.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Number of tensors per transformer block in the flat parameter order.
pub const BLOCK_TENSORS: usize = 12;

const IDX_PATCH_W: usize = 0;
const IDX_PATCH_B: usize = 1;
const IDX_CLS: usize = 2;
const IDX_POS: usize = 3;

const OFF_NORM1_W: usize = 0;
const OFF_NORM1_B: usize = 1;
const OFF_QKV_W: usize = 2;
const OFF_QKV_B: usize = 3;
const OFF_PROJ_W: usize = 4;
const OFF_PROJ_B: usize = 5;
const OFF_NORM2_W: usize = 6;
const OFF_NORM2_B: usize = 7;
const OFF_FC1_W: usize = 8;
const OFF_FC1_B: usize = 9;
const OFF_FC2_W: usize = 10;
const OFF_FC2_B: usize = 11;

fn block_base(layer: usize) -> usize {
    4 + BLOCK_TENSORS * layer
}

/// Names of all parameter tensors in their canonical flat order.
pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec![
        "patch_embed.weight".to_string(),
        "patch_embed.bias".to_string(),
        "cls_token".to_string(),
        "pos_embed".to_string(),
    ];
    for l in 0..config.depth {
        for part in [
            "norm1.weight",
            "norm1.bias",
            "qkv.weight",
            "qkv.bias",
            "proj.weight",
            "proj.bias",
            "norm2.weight",
            "norm2.bias",
            "mlp.fc1.weight",
            "mlp.fc1.bias",
            "mlp.fc2.weight",
            "mlp.fc2.bias",
        ] {
            names.push(format!("blocks.{l}.{part}"));
        }
    }
    names.push("final_norm.weight".to_string());
    names.push("final_norm.bias".to_string());
    names.push("head.weight".to_string());
    names.push("head.bias".to_string());
    names
}

/// Shapes of all parameter tensors, aligned with [`tensor_names`].
pub fn tensor_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    let d = config.embed_dim;
    let t = config.seq_len();
    let h = config.hidden_dim();
    let mut shapes = vec![
        vec![config.patch_dim(), d],
        vec![d],
        vec![1, 1, d],
        vec![1, t, d],
    ];
    for _ in 0..config.depth {
        shapes.push(vec![d]);
        shapes.push(vec![d]);
        shapes.push(vec![d, 3 * d]);
        shapes.push(vec![3 * d]);
        shapes.push(vec![d, d]);
        shapes.push(vec![d]);
        shapes.push(vec![d]);
        shapes.push(vec![d]);
        shapes.push(vec![d, h]);
        shapes.push(vec![h]);
        shapes.push(vec![h, d]);
        shapes.push(vec![d]);
    }
    shapes.push(vec![d]);
    shapes.push(vec![d]);
    shapes.push(vec![d, config.num_classes]);
    shapes.push(vec![config.num_classes]);
    shapes
}

/// All learnable tensors of one model, stored flat in canonical order.
#[derive(Debug, Clone)]
pub struct ViTParams<F: Scalar> {
    config: ModelConfig,
    tensors: Vec<ArrayD<F>>,
}

impl<F: Scalar> ViTParams<F> {
    /// Reassembles a parameter set from tensors in canonical order,
    /// validating every shape against the config's schema.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<ArrayD<F>>) -> Result<Self> {
        config.validate()?;
        let shapes = tensor_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(CoreError::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (tensor, shape)) in tensors.iter().zip(&shapes).enumerate() {
            if tensor.shape() != shape.as_slice() {
                return Err(CoreError::ShapeMismatch(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    tensor_names(&config)[i],
                    tensor.shape(),
                    shape
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ArrayD<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<F>] {
        &mut self.tensors
    }

    /// Iterates `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> impl Iterator<Item = (String, &ArrayD<F>)> {
        tensor_names(&self.config).into_iter().zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<B: Scalar>(&self) -> ViTParams<B> {
        ViTParams {
            config: self.config,
            tensors: self.tensors.iter().map(|t| cast_array(t)).collect(),
        }
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, tensor) in self.named() {
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}

fn draw_trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return std * z;
        }
    }
}

/// Builds a freshly initialized model: truncated-normal weights and token
/// embeddings (std 0.02, resampled beyond two standard deviations), unit
/// layer-norm gains, zero biases. Deterministic in `(config, seed)`.
pub fn init_model<F: Scalar>(config: ModelConfig, seed: u64) -> Result<ViTParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = tensor_names(&config);
    let shapes = tensor_shapes(&config);
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, shape) in names.iter().zip(shapes) {
        let len: usize = shape.iter().product();
        let values: Vec<F> = if name.ends_with("norm1.weight")
            || name.ends_with("norm2.weight")
            || name.ends_with("final_norm.weight")
        {
            vec![F::one(); len]
        } else if name.ends_with(".weight") || name == "cls_token" || name == "pos_embed" {
            (0..len).map(|_| fl(draw_trunc_normal(&mut rng, INIT_STD))).collect()
        } else {
            vec![F::zero(); len]
        };
        tensors.push(ArrayD::from_shape_vec(IxDyn(&shape), values).expect("schema shape"));
    }
    ViTParams::from_tensors(config, tensors)
}

/// Per-layer attention matrices captured during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionStack<F: Scalar> {
    /// One `[B, heads, T, T]` tensor per transformer layer.
    pub layers: Vec<Array4<F>>,
}

impl<F: Scalar> AttentionStack<F> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |a| a.shape()[0])
    }

    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, |a| a.shape()[2])
    }

    /// Head-averaged attention for one layer: `[B, T, T]`.
    pub fn head_mean(&self, layer: usize) -> Array3<F> {
        let a = &self.layers[layer];
        let (b, h, t, s) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
        let mut out = Array3::<F>::zeros((b, t, s));
        let inv = fl::<F>(1.0 / h as f64);
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    for si in 0..s {
                        out[[bi, ti, si]] = out[[bi, ti, si]] + a[[bi, hi, ti, si]] * inv;
                    }
                }
            }
        }
        out
    }

    /// Checks that every attention row sums to one within `tol`.
    pub fn validate_rows(&self, tol: f64) -> Result<()> {
        for (l, a) in self.layers.iter().enumerate() {
            for (i, row) in a.rows().into_iter().enumerate() {
                let sum: f64 = row.iter().map(|v| v.to_f64().unwrap()).sum();
                if (sum - 1.0).abs() > tol || row.iter().any(|v| *v < F::zero()) {
                    return Err(CoreError::InvalidArgument(format!(
                        "attention row {i} of layer {l} sums to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Controls what a tape forward pass exposes.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Register parameters as differentiable leaves (model-update phase)
    /// instead of frozen constants (trigger phase, evaluation).
    pub train_params: bool,
    /// Keep per-layer attention handles for losses and visualization.
    pub retain_attention: bool,
    /// Expose the post-activation MLP hidden state of this block index.
    pub capture_hidden: Option<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            train_params: false,
            retain_attention: true,
            capture_hidden: None,
        }
    }
}

/// Handles into a tape holding one forward pass.
pub struct ForwardVars {
    /// Parameter variables aligned with [`ViTParams::tensors`].
    pub param_vars: Vec<Var>,
    /// Classification logits, `[B, num_classes]`.
    pub logits: Var,
    /// Per-layer per-head attention, `[B·heads, T, T]` each.
    pub attn_heads: Vec<Var>,
    /// Per-layer head-averaged attention, `[B, T, T]` each.
    pub attn_mean: Vec<Var>,
    /// Post-GELU hidden activations of the requested block, `[B·T, hidden]`.
    pub hidden: Option<Var>,
}

/// Registers every parameter tensor on the tape, as differentiable leaves
/// when `train` is set or frozen constants otherwise. The returned handles
/// can be shared by several forward passes on the same tape so gradients
/// accumulate into one set of variables.
pub fn register_params<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ViTParams<F>,
    train: bool,
) -> Vec<Var> {
    params
        .tensors()
        .iter()
        .map(|tensor| {
            if train {
                tape.leaf(tensor.clone())
            } else {
                tape.constant(tensor.clone())
            }
        })
        .collect()
}

/// Builds the full forward graph on `tape` starting from `images`
/// (a `[B, C, H, W]` variable already on the tape), registering the
/// parameters according to `opts.train_params`.
pub fn forward_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ViTParams<F>,
    images: Var,
    opts: &ForwardOptions,
) -> ForwardVars {
    let param_vars = register_params(tape, params, opts.train_params);
    forward_with_vars(tape, params.config(), param_vars, images, opts)
}

/// Builds the forward graph over previously registered parameter handles.
pub fn forward_with_vars<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    param_vars: Vec<Var>,
    images: Var,
    opts: &ForwardOptions,
) -> ForwardVars {
    let cfg = *cfg;
    let d = cfg.embed_dim;
    let t = cfg.seq_len();
    let n = cfg.num_patches();
    let heads = cfg.num_heads;
    let scale = fl::<F>(1.0 / (cfg.head_dim() as f64).sqrt());
    let eps = fl::<F>(LAYERNORM_EPS);

    assert_eq!(
        param_vars.len(),
        tensor_shapes(&cfg).len(),
        "parameter handle count does not match the config schema"
    );
    let shape = tape.value(images).shape().to_vec();
    assert_eq!(
        &shape[1..],
        [cfg.channels, cfg.image_size, cfg.image_size],
        "batch does not match model config"
    );
    let bsz = shape[0];

    let patches = tape.extract_patches(images, cfg.patch_size);
    let flat = tape.reshape(patches, &[bsz * n, cfg.patch_dim()]);
    let emb = tape.linear(flat, param_vars[IDX_PATCH_W], param_vars[IDX_PATCH_B]);
    let emb3 = tape.reshape(emb, &[bsz, n, d]);
    let tok = tape.concat_token(param_vars[IDX_CLS], emb3);
    let mut x = tape.add_broadcast(tok, param_vars[IDX_POS]);

    let mut attn_heads = Vec::new();
    let mut attn_mean = Vec::new();
    let mut hidden = None;

    for l in 0..cfg.depth {
        let base = block_base(l);
        let x2 = tape.reshape(x, &[bsz * t, d]);
        let normed = tape.layernorm(
            x2,
            param_vars[base + OFF_NORM1_W],
            param_vars[base + OFF_NORM1_B],
            eps,
        );
        let qkv = tape.linear(normed, param_vars[base + OFF_QKV_W], param_vars[base + OFF_QKV_B]);
        let qkv3 = tape.reshape(qkv, &[bsz, t, 3 * d]);
        let q = tape.slice_last(qkv3, 0, d);
        let k = tape.slice_last(qkv3, d, d);
        let v = tape.slice_last(qkv3, 2 * d, d);
        let qh = tape.split_heads(q, heads);
        let kh = tape.split_heads(k, heads);
        let vh = tape.split_heads(v, heads);
        let scores = tape.bmm(qh, kh, false, true, scale);
        let attn = tape.softmax_last(scores);
        if opts.retain_attention {
            attn_heads.push(attn);
            attn_mean.push(tape.mean_heads(attn, heads));
        }
        let ctx = tape.bmm(attn, vh, false, false, F::one());
        let merged = tape.merge_heads(ctx, heads);
        let merged2 = tape.reshape(merged, &[bsz * t, d]);
        let proj = tape.linear(
            merged2,
            param_vars[base + OFF_PROJ_W],
            param_vars[base + OFF_PROJ_B],
        );
        let proj3 = tape.reshape(proj, &[bsz, t, d]);
        let x_attn = tape.add(x, proj3);

        let y2 = tape.reshape(x_attn, &[bsz * t, d]);
        let normed2 = tape.layernorm(
            y2,
            param_vars[base + OFF_NORM2_W],
            param_vars[base + OFF_NORM2_B],
            eps,
        );
        let h1 = tape.linear(
            normed2,
            param_vars[base + OFF_FC1_W],
            param_vars[base + OFF_FC1_B],
        );
        let act = tape.gelu(h1);
        if opts.capture_hidden == Some(l) {
            hidden = Some(act);
        }
        let h2 = tape.linear(
            act,
            param_vars[base + OFF_FC2_W],
            param_vars[base + OFF_FC2_B],
        );
        let h3 = tape.reshape(h2, &[bsz, t, d]);
        x = tape.add(x_attn, h3);
    }

    let tail = block_base(cfg.depth);
    let x2 = tape.reshape(x, &[bsz * t, d]);
    let normed = tape.layernorm(x2, param_vars[tail], param_vars[tail + 1], eps);
    let tokens = tape.reshape(normed, &[bsz, t, d]);
    let cls_out = tape.select_token(tokens, 0);
    let logits = tape.linear(cls_out, param_vars[tail + 2], param_vars[tail + 3]);

    ForwardVars {
        param_vars,
        logits,
        attn_heads,
        attn_mean,
        hidden,
    }
}

/// Composes head-averaged attention through the first `upto_layer` layers
/// on the tape: the result propagates layer-0 features to layer `upto_layer`.
pub fn attention_map_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    fwd: &ForwardVars,
    upto_layer: usize,
) -> Var {
    assert!(
        upto_layer >= 1 && upto_layer <= fwd.attn_mean.len(),
        "layer index {upto_layer} out of range 1..={}",
        fwd.attn_mean.len()
    );
    let mut map = fwd.attn_mean[0];
    for l in 1..upto_layer {
        map = tape.bmm(fwd.attn_mean[l], map, false, false, F::one());
    }
    map
}

fn stack_from_tape<F: Scalar>(
    tape: &Tape<F>,
    attn_heads: &[Var],
    bsz: usize,
    heads: usize,
) -> AttentionStack<F> {
    let layers = attn_heads
        .iter()
        .map(|&v| {
            let a = tape.value(v);
            let t = a.shape()[1];
            a.clone()
                .into_shape_with_order(IxDyn(&[bsz, heads, t, t]))
                .expect("attention layout")
                .into_dimensionality()
                .expect("rank 4")
        })
        .collect();
    AttentionStack { layers }
}

fn run_inference<F: Scalar>(
    params: &ViTParams<F>,
    batch: &ImageBatch<F>,
    retain: bool,
) -> Result<(Array2<F>, Option<AttentionStack<F>>)> {
    let cfg = params.config();
    if batch.images.shape()[1..] != [cfg.channels, cfg.image_size, cfg.image_size] {
        return Err(CoreError::ShapeMismatch(format!(
            "batch images {:?} do not match model input {}x{}x{}",
            batch.images.shape(),
            cfg.channels,
            cfg.image_size,
            cfg.image_size
        )));
    }
    let mut tape = Tape::new();
    let images = tape.constant(batch.images.clone().into_dyn());
    let opts = ForwardOptions {
        train_params: false,
        retain_attention: retain,
        capture_hidden: None,
    };
    let fwd = forward_on_tape(&mut tape, params, images, &opts);
    let logits = tape
        .value(fwd.logits)
        .clone()
        .into_dimensionality()
        .expect("logits rank 2");
    let stack = retain.then(|| {
        stack_from_tape(&tape, &fwd.attn_heads, batch.len(), cfg.num_heads)
    });
    Ok((logits, stack))
}

/// Runs the model over a batch, returning logits and the full attention
/// stack for every layer.
pub fn forward<F: Scalar>(
    params: &ViTParams<F>,
    batch: &ImageBatch<F>,
) -> Result<(Array2<F>, AttentionStack<F>)> {
    let (logits, stack) = run_inference(params, batch, true)?;
    Ok((logits, stack.expect("retained")))
}

/// Runs the model for logits only, skipping attention retention.
pub fn predict<F: Scalar>(params: &ViTParams<F>, batch: &ImageBatch<F>) -> Result<Array2<F>> {
    Ok(run_inference(params, batch, false)?.0)
}

/// Composes head-averaged attention matrices through the first
/// `upto_layer` layers for every sample: `[B, T, T]`.
pub fn attention_map<F: Scalar>(
    attn: &AttentionStack<F>,
    upto_layer: usize,
) -> Result<Array3<F>> {
    if upto_layer < 1 || upto_layer > attn.num_layers() {
        return Err(CoreError::InvalidArgument(format!(
            "upto_layer {upto_layer} outside 1..={}",
            attn.num_layers()
        )));
    }
    let mut map = attn.head_mean(0);
    for l in 1..upto_layer {
        let next = attn.head_mean(l);
        let (b, t, _) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let mut out = Array3::<F>::zeros((b, t, t));
        for bi in 0..b {
            let prod = matmul2(
                next.index_axis(ndarray::Axis(0), bi),
                false,
                map.index_axis(ndarray::Axis(0), bi),
                false,
                F::one(),
            );
            out.index_axis_mut(ndarray::Axis(0), bi).assign(&prod);
        }
        map = out;
    }
    Ok(map)
}

/// Attention rollout with mean head fusion: per layer the head-averaged
/// attention is mixed with the identity as `0.5·(A + I)`, row-renormalized,
/// and cumulatively multiplied; the class-token row over patch tokens is
/// reshaped to the patch grid and max-normalized to `[0, 1]`.
pub fn attention_rollout<F: Scalar>(
    attn: &AttentionStack<F>,
    grid: usize,
) -> Result<Array3<F>> {
    let t = attn.tokens();
    let n = t - 1;
    if grid * grid != n {
        return Err(CoreError::ShapeMismatch(format!(
            "grid {grid} does not match {n} patch tokens"
        )));
    }
    let b = attn.batch_size();
    let half = fl::<F>(0.5);
    let mut rolled: Vec<Array2<F>> = (0..b).map(|_| Array2::eye(t)).collect();
    let mut started = vec![false; b];
    for l in 0..attn.num_layers() {
        let mean = attn.head_mean(l);
        for (bi, acc) in rolled.iter_mut().enumerate() {
            let mut a = mean.index_axis(ndarray::Axis(0), bi).to_owned();
            for i in 0..t {
                a[[i, i]] = a[[i, i]] + F::one();
            }
            a.mapv_inplace(|v| v * half);
            for mut row in a.rows_mut() {
                let sum = row.iter().fold(F::zero(), |s, &v| s + v);
                if sum > F::zero() {
                    let inv = F::one() / sum;
                    row.mapv_inplace(|v| v * inv);
                }
            }
            if started[bi] {
                *acc = matmul2(a.view(), false, acc.view(), false, F::one());
            } else {
                *acc = a;
                started[bi] = true;
            }
        }
    }
    let mut out = Array3::<F>::zeros((b, grid, grid));
    for (bi, acc) in rolled.iter().enumerate() {
        let mut max = F::zero();
        for j in 0..n {
            if acc[[0, j + 1]] > max {
                max = acc[[0, j + 1]];
            }
        }
        for j in 0..n {
            let value = if max > F::zero() {
                acc[[0, j + 1]] / max
            } else {
                F::zero()
            };
            out[[bi, j / grid, j % grid]] = value;
        }
    }
    Ok(out)
}

/// Builds a stack whose every attention row is the uniform distribution,
/// handy for tests and symmetry checks.
pub fn uniform_stack<F: Scalar>(
    layers: usize,
    bsz: usize,
    heads: usize,
    t: usize,
) -> AttentionStack<F> {
    let u = fl::<F>(1.0 / t as f64);
    let layer = Array4::from_elem((bsz, heads, t, t), u);
    AttentionStack {
        layers: (0..layers).map(|_| layer.clone()).collect(),
    }
}
