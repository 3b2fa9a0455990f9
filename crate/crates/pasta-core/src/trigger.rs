//! Trigger tensor, patch masks, insertion operators, and the hierarchical
//! multi-location sampler.
//!
//! A trigger is an additive perturbation the size of one patch. Inserting it
//! superimposes the perturbation onto a chosen patch without clamping, so
//! gradients keep flowing through saturated pixels; clamping to the valid
//! pixel range happens only when images are exported for display or metrics.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::{fl, Scalar, Tape, Var};
use crate::vit::ModelConfig;

/// Grid coordinates of one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchIndex {
    pub row: usize,
    pub col: usize,
}

impl PatchIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Row-major flattened index into the patch grid.
    pub fn flat(&self, grid: usize) -> usize {
        self.row * grid + self.col
    }

    pub fn from_flat(index: usize, grid: usize) -> Self {
        Self {
            row: index / grid,
            col: index % grid,
        }
    }

    pub fn validate(&self, grid: usize) -> Result<()> {
        if self.row >= grid || self.col >= grid {
            return Err(CoreError::InvalidArgument(format!(
                "patch ({}, {}) outside {grid}x{grid} grid",
                self.row, self.col
            )));
        }
        Ok(())
    }
}

/// Additive patch perturbation with elementwise bounds, in normalized
/// pixel units.
#[derive(Debug, Clone)]
pub struct Trigger<F: Scalar> {
    /// Perturbation tensor, `[C, p, p]`.
    pub values: Array3<F>,
    /// Elementwise lower bound.
    pub low: F,
    /// Elementwise upper bound.
    pub upp: F,
}

impl<F: Scalar> Trigger<F> {
    pub fn new(values: Array3<F>, low: F, upp: F) -> Result<Self> {
        if low > upp {
            return Err(CoreError::InvalidArgument(format!(
                "trigger bounds inverted: {low} > {upp}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("trigger values".into()));
        }
        if values.iter().any(|&v| v < low || v > upp) {
            return Err(CoreError::InvalidArgument(format!(
                "trigger values outside [{low}, {upp}]"
            )));
        }
        Ok(Self { values, low, upp })
    }

    /// Fresh trigger with elementwise uniform values in ±0.05 (intersected
    /// with the bounds), deterministic in the seed.
    pub fn init<R: Rng>(config: &ModelConfig, low: F, upp: F, rng: &mut R) -> Result<Self> {
        let p = config.patch_size;
        let spread = 0.05;
        let values = Array3::from_shape_simple_fn((config.channels, p, p), || {
            let draw = fl::<F>(rng.gen_range(-spread..=spread));
            draw.max(low).min(upp)
        });
        Self::new(values, low, upp)
    }

    pub fn patch_size(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// Euclidean norm of the perturbation tensor.
    pub fn l2(&self) -> F {
        self.values
            .iter()
            .map(|&v| v * v)
            .fold(F::zero(), |a, b| a + b)
            .sqrt()
    }
}

/// Candidate insertion locations for the hierarchical sampler: a center
/// set and a corner set, disjoint and non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MISConfig {
    pub centers: Vec<PatchIndex>,
    pub corners: Vec<PatchIndex>,
}

impl MISConfig {
    pub fn validate(&self, grid: usize) -> Result<()> {
        if self.centers.is_empty() || self.corners.is_empty() {
            return Err(CoreError::InvalidConfig(
                "sampler needs at least one center and one corner patch".into(),
            ));
        }
        for set in [&self.centers, &self.corners] {
            for idx in set {
                idx.validate(grid)?;
            }
        }
        for c in &self.centers {
            if self.corners.contains(c) {
                return Err(CoreError::InvalidConfig(format!(
                    "patch ({}, {}) appears in both candidate sets",
                    c.row, c.col
                )));
            }
        }
        Ok(())
    }

    /// All candidate locations, centers first.
    pub fn all(&self) -> Vec<PatchIndex> {
        self.centers.iter().chain(&self.corners).copied().collect()
    }
}

/// Binary mask of one patch: ones exactly on the `p×p` block of patch `i`.
pub fn make_mask<F: Scalar>(i: PatchIndex, config: &ModelConfig) -> Result<Array2<F>> {
    i.validate(config.grid_size())?;
    let (h, p) = (config.image_size, config.patch_size);
    let mut mask = Array2::zeros((h, h));
    for r in i.row * p..(i.row + 1) * p {
        for c in i.col * p..(i.col + 1) * p {
            mask[[r, c]] = F::one();
        }
    }
    Ok(mask)
}

fn check_image_shapes<F: Scalar>(
    x: &Array4<F>,
    channels: usize,
    patch: usize,
) -> Result<usize> {
    let shape = x.shape();
    if shape[1] != channels {
        return Err(CoreError::ShapeMismatch(format!(
            "images have {} channels, trigger has {channels}",
            shape[1]
        )));
    }
    if shape[2] != shape[3] || shape[2] % patch != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "image size {}x{} not divisible into {patch}-pixel patches",
            shape[2], shape[3]
        )));
    }
    Ok(shape[2] / patch)
}

/// Superimposes the trigger onto one patch of every image: `x + M_i · t`.
/// The result is intentionally not clamped.
pub fn insert_sup<F: Scalar>(x: &Array4<F>, t: &Trigger<F>, i: PatchIndex) -> Result<Array4<F>> {
    insert_sup_multi(x, t, &[i])
}

/// Superimposes the trigger onto several patches of every image, the
/// multi-location payload used at inference time.
pub fn insert_sup_multi<F: Scalar>(
    x: &Array4<F>,
    t: &Trigger<F>,
    locations: &[PatchIndex],
) -> Result<Array4<F>> {
    let p = t.patch_size();
    let grid = check_image_shapes(x, t.channels(), p)?;
    let mut out = x.clone();
    for loc in locations {
        loc.validate(grid)?;
        for b in 0..x.shape()[0] {
            for ch in 0..t.channels() {
                for r in 0..p {
                    for c in 0..p {
                        out[[b, ch, loc.row * p + r, loc.col * p + c]] += t.values[[ch, r, c]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-sample superimposition: image `b` receives the trigger at
/// `locations[b]`, the training-time path for sampled locations.
pub fn insert_sup_each<F: Scalar>(
    x: &Array4<F>,
    t: &Trigger<F>,
    locations: &[PatchIndex],
) -> Result<Array4<F>> {
    if locations.len() != x.shape()[0] {
        return Err(CoreError::ShapeMismatch(format!(
            "{} locations for {} images",
            locations.len(),
            x.shape()[0]
        )));
    }
    let p = t.patch_size();
    let grid = check_image_shapes(x, t.channels(), p)?;
    let mut out = x.clone();
    for (b, loc) in locations.iter().enumerate() {
        loc.validate(grid)?;
        for ch in 0..t.channels() {
            for r in 0..p {
                for c in 0..p {
                    out[[b, ch, loc.row * p + r, loc.col * p + c]] += t.values[[ch, r, c]];
                }
            }
        }
    }
    Ok(out)
}

/// Replaces one patch of every image with a fixed pattern (`[C, p, p]`),
/// the classical patch-backdoor baseline.
pub fn insert_rep<F: Scalar>(
    x: &Array4<F>,
    pattern: &Array3<F>,
    i: PatchIndex,
) -> Result<Array4<F>> {
    let (channels, p) = (pattern.shape()[0], pattern.shape()[1]);
    let grid = check_image_shapes(x, channels, p)?;
    i.validate(grid)?;
    let mut out = x.clone();
    for b in 0..x.shape()[0] {
        for ch in 0..channels {
            for r in 0..p {
                for c in 0..p {
                    out[[b, ch, i.row * p + r, i.col * p + c]] = pattern[[ch, r, c]];
                }
            }
        }
    }
    Ok(out)
}

/// Blends a full-size pattern over the whole image: `x·(1−m) + t·m`.
pub fn insert_blend<F: Scalar>(x: &Array4<F>, m: f64, pattern: &Array3<F>) -> Result<Array4<F>> {
    if !(0.0..=1.0).contains(&m) {
        return Err(CoreError::InvalidArgument(format!(
            "blend weight {m} outside [0, 1]"
        )));
    }
    if pattern.shape() != &x.shape()[1..] {
        return Err(CoreError::ShapeMismatch(format!(
            "pattern {:?} does not cover image {:?}",
            pattern.shape(),
            &x.shape()[1..]
        )));
    }
    let keep = fl::<F>(1.0 - m);
    let mix = fl::<F>(m);
    let mut out = x.clone();
    for b in 0..x.shape()[0] {
        for (o, &pv) in out
            .index_axis_mut(ndarray::Axis(0), b)
            .iter_mut()
            .zip(pattern.iter())
        {
            *o = *o * keep + pv * mix;
        }
    }
    Ok(out)
}

/// Inserts the trigger on the tape with one location per sample, keeping
/// the result differentiable in both the images and the trigger.
pub fn insert_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    images: Var,
    trigger: Var,
    locations: &[PatchIndex],
    patch: usize,
) -> Var {
    let locs: Vec<(usize, usize)> = locations.iter().map(|l| (l.row, l.col)).collect();
    tape.insert_trigger(images, trigger, &locs, patch)
}

/// Draws one location: uniformly over the centers plus a single corner
/// bucket, then uniformly within the corners if the bucket was drawn. Each
/// center has probability `1/(|centers|+1)`; each corner
/// `1/((|centers|+1)·|corners|)`.
pub fn mis_sample<R: Rng>(mis: &MISConfig, rng: &mut R) -> PatchIndex {
    let bucket = rng.gen_range(0..=mis.centers.len());
    if bucket < mis.centers.len() {
        mis.centers[bucket]
    } else {
        mis.corners[rng.gen_range(0..mis.corners.len())]
    }
}

/// Where poisoned samples place the trigger: fresh hierarchical draws per
/// sample, or one constant location (the single-location baselines).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocationSampler {
    Hierarchical(MISConfig),
    Fixed(PatchIndex),
}

impl LocationSampler {
    pub fn validate(&self, grid: usize) -> Result<()> {
        match self {
            LocationSampler::Hierarchical(mis) => mis.validate(grid),
            LocationSampler::Fixed(loc) => loc.validate(grid),
        }
    }

    /// Draws one location. The fixed variant consumes no randomness, so a
    /// run driven by it replays the hierarchical run's stream positions.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> PatchIndex {
        match self {
            LocationSampler::Hierarchical(mis) => mis_sample(mis, rng),
            LocationSampler::Fixed(loc) => *loc,
        }
    }

    pub fn sample_many<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<PatchIndex> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    /// All locations this sampler can produce.
    pub fn support(&self) -> Vec<PatchIndex> {
        match self {
            LocationSampler::Hierarchical(mis) => mis.all(),
            LocationSampler::Fixed(loc) => vec![*loc],
        }
    }
}

/// Default candidate sets for a `g×g` grid: five center-region patches at
/// quarter/half positions and the four corners.
pub fn default_mis(config: &ModelConfig) -> Result<MISConfig> {
    let g = config.grid_size();
    if g < 4 {
        return Err(CoreError::InvalidConfig(format!(
            "grid {g} too small for the default candidate sets (need g >= 4)"
        )));
    }
    let q = g / 4;
    let r = g - 1 - q;
    let c = g / 2;
    let raw = [
        PatchIndex::new(q, q),
        PatchIndex::new(q, r),
        PatchIndex::new(c, c),
        PatchIndex::new(r, q),
        PatchIndex::new(r, r),
    ];
    let corners = vec![
        PatchIndex::new(0, 0),
        PatchIndex::new(0, g - 1),
        PatchIndex::new(g - 1, 0),
        PatchIndex::new(g - 1, g - 1),
    ];
    let mut centers = Vec::new();
    for idx in raw {
        if !centers.contains(&idx) && !corners.contains(&idx) {
            centers.push(idx);
        }
    }
    let mis = MISConfig { centers, corners };
    mis.validate(g)?;
    Ok(mis)
}

/// Rescales the trigger so its Euclidean norm equals `target` exactly.
pub fn scale_to_l2<F: Scalar>(t: &Trigger<F>, target: F) -> Result<Trigger<F>> {
    let norm = t.l2();
    if norm <= F::zero() {
        return Err(CoreError::InvalidArgument(
            "cannot rescale a zero trigger".into(),
        ));
    }
    if target < F::zero() {
        return Err(CoreError::InvalidArgument(
            "target norm must be non-negative".into(),
        ));
    }
    let factor = target / norm;
    Ok(Trigger {
        values: t.values.mapv(|v| v * factor),
        low: t.low,
        upp: t.upp,
    })
}

/// Projects every element into `[low, upp]`; applied after each trigger
/// gradient step.
pub fn clamp_trigger<F: Scalar>(t: &Trigger<F>) -> Trigger<F> {
    Trigger {
        values: t.values.mapv(|v| v.max(t.low).min(t.upp)),
        low: t.low,
        upp: t.upp,
    }
}
