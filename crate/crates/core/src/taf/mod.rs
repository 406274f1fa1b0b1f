//! Temporally-adaptive feature learning: change-rate schedules, branch
//! swapping, the finite-difference change estimate δy, the hinge
//! regularizer, index sampling and the training objective.
//!
//! For a frame pair (x_t, x_{t+Δ}) and branch i, δy is the mean absolute
//! difference between the softmax prediction for x_t and the prediction
//! obtained when Φᵢ(x_t) is replaced by Φᵢ(x_{t+Δ}). The regularizer
//! penalizes `max(0, δy − |Δ|·cᵢ)`.

mod schedule;

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::data::TrainingPair;
use crate::model::{Binding, BranchSet, Factorized, ModelError};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var, IGNORE_LABEL};

pub use schedule::ChangeRateSchedule;

#[derive(Debug, Error)]
pub enum TafError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("TAF disabled: every change rate is infinite")]
    Disabled,
    #[error("invalid TAF configuration: {0}")]
    Config(String),
}

impl From<TensorError> for TafError {
    fn from(e: TensorError) -> Self {
        TafError::Model(ModelError::Tensor(e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TafConfig {
    /// Regularizer weight λ.
    pub lambda: f64,
    /// Clip half-length n_h: offsets are drawn from [−n_h, n_h].
    pub n_h: usize,
    /// Sampling period Δ₀ in frames.
    pub delta0: f64,
    pub schedule: ChangeRateSchedule,
    pub exclude_zero_offset: bool,
}

impl TafConfig {
    pub fn new(lambda: f64, n_h: usize, schedule: ChangeRateSchedule) -> Result<Self, TafError> {
        let cfg = Self {
            lambda,
            n_h,
            delta0: 1.0,
            schedule,
            exclude_zero_offset: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TafError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TafError::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.n_h < 1 {
            return Err(TafError::Config("n_h must be >= 1".into()));
        }
        if !(self.delta0 > 0.0 && self.delta0.is_finite()) {
            return Err(TafError::Config(format!("delta0 {} must be > 0", self.delta0)));
        }
        Ok(())
    }

    /// True when the regularizer contributes nothing (λ = 0 or every branch exempt).
    pub fn is_inert(&self) -> bool {
        self.lambda == 0.0 || self.schedule.all_infinite()
    }
}

/// Returns a copy of `a` whose feature `i` is taken from `b`.
pub fn swap_branch<T: Scalar>(
    tape: &Tape<T>,
    a: &BranchSet,
    b: &BranchSet,
    i: usize,
) -> Result<BranchSet, ModelError> {
    if i >= a.features.len() {
        return Err(ModelError::BranchIndex {
            index: i,
            count: a.features.len(),
        });
    }
    if a.features.len() != b.features.len() || a.strides != b.strides {
        return Err(ModelError::BranchMismatch(format!(
            "branch strides {:?} vs {:?}",
            a.strides, b.strides
        )));
    }
    if tape.shape(a.features[i]) != tape.shape(b.features[i]) {
        return Err(ModelError::BranchMismatch(format!(
            "branch {i} shape {:?} vs {:?}",
            tape.shape(a.features[i]),
            tape.shape(b.features[i])
        )));
    }
    let mut out = a.clone();
    out.features[i] = b.features[i];
    Ok(out)
}

/// δy given the already-computed softmax prediction `probs_t` for `bs_t`.
pub fn delta_y_from_probs<T: Scalar, M: Factorized<T>>(
    model: &M,
    tape: &mut Tape<T>,
    p: &Binding,
    bs_t: &BranchSet,
    probs_t: Var,
    bs_d: &BranchSet,
    i: usize,
) -> Result<Var, ModelError> {
    let swapped = swap_branch(tape, bs_t, bs_d, i)?;
    let logits = model.aggregate(tape, p, &swapped)?;
    let probs = tape.softmax_channel(logits)?;
    Ok(tape.l1_mean(probs, probs_t)?)
}

/// δy(x_t, i, Δ): mean |softmax(Ω with Φᵢ from x_{t+Δ}) − softmax(Ω(x_t))|.
pub fn delta_y<T: Scalar, M: Factorized<T>>(
    model: &M,
    tape: &mut Tape<T>,
    p: &Binding,
    bs_t: &BranchSet,
    bs_d: &BranchSet,
    i: usize,
) -> Result<Var, ModelError> {
    let logits = model.aggregate(tape, p, bs_t)?;
    let probs_t = tape.softmax_channel(logits)?;
    delta_y_from_probs(model, tape, p, bs_t, probs_t, bs_d, i)
}

/// `max(0, δy − |Δ|·c)`; exactly 0 for an exempt (infinite) rate.
pub fn hinge_reg(delta_y: f64, delta: f64, c: f64) -> f64 {
    if c.is_infinite() {
        return 0.0;
    }
    (delta_y - delta.abs() * c).max(0.0)
}

/// Differentiable form of [`hinge_reg`].
pub fn hinge_reg_var<T: Scalar>(
    tape: &mut Tape<T>,
    delta_y: Var,
    delta: f64,
    c: f64,
) -> Result<Var, TensorError> {
    if c.is_infinite() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let shifted = tape.affine(delta_y, T::one(), T::from_f64_lossy(-delta.abs() * c))?;
    tape.relu(shifted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexSample {
    /// Signed frame offset.
    pub n: i64,
    /// Branch for the forward term R(x_t, i1, nΔ₀).
    pub i1: usize,
    /// Branch for the backward term R(x_{t+nΔ₀}, i2, −nΔ₀).
    pub i2: usize,
}

/// Uniform offset in [−n_h, n_h], resampled while zero if excluded.
pub fn sample_offset(cfg: &TafConfig, rng: &mut impl Rng) -> i64 {
    let h = cfg.n_h as i64;
    loop {
        let n = rng.random_range(-h..=h);
        if !(cfg.exclude_zero_offset && n == 0) {
            return n;
        }
    }
}

/// Uniform branch index over the finite-rate branches.
pub fn sample_branch(cfg: &TafConfig, rng: &mut impl Rng) -> Result<usize, TafError> {
    let finite = cfg.schedule.finite_branches();
    if finite.is_empty() {
        return Err(TafError::Disabled);
    }
    Ok(finite[rng.random_range(0..finite.len())])
}

pub fn sample_indices(
    cfg: &TafConfig,
    m: usize,
    rng: &mut impl Rng,
) -> Result<IndexSample, TafError> {
    if m != cfg.schedule.len() {
        return Err(TafError::Config(format!(
            "schedule has {} rates but the model has {m} branches",
            cfg.schedule.len()
        )));
    }
    if cfg.schedule.all_infinite() {
        return Err(TafError::Disabled);
    }
    let n = sample_offset(cfg, rng);
    let i1 = sample_branch(cfg, rng)?;
    let i2 = sample_branch(cfg, rng)?;
    Ok(IndexSample { n, i1, i2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub ce: f64,
    pub reg_fwd: f64,
    pub reg_bwd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TafLoss {
    pub loss: Var,
    pub parts: LossParts,
    /// Branch indices used for the two regularizer terms, when active.
    pub branches: Option<(usize, usize)>,
}

/// Adds a `[3, H, W]` image to the tape as a `[1, 3, H, W]` constant.
pub(crate) fn image_var<T: Scalar>(tape: &mut Tape<T>, img: &Tensor<T>) -> Result<Var, TensorError> {
    let s = img.shape();
    let batched = if s.len() == 3 {
        img.reshape([1, s[0], s[1], s[2]])?
    } else {
        img.clone()
    };
    Ok(tape.constant(batched))
}

/// Supervised cross-entropy on the key frame alone.
pub fn supervised_objective<T: Scalar, M: Factorized<T>>(
    model: &M,
    tape: &mut Tape<T>,
    p: &Binding,
    x: &Tensor<T>,
    labels: &Arc<Vec<u8>>,
) -> Result<TafLoss, TafError> {
    let xv = image_var(tape, x)?;
    let logits = model.forward(tape, p, xv)?;
    let ce = tape.cross_entropy_masked(logits, Arc::clone(labels), IGNORE_LABEL)?;
    let v = tape.value(ce.loss).item().as_f64();
    Ok(TafLoss {
        loss: ce.loss,
        parts: LossParts {
            ce: v,
            total: v,
            ..LossParts::default()
        },
        branches: None,
    })
}

/// The objective for one pair with the regularizer branches fixed:
/// `CE(x_t, y_t) + λ·[R₊(x_t, i1, nΔ₀) + R₊(x_{t+nΔ₀}, i2, −nΔ₀)]`.
///
/// Both frames' branch features are computed once; each swap direction
/// costs one extra aggregator evaluation.
pub fn taf_objective_fixed<T: Scalar, M: Factorized<T>>(
    model: &M,
    tape: &mut Tape<T>,
    p: &Binding,
    pair: &TrainingPair<T>,
    cfg: &TafConfig,
    i1: usize,
    i2: usize,
) -> Result<TafLoss, TafError> {
    let m = model.num_branches();
    if i1 >= m || i2 >= m {
        return Err(ModelError::BranchIndex {
            index: i1.max(i2),
            count: m,
        }
        .into());
    }
    let xt = image_var(tape, &pair.x_t)?;
    let xp = image_var(tape, &pair.x_pair)?;
    let bs_t = model.extract_branches(tape, p, xt)?;
    let bs_p = model.extract_branches(tape, p, xp)?;
    let logits_t = model.aggregate(tape, p, &bs_t)?;
    let ce = tape.cross_entropy_masked(logits_t, Arc::clone(&pair.y_t), IGNORE_LABEL)?;
    let logits_p = model.aggregate(tape, p, &bs_p)?;
    let probs_t = tape.softmax_channel(logits_t)?;
    let probs_p = tape.softmax_channel(logits_p)?;

    let delta = pair.n as f64 * cfg.delta0;
    let dy_fwd = delta_y_from_probs(model, tape, p, &bs_t, probs_t, &bs_p, i1)?;
    let r_fwd = hinge_reg_var(tape, dy_fwd, delta, cfg.schedule.rate(i1))?;
    let dy_bwd = delta_y_from_probs(model, tape, p, &bs_p, probs_p, &bs_t, i2)?;
    let r_bwd = hinge_reg_var(tape, dy_bwd, -delta, cfg.schedule.rate(i2))?;

    let reg = tape.add(r_fwd, r_bwd)?;
    let scaled = tape.affine(reg, T::from_f64_lossy(cfg.lambda), T::zero())?;
    let loss = tape.add(ce.loss, scaled)?;
    Ok(TafLoss {
        loss,
        parts: LossParts {
            ce: tape.value(ce.loss).item().as_f64(),
            reg_fwd: tape.value(r_fwd).item().as_f64(),
            reg_bwd: tape.value(r_bwd).item().as_f64(),
            total: tape.value(loss).item().as_f64(),
        },
        branches: Some((i1, i2)),
    })
}

/// The sampled objective for one training pair. Draws `i1`, `i2` from
/// `rng`; the offset is the one carried by `pair`. With an inert config
/// (λ = 0 or no finite rate) this is plain key-frame cross-entropy.
pub fn taf_objective<T: Scalar, M: Factorized<T>>(
    model: &M,
    tape: &mut Tape<T>,
    p: &Binding,
    pair: &TrainingPair<T>,
    cfg: &TafConfig,
    rng: &mut impl Rng,
) -> Result<TafLoss, TafError> {
    if cfg.schedule.len() != model.num_branches() {
        return Err(TafError::Config(format!(
            "schedule has {} rates but the model has {} branches",
            cfg.schedule.len(),
            model.num_branches()
        )));
    }
    if cfg.is_inert() {
        return supervised_objective(model, tape, p, &pair.x_t, &pair.y_t);
    }
    let i1 = sample_branch(cfg, rng)?;
    let i2 = sample_branch(cfg, rng)?;
    taf_objective_fixed(model, tape, p, pair, cfg, i1, i2)
}

/// Evaluation-only reference for the unsampled objective on one clip:
/// key-frame cross-entropy plus λ times the average of R₊(x_t, i, nΔ₀) over
/// every frame t, every in-clip offset n and every finite-rate branch i.
pub fn raw_objective_reference<T: Scalar, M: Factorized<T>>(
    model: &M,
    frames: &[Tensor<T>],
    key_index: usize,
    key_label: &Arc<Vec<u8>>,
    cfg: &TafConfig,
) -> Result<f64, TafError> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let ce = supervised_objective(model, &mut tape, &p, &frames[key_index], key_label)?
        .parts
        .ce;
    if cfg.lambda == 0.0 || frames.len() < 2 {
        return Ok(ce);
    }
    let finite = cfg.schedule.finite_branches();
    if finite.is_empty() {
        return Ok(ce);
    }
    let mut branch_sets = Vec::with_capacity(frames.len());
    let mut probs = Vec::with_capacity(frames.len());
    for f in frames {
        let x = image_var(&mut tape, f)?;
        let bs = model.extract_branches(&mut tape, &p, x)?;
        let logits = model.aggregate(&mut tape, &p, &bs)?;
        probs.push(tape.softmax_channel(logits)?);
        branch_sets.push(bs);
    }
    // Offsets are every n with t + n inside the clip.
    let len = frames.len() as i64;
    let mut total = 0.0;
    let mut terms = 0usize;
    for t in 0..len {
        for n in -t..len - t {
            let u = t + n;
            if n == 0 && cfg.exclude_zero_offset {
                continue;
            }
            for &i in &finite {
                let dy = delta_y_from_probs(
                    model,
                    &mut tape,
                    &p,
                    &branch_sets[t as usize],
                    probs[t as usize],
                    &branch_sets[u as usize],
                    i,
                )?;
                let dy = tape.value(dy).item().as_f64();
                total += hinge_reg(dy, n as f64 * cfg.delta0, cfg.schedule.rate(i));
                terms += 1;
            }
        }
    }
    if terms == 0 {
        return Ok(ce);
    }
    Ok(ce + cfg.lambda * total / terms as f64)
}

#[cfg(test)]
mod tests;
