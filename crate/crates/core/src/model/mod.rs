//! Factorized segmentation models `y(x) = Ω(Φ₁(x), …, Φₘ(x))` with explicit,
//! swappable branch boundaries.
//!
//! Two micro architectures are provided. Branch 0 is always the coarsest,
//! slowest-changing factor; higher indices are progressively finer.
//!
//! | arch       | branches | branch strides  | Ω                                   |
//! |------------|----------|-----------------|-------------------------------------|
//! | MicroFcn   | 3        | 8, 4, 2         | per-branch 1×1 heads, upsample+add  |
//! | MicroAspp  | 5        | 4, 4, 4, 4, 4   | 1×1 over branch sum, stride-2 skip  |
//!
//! The 1×1 class heads of the FCN belong to Ω, not to the branches.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, load_params_into, save_checkpoint, CheckpointError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input {h}x{w} is not divisible by the model's coarsest stride {stride}")]
    InputSize { h: usize, w: usize, stride: usize },
    #[error("branch {index} out of range for a model with {count} branches")]
    BranchIndex { index: usize, count: usize },
    #[error("branch set mismatch: {0}")]
    BranchMismatch(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    MicroFcn,
    MicroAspp,
}

impl Arch {
    pub fn num_branches(self) -> usize {
        match self {
            Arch::MicroFcn => 3,
            Arch::MicroAspp => 5,
        }
    }

    /// Spatial stride of each branch relative to the input.
    pub fn branch_strides(self) -> Vec<usize> {
        match self {
            Arch::MicroFcn => vec![8, 4, 2],
            Arch::MicroAspp => vec![4; 5],
        }
    }

    /// Input height and width must be multiples of this.
    pub fn input_multiple(self) -> usize {
        8
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::MicroFcn => "micro_fcn",
            Arch::MicroAspp => "micro_aspp",
        })
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "micro_fcn" | "fcn" => Ok(Arch::MicroFcn),
            "micro_aspp" | "aspp" => Ok(Arch::MicroAspp),
            other => Err(ModelError::Config(format!("unknown arch {other:?}"))),
        }
    }
}

/// Which part of Θ a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Trunk,
    Branch(usize),
    Aggregator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<T>,
}

/// Ordered parameter list. Order is fixed by construction and shared by
/// gradients, optimizer state and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(params: Vec<Param<T>>) -> Self {
        Self { params }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces every tensor; shapes must match.
    pub fn set_tensors(&mut self, values: Vec<Tensor<T>>) -> Result<(), ModelError> {
        if values.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(ModelError::Config(format!(
                    "{}: shape {:?} != {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_role(&self, pred: impl Fn(ParamRole) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(p.role))
            .map(|p| p.value.len())
            .sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Binding {
        Binding(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Tape handles of a [`ParamSet`], in parameter order.
#[derive(Debug, Clone)]
pub struct Binding(pub Vec<Var>);

impl Binding {
    pub fn var(&self, i: usize) -> Var {
        self.0[i]
    }
}

/// The per-image branch features Φ₁(x)…Φₘ(x), plus any non-swappable
/// features Ω consumes directly (the MicroAspp decoder skip).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet {
    pub features: Vec<Var>,
    pub strides: Vec<usize>,
    pub skip: Option<Var>,
    pub input_hw: (usize, usize),
}

impl BranchSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// A model that factors into swappable branches and an aggregator.
pub trait Factorized<T: Scalar> {
    fn num_branches(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn params(&self) -> &ParamSet<T>;

    /// All branch features from one shared trunk pass.
    fn extract_branches(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        x: Var,
    ) -> Result<BranchSet, ModelError>;

    /// Ω: class logits at input resolution.
    fn aggregate(&self, tape: &mut Tape<T>, p: &Binding, b: &BranchSet) -> Result<Var, ModelError>;

    fn forward(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var, ModelError> {
        let b = self.extract_branches(tape, p, x)?;
        self.aggregate(tape, p, &b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub num_classes: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedModel<T> {
    spec: ModelSpec,
    params: ParamSet<T>,
}

struct ParamBuilder<T> {
    rng: ChaCha8Rng,
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamBuilder<T> {
    fn conv(&mut self, name: &str, role: ParamRole, k: usize, c: usize, ks: usize, bias: bool) {
        let fan_in = (c * ks * ks) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..k * c * ks * ks)
            .map(|_| T::from_f64_lossy(normal.sample(&mut self.rng)))
            .collect();
        self.params.push(Param {
            name: format!("{name}.weight"),
            role,
            value: Tensor::from_vec([k, c, ks, ks], data).unwrap(),
        });
        if bias {
            self.params.push(Param {
                name: format!("{name}.bias"),
                role,
                value: Tensor::zeros([k]),
            });
        }
    }
}

/// MicroAspp branch dilations for Φ₂, Φ₃, Φ₄ (largest first).
pub const ASPP_DILATIONS: [usize; 3] = [6, 3, 2];

impl<T: Scalar> FactorizedModel<T> {
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        if spec.width < 4 {
            return Err(ModelError::Config(format!("width {} < 4", spec.width)));
        }
        if spec.num_classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 classes, got {}",
                spec.num_classes
            )));
        }
        let mut b = ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            params: Vec::new(),
        };
        let (w, k) = (spec.width, spec.num_classes);
        use ParamRole::*;
        match spec.arch {
            Arch::MicroFcn => {
                b.conv("trunk.s2", Trunk, w, 3, 3, true);
                b.conv("trunk.s4", Trunk, 2 * w, w, 3, true);
                b.conv("trunk.s8", Trunk, 2 * w, 2 * w, 3, true);
                b.conv("branch1", Branch(0), 2 * w, 2 * w, 3, true);
                b.conv("branch2", Branch(1), 2 * w, 2 * w, 3, true);
                b.conv("branch3", Branch(2), w, w, 3, true);
                b.conv("head1", Aggregator, k, 2 * w, 1, true);
                b.conv("head2", Aggregator, k, 2 * w, 1, true);
                b.conv("head3", Aggregator, k, w, 1, true);
            }
            Arch::MicroAspp => {
                b.conv("trunk.s2", Trunk, w, 3, 3, true);
                b.conv("trunk.s4", Trunk, 2 * w, w, 3, true);
                b.conv("trunk.s4b", Trunk, 2 * w, 2 * w, 3, true);
                b.conv("branch1.pool", Branch(0), 2 * w, 2 * w, 1, true);
                for (i, d) in ASPP_DILATIONS.iter().enumerate() {
                    b.conv(&format!("branch{}.dil{d}", i + 2), Branch(i + 1), 2 * w, 2 * w, 3, true);
                }
                b.conv("branch5.point", Branch(4), 2 * w, 2 * w, 1, true);
                b.conv("decoder.head", Aggregator, k, 2 * w, 1, true);
                b.conv("decoder.skip", Aggregator, k, w, 1, true);
            }
        }
        Ok(Self {
            spec,
            params: ParamSet { params: b.params },
        })
    }

    pub fn micro_fcn(num_classes: usize, width: usize, seed: u64) -> Result<Self, ModelError> {
        Self::new(ModelSpec {
            arch: Arch::MicroFcn,
            num_classes,
            width,
            seed,
        })
    }

    pub fn micro_aspp(num_classes: usize, width: usize, seed: u64) -> Result<Self, ModelError> {
        Self::new(ModelSpec {
            arch: Arch::MicroAspp,
            num_classes,
            width,
            seed,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn arch(&self) -> Arch {
        self.spec.arch
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> FactorizedModel<U> {
        FactorizedModel {
            spec: self.spec,
            params: self.params.cast(),
        }
    }

    fn pv(&self, p: &Binding, name: &str) -> Var {
        p.var(self.params.index_of(name).unwrap_or_else(|| panic!("no parameter {name}")))
    }

    fn conv(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        name: &str,
        x: Var,
        stride: usize,
        dilation: usize,
    ) -> Result<Var, ModelError> {
        let w = self.pv(p, &format!("{name}.weight"));
        let b = self.pv(p, &format!("{name}.bias"));
        let ks = tape.shape(w)[2];
        let padding = dilation * (ks / 2);
        Ok(tape.conv2d(x, w, Some(b), stride, padding, dilation)?)
    }

    fn conv_relu(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        name: &str,
        x: Var,
        stride: usize,
        dilation: usize,
    ) -> Result<Var, ModelError> {
        let y = self.conv(tape, p, name, x, stride, dilation)?;
        Ok(tape.relu(y)?)
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<(usize, usize), ModelError> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "extract_branches",
                what: "input",
                expected: "[N, 3, H, W]".into(),
                actual: format!("{s:?}"),
            }
            .into());
        }
        let (h, w) = (s[2], s[3]);
        let m = self.spec.arch.input_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(ModelError::InputSize { h, w, stride: m });
        }
        Ok((h, w))
    }

    fn check_branches(&self, tape: &Tape<T>, b: &BranchSet) -> Result<(), ModelError> {
        let strides = self.spec.arch.branch_strides();
        if b.features.len() != strides.len() || b.strides != strides {
            return Err(ModelError::BranchMismatch(format!(
                "expected strides {strides:?}, got {:?}",
                b.strides
            )));
        }
        let (h, w) = b.input_hw;
        let n = tape.shape(b.features[0])[0];
        for (i, (&f, &s)) in b.features.iter().zip(&strides).enumerate() {
            let shape = tape.shape(f);
            if shape.len() != 4 || shape[0] != n || shape[2] != h / s || shape[3] != w / s {
                return Err(ModelError::BranchMismatch(format!(
                    "branch {i} has shape {shape:?}, expected spatial {}x{}",
                    h / s,
                    w / s
                )));
            }
        }
        if self.spec.arch == Arch::MicroAspp && b.skip.is_none() {
            return Err(ModelError::BranchMismatch("missing decoder skip".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Factorized<T> for FactorizedModel<T> {
    fn num_branches(&self) -> usize {
        self.spec.arch.num_branches()
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn extract_branches(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        x: Var,
    ) -> Result<BranchSet, ModelError> {
        let input_hw = self.check_input(tape, x)?;
        let strides = self.spec.arch.branch_strides();
        match self.spec.arch {
            Arch::MicroFcn => {
                let s2 = self.conv_relu(tape, p, "trunk.s2", x, 2, 1)?;
                let s4 = self.conv_relu(tape, p, "trunk.s4", s2, 2, 1)?;
                let s8 = self.conv_relu(tape, p, "trunk.s8", s4, 2, 1)?;
                let f1 = self.conv_relu(tape, p, "branch1", s8, 1, 1)?;
                let f2 = self.conv_relu(tape, p, "branch2", s4, 1, 1)?;
                let f3 = self.conv_relu(tape, p, "branch3", s2, 1, 1)?;
                Ok(BranchSet {
                    features: vec![f1, f2, f3],
                    strides,
                    skip: None,
                    input_hw,
                })
            }
            Arch::MicroAspp => {
                let s2 = self.conv_relu(tape, p, "trunk.s2", x, 2, 1)?;
                let s4 = self.conv_relu(tape, p, "trunk.s4", s2, 2, 1)?;
                let trunk = self.conv_relu(tape, p, "trunk.s4b", s4, 1, 1)?;
                let (th, tw) = (tape.shape(trunk)[2], tape.shape(trunk)[3]);
                let pooled = tape.global_avg_pool(trunk)?;
                let pooled = self.conv_relu(tape, p, "branch1.pool", pooled, 1, 1)?;
                let mut features = vec![tape.broadcast_spatial(pooled, th, tw)?];
                for (i, &d) in ASPP_DILATIONS.iter().enumerate() {
                    features.push(self.conv_relu(tape, p, &format!("branch{}.dil{d}", i + 2), trunk, 1, d)?);
                }
                features.push(self.conv_relu(tape, p, "branch5.point", trunk, 1, 1)?);
                Ok(BranchSet {
                    features,
                    strides,
                    skip: Some(s2),
                    input_hw,
                })
            }
        }
    }

    fn aggregate(&self, tape: &mut Tape<T>, p: &Binding, b: &BranchSet) -> Result<Var, ModelError> {
        self.check_branches(tape, b)?;
        match self.spec.arch {
            Arch::MicroFcn => {
                let l1 = self.conv(tape, p, "head1", b.features[0], 1, 1)?;
                let l2 = self.conv(tape, p, "head2", b.features[1], 1, 1)?;
                let l3 = self.conv(tape, p, "head3", b.features[2], 1, 1)?;
                let up = tape.upsample_nearest(l1, 2)?;
                let acc = tape.add(up, l2)?;
                let up = tape.upsample_nearest(acc, 2)?;
                let acc = tape.add(up, l3)?;
                Ok(tape.upsample_nearest(acc, 2)?)
            }
            Arch::MicroAspp => {
                let mut acc = b.features[0];
                for &f in &b.features[1..] {
                    acc = tape.add(acc, f)?;
                }
                let logits = self.conv(tape, p, "decoder.head", acc, 1, 1)?;
                let up = tape.upsample_nearest(logits, 2)?;
                let skip = self.conv(tape, p, "decoder.skip", b.skip.expect("checked"), 1, 1)?;
                let acc = tape.add(up, skip)?;
                Ok(tape.upsample_nearest(acc, 2)?)
            }
        }
    }
}

/// Per-pixel class indices, [N, H, W] row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

/// Argmax over channels of the per-pixel softmax; ties go to the lowest class.
pub fn argmax_channel<T: Scalar>(logits: &Tensor<T>) -> LabelMap {
    let s = logits.shape();
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    let probs = crate::tensor::softmax_channel_values(logits);
    let p = h * w;
    let mut labels = vec![0u8; n * p];
    for b in 0..n {
        for px in 0..p {
            let mut best = 0;
            for c in 1..k {
                if probs[(b * k + c) * p + px] > probs[(b * k + best) * p + px] {
                    best = c;
                }
            }
            labels[b * p + px] = best as u8;
        }
    }
    LabelMap { n, h, w, labels }
}

/// Standard single-frame inference.
pub fn predict<T: Scalar, M: Factorized<T>>(model: &M, x: &Tensor<T>) -> Result<LabelMap, ModelError> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let logits = model.forward(&mut tape, &p, xv)?;
    Ok(argmax_channel(tape.value(logits)))
}
