use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::model::{FactorizedModel, Param, ParamRole, ParamSet};
use crate::tensor::{grad_check, softmax_channel_values};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(r: &mut impl Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_vec([3, h, w], (0..3 * h * w).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn random_labels(r: &mut impl Rng, len: usize, k: u8) -> Arc<Vec<u8>> {
    Arc::new((0..len).map(|_| r.random_range(0..k)).collect())
}

fn chi_square_p(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    let e = total / counts.len() as f64;
    let chi: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    1.0 - ChiSquared::new(counts.len() as f64 - 1.0).unwrap().cdf(chi)
}

fn cfg(lambda: f64, n_h: usize, rates: &str) -> TafConfig {
    TafConfig::new(lambda, n_h, rates.parse().unwrap()).unwrap()
}

fn branch_sets(
    model: &FactorizedModel<f64>,
    tape: &mut Tape<f64>,
    p: &Binding,
    frames: &[&Tensor<f64>],
) -> Vec<BranchSet> {
    frames
        .iter()
        .map(|f| {
            let x = image_var(tape, f).unwrap();
            model.extract_branches(tape, p, x).unwrap()
        })
        .collect()
}

/// δy rebuilt from scratch: the donor branch is computed on its own tape and
/// copied in as a plain tensor before a fresh forward of the anchor frame.
fn delta_y_oracle(model: &FactorizedModel<f64>, xt: &Tensor<f64>, xd: &Tensor<f64>, i: usize) -> f64 {
    let mut donor_tape = Tape::new();
    let p = model.params().bind(&mut donor_tape, false);
    let bs = branch_sets(model, &mut donor_tape, &p, &[xd]);
    let donor = donor_tape.value(bs[0].features[i]).clone();

    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let bs_t = branch_sets(model, &mut tape, &p, &[xt]).remove(0);
    let mut substituted = bs_t.clone();
    substituted.features[i] = tape.constant(donor);
    let swapped = model.aggregate(&mut tape, &p, &substituted).unwrap();
    let plain = model.aggregate(&mut tape, &p, &bs_t).unwrap();
    let a = softmax_channel_values(tape.value(swapped));
    let b = softmax_channel_values(tape.value(plain));
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn hinge_examples() {
    assert!((hinge_reg(0.5, 3.0, 0.1) - 0.2).abs() < 1e-12);
    assert_eq!(hinge_reg(0.5, 3.0, 0.2), 0.0);
    assert_eq!(hinge_reg(0.5, -3.0, 0.2), 0.0);
    assert_eq!(hinge_reg(1.7, 1.0, f64::INFINITY), 0.0);
    assert_eq!(hinge_reg(0.0, 0.0, f64::INFINITY), 0.0);
    assert!((hinge_reg(0.5, -3.0, 0.1) - 0.2).abs() < 1e-12);
}

#[test]
fn hinge_var_matches_scalar_form() {
    for &(dy, d, c) in &[(0.5, 3.0, 0.1), (0.5, 3.0, 0.2), (0.3, -2.0, 0.01), (0.9, 5.0, f64::INFINITY)] {
        let mut g = Tape::<f64>::new();
        let v = g.leaf(Tensor::scalar(dy), true);
        let r = hinge_reg_var(&mut g, v, d, c).unwrap();
        assert!((g.value(r).item() - hinge_reg(dy, d, c)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn hinge_is_monotone(
        dy in 0.0f64..2.0,
        ddy in 0.0f64..1.0,
        delta in -30.0f64..30.0,
        dd in 0.0f64..5.0,
        c in 0.0f64..0.5,
        dc in 0.0f64..0.5,
    ) {
        let r = hinge_reg(dy, delta, c);
        prop_assert!(r >= 0.0 && r <= dy);
        prop_assert!(hinge_reg(dy + ddy, delta, c) >= r);
        prop_assert!(hinge_reg(dy, delta.abs() + dd, c) <= r);
        prop_assert!(hinge_reg(dy, delta, c + dc) <= r);
        prop_assert_eq!(hinge_reg(dy, delta, f64::INFINITY), 0.0);
    }
}

#[test]
fn swap_identity_and_involution() {
    let model = FactorizedModel::<f64>::micro_fcn(4, 4, 1).unwrap();
    let mut r = rng(2);
    let (a_img, b_img) = (random_image(&mut r, 16, 16), random_image(&mut r, 16, 16));
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let bs = branch_sets(&model, &mut tape, &p, &[&a_img, &b_img]);
    for i in 0..3 {
        assert_eq!(swap_branch(&tape, &bs[0], &bs[0], i).unwrap(), bs[0]);
        let once = swap_branch(&tape, &bs[0], &bs[1], i).unwrap();
        assert_ne!(once, bs[0]);
        assert_eq!(swap_branch(&tape, &once, &bs[0], i).unwrap(), bs[0]);
        let dy = delta_y(&model, &mut tape, &p, &bs[0], &bs[0], i).unwrap();
        assert_eq!(tape.value(dy).item(), 0.0);
    }
    assert!(matches!(
        swap_branch(&tape, &bs[0], &bs[1], 3),
        Err(ModelError::BranchIndex { index: 3, count: 3 })
    ));

    let x = random_image(&mut r, 8, 8);
    let mut t2 = Tape::new();
    let p2 = model.params().bind(&mut t2, false);
    let big = branch_sets(&model, &mut t2, &p2, &[&a_img]).remove(0);
    let x8 = image_var(&mut t2, &x).unwrap();
    let little = model.extract_branches(&mut t2, &p2, x8).unwrap();
    assert!(matches!(
        swap_branch(&t2, &big, &little, 0),
        Err(ModelError::BranchMismatch(_))
    ));
}

#[test]
fn cached_swap_matches_full_recompute() {
    let mut r = rng(3);
    for trial in 0..12 {
        let model = if trial % 2 == 0 {
            FactorizedModel::<f64>::micro_fcn(4, 4, trial).unwrap()
        } else {
            FactorizedModel::<f64>::micro_aspp(4, 4, trial).unwrap()
        };
        let xt = random_image(&mut r, 16, 16);
        let xd = random_image(&mut r, 16, 16);
        let i = r.random_range(0..model.num_branches());
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, true);
        let bs = branch_sets(&model, &mut tape, &p, &[&xt, &xd]);
        let dy = delta_y(&model, &mut tape, &p, &bs[0], &bs[1], i).unwrap();
        let got = tape.value(dy).item();
        let want = delta_y_oracle(&model, &xt, &xd, i);
        assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
        assert!((0.0..=2.0).contains(&got));
    }
}

#[test]
fn offsets_are_uniform_without_zero() {
    let c = cfg(1.0, 15, "0.0001, inf, inf");
    let mut r = rng(4);
    let mut counts = vec![0f64; 31];
    for _ in 0..100_000 {
        let s = sample_indices(&c, 3, &mut r).unwrap();
        assert!(s.n != 0 && s.n.abs() <= 15);
        assert_eq!((s.i1, s.i2), (0, 0));
        counts[(s.n + 15) as usize] += 1.0;
    }
    assert_eq!(counts[15], 0.0);
    counts.remove(15);
    assert!(chi_square_p(&counts) > 0.01);

    let mut with_zero = c.clone();
    with_zero.exclude_zero_offset = false;
    assert!((0..2000).any(|_| sample_offset(&with_zero, &mut r) == 0));
}

#[test]
fn branches_are_uniform_over_finite_rates() {
    let c = cfg(1.0, 15, "0.000001, 0.000001, 0.0001, 0.001, 0.01");
    let mut r = rng(5);
    let mut counts = [0f64; 5];
    for _ in 0..100_000 {
        let s = sample_indices(&c, 5, &mut r).unwrap();
        counts[s.i1] += 1.0;
    }
    assert!(chi_square_p(&counts) > 0.01, "{counts:?}");

    let partial = cfg(1.0, 15, "0.001, 0.01, inf");
    let mut seen = [0usize; 3];
    for _ in 0..3000 {
        let s = sample_indices(&partial, 3, &mut r).unwrap();
        seen[s.i1] += 1;
        seen[s.i2] += 1;
    }
    assert_eq!(seen[2], 0);
    assert!(seen[0] > 2500 && seen[1] > 2500);
}

#[test]
fn sampling_errors() {
    let mut r = rng(6);
    let off = cfg(1.0, 15, "inf, inf, inf");
    assert!(matches!(sample_indices(&off, 3, &mut r), Err(TafError::Disabled)));
    let c = cfg(1.0, 15, "0.1, inf, inf");
    assert!(matches!(sample_indices(&c, 5, &mut r), Err(TafError::Config(_))));
    assert!(TafConfig::new(-1.0, 15, "0.1".parse().unwrap()).is_err());
    assert!(TafConfig::new(1.0, 0, "0.1".parse().unwrap()).is_err());
}

fn pair(r: &mut impl Rng, h: usize, n: i64) -> TrainingPair<f64> {
    TrainingPair {
        x_t: random_image(r, h, h),
        y_t: random_labels(r, h * h, 4),
        x_pair: random_image(r, h, h),
        n,
        clip_id: 0,
    }
}

#[test]
fn zero_lambda_and_identical_frames_reduce_to_cross_entropy() {
    let model = FactorizedModel::<f64>::micro_fcn(4, 4, 7).unwrap();
    let mut r = rng(7);
    let pr = pair(&mut r, 16, 3);

    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let ce = supervised_objective(&model, &mut tape, &p, &pr.x_t, &pr.y_t).unwrap().parts.ce;

    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let l = taf_objective(&model, &mut tape, &p, &pr, &cfg(0.0, 15, "0.0001, inf, inf"), &mut r).unwrap();
    assert_eq!(l.parts.total, ce);
    assert_eq!(l.branches, None);

    let mut same = pr.clone();
    same.x_pair = same.x_t.clone();
    same.n = 0;
    let mut c = cfg(2.0, 15, "0, 0, 0");
    c.exclude_zero_offset = false;
    for (i1, i2) in [(0, 1), (2, 2)] {
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, true);
        let l = taf_objective_fixed(&model, &mut tape, &p, &same, &c, i1, i2).unwrap();
        assert_eq!((l.parts.reg_fwd, l.parts.reg_bwd), (0.0, 0.0));
        assert!((l.parts.total - ce).abs() < 1e-12);
    }

    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let l = taf_objective_fixed(&model, &mut tape, &p, &pr, &cfg(1.0, 15, "0, 0, 0"), 0, 1).unwrap();
    assert!(l.parts.reg_fwd > 0.0 && l.parts.reg_bwd > 0.0);
    assert!((l.parts.total - (l.parts.ce + l.parts.reg_fwd + l.parts.reg_bwd)).abs() < 1e-12);
}

#[test]
fn uniform_softmax_has_no_regularizer_but_positive_cross_entropy() {
    let mut model = FactorizedModel::<f64>::micro_fcn(4, 4, 8).unwrap();
    let zeros = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    model.params_mut().set_tensors(zeros).unwrap();
    let mut r = rng(8);
    let pr = pair(&mut r, 16, 5);
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let l = taf_objective_fixed(&model, &mut tape, &p, &pr, &cfg(1.0, 15, "0, 0, 0"), 0, 2).unwrap();
    assert_eq!(l.parts.reg_fwd + l.parts.reg_bwd, 0.0);
    assert!((l.parts.ce - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn objective_gradients_match_finite_differences() {
    let mut r = rng(9);
    for (model, rates) in [
        (FactorizedModel::<f64>::micro_fcn(3, 4, 10).unwrap(), "0.0001, inf, inf"),
        (FactorizedModel::<f64>::micro_aspp(3, 4, 11).unwrap(), "0.0001, 0.0001, 0.001, 0.001, 0.01"),
    ] {
        let pr = TrainingPair {
            x_t: random_image(&mut r, 8, 8),
            y_t: random_labels(&mut r, 64, 3),
            x_pair: random_image(&mut r, 8, 8),
            n: 3,
            clip_id: 0,
        };
        let c = cfg(1.0, 15, rates);
        let m = model.num_branches();
        let params: Vec<Tensor<f64>> = model
            .params()
            .iter()
            .map(|p| {
                let data = p.value.data().iter().map(|v| v + 0.05 * (r.random::<f64>() - 0.5)).collect();
                Tensor::from_vec(p.value.shape(), data).unwrap()
            })
            .collect();
        let (i1, i2) = (0, m - 1);
        let report = grad_check(
            |tape: &mut Tape<f64>, vars: &[Var]| {
                let p = Binding(vars.to_vec());
                let l = taf_objective_fixed(&model, tape, &p, &pr, &c, i1, i2)?;
                assert!(l.parts.reg_fwd > 0.0);
                Ok::<_, TafError>(l.loss)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
        assert!(report.kinks * 20 < report.checked, "{report:?}");
    }
}

/// Two branches on a 1-pixel, 1-channel image: logits are
/// `[a·x_branch1 + b·x_branch2, 0]`.
struct Linear {
    params: ParamSet<f64>,
}

impl Linear {
    fn new(a: f64, b: f64) -> Self {
        let w = |v: f64| Tensor::from_vec([2, 1, 1, 1], vec![v, 0.0]).unwrap();
        Self {
            params: ParamSet::new(vec![
                Param {
                    name: "a".into(),
                    role: ParamRole::Branch(0),
                    value: w(a),
                },
                Param {
                    name: "b".into(),
                    role: ParamRole::Branch(1),
                    value: w(b),
                },
            ]),
        }
    }
}

impl Factorized<f64> for Linear {
    fn num_branches(&self) -> usize {
        2
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    fn extract_branches(&self, tape: &mut Tape<f64>, p: &Binding, x: Var) -> Result<BranchSet, ModelError> {
        Ok(BranchSet {
            features: vec![
                tape.conv2d(x, p.var(0), None, 1, 0, 1)?,
                tape.conv2d(x, p.var(1), None, 1, 0, 1)?,
            ],
            strides: vec![1, 1],
            skip: None,
            input_hw: (1, 1),
        })
    }

    fn aggregate(&self, tape: &mut Tape<f64>, _p: &Binding, b: &BranchSet) -> Result<Var, ModelError> {
        Ok(tape.add(b.features[0], b.features[1])?)
    }
}

fn scalar_frame(v: f64) -> Tensor<f64> {
    Tensor::from_vec([1, 1, 1], vec![v]).unwrap()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn raw_objective_matches_hand_enumeration() {
    let (a, b) = (1.5, -0.7);
    let xs = [0.2, 0.5, 0.9];
    let (c1, c2, lambda) = (0.05, 0.2, 0.8);
    let model = Linear::new(a, b);
    let frames: Vec<Tensor<f64>> = xs.iter().map(|&v| scalar_frame(v)).collect();
    let label = Arc::new(vec![0u8]);
    let c = TafConfig::new(lambda, 1, ChangeRateSchedule::new(vec![c1, c2]).unwrap()).unwrap();

    // Class-0 probability is σ(a·x₁ + b·x₂); the two classes change by the
    // same amount, so δy = |σ(swapped) − σ(plain)|.
    let ce = -sigmoid(a * xs[1] + b * xs[1]).ln();
    let mut terms = Vec::new();
    for t in 0..3i64 {
        for u in 0..3i64 {
            if u == t {
                continue;
            }
            let (xt, xu) = (xs[t as usize], xs[u as usize]);
            let plain = sigmoid(a * xt + b * xt);
            let d = (u - t).abs() as f64;
            terms.push((sigmoid(a * xu + b * xt) - plain).abs() - d * c1);
            terms.push((sigmoid(a * xt + b * xu) - plain).abs() - d * c2);
        }
    }
    assert_eq!(terms.len(), 12);
    let reg: f64 = terms.iter().map(|&v| v.max(0.0)).sum::<f64>() / 12.0;
    assert!(reg > 0.0 && terms.iter().any(|&v| v < 0.0));
    let want = ce + lambda * reg;

    let got = raw_objective_reference(&model, &frames, 1, &label, &c).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    let mut c0 = c.clone();
    c0.lambda = 0.0;
    let got = raw_objective_reference(&model, &frames, 1, &label, &c0).unwrap();
    assert!((got - ce).abs() < 1e-12);
    let single = raw_objective_reference(&model, &frames[1..2], 0, &label, &c).unwrap();
    assert!((single - ce).abs() < 1e-12);
}

#[test]
fn sampled_regularizer_is_unbiased_on_a_tiny_model() {
    let model = Linear::new(2.0, -1.0);
    let xs: Vec<f64> = (0..7).map(|t| (t as f64 * 0.7).sin()).collect();
    let c = TafConfig::new(1.0, 3, ChangeRateSchedule::new(vec![0.01, 0.03]).unwrap()).unwrap();
    let key = 3usize;
    let label = Arc::new(vec![1u8]);
    let pair_at = |n: i64| TrainingPair {
        x_t: scalar_frame(xs[key]),
        y_t: Arc::clone(&label),
        x_pair: scalar_frame(xs[(key as i64 + n) as usize]),
        n,
        clip_id: 0,
    };
    let reg = |n: i64, i1: usize, i2: usize| {
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let l = taf_objective_fixed(&model, &mut tape, &p, &pair_at(n), &c, i1, i2).unwrap();
        l.parts.reg_fwd + l.parts.reg_bwd
    };

    let mut exact = 0.0;
    let mut count = 0.0;
    for n in (-3..=3).filter(|&n| n != 0) {
        for i1 in 0..2 {
            for i2 in 0..2 {
                exact += reg(n, i1, i2);
                count += 1.0;
            }
        }
    }
    exact /= count;

    let mut r = rng(12);
    let samples: Vec<f64> = (0..10_000)
        .map(|_| {
            let s = sample_indices(&c, 2, &mut r).unwrap();
            reg(s.n, s.i1, s.i2)
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
    let se = (var / samples.len() as f64).sqrt();
    assert!(se > 0.0);
    assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
}
