//! Central finite-difference checks of every operator's backward rule and of
//! the end-to-end network, in 64-bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Backward, ParamSet, Tape, Var};
use crate::error::Result;
use crate::model::{ArchitectureConfig, FcnModel};
use crate::ops::{self, ConvSpec, DeconvSpec};
use crate::tensor::{gaussian_init, Shape, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor: gradients smaller than this are compared in absolute
/// terms (tolerance `TOLERANCE * ABS_FLOOR`), which sits just above the
/// rounding noise of a step-1e-5 central difference on an O(1) loss.
pub const ABS_FLOOR: f64 = 1e-5;
pub const SEEDS_PER_CHECK: u64 = 5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

type LossFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn eval(f: &LossFn<'_>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Max relative error between the taped gradient of `f` with respect to each
/// input element and its central difference.
pub fn check_inputs(f: &LossFn<'_>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward_vars(loss)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(v).unwrap_or(&zeros).clone();
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let up = eval(f, &probe)?;
            probe[k].data_mut()[i] = orig - STEP;
            let down = eval(f, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Result<Tensor<f64>> {
    gaussian_init(Shape::new(shape.0, shape.1, shape.2, shape.3)?, 1.0, seed)
}

/// `sum(y * r)` for a fixed random projection `r`, so every output element
/// contributes to the scalar.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(gaussian_init(tape.shape(y), 1.0, seed ^ 0xA5A5)?);
    let p = autodiff::mul(tape, y, r)?;
    autodiff::sum(tape, p)
}

pub struct GradCheck {
    pub name: &'static str,
    run: Box<dyn Fn(u64) -> Result<f64> + Send + Sync>,
}

impl GradCheck {
    pub fn new(name: &'static str, run: impl Fn(u64) -> Result<f64> + Send + Sync + 'static) -> Self {
        GradCheck {
            name,
            run: Box::new(run),
        }
    }

    pub fn run(&self, seed: u64) -> Result<f64> {
        (self.run)(seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn conv_check(seed: u64) -> Result<f64> {
    let spec = ConvSpec::square(3, 4, 3, 1);
    let inputs = [randn((2, 3, 5, 5), seed)?, randn((4, 3, 3, 3), seed + 100)?, randn((4, 1, 1, 1), seed + 200)?];
    check_inputs(
        &|t, v| {
            let y = ops::conv2d(t, v[0], v[1], Some(v[2]), &spec)?;
            project(t, y, seed)
        },
        &inputs,
    )
}

fn strided_conv_check(seed: u64) -> Result<f64> {
    let spec = ConvSpec {
        stride: (2, 2),
        ..ConvSpec::square(2, 3, 3, 1)
    };
    let inputs = [randn((1, 2, 5, 5), seed)?, randn((3, 2, 3, 3), seed + 100)?];
    check_inputs(
        &|t, v| {
            let y = ops::conv2d(t, v[0], v[1], None, &spec)?;
            project(t, y, seed)
        },
        &inputs,
    )
}

fn maxpool_check(seed: u64) -> Result<f64> {
    // Distinct, well-separated values keep every window argmax stable under the step.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = (0..72).map(|i| i as f64 * 0.1 - 3.6).collect();
    values.shuffle(&mut rng);
    let x = Tensor::from_vec(Shape::new(2, 1, 6, 6)?, values)?;
    check_inputs(
        &|t, v| {
            let y = ops::maxpool2(t, v[0])?;
            project(t, y, seed)
        },
        &[x],
    )
}

fn relu_check(seed: u64) -> Result<f64> {
    // Keep inputs away from the kink at 0.
    let x = randn((1, 2, 4, 4), seed)?.map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v });
    check_inputs(
        &|t, v| {
            let y = ops::relu(t, v[0])?;
            project(t, y, seed)
        },
        &[x],
    )
}

fn deconv_check(seed: u64) -> Result<f64> {
    let spec = DeconvSpec::new(2, 2)?;
    let inputs = [randn((1, 2, 3, 3), seed)?, randn((2, 1, 4, 4), seed + 100)?];
    check_inputs(
        &|t, v| {
            let y = ops::transposed_conv2d(t, v[0], v[1], &spec)?;
            project(t, y, seed)
        },
        &inputs,
    )
}

fn deconv4_check(seed: u64) -> Result<f64> {
    let spec = DeconvSpec::new(1, 4)?;
    let inputs = [randn((2, 1, 2, 3), seed)?, randn((1, 1, 8, 8), seed + 100)?];
    check_inputs(
        &|t, v| {
            let y = ops::transposed_conv2d(t, v[0], v[1], &spec)?;
            project(t, y, seed)
        },
        &inputs,
    )
}

fn concat_check(seed: u64) -> Result<f64> {
    let inputs = [randn((2, 1, 3, 3), seed)?, randn((2, 2, 3, 3), seed + 1)?, randn((2, 3, 3, 3), seed + 2)?];
    check_inputs(
        &|t, v| {
            let y = ops::concat_channels(t, v)?;
            project(t, y, seed)
        },
        &inputs,
    )
}

fn softmax_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..2 * 3 * 3).map(|_| rng.random_range(0..2)).collect();
    let logits = randn((2, 2, 3, 3), seed)?.map(|v| 3.0 * v);
    check_inputs(&|t, v| Ok(ops::softmax_cross_entropy(t, v[0], &labels)?.0), &[logits])
}

/// Finite-difference check of a micro network: three random elements of
/// every parameter tensor.
pub fn model_check(seed: u64) -> Result<f64> {
    let mut model = FcnModel::<f64>::build(ArchitectureConfig::micro(), seed)?;
    // Zero biases put every dead receptive field exactly on a ReLU kink, where
    // one-sided differences disagree; check at a generic point instead.
    for (k, p) in model.params_mut().iter_mut().enumerate() {
        if p.rank() == 1 {
            p.set_value(gaussian_init(p.shape(), 0.1, seed ^ (k as u64 + 1) << 20)?)?;
        }
    }
    let input = randn((1, 3, 32, 32), seed + 1000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..32 * 32).map(|_| rng.random_range(0..2)).collect();

    let loss_of = |m: &FcnModel<f64>, tape: &mut Tape<f64>| -> Result<Var> {
        let out = m.forward(tape, input.clone())?;
        Ok(ops::softmax_cross_entropy(tape, out.logits, &labels)?.0)
    };

    let mut analytic_model = model.clone();
    let mut tape = Tape::new();
    let loss = loss_of(&analytic_model, &mut tape)?;
    let params: &mut ParamSet<f64> = analytic_model.params_mut();
    tape.backward(loss, params)?;
    drop(tape);

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let len = model.params().get(id).value().len();
        for _ in 0..3 {
            let i = rng.random_range(0..len);
            let orig = model.params().get(id).value().data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.params_mut().get_mut(id).value_mut().data_mut()[i] = v;
                let mut t = Tape::inference();
                let l = loss_of(&probe, &mut t)?;
                Ok(t.value(l).data()[0])
            };
            let up = eval_at(orig + STEP)?;
            let down = eval_at(orig - STEP)?;
            eval_at(orig)?;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = analytic_model.params().get(id).grad().data()[i];
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

pub fn standard_suite() -> Vec<GradCheck> {
    vec![
        GradCheck::new("conv2d", conv_check),
        GradCheck::new("conv2d_stride2", strided_conv_check),
        GradCheck::new("maxpool2", maxpool_check),
        GradCheck::new("relu", relu_check),
        GradCheck::new("transposed_conv2d", deconv_check),
        GradCheck::new("transposed_conv2d_f4", deconv4_check),
        GradCheck::new("concat_channels", concat_check),
        GradCheck::new("softmax_cross_entropy", softmax_check),
        GradCheck::new("model_end_to_end", model_check),
    ]
}

struct MisScaledRule;

impl Backward<f64> for MisScaledRule {
    fn name(&self) -> &'static str {
        "double_with_wrong_backward"
    }

    fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, g: &Tensor<f64>, _: &[bool]) -> Result<Vec<Option<Tensor<f64>>>> {
        // Forward doubles; this rule claims the derivative is 2.01.
        Ok(vec![Some(g.map(|v| 2.01 * v))])
    }
}

/// A check over an operator whose backward rule is deliberately wrong; used
/// to show the harness detects broken gradients.
pub fn faulty_check() -> GradCheck {
    GradCheck::new("faulty_operator", |seed| {
        let x = randn((1, 1, 3, 3), seed)?;
        check_inputs(
            &|t, v| {
                let doubled = t.get(v[0])?.map(|a| 2.0 * a);
                let y = t.push(&[v[0]], doubled, Box::new(MisScaledRule))?;
                project(t, y, seed)
            },
            &[x],
        )
    })
}

/// Runs each check over `SEEDS_PER_CHECK` consecutive seeds starting at `seed`.
pub fn run_suite(suite: &[GradCheck], seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::with_capacity(suite.len() * SEEDS_PER_CHECK as usize);
    for check in suite {
        for s in seed..seed + SEEDS_PER_CHECK {
            results.push(CheckResult {
                name: check.name,
                seed: s,
                max_rel_error: check.run(s)?,
            });
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn faulty_operator_is_detected() {
        let r = faulty_check().run(0).unwrap();
        assert!(r > TOLERANCE, "{r}");
    }

    #[test]
    fn operator_checks_pass_for_one_seed() {
        for check in standard_suite().iter().filter(|c| c.name != "model_end_to_end") {
            let e = check.run(7).unwrap();
            assert!(e < TOLERANCE, "{}: {e}", check.name);
        }
    }
}
