//! Finite-difference verification of analytic gradients.
//!
//! Every check runs in `f64` with central differences (`h = 1e-5`). Op
//! outputs are reduced to a scalar by a fixed random weighting so every
//! output element contributes. The per-element error is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    multi_head_attention, AttentionWeights, Element, ParamId, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, l1_loss, ssim_loss_term, LossConfig};
use crate::model::{ModelConfig, VitSr};

pub const STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-2;

/// Largest number of elements perturbed per input tensor and instance.
const MAX_ELEMENTS_PER_INPUT: usize = 96;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub elements: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<24} instances={:<3} elements={:<5} max_rel_err={:.3e} (tol {:.0e})",
            if self.passed() { "ok" } else { "FAIL" },
            self.name,
            self.instances,
            self.elements,
            self.max_rel_error,
            self.tolerance
        )
    }
}

/// All op checks plus the end-to-end model check.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub ops: Vec<CheckResult>,
    pub model: CheckResult,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(CheckResult::passed) && self.model.passed()
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.ops
            .iter()
            .chain(std::iter::once(&self.model))
            .filter(|c| !c.passed())
            .collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.ops {
            writeln!(f, "{c}")?;
        }
        writeln!(f, "{}", self.model)?;
        write!(
            f,
            "{} in {:.1}s",
            if self.passed() { "PASSED" } else { "FAILED" },
            self.seconds
        )
    }
}

/// How input values are drawn.
#[derive(Debug, Clone, Copy)]
pub enum Domain {
    /// Uniform in `[-2, 2]`.
    Symmetric,
    /// Uniform in `[-2, 2]` with `|x| >= 0.05`, for ops with a kink at zero.
    AwayFromZero,
    /// Uniform in `[0.5, 2]`.
    Positive,
    /// Uniform in `[0, 1]`, the image range.
    Unit,
}

impl Domain {
    fn sample(self, rng: &mut impl Rng) -> f64 {
        match self {
            Domain::Symmetric => rng.gen_range(-2.0..=2.0),
            Domain::AwayFromZero => {
                let m = rng.gen_range(0.05..=2.0);
                if rng.gen() {
                    m
                } else {
                    -m
                }
            }
            Domain::Positive => rng.gen_range(0.5..=2.0),
            Domain::Unit => rng.gen_range(0.0..=1.0),
        }
    }
}

/// One differentiable input of an op under test.
#[derive(Debug, Clone)]
pub struct InputSpec {
    pub shape: Vec<usize>,
    pub domain: Domain,
}

impl InputSpec {
    pub fn new(shape: impl Into<Vec<usize>>, domain: Domain) -> Self {
        Self {
            shape: shape.into(),
            domain,
        }
    }
}

type Build = dyn Fn(&mut Tape<'static, f64>, &[Var]) -> Result<Var>;

fn weighted_scalar(
    build: &Build,
    values: &[Vec<f64>],
    specs: &[InputSpec],
    weights: Option<&[f64]>,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = specs
        .iter()
        .zip(values)
        .map(|(s, v)| {
            tape.input(Tensor::new(s.shape.clone(), v.clone())?.with_requires_grad(with_grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let out_value = tape.value(out).to_vec();
    let w = match weights {
        Some(w) => w.to_vec(),
        None => return Ok((0.0, out_value, Vec::new())),
    };
    let shape = tape.shape(out).to_vec();
    let wv = tape.constant(shape, w)?;
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod)?;
    let value = tape.item(loss);
    if !with_grad {
        return Ok((value, out_value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(values)
        .map(|(v, x)| {
            grads
                .wrt(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; x.len()])
        })
        .collect();
    Ok((value, out_value, g))
}

/// Checks one op on `instances` random draws of its inputs.
pub fn check_op(
    name: &str,
    specs: &[InputSpec],
    instances: usize,
    seed: u64,
    build: impl Fn(&mut Tape<'static, f64>, &[Var]) -> Result<Var> + 'static,
) -> Result<CheckResult> {
    let build: Box<Build> = Box::new(build);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut elements = 0;
    for _ in 0..instances {
        let mut values: Vec<Vec<f64>> = specs
            .iter()
            .map(|s| {
                (0..s.shape.iter().product::<usize>())
                    .map(|_| s.domain.sample(&mut rng))
                    .collect()
            })
            .collect();
        let (_, out, _) = weighted_scalar(&*build, &values, specs, None, false)?;
        let weights: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let (_, _, analytic) = weighted_scalar(&*build, &values, specs, Some(&weights), true)?;
        for i in 0..specs.len() {
            let mut idx: Vec<usize> = (0..values[i].len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(MAX_ELEMENTS_PER_INPUT);
            for j in idx {
                let orig = values[i][j];
                values[i][j] = orig + STEP;
                let plus = weighted_scalar(&*build, &values, specs, Some(&weights), false)?.0;
                values[i][j] = orig - STEP;
                let minus = weighted_scalar(&*build, &values, specs, Some(&weights), false)?.0;
                values[i][j] = orig;
                let numeric = (plus - minus) / (2.0 * STEP);
                max_rel = max_rel.max(relative_error(analytic[i][j], numeric));
                elements += 1;
            }
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        instances,
        elements,
        max_rel_error: max_rel,
        tolerance: OP_TOLERANCE,
    })
}

fn u(shape: &[usize]) -> InputSpec {
    InputSpec::new(shape.to_vec(), Domain::Symmetric)
}

/// Checks every differentiable op, the attention block and the losses.
pub fn check_all_ops(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let n = instances;
    let mut out = Vec::new();
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_add(0x9E37_79B9);
        s
    };
    let gauss: Vec<f64> = crate::imageops::gaussian_window(5, 1.0);

    out.push(check_op(
        "add",
        &[u(&[3, 4]), u(&[3, 4])],
        n,
        next(),
        |t, v| t.add(v[0], v[1]),
    )?);
    out.push(check_op(
        "sub",
        &[u(&[3, 4]), u(&[3, 4])],
        n,
        next(),
        |t, v| t.sub(v[0], v[1]),
    )?);
    out.push(check_op(
        "mul",
        &[u(&[3, 4]), u(&[3, 4])],
        n,
        next(),
        |t, v| t.mul(v[0], v[1]),
    )?);
    out.push(check_op(
        "div",
        &[u(&[3, 4]), InputSpec::new([3, 4], Domain::Positive)],
        n,
        next(),
        |t, v| t.div(v[0], v[1]),
    )?);
    out.push(check_op(
        "add_broadcast",
        &[u(&[2, 3, 4]), u(&[3, 4])],
        n,
        next(),
        |t, v| t.add_broadcast(v[0], v[1]),
    )?);
    out.push(check_op("scale", &[u(&[5])], n, next(), |t, v| {
        t.scale(v[0], -1.7)
    })?);
    out.push(check_op("add_scalar", &[u(&[5])], n, next(), |t, v| {
        t.add_scalar(v[0], 0.3)
    })?);
    out.push(check_op(
        "abs",
        &[InputSpec::new([6], Domain::AwayFromZero)],
        n,
        next(),
        |t, v| t.abs(v[0]),
    )?);
    out.push(check_op("square", &[u(&[6])], n, next(), |t, v| {
        t.square(v[0])
    })?);
    out.push(check_op("sum", &[u(&[2, 5])], n, next(), |t, v| {
        t.sum(v[0])
    })?);
    out.push(check_op("mean", &[u(&[2, 5])], n, next(), |t, v| {
        t.mean(v[0])
    })?);
    out.push(check_op("reshape", &[u(&[2, 6])], n, next(), |t, v| {
        t.reshape(v[0], [3, 4])
    })?);
    out.push(check_op("permute", &[u(&[2, 3, 4])], n, next(), |t, v| {
        t.permute(v[0], &[2, 0, 1])
    })?);
    out.push(check_op("transpose", &[u(&[3, 4])], n, next(), |t, v| {
        t.transpose(v[0])
    })?);
    out.push(check_op("select", &[u(&[3, 2, 2])], n, next(), |t, v| {
        t.select(v[0], 1)
    })?);
    out.push(check_op(
        "matmul",
        &[u(&[2, 3, 4]), u(&[2, 4, 5])],
        n,
        next(),
        |t, v| t.matmul(v[0], v[1], false),
    )?);
    out.push(check_op(
        "matmul_trans_b",
        &[u(&[2, 3, 4]), u(&[2, 5, 4])],
        n,
        next(),
        |t, v| t.matmul(v[0], v[1], true),
    )?);
    out.push(check_op(
        "linear",
        &[u(&[2, 3, 4]), u(&[5, 4]), u(&[5])],
        n,
        next(),
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    )?);
    out.push(check_op(
        "linear_no_bias",
        &[u(&[3, 4]), u(&[2, 4])],
        n,
        next(),
        |t, v| t.linear(v[0], v[1], None),
    )?);
    out.push(check_op(
        "conv2d",
        &[u(&[2, 3, 5, 6]), u(&[4, 3, 3, 3]), u(&[4])],
        n,
        next(),
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1),
    )?);
    out.push(check_op(
        "conv2d_valid",
        &[u(&[2, 5, 5]), u(&[3, 2, 3, 3])],
        n,
        next(),
        |t, v| t.conv2d(v[0], v[1], None, 0),
    )?);
    out.push(check_op(
        "layer_norm",
        &[u(&[3, 6]), u(&[6]), u(&[6])],
        n,
        next(),
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
    )?);
    out.push(check_op("softmax", &[u(&[3, 5])], n, next(), |t, v| {
        t.softmax(v[0])
    })?);
    out.push(check_op("gelu", &[u(&[8])], n, next(), |t, v| {
        t.gelu(v[0])
    })?);
    out.push(check_op(
        "leaky_relu",
        &[InputSpec::new([8], Domain::AwayFromZero)],
        n,
        next(),
        |t, v| t.leaky_relu(v[0], 0.2),
    )?);
    out.push(check_op(
        "pixel_shuffle",
        &[u(&[2, 8, 2, 3])],
        n,
        next(),
        |t, v| t.pixel_shuffle(v[0], 2),
    )?);
    out.push(check_op(
        "pixel_unshuffle",
        &[u(&[2, 2, 4, 6])],
        n,
        next(),
        |t, v| t.pixel_unshuffle(v[0], 2),
    )?);
    out.push(check_op(
        "blur",
        &[u(&[2, 7, 6])],
        n,
        next(),
        move |t, v| t.blur(v[0], &gauss),
    )?);
    out.push(check_op(
        "attention",
        &[u(&[2, 3, 4]), u(&[12, 4]), u(&[12]), u(&[4, 4]), u(&[4])],
        n,
        next(),
        |t, v| {
            let w = AttentionWeights {
                qkv_weight: v[1],
                qkv_bias: v[2],
                proj_weight: v[3],
                proj_bias: v[4],
            };
            multi_head_attention(t, v[0], 2, &w)
        },
    )?);
    let img = [1, 3, 12, 12];
    out.push(check_op(
        "l1_loss",
        &[
            InputSpec::new(img, Domain::Unit),
            InputSpec::new(img, Domain::Unit),
        ],
        n,
        next(),
        |t, v| l1_loss(t, v[0], v[1]),
    )?);
    out.push(check_op(
        "ssim_loss",
        &[
            InputSpec::new(img, Domain::Unit),
            InputSpec::new(img, Domain::Unit),
        ],
        n,
        next(),
        |t, v| ssim_loss_term(t, v[0], v[1], &LossConfig::default()),
    )?);
    out.push(check_op(
        "composite_loss",
        &[
            InputSpec::new(img, Domain::Unit),
            InputSpec::new(img, Domain::Unit),
        ],
        n,
        next(),
        |t, v| composite_loss(t, v[0], v[1], &LossConfig::default()),
    )?);
    Ok(out)
}

/// Micro architecture used for the end-to-end check.
pub fn micro_check_config() -> ModelConfig {
    ModelConfig::small(32, 8, 32, 2, 2, 2)
}

fn model_loss(model: &VitSr<f64>, input: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(input.clone())?;
    let t = tape.input(target.clone())?;
    let y = model.forward(&mut tape, x)?;
    let loss = composite_loss(&mut tape, y, t, &LossConfig::default())?;
    Ok(tape.item(loss))
}

/// Forward and composite loss of the whole network against central
/// differences on `samples` randomly chosen parameter elements.
pub fn check_model(cfg: ModelConfig, samples: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = VitSr::init(cfg.clone(), seed)?;
    let mut model: VitSr<f64> = base.cast();
    // Initialization zeroes biases, layer-norm offsets and the output
    // convolution; give them generic values so no gradient is trivially zero.
    for p in model.params_mut().iter_mut() {
        let random = p.name.ends_with(".bias") || p.name.starts_with("head.out.");
        if random {
            for v in p.tensor.data_mut() {
                *v = rng.gen_range(-0.05..=0.05);
            }
        }
    }
    let s = cfg.image_size;
    let draw = |rng: &mut ChaCha8Rng| {
        Tensor::new(
            [1, 3, s, s],
            (0..3 * s * s).map(|_| rng.gen_range(0.0..=1.0)).collect(),
        )
    };
    let input = draw(&mut rng)?;
    let target = draw(&mut rng)?;

    let grads = {
        let mut tape = Tape::new();
        let x = tape.input(input.clone())?;
        let t = tape.input(target.clone())?;
        let y = model.forward(&mut tape, x)?;
        let loss = composite_loss(&mut tape, y, t, &LossConfig::default())?;
        tape.backward(loss)?
    };
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let id = ParamId(rng.gen_range(0..model.params().len()));
        let len = model.params().get(id).tensor.len();
        let j = rng.gen_range(0..len);
        let analytic = grads.param(id).map_or(0.0, |g| g[j]);
        let orig = model.params().get(id).tensor.data()[j];
        model.params_mut().get_mut(id).tensor.data_mut()[j] = orig + STEP;
        let plus = model_loss(&model, &input, &target)?;
        model.params_mut().get_mut(id).tensor.data_mut()[j] = orig - STEP;
        let minus = model_loss(&model, &input, &target)?;
        model.params_mut().get_mut(id).tensor.data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        max_rel = max_rel.max(relative_error(analytic, numeric));
    }
    Ok(CheckResult {
        name: "model_end_to_end".into(),
        instances: 1,
        elements: samples,
        max_rel_error: max_rel,
        tolerance: MODEL_TOLERANCE,
    })
}

/// Runs the full suite: each op on `instances` random instances and the
/// micro model on `model_samples` parameters.
pub fn run_suite(instances: usize, model_samples: usize, seed: u64) -> Result<GradcheckReport> {
    if instances == 0 || model_samples == 0 {
        return Err(Error::Config("gradcheck needs at least one sample".into()));
    }
    let start = Instant::now();
    let ops = check_all_ops(instances, seed)?;
    let model = check_model(micro_check_config(), model_samples, seed)?;
    Ok(GradcheckReport {
        ops,
        model,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Generic helper used by tests: analytic gradient of `sum(w * f(x))` for
/// any element type.
pub fn analytic_gradient<E: Element>(
    shape: &[usize],
    x: Vec<E>,
    f: impl Fn(&mut Tape<'static, E>, Var) -> Result<Var>,
) -> Result<Vec<E>> {
    let mut tape = Tape::new();
    let v = tape.input(Tensor::new(shape.to_vec(), x)?.with_requires_grad(true))?;
    let y = f(&mut tape, v)?;
    let s = tape.sum(y)?;
    let g = tape.backward(s)?;
    Ok(g.wrt(v).expect("input requires grad").to_vec())
}
