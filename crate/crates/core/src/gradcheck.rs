//! Central finite-difference checks of the reverse-mode gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig};
use crate::params::{Ctx, Mode, ModelParams};
use crate::tensor::Tensor;
use crate::training::{joint_loss, sample_gradients, BetaConvention, SaliencySample};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Entries sampled per tensor; `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: None,
            seed: 0,
        }
    }
}

/// Worst entry of one tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    /// Entries whose perturbation moved some ReLU input across zero.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    /// Tensors over tolerance, or with no usable entry at all.
    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors
            .iter()
            .filter(move |t| t.max_rel_error >= self.tolerance || t.checked == 0)
    }

    pub fn extend(&mut self, other: GradCheckReport) {
        self.tensors.extend(other.tensors);
    }
}

/// Compares `analytic` against `(L(θ+h) - L(θ-h)) / 2h` for every tensor in
/// `params.params`, perturbing one entry at a time in place.
///
/// `loss` returns the loss and a fingerprint of the non-smooth branch taken
/// (see [`Tape::relu_pattern`]); entries whose `±h` passes take a different
/// branch than the unperturbed pass straddle a kink and are skipped. With
/// sampling, skipped entries are replaced by further samples.
pub fn finite_difference_check(
    params: &mut ModelParams,
    analytic: &BTreeMap<String, Tensor>,
    config: &GradCheckConfig,
    mut loss: impl FnMut(&ModelParams) -> Result<(f64, u64)>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let names: Vec<String> = params.params.keys().cloned().collect();
    let mut tensors = Vec::with_capacity(names.len());
    let h = config.step;
    let mut eval = |p: &ModelParams, what: &str| -> Result<(f64, u64)> {
        let (v, pattern) = loss(p)?;
        if v.is_finite() {
            Ok((v, pattern))
        } else {
            Err(Error::NonFinite(format!(
                "loss {v} while perturbing {what}"
            )))
        }
    };
    let (_, base_pattern) = eval(params, "nothing")?;

    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::MissingParam(name.clone()))?;
        let numel = params.params[&name].numel();
        if grad.numel() != numel {
            return Err(Error::ShapeMismatch {
                op: "gradcheck",
                lhs: params.params[&name].shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let (indices, wanted): (Vec<usize>, usize) = match config.max_entries {
            Some(k) if k < numel => (sample(&mut rng, numel, numel.min(8 * k)).into_vec(), k),
            _ => ((0..numel).collect(), numel),
        };

        let mut check = TensorCheck {
            name: name.clone(),
            numel,
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &indices {
            if check.checked == wanted {
                break;
            }
            let original = params.params[&name].data()[i];
            set_entry(params, &name, i, original + h);
            let plus = eval(params, &name);
            set_entry(params, &name, i, original - h);
            let minus = eval(params, &name);
            set_entry(params, &name, i, original);
            let ((plus, p_plus), (minus, p_minus)) = (plus?, minus?);
            if p_plus != base_pattern || p_minus != base_pattern {
                check.skipped_kinks += 1;
                continue;
            }
            check.checked += 1;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tolerance: config.tolerance,
        tensors,
    })
}

fn set_entry(params: &mut ModelParams, name: &str, i: usize, value: f64) {
    params.params.get_mut(name).expect("known name").data_mut()[i] = value;
}

/// Joint training loss of one sample with batch norm in training mode, plus
/// the pass's ReLU pattern fingerprint.
pub fn sample_loss(
    params: &ModelParams,
    model: &ModelConfig,
    sample: &SaliencySample,
    convention: BetaConvention,
) -> Result<(f64, u64)> {
    let mut ctx = Ctx::new(params, Mode::Train);
    let out = forward(&mut ctx, model, &sample.image)?;
    let loss = joint_loss(
        &mut ctx.tape,
        out.s_global,
        out.s_local,
        &sample.mask,
        convention,
    )?;
    Ok((
        ctx.tape.value(loss.total).data()[0],
        ctx.tape.relu_pattern(),
    ))
}

/// Redraws every batch-norm shift as `±U[0.05, 0.25)`.
///
/// With zero shifts, a 1x1 map normalized in training mode sits exactly on
/// the ReLU kink.
pub fn offset_bn_shifts(params: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.params.iter_mut() {
        if name.ends_with(".bn.beta") {
            *t = signed(&mut rng, t.shape(), 0.05, 0.25);
        }
    }
}

/// Checks the gradient of the joint loss with respect to every parameter tensor.
pub fn model_gradcheck(
    model: &ModelConfig,
    params: &ModelParams,
    sample: &SaliencySample,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let convention = BetaConvention::Ratio;
    let analytic = sample_gradients(params, model, sample, convention)?.grads;
    let mut work = params.clone();
    finite_difference_check(&mut work, &analytic, config, |p| {
        sample_loss(p, model, sample, convention)
    })
}

type Builder = fn(&mut Tape, &[Var]) -> Result<Var>;

/// A differentiable op applied to named leaf inputs.
struct OpCase {
    name: &'static str,
    inputs: Vec<(&'static str, Tensor)>,
    build: Builder,
}

type Probe = (f64, u64, BTreeMap<String, Tensor>);

fn probe_loss(
    case: &OpCase,
    values: &ModelParams,
    projection: &mut Option<Tensor>,
) -> Result<Probe> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|(n, _)| tape.leaf(values.params[&format!("{}.{n}", case.name)].clone()))
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let r = projection.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Tensor::from_fn(tape.shape(out), |_| rng.gen_range(-1.0..1.0))
    });
    let r = tape.constant(r.clone());
    let weighted = tape.mul(out, r)?;
    let total = tape.sum(weighted);
    let value = tape.value(total).data()[0];
    let pattern = tape.relu_pattern();
    let mut grads = tape.backward(total)?;
    let named = case
        .inputs
        .iter()
        .zip(&vars)
        .map(|((n, t), &v)| {
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()));
            (format!("{}.{n}", case.name), g)
        })
        .collect();
    Ok((value, pattern, named))
}

/// Uniform values in `[lo, hi)` with a random sign.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn op_cases(rng: &mut ChaCha8Rng, step: f64) -> Vec<OpCase> {
    let mut u = |shape: &[usize]| signed(rng, shape, 0.0, 1.0);
    let x = u(&[3, 6, 6]);
    let w = u(&[4, 3, 3, 3]);
    let b = u(&[4]);
    let w1 = u(&[2, 3, 1, 1]);
    let gamma = u(&[3]);
    let beta = u(&[3]);
    let fc_x = u(&[5]);
    let fc_w = u(&[5, 4]);
    let fc_b = u(&[4]);
    let small = u(&[2, 3, 3]);
    let other = u(&[2, 3, 3]);
    let deep = u(&[3, 2, 2]);
    let s = u(&[1]);
    let vec6 = u(&[6]);
    let pool_in = u(&[2, 4, 6]);
    // keep ReLU inputs well away from the kink
    let relu_in = signed(rng, &[2, 4, 4], 10.0 * step + 0.05, 1.0);
    let logits = signed(rng, &[1, 4, 4], 0.0, 2.0);
    let probs = Tensor::from_fn(&[1, 4, 4], |i| 0.05 + 0.9 * ((i * 7 % 16) as f64 / 15.0));

    vec![
        OpCase {
            name: "conv2d_3x3_s1_p1",
            inputs: vec![("x", x.clone()), ("weight", w.clone()), ("bias", b.clone())],
            build: |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        },
        OpCase {
            name: "conv2d_3x3_s2_p1",
            inputs: vec![("x", x.clone()), ("weight", w), ("bias", b)],
            build: |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        },
        OpCase {
            name: "conv2d_1x1",
            inputs: vec![("x", x.clone()), ("weight", w1)],
            build: |t, v| t.conv2d(v[0], v[1], None, 1, 0),
        },
        OpCase {
            name: "relu",
            inputs: vec![("x", relu_in)],
            build: |t, v| Ok(t.relu(v[0])),
        },
        OpCase {
            name: "sigmoid",
            inputs: vec![("x", logits)],
            build: |t, v| Ok(t.sigmoid(v[0])),
        },
        OpCase {
            name: "batch_norm_train",
            inputs: vec![
                ("x", x.clone()),
                ("gamma", gamma.clone()),
                ("beta", beta.clone()),
            ],
            build: |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2])?.0),
        },
        OpCase {
            name: "batch_norm_eval",
            inputs: vec![("x", x.clone()), ("gamma", gamma), ("beta", beta)],
            build: |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0]),
        },
        OpCase {
            name: "avg_pool2d",
            inputs: vec![("x", pool_in)],
            build: |t, v| t.avg_pool2d(v[0], 2),
        },
        OpCase {
            name: "global_avg_pool",
            inputs: vec![("x", x.clone())],
            build: |t, v| t.global_avg_pool(v[0]),
        },
        OpCase {
            name: "bilinear_upsample",
            inputs: vec![("x", deep.clone())],
            build: |t, v| t.bilinear_upsample(v[0], 5, 7),
        },
        OpCase {
            name: "concat_channels",
            inputs: vec![("a", small.clone()), ("b", other.clone())],
            build: |t, v| t.concat_channels(&[v[0], v[1]]),
        },
        OpCase {
            name: "fully_connected",
            inputs: vec![("x", fc_x), ("weight", fc_w), ("bias", fc_b)],
            build: |t, v| t.fully_connected(v[0], v[1], v[2]),
        },
        OpCase {
            name: "scale_by_scalar",
            inputs: vec![("x", deep), ("s", s)],
            build: |t, v| t.scale_by_scalar(v[0], v[1]),
        },
        OpCase {
            name: "add",
            inputs: vec![("a", small.clone()), ("b", other.clone())],
            build: |t, v| t.add(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            inputs: vec![("a", small.clone()), ("b", other)],
            build: |t, v| t.mul(v[0], v[1]),
        },
        OpCase {
            name: "mean",
            inputs: vec![("x", small.clone())],
            build: |t, v| Ok(t.mean(v[0])),
        },
        OpCase {
            name: "index",
            inputs: vec![("x", vec6.clone())],
            build: |t, v| t.index(v[0], 4),
        },
        OpCase {
            name: "reshape",
            inputs: vec![("x", vec6)],
            build: |t, v| t.reshape(v[0], &[6, 1, 1]),
        },
        OpCase {
            name: "weighted_bce",
            inputs: vec![("s", probs)],
            build: |t, v| {
                let mask = Tensor::from_fn(&[1, 4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
                t.weighted_bce(v[0], &mask, 0.6)
            },
        },
    ]
}

/// Finite-difference check of every differentiable tape op on small random
/// inputs. Each op output is projected onto a fixed random tensor so every
/// output entry contributes to the scalar loss.
pub fn op_gradcheck(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        tolerance: config.tolerance,
        tensors: Vec::new(),
    };
    for case in op_cases(&mut rng, config.step) {
        let mut values = ModelParams::default();
        for (n, t) in &case.inputs {
            values
                .params
                .insert(format!("{}.{n}", case.name), t.clone());
        }
        let mut projection = None;
        let (_, _, analytic) = probe_loss(&case, &values, &mut projection)?;
        let sub = finite_difference_check(&mut values, &analytic, config, |p| {
            let (v, pattern, _) = probe_loss(&case, p, &mut projection.clone())?;
            Ok((v, pattern))
        })?;
        report.extend(sub);
    }
    Ok(report)
}

/// Op names covered by [`op_gradcheck`].
pub fn op_names() -> Vec<&'static str> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    op_cases(&mut rng, 1e-5).iter().map(|c| c.name).collect()
}
