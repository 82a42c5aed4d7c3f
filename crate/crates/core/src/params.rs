//! Named parameter storage and the per-pass graph context.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, BN_MOMENTUM};
use crate::tensor::Tensor;

/// Learnable parameters plus non-learnable buffers (batch-norm running stats),
/// both keyed by dotted hierarchical names such as `cfd.level2.conv.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, stats) in updates {
            for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let name = format!("{prefix}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::MissingParam(name.clone()))?;
                for (r, &v) in buf.data_mut().iter_mut().zip(values.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
        Ok(())
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Builds parameters with Kaiming-uniform fan-in weights, zero biases and unit BN scale.
pub struct Initializer<'a> {
    pub store: &'a mut ModelParams,
    pub rng: &'a mut ChaCha8Rng,
}

impl Initializer<'_> {
    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
    }

    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool) {
        let w = self.kaiming(&[c_out, c_in, k, k], c_in * k * k);
        self.store.params.insert(format!("{name}.weight"), w);
        if bias {
            self.store
                .params
                .insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        }
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        let w = self.kaiming(&[d_in, d_out], d_in);
        self.store.params.insert(format!("{name}.weight"), w);
        self.store
            .params
            .insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) {
        let p = &mut self.store.params;
        p.insert(format!("{name}.gamma"), Tensor::ones(&[c]));
        p.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        let b = &mut self.store.buffers;
        b.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        b.insert(format!("{name}.running_var"), Tensor::ones(&[c]));
    }
}

/// One forward pass: a fresh tape with parameters bound lazily as leaves.
///
/// A parameter read twice maps to the same leaf, so its gradient sums both uses.
pub struct Ctx<'p> {
    pub tape: Tape,
    params: &'p ModelParams,
    bound: HashMap<String, Var>,
    mode: Mode,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p ModelParams, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = self.tape.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.params.contains_key(name)
    }

    /// Names of every parameter read during this pass.
    pub fn bound_params(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let b = if self.has_param(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, stride, padding)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        self.tape.fully_connected(x, w, b)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta)?;
                self.bn_updates.push((name.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.params.buffer(&format!("{name}.running_mean"))?;
                let var = self.params.buffer(&format!("{name}.running_var"))?;
                self.tape
                    .batch_norm_eval(x, gamma, beta, mean.data(), var.data())
            }
        }
    }

    /// `k`x`k` conv (no bias) → BN → ReLU, padding chosen to keep `stride`-scaled size.
    pub fn conv_bn_relu(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv"), x, stride, 1)?;
        let y = self.batch_norm(&format!("{name}.bn"), y)?;
        Ok(self.tape.relu(y))
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradient for every parameter in the store; parameters the loss never
    /// touched get zeros.
    pub fn param_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .params
            .iter()
            .map(|(name, value)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Initializer helper for a `conv_bn_relu` block.
pub fn init_conv_bn_relu(init: &mut Initializer<'_>, name: &str, c_out: usize, c_in: usize) {
    init.conv(&format!("{name}.conv"), c_out, c_in, 3, false);
    init.batch_norm(&format!("{name}.bn"), c_out);
}
