//! U-Net and residual U-Net segmenters.
//!
//! The encoder has `depth` levels of `[block, 2x2 max-pool]`, followed by a
//! bottleneck block and `depth` decoder levels of `[upsample, skip concat,
//! block]`. A final 1x1 convolution maps to per-class logits. Filter counts
//! double with each encoder level and halve on the way back up.
//!
//! A plain block is `conv, ReLU, conv, ReLU`. A residual block is
//! `conv, ReLU, conv` plus the block input, projected by a 1x1 convolution
//! when the channel counts differ.

mod checkpoint;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::seed;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

/// How decoder levels double the spatial resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Learnable 2x2 transposed convolution with stride 2.
    #[default]
    TransposedConv,
    /// Nearest-neighbour upsampling followed by a 2x2 convolution.
    NearestPlusConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub residual: bool,
    pub upsample_mode: UpsampleMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 3,
            base_filters: 8,
            in_channels: 1,
            num_classes: 4,
            residual: true,
            upsample_mode: UpsampleMode::TransposedConv,
        }
    }
}

impl NetworkConfig {
    /// Configuration sized for 224x224 inputs.
    pub fn full_scale() -> Self {
        NetworkConfig {
            depth: 4,
            base_filters: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("depth", "must be at least 1"));
        }
        if self.base_filters < 1 {
            return Err(Error::config("base_filters", "must be at least 1"));
        }
        if self.in_channels < 1 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.depth > 16 || self.base_filters.checked_shl(self.depth as u32).is_none() {
            return Err(Error::config("depth", "filter count overflows"));
        }
        Ok(())
    }

    /// Filters at encoder level `level` (the bottleneck is level `depth`).
    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for level in 0..self.depth {
            self.block_specs(&mut specs, &format!("enc{level}"), cin, self.filters(level));
            cin = self.filters(level);
        }
        self.block_specs(&mut specs, "bottleneck", cin, self.filters(self.depth));
        for level in (0..self.depth).rev() {
            let (hi, lo) = (self.filters(level + 1), self.filters(level));
            let up = format!("dec{level}.up");
            match self.upsample_mode {
                UpsampleMode::TransposedConv => {
                    specs.push(ParamSpec::weight(&up, [hi, lo, 2, 2], hi));
                }
                UpsampleMode::NearestPlusConv => {
                    specs.push(ParamSpec::weight(&up, [lo, hi, 2, 2], hi * 4));
                }
            }
            specs.push(ParamSpec::bias(&up, lo));
            self.block_specs(&mut specs, &format!("dec{level}"), 2 * lo, lo);
        }
        let f0 = self.filters(0);
        specs.push(ParamSpec::weight("head", [self.num_classes, f0, 1, 1], f0));
        specs.push(ParamSpec::bias("head", self.num_classes));
        specs
    }

    fn block_specs(&self, specs: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
        let c1 = format!("{prefix}.conv1");
        let c2 = format!("{prefix}.conv2");
        specs.push(ParamSpec::weight(&c1, [cout, cin, 3, 3], cin * 9));
        specs.push(ParamSpec::bias(&c1, cout));
        // The two summands of a residual block share the variance budget.
        let gain = if self.residual { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
        specs.push(ParamSpec::weight(&c2, [cout, cout, 3, 3], cout * 9).with_gain(gain));
        specs.push(ParamSpec::bias(&c2, cout));
        if self.residual && cin != cout {
            let p = format!("{prefix}.proj");
            specs.push(ParamSpec::weight(&p, [cout, cin, 1, 1], cin).with_gain(gain));
            specs.push(ParamSpec::bias(&p, cout));
        }
    }
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    // Zero for biases.
    fan_in: usize,
    gain: f64,
}

impl ParamSpec {
    fn weight(prefix: &str, shape: [usize; 4], fan_in: usize) -> Self {
        ParamSpec {
            name: format!("{prefix}.weight"),
            shape: shape.to_vec(),
            fan_in,
            gain: 1.0,
        }
    }

    fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    fn bias(prefix: &str, n: usize) -> Self {
        ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![n],
            fan_in: 0,
            gain: 1.0,
        }
    }
}

/// Parameters of one network placed on a tape, in creation order.
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// A built network: its configuration and named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkInstance {
    config: NetworkConfig,
    params: Vec<Parameter>,
}

impl NetworkInstance {
    /// Builds a network with He-uniform weights drawn from `seed` and zero
    /// biases.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng_for(seed, &[b"network-init"]);
        let params = config
            .param_specs()
            .into_iter()
            .map(|spec| {
                let tensor = if spec.fan_in == 0 {
                    Tensor::zeros(&spec.shape)
                } else {
                    let bound = spec.gain * (6.0 / spec.fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| rng.random_range(-bound..bound))
                };
                Parameter::new(spec.name, tensor)
            })
            .collect();
        Ok(NetworkInstance { config, params })
    }

    pub(crate) fn from_parts(config: NetworkConfig, values: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                values.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, tensor)) in specs.into_iter().zip(values) {
            if spec.name != name || spec.shape != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    tensor.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            params.push(Parameter::new(name, tensor));
        }
        Ok(NetworkInstance { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bindings {
        Bindings(
            self.params
                .iter()
                .map(|p| tape.leaf(p.tensor.clone(), requires_grad))
                .collect(),
        )
    }

    /// Checks that a `[B,C,H,W]` input is acceptable before any compute.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.spatial_multiple();
        match shape {
            [_, c, h, w] if *c == self.config.in_channels => {
                if h % m != 0 || w % m != 0 || *h == 0 || *w == 0 {
                    Err(Error::Shape(format!(
                        "input {h}x{w} is not divisible by 2^depth = {m}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::Shape(format!(
                "expected input [B,{},H,W], got {shape:?}",
                self.config.in_channels
            ))),
        }
    }

    /// Records a forward pass producing `[B,num_classes,H,W]` logits.
    pub fn forward_on(&self, tape: &mut Tape, bindings: &Bindings, input: Var) -> Result<Var> {
        self.check_input(tape.value(input).shape())?;
        let mut cursor = Cursor {
            vars: &bindings.0,
            params: &self.params,
            next: 0,
        };
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = input;
        for _ in 0..self.config.depth {
            x = self.block(tape, &mut cursor, x)?;
            skips.push(x);
            x = tape.max_pool2d(x)?;
        }
        x = self.block(tape, &mut cursor, x)?;
        for skip in skips.into_iter().rev() {
            let (w, b) = (cursor.take("up.weight"), cursor.take("up.bias"));
            x = match self.config.upsample_mode {
                UpsampleMode::TransposedConv => tape.conv_transpose2d(x, w, Some(b), 2)?,
                UpsampleMode::NearestPlusConv => {
                    let up = tape.upsample_nearest2x(x)?;
                    let pad = Padding {
                        bottom: 1,
                        right: 1,
                        ..Padding::default()
                    };
                    tape.conv2d_padded(up, w, Some(b), 1, pad)?
                }
            };
            x = tape.relu(x);
            x = tape.concat_channels(skip, x)?;
            x = self.block(tape, &mut cursor, x)?;
        }
        let (w, b) = (cursor.take("head.weight"), cursor.take("head.bias"));
        let logits = tape.conv2d(x, w, Some(b), 1, 0)?;
        debug_assert_eq!(cursor.next, self.params.len());
        Ok(logits)
    }

    /// Binds parameters with gradients enabled and records a forward pass.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<(Var, Bindings)> {
        let bindings = self.bind(tape, true);
        let logits = self.forward_on(tape, &bindings, input)?;
        Ok((logits, bindings))
    }

    /// Gradient-free logits for a `[B,C,H,W]` batch.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let bindings = self.bind(&mut tape, false);
        let x = tape.leaf(batch.clone(), false);
        let logits = self.forward_on(&mut tape, &bindings, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Adds the gradients of bound parameters into each [`Parameter`].
    /// Parameters the loss did not reach receive zeros.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bindings: &Bindings) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bindings.0) {
            match grads.get(v) {
                Some(g) => p.accumulate_grad(g)?,
                None => p.accumulate_grad(&vec![0.0; p.tensor.len()])?,
            }
        }
        Ok(())
    }

    fn block(&self, tape: &mut Tape, cursor: &mut Cursor<'_>, x: Var) -> Result<Var> {
        let (w1, b1) = (cursor.take("conv1.weight"), cursor.take("conv1.bias"));
        let (w2, b2) = (cursor.take("conv2.weight"), cursor.take("conv2.bias"));
        let h = tape.conv2d(x, w1, Some(b1), 1, 1)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, w2, Some(b2), 1, 1)?;
        if !self.config.residual {
            return Ok(tape.relu(h));
        }
        let skip = if cursor.peek_is("proj.weight") {
            let (wp, bp) = (cursor.take("proj.weight"), cursor.take("proj.bias"));
            tape.conv2d(x, wp, Some(bp), 1, 0)?
        } else {
            x
        };
        tape.add(h, skip)
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    params: &'a [Parameter],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self, suffix: &str) -> Var {
        debug_assert!(
            self.params[self.next].name.ends_with(suffix),
            "expected *{suffix}, found {}",
            self.params[self.next].name
        );
        self.next += 1;
        self.vars[self.next - 1]
    }

    fn peek_is(&self, suffix: &str) -> bool {
        self.params
            .get(self.next)
            .is_some_and(|p| p.name.ends_with(suffix))
    }
}

/// Anything that maps a `[B,C,H,W]` batch to `[B,classes,H,W]` logits.
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Segmenter for NetworkInstance {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.infer(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(residual: bool) -> NetworkConfig {
        NetworkConfig {
            depth: 1,
            base_filters: 2,
            in_channels: 1,
            num_classes: 2,
            residual,
            upsample_mode: UpsampleMode::TransposedConv,
        }
    }

    #[test]
    fn shape_contract_on_tiny_net() {
        let net = NetworkInstance::build(tiny(true), 1).unwrap();
        let logits = net.infer(&Tensor::zeros(&[1, 1, 8, 8])).unwrap();
        assert_eq!(logits.shape(), &[1, 2, 8, 8]);
    }

    #[test]
    fn residual_adds_projection_parameters() {
        for depth in 1..4 {
            let mut cfg = tiny(false);
            cfg.depth = depth;
            let plain = NetworkInstance::build(cfg.clone(), 3).unwrap();
            cfg.residual = true;
            let res = NetworkInstance::build(cfg.clone(), 3).unwrap();
            // One 1x1 projection per block whose channel count changes.
            let mut proj = cfg.in_channels * cfg.filters(0) + cfg.filters(0);
            for level in 1..=depth {
                proj += cfg.filters(level - 1) * cfg.filters(level) + cfg.filters(level);
            }
            for level in 0..depth {
                let f = cfg.filters(level);
                proj += 2 * f * f + f;
            }
            assert_eq!(res.parameter_count(), plain.parameter_count() + proj);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = NetworkInstance::build(NetworkConfig::default(), 42).unwrap();
        let b = NetworkInstance::build(NetworkConfig::default(), 42).unwrap();
        assert_eq!(a, b);
        let c = NetworkInstance::build(NetworkConfig::default(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = NetworkConfig {
            num_classes: 1,
            ..NetworkConfig::default()
        };
        match NetworkInstance::build(cfg, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "num_classes"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn divisibility_rule() {
        let net = NetworkInstance::build(NetworkConfig::default(), 0).unwrap();
        assert!(net.infer(&Tensor::zeros(&[1, 1, 16, 16])).is_ok());
        assert!(matches!(
            net.infer(&Tensor::zeros(&[1, 1, 20, 20])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_input_gives_spatially_constant_logits() {
        for residual in [false, true] {
            let cfg = NetworkConfig {
                residual,
                ..NetworkConfig::default()
            };
            let net = NetworkInstance::build(cfg, 5).unwrap();
            let logits = net.infer(&Tensor::zeros(&[1, 1, 16, 16])).unwrap();
            for plane in logits.data().chunks(256) {
                assert!(plane.iter().all(|&v| v == plane[0]));
            }
        }
    }

    #[test]
    fn nearest_upsampling_variant_keeps_shape() {
        let cfg = NetworkConfig {
            upsample_mode: UpsampleMode::NearestPlusConv,
            ..NetworkConfig::default()
        };
        let net = NetworkInstance::build(cfg, 2).unwrap();
        let x = Tensor::from_fn(&[2, 1, 16, 16], |i| (i as f64 * 0.1).sin());
        assert_eq!(net.infer(&x).unwrap().shape(), &[2, 4, 16, 16]);
    }

    #[test]
    fn batch_equals_concatenated_singles() {
        let net = NetworkInstance::build(NetworkConfig::default(), 9).unwrap();
        let x = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i * 7919) % 113) as f64 / 113.0);
        let both = net.infer(&x).unwrap();
        let a = net.infer(&x.batch_item(0).unwrap()).unwrap();
        let b = net.infer(&x.batch_item(1).unwrap()).unwrap();
        let joined = Tensor::stack_batch(&[a, b]).unwrap();
        for (u, v) in both.data().iter().zip(joined.data()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }
}
