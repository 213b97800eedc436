//! U-shaped residual encoder-decoder whose output is the clipped sum of its
//! input and a tanh branch.
//!
//! The head (final 1x1 convolution) is zero-initialized, so a freshly built
//! generator is exactly the identity: tanh(0) adds nothing and the clip to
//! the input's own per-sample-per-channel extrema returns the input bitwise.

use crate::diffcore::{BnMode, DiffError, Graph, NodeId, Parameter, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
/// Encoder depth: number of stride-2 downsamplings.
pub const LEVELS: usize = 3;

pub type Result<T> = std::result::Result<T, DiffError>;

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng) as f32).collect()).unwrap()
}

#[derive(Debug, Clone)]
struct ConvUnit {
    weight: Parameter,
    bias: Parameter,
    gamma: Parameter,
    beta: Parameter,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
    stride: usize,
    kernel: usize,
    transposed: bool,
}

impl ConvUnit {
    fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        kernel: usize,
        transposed: bool,
    ) -> Self {
        let k = kernel;
        let shape = if transposed {
            vec![cin, cout, k, k]
        } else {
            vec![cout, cin, k, k]
        };
        ConvUnit {
            weight: Parameter::new(format!("{name}.weight"), he_normal(rng, &shape, cin * k * k)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[cout], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[cout])),
            running_mean: vec![0.0; cout],
            running_var: vec![1.0; cout],
            stride,
            kernel,
            transposed,
        }
    }
}

/// Residual block: two 3x3 conv+BN(+ReLU) with an additive shortcut; a 1x1
/// projection (with BN) carries the shortcut when the shape changes.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: ConvUnit,
    conv2: ConvUnit,
    projection: Option<ConvUnit>,
}

impl ResBlock {
    fn new(rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let projection = if stride != 1 || cin != cout {
            Some(ConvUnit::new(
                rng,
                &format!("{name}.proj"),
                cin,
                cout,
                stride,
                1,
                false,
            ))
        } else {
            None
        };
        ResBlock {
            conv1: ConvUnit::new(rng, &format!("{name}.conv1"), cin, cout, stride, 3, false),
            conv2: ConvUnit::new(rng, &format!("{name}.conv2"), cout, cout, 1, 3, false),
            projection,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub input_channels: usize,
    pub widths: Vec<usize>,
    stem: ConvUnit,
    enc0: ResBlock,
    down: Vec<ResBlock>,
    bottleneck: ResBlock,
    up: Vec<ConvUnit>,
    dec: Vec<ResBlock>,
    head_weight: Parameter,
    head_bias: Parameter,
}

/// Node handles from one generator forward pass.
pub struct GeneratorNodes {
    pub output: NodeId,
    /// The bounded additive branch, before the sum and clip.
    pub tanh_branch: NodeId,
    pub bindings: Vec<(usize, NodeId)>,
}

struct ForwardCtx<'g> {
    g: &'g mut Graph<f32>,
    mode: BnMode,
    frozen: bool,
    bindings: Vec<(usize, NodeId)>,
    param_idx: usize,
    updated: Vec<(Vec<f32>, Vec<f32>)>,
}

impl<'g> ForwardCtx<'g> {
    fn conv_unit(&mut self, u: &ConvUnit, x: NodeId, relu: bool) -> Result<NodeId> {
        let needs = !self.frozen;
        let w = self.g.leaf(u.weight.value.clone(), needs);
        let b = self.g.leaf(u.bias.value.clone(), needs);
        let gamma = self.g.leaf(u.gamma.value.clone(), needs);
        let beta = self.g.leaf(u.beta.value.clone(), needs);
        self.bindings.extend([
            (self.param_idx, w),
            (self.param_idx + 1, b),
            (self.param_idx + 2, gamma),
            (self.param_idx + 3, beta),
        ]);
        self.param_idx += 4;
        let padding = if u.kernel == 3 { 1 } else { 0 };
        let conv = if u.transposed {
            self.g.conv_transpose2d(x, w, Some(b), u.stride, padding)?
        } else {
            self.g.conv2d(x, w, Some(b), u.stride, padding)?
        };
        let mut rm = u.running_mean.clone();
        let mut rv = u.running_var.clone();
        let bn = self.g.batch_norm2d(
            conv,
            gamma,
            beta,
            &mut rm,
            &mut rv,
            self.mode,
            BN_EPSILON,
            BN_MOMENTUM,
        )?;
        self.updated.push((rm, rv));
        Ok(if relu { self.g.relu(bn) } else { bn })
    }

    fn res_block(&mut self, blk: &ResBlock, x: NodeId) -> Result<NodeId> {
        let main = self.conv_unit(&blk.conv1, x, true)?;
        let main = self.conv_unit(&blk.conv2, main, false)?;
        let shortcut = match &blk.projection {
            Some(p) => self.conv_unit(p, x, false)?,
            None => x,
        };
        let sum = self.g.add(main, shortcut)?;
        Ok(self.g.relu(sum))
    }
}

impl GeneratorModel {
    /// Builds the generator. `widths` gives the encoder level widths (the
    /// last one is also the bottleneck width). Inputs must have spatial dims
    /// divisible by 2^3.
    pub fn build(input_channels: usize, widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() != LEVELS {
            return Err(DiffError::ShapeMismatch {
                op: "build_generator",
                detail: format!("expected {LEVELS} level widths, got {}", widths.len()),
            });
        }
        let mut seed_bytes = [0u8; 32];
        seed_bytes[0..8].copy_from_slice(&seed.to_le_bytes());
        seed_bytes[8..16].copy_from_slice(b"genbuild");
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        let (w0, w1, w2) = (widths[0], widths[1], widths[2]);

        let stem = ConvUnit::new(&mut rng, "stem", input_channels, w0, 1, 3, false);
        let enc0 = ResBlock::new(&mut rng, "enc0", w0, w0, 1);
        let down = vec![
            ResBlock::new(&mut rng, "down0", w0, w1, 2),
            ResBlock::new(&mut rng, "down1", w1, w2, 2),
            ResBlock::new(&mut rng, "down2", w2, w2, 2),
        ];
        let bottleneck = ResBlock::new(&mut rng, "bottleneck", w2, w2, 1);
        let up = vec![
            ConvUnit::new(&mut rng, "up2", w2, w2, 2, 2, true),
            ConvUnit::new(&mut rng, "up1", w2, w1, 2, 2, true),
            ConvUnit::new(&mut rng, "up0", w1, w0, 2, 2, true),
        ];
        let dec = vec![
            ResBlock::new(&mut rng, "dec2", 2 * w2, w2, 1),
            ResBlock::new(&mut rng, "dec1", 2 * w1, w1, 1),
            ResBlock::new(&mut rng, "dec0", 2 * w0, w0, 1),
        ];
        // Zero initialization: the initial output is exactly the input.
        let head_weight = Parameter::new(
            "head.weight",
            Tensor::zeros(&[input_channels, w0, 1, 1]),
        );
        let head_bias = Parameter::new("head.bias", Tensor::zeros(&[input_channels]));
        Ok(GeneratorModel {
            input_channels,
            widths: widths.to_vec(),
            stem,
            enc0,
            down,
            bottleneck,
            up,
            dec,
            head_weight,
            head_bias,
        })
    }

    fn units(&self) -> Vec<&ConvUnit> {
        let mut out = vec![&self.stem];
        let mut blocks = vec![&self.enc0];
        blocks.extend(self.down.iter());
        blocks.push(&self.bottleneck);
        for b in blocks {
            out.push(&b.conv1);
            out.push(&b.conv2);
            if let Some(p) = &b.projection {
                out.push(p);
            }
        }
        for (u, d) in self.up.iter().zip(&self.dec) {
            out.push(u);
            out.push(&d.conv1);
            out.push(&d.conv2);
            if let Some(p) = &d.projection {
                out.push(p);
            }
        }
        out
    }

    fn units_mut(&mut self) -> Vec<&mut ConvUnit> {
        let mut out = vec![&mut self.stem];
        let mut blocks = vec![&mut self.enc0];
        blocks.extend(self.down.iter_mut());
        blocks.push(&mut self.bottleneck);
        for b in blocks {
            out.push(&mut b.conv1);
            out.push(&mut b.conv2);
            if let Some(p) = &mut b.projection {
                out.push(p);
            }
        }
        for (u, d) in self.up.iter_mut().zip(self.dec.iter_mut()) {
            out.push(u);
            out.push(&mut d.conv1);
            out.push(&mut d.conv2);
            if let Some(p) = &mut d.projection {
                out.push(p);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for u in self.units() {
            out.extend([&u.weight, &u.bias, &u.gamma, &u.beta]);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let GeneratorModel {
            stem,
            enc0,
            down,
            bottleneck,
            up,
            dec,
            head_weight,
            head_bias,
            ..
        } = self;
        let mut units: Vec<&mut ConvUnit> = vec![stem];
        let mut blocks: Vec<&mut ResBlock> = vec![enc0];
        blocks.extend(down.iter_mut());
        blocks.push(bottleneck);
        for b in blocks {
            units.push(&mut b.conv1);
            units.push(&mut b.conv2);
            if let Some(p) = &mut b.projection {
                units.push(p);
            }
        }
        for (u, d) in up.iter_mut().zip(dec.iter_mut()) {
            units.push(u);
            units.push(&mut d.conv1);
            units.push(&mut d.conv2);
            if let Some(p) = &mut d.projection {
                units.push(p);
            }
        }
        let mut out = Vec::new();
        for u in units {
            out.extend([&mut u.weight, &mut u.bias, &mut u.gamma, &mut u.beta]);
        }
        out.push(head_weight);
        out.push(head_bias);
        out
    }

    fn forward_impl(
        &self,
        g: &mut Graph<f32>,
        x: NodeId,
        mode: BnMode,
        frozen: bool,
    ) -> Result<(GeneratorNodes, Vec<(Vec<f32>, Vec<f32>)>)> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != self.input_channels {
            return Err(DiffError::ShapeMismatch {
                op: "generator_forward",
                detail: format!(
                    "expected [N,{},H,W], got {:?}",
                    self.input_channels, xs
                ),
            });
        }
        if xs[2] % (1 << LEVELS) != 0 || xs[3] % (1 << LEVELS) != 0 {
            return Err(DiffError::ShapeMismatch {
                op: "generator_forward",
                detail: format!(
                    "spatial dims {}x{} not divisible by {}",
                    xs[2],
                    xs[3],
                    1 << LEVELS
                ),
            });
        }
        let mut ctx = ForwardCtx {
            g,
            mode,
            frozen,
            bindings: Vec::new(),
            param_idx: 0,
            updated: Vec::new(),
        };
        let s = ctx.conv_unit(&self.stem, x, true)?;
        let e0 = ctx.res_block(&self.enc0, s)?;
        let e1 = ctx.res_block(&self.down[0], e0)?;
        let e2 = ctx.res_block(&self.down[1], e1)?;
        let b = ctx.res_block(&self.down[2], e2)?;
        let b = ctx.res_block(&self.bottleneck, b)?;

        let u2 = ctx.conv_unit(&self.up[0], b, true)?;
        let c2 = ctx.g.concat_channels(u2, e2)?;
        let d2 = ctx.res_block(&self.dec[0], c2)?;
        let u1 = ctx.conv_unit(&self.up[1], d2, true)?;
        let c1 = ctx.g.concat_channels(u1, e1)?;
        let d1 = ctx.res_block(&self.dec[1], c1)?;
        let u0 = ctx.conv_unit(&self.up[2], d1, true)?;
        let c0 = ctx.g.concat_channels(u0, e0)?;
        let d0 = ctx.res_block(&self.dec[2], c0)?;

        let needs = !frozen;
        let hw = ctx.g.leaf(self.head_weight.value.clone(), needs);
        let hb = ctx.g.leaf(self.head_bias.value.clone(), needs);
        ctx.bindings
            .extend([(ctx.param_idx, hw), (ctx.param_idx + 1, hb)]);
        let pre = ctx.g.conv2d(d0, hw, Some(hb), 1, 0)?;
        let tanh_branch = ctx.g.tanh(pre);

        // clip(x + t) to the per-sample-per-channel extrema of the input
        let (lo, hi) = per_sample_channel_extrema(ctx.g.value(x));
        let sum = ctx.g.add(x, tanh_branch)?;
        let output = ctx.g.clamp_per_sample_channel(sum, lo, hi)?;

        let updated = std::mem::take(&mut ctx.updated);
        let bindings = std::mem::take(&mut ctx.bindings);
        Ok((
            GeneratorNodes {
                output,
                tanh_branch,
                bindings,
            },
            updated,
        ))
    }

    /// Training-mode forward: batch statistics, running stats updated.
    pub fn forward_train(&mut self, g: &mut Graph<f32>, x: NodeId) -> Result<GeneratorNodes> {
        let (nodes, updated) = self.forward_impl(g, x, BnMode::Train, false)?;
        for (u, (rm, rv)) in self.units_mut().into_iter().zip(updated) {
            u.running_mean = rm;
            u.running_var = rv;
        }
        Ok(nodes)
    }

    /// Eval-mode forward with frozen running statistics; pure in `self`.
    pub fn forward_eval(&self, g: &mut Graph<f32>, x: NodeId) -> Result<GeneratorNodes> {
        let (nodes, _) = self.forward_impl(g, x, BnMode::Eval, true)?;
        Ok(nodes)
    }

    /// Convenience: runs the generator on one [C,H,W] image (eval mode).
    pub fn translate(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = image.shape();
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(&[1, s[0], s[1], s[2]], image.data().to_vec())?,
            false,
        );
        let nodes = self.forward_eval(&mut g, x)?;
        Tensor::from_vec(&[s[0], s[1], s[2]], g.value(nodes.output).data().to_vec())
    }

    pub fn accumulate_grads(&mut self, g: &Graph<f32>, bindings: &[(usize, NodeId)]) {
        let mut params = self.params_mut();
        for &(pi, node) in bindings {
            if let Some(grad) = g.grad(node) {
                for (a, &v) in params[pi].grad.data_mut().iter_mut().zip(grad.data()) {
                    *a += v;
                }
            }
        }
    }

    pub fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for p in self.params() {
            out.push((p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
        }
        for u in self.units() {
            out.push((
                format!("{}.running_mean", bn_prefix(&u.weight.name)),
                vec![u.running_mean.len()],
                u.running_mean.clone(),
            ));
            out.push((
                format!("{}.running_var", bn_prefix(&u.weight.name)),
                vec![u.running_var.len()],
                u.running_var.clone(),
            ));
        }
        out
    }

    pub fn load_state_tensors(&mut self, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        use std::collections::HashMap;
        let by_name: HashMap<&str, &(String, Vec<usize>, Vec<f32>)> =
            tensors.iter().map(|t| (t.0.as_str(), t)).collect();
        for p in self.params_mut() {
            let rec = by_name.get(p.name.as_str()).ok_or(DiffError::ShapeMismatch {
                op: "load_state",
                detail: format!("missing tensor '{}'", p.name),
            })?;
            if rec.1 != p.value.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "load_state",
                    detail: format!("tensor '{}' shape {:?} vs {:?}", p.name, rec.1, p.value.shape()),
                });
            }
            p.value = Tensor::from_vec(&rec.1, rec.2.clone())?;
        }
        for u in self.units_mut() {
            let prefix = bn_prefix(&u.weight.name);
            let rm = by_name
                .get(format!("{prefix}.running_mean").as_str())
                .ok_or(DiffError::ShapeMismatch {
                    op: "load_state",
                    detail: format!("missing running stats for '{prefix}'"),
                })?;
            let rv = by_name
                .get(format!("{prefix}.running_var").as_str())
                .ok_or(DiffError::ShapeMismatch {
                    op: "load_state",
                    detail: format!("missing running stats for '{prefix}'"),
                })?;
            u.running_mean = rm.2.clone();
            u.running_var = rv.2.clone();
        }
        Ok(())
    }
}

fn bn_prefix(weight_name: &str) -> &str {
    weight_name.strip_suffix(".weight").unwrap_or(weight_name)
}

/// Min and max of each (sample, channel) plane.
pub fn per_sample_channel_extrema(x: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
    let s = x.shape();
    let plane = s[2] * s[3];
    let mut lo = Vec::with_capacity(s[0] * s[1]);
    let mut hi = Vec::with_capacity(s[0] * s[1]);
    for chunk in x.data().chunks(plane) {
        let mut mn = f32::INFINITY;
        let mut mx = f32::NEG_INFINITY;
        for &v in chunk {
            mn = mn.min(v);
            mx = mx.max(v);
        }
        lo.push(mn);
        hi.push(mx);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_input(n: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec(
            &[n, c, h, w],
            (0..n * c * h * w)
                .map(|i| ((i * 31 % 101) as f32) / 101.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_init_generator_is_identity_bitwise() {
        let gen = GeneratorModel::build(2, &[4, 8, 8], 1).unwrap();
        let x = demo_input(2, 2, 16, 16);
        let mut g = Graph::new();
        let xin = g.leaf(x.clone(), false);
        let nodes = gen.forward_eval(&mut g, xin).unwrap();
        assert_eq!(g.value(nodes.output).data(), x.data());
        assert!(g
            .value(nodes.tanh_branch)
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input_and_dims_are_checked() {
        let gen = GeneratorModel::build(1, &[4, 8, 8], 2).unwrap();
        let x = demo_input(1, 1, 24, 32);
        let mut g = Graph::new();
        let xin = g.leaf(x.clone(), false);
        let nodes = gen.forward_eval(&mut g, xin).unwrap();
        assert_eq!(g.value(nodes.output).shape(), x.shape());

        let bad = demo_input(1, 1, 20, 20); // not divisible by 8
        let mut g = Graph::new();
        let xin = g.leaf(bad, false);
        assert!(gen.forward_eval(&mut g, xin).is_err());
        assert!(GeneratorModel::build(1, &[4, 8], 0).is_err());
    }

    #[test]
    fn tanh_branch_stays_within_unit_range_after_training_steps() {
        use crate::diffcore::{apply_lookahead, remove_lookahead, sgd_nesterov_step};
        let mut gen = GeneratorModel::build(1, &[4, 8, 8], 3).unwrap();
        let x = demo_input(2, 1, 16, 16);
        // a few steps toward an arbitrary target to move the head off zero
        for _ in 0..3 {
            let mut params = gen.params_mut();
            apply_lookahead(&mut params, 0.9);
            drop(params);
            let mut g = Graph::new();
            let xin = g.leaf(x.clone(), false);
            let nodes = gen.forward_train(&mut g, xin).unwrap();
            let target = g.leaf(Tensor::full(x.shape(), 0.25), false);
            let loss = g.mean_abs_error(nodes.output, target).unwrap();
            g.backward(loss, None).unwrap();
            gen.accumulate_grads(&g, &nodes.bindings);
            let mut params = gen.params_mut();
            remove_lookahead(&mut params, 0.9);
            sgd_nesterov_step(&mut params, 0.05, 0.9).unwrap();
        }
        let mut g = Graph::new();
        let xin = g.leaf(x.clone(), false);
        let nodes = gen.forward_eval(&mut g, xin).unwrap();
        // |G(x) - x| <= 1 per pixel before the clip: tanh is bounded
        for (&t, _) in g
            .value(nodes.tanh_branch)
            .data()
            .iter()
            .zip(x.data())
        {
            assert!(t.abs() <= 1.0);
        }
        // and the clip keeps outputs inside the input extrema
        let (lo, hi) = per_sample_channel_extrema(&x);
        let out = g.value(nodes.output);
        let plane = 16 * 16;
        for (p, chunk) in out.data().chunks(plane).enumerate() {
            for &v in chunk {
                assert!(v >= lo[p] && v <= hi[p]);
            }
        }
    }

    #[test]
    fn state_round_trips() {
        let mut gen = GeneratorModel::build(2, &[4, 8, 8], 7).unwrap();
        let state = gen.state_tensors();
        let mut other = GeneratorModel::build(2, &[4, 8, 8], 99).unwrap();
        other.load_state_tensors(&state).unwrap();
        assert_eq!(gen.state_tensors(), other.state_tensors());
        // mutate and reload
        gen.params_mut()[0].value.fill(0.5);
        assert_ne!(gen.state_tensors(), state);
        gen.load_state_tensors(&state).unwrap();
        assert_eq!(gen.state_tensors(), state);
    }
}
