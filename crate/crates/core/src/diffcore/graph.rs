//! Reverse-mode differentiation over an ordered record of executed ops.
//!
//! A [`Graph`] is rebuilt for every forward pass: leaves hold copies of
//! parameter values and input data, each op appends a node, and
//! [`Graph::backward`] replays the record in reverse to populate gradients
//! for every node on a path from a gradient-requiring leaf to the root.

use super::kernels as k;
use super::kernels::BnSaved;
use super::tensor::{Scalar, Tensor};
use super::{DiffError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum Op<E: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved<E>,
        running_mean: Vec<E>,
    },
    Relu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        arg: Vec<u32>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    /// Clamp with per-(sample, channel) bounds treated as constants.
    Clamp {
        x: NodeId,
        lo: Vec<E>,
        hi: Vec<E>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor<E>,
    },
    MeanAbsError {
        a: NodeId,
        b: NodeId,
    },
    SumScalars {
        terms: Vec<NodeId>,
    },
    /// Fixed linear functional `sum_i coeffs[i] * x[i]`; smooth scalarizer
    /// used by the gradient-check harness.
    WeightedSum {
        x: NodeId,
        coeffs: Vec<E>,
    },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    needs_grad: bool,
    op: Op<E>,
}

pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<E>, needs_grad: bool) -> NodeId {
        self.push(value, needs_grad, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Toggles gradient accumulation into a leaf after construction. Used by
    /// the dual-loss training loop to skip weight gradients of the model the
    /// current backward pass does not update; propagation through the node's
    /// consumers is unaffected.
    pub fn set_needs_grad(&mut self, id: NodeId, needs: bool) {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Leaf));
        self.nodes[id.0].needs_grad = needs;
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = k::conv2d_fwd(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            out,
            needs,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = k::conv_transpose2d_fwd(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            out,
            needs,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Batch normalization. Train mode updates `running_mean`/`running_var`
    /// in place; eval mode reads them.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut [E],
        running_var: &mut [E],
        mode: BnMode,
        epsilon: E,
        momentum: E,
    ) -> Result<NodeId> {
        let (out, saved) = k::batch_norm2d_fwd(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            mode == BnMode::Train,
            epsilon,
            momentum,
        )?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let rm = running_mean.to_vec();
        Ok(self.push(
            out,
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                running_mean: rm,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(E::zero()));
        let needs = self.needs(x);
        self.push(out, needs, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(out, needs, Op::Tanh { x })
    }

    pub fn max_pool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, arg) = k::max_pool2d_fwd(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::MaxPool { x, arg }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 4 {
            return Err(DiffError::ShapeMismatch {
                op: "global_avg_pool",
                detail: format!("expected 4-d input, got {:?}", s),
            });
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut out = Tensor::zeros(&[n, c]);
        let inv = E::one() / E::from_f64(plane as f64);
        for p in 0..n * c {
            let mut acc = E::zero();
            for &v in &self.value(x).data()[p * plane..(p + 1) * plane] {
                acc += v;
            }
            out.data_mut()[p] = acc * inv;
        }
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::GlobalAvgPool { x }))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = k::dense_fwd(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, needs, Op::Dense { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(DiffError::ShapeMismatch {
                op: "add",
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(DiffError::ShapeMismatch {
                op: "mul",
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Mul { a, b }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(DiffError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut out = Tensor::zeros(&[n, ca + cb, sa[2], sa[3]]);
        for ni in 0..n {
            let dst = &mut out.data_mut()[ni * (ca + cb) * plane..];
            dst[..ca * plane]
                .copy_from_slice(&self.value(a).data()[ni * ca * plane..(ni + 1) * ca * plane]);
            dst[ca * plane..(ca + cb) * plane]
                .copy_from_slice(&self.value(b).data()[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::ConcatChannels { a, b }))
    }

    /// Clamps a [N,C,H,W] tensor to per-(sample, channel) bounds. The bounds
    /// are constants: gradient passes only where `lo <= x <= hi`.
    pub fn clamp_per_sample_channel(
        &mut self,
        x: NodeId,
        lo: Vec<E>,
        hi: Vec<E>,
    ) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 4 || lo.len() != s[0] * s[1] || hi.len() != lo.len() {
            return Err(DiffError::ShapeMismatch {
                op: "clamp",
                detail: format!("bounds ({}) vs {:?}", lo.len(), s),
            });
        }
        let plane = s[2] * s[3];
        let mut out = self.value(x).clone();
        for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let (l, h) = (lo[p], hi[p]);
            for v in chunk {
                *v = (*v).max(l).min(h);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Clamp { x, lo, hi }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (loss, probs) = k::softmax_ce_fwd(self.value(logits), targets)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn mean_abs_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(DiffError::ShapeMismatch {
                op: "mean_abs_error",
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let n = E::from_f64(self.value(a).numel() as f64);
        let mut acc = E::zero();
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            acc += (x - y).abs();
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(acc / n), needs, Op::MeanAbsError { a, b }))
    }

    /// Sum of scalar nodes (loss composition).
    pub fn sum_scalars(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let mut acc = E::zero();
        let mut needs = false;
        for &t in terms {
            if self.value(t).numel() != 1 {
                return Err(DiffError::ShapeMismatch {
                    op: "sum_scalars",
                    detail: "term is not a scalar".into(),
                });
            }
            acc += self.value(t).item();
            needs |= self.needs(t);
        }
        Ok(self.push(
            Tensor::scalar(acc),
            needs,
            Op::SumScalars {
                terms: terms.to_vec(),
            },
        ))
    }

    pub fn weighted_sum(&mut self, x: NodeId, coeffs: Vec<E>) -> Result<NodeId> {
        if coeffs.len() != self.value(x).numel() {
            return Err(DiffError::ShapeMismatch {
                op: "weighted_sum",
                detail: format!(
                    "{} coefficients vs {} values",
                    coeffs.len(),
                    self.value(x).numel()
                ),
            });
        }
        let mut acc = E::zero();
        for (&v, &c) in self.value(x).data().iter().zip(&coeffs) {
            acc += v * c;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(acc), needs, Op::WeightedSum { x, coeffs }))
    }

    /// Runs reverse-mode differentiation from `root`. Seeds with `seed` when
    /// given (must match the root shape), otherwise the root must be a scalar
    /// and is seeded with 1.
    pub fn backward(&mut self, root: NodeId, seed: Option<Tensor<E>>) -> Result<()> {
        let seed = match seed {
            Some(s) => {
                if s.shape() != self.nodes[root.0].value.shape() {
                    return Err(DiffError::ShapeMismatch {
                        op: "backward",
                        detail: "seed shape does not match root".into(),
                    });
                }
                s
            }
            None => {
                if self.nodes[root.0].value.numel() != 1 {
                    return Err(DiffError::ShapeMismatch {
                        op: "backward",
                        detail: "root is not a scalar and no seed was given".into(),
                    });
                }
                Tensor::scalar(E::one())
            }
        };
        if !self.nodes[root.0].needs_grad {
            return Ok(()); // nothing reachable requires gradients
        }
        accumulate(&mut self.grads, &self.nodes, root, seed);

        for i in (0..=root.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            // Inputs always precede node i, so splitting at i lets us read
            // the node's gradient while writing its inputs'.
            let (lo, hi) = self.grads.split_at_mut(i);
            let g = hi[0].as_ref().unwrap();
            let nodes = &self.nodes;
            let mut add = |id: NodeId, t: Tensor<E>| {
                if nodes[id.0].needs_grad {
                    match &mut lo[id.0] {
                        Some(acc) => {
                            for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += v;
                            }
                        }
                        slot => *slot = Some(t),
                    }
                }
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let xs = nodes[x.0].value.shape();
                    if nodes[x.0].needs_grad {
                        add(
                            *x,
                            k::conv2d_bwd_input(g, &nodes[w.0].value, xs[2], xs[3], *stride, *padding),
                        );
                    }
                    if nodes[w.0].needs_grad {
                        let ws = nodes[w.0].value.shape();
                        add(
                            *w,
                            k::conv2d_bwd_weight(&nodes[x.0].value, g, ws[2], ws[3], *stride, *padding),
                        );
                    }
                    if let Some(b) = b {
                        if nodes[b.0].needs_grad {
                            add(*b, k::conv2d_bwd_bias(g));
                        }
                    }
                }
                Op::ConvTranspose2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    if nodes[x.0].needs_grad {
                        // The adjoint of the scatter is a plain convolution of
                        // the output gradient with the same weight.
                        add(
                            *x,
                            k::conv2d_fwd(g, &nodes[w.0].value, None, *stride, *padding)
                                .expect("transpose-conv backward shapes are consistent"),
                        );
                    }
                    if nodes[w.0].needs_grad {
                        let ws = nodes[w.0].value.shape();
                        add(
                            *w,
                            k::conv2d_bwd_weight(g, &nodes[x.0].value, ws[2], ws[3], *stride, *padding),
                        );
                    }
                    if let Some(b) = b {
                        if nodes[b.0].needs_grad {
                            add(*b, k::conv2d_bwd_bias(g));
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                    running_mean,
                } => {
                    let (gx, ggamma, gbeta) = k::batch_norm2d_bwd(
                        g,
                        &nodes[x.0].value,
                        &nodes[gamma.0].value,
                        running_mean,
                        saved,
                    );
                    add(*x, gx);
                    add(*gamma, ggamma);
                    add(*beta, gbeta);
                }
                Op::Relu { x } => {
                    let mut gx = g.clone();
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(nodes[x.0].value.data()) {
                        if xv <= E::zero() {
                            *gv = E::zero();
                        }
                    }
                    add(*x, gx);
                }
                Op::Tanh { x } => {
                    let mut gx = g.clone();
                    for (gv, &yv) in gx.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                        *gv *= E::one() - yv * yv;
                    }
                    add(*x, gx);
                }
                Op::MaxPool { x, arg } => {
                    add(
                        *x,
                        k::max_pool2d_bwd(g, arg, nodes[x.0].value.shape()),
                    );
                }
                Op::GlobalAvgPool { x } => {
                    let s = nodes[x.0].value.shape();
                    let plane = s[2] * s[3];
                    let inv = E::one() / E::from_f64(plane as f64);
                    let mut gx = Tensor::zeros(s);
                    for (p, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
                        let gv = g.data()[p] * inv;
                        chunk.iter_mut().for_each(|v| *v = gv);
                    }
                    add(*x, gx);
                }
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = k::dense_bwd(g, &nodes[x.0].value, &nodes[w.0].value);
                    add(*x, gx);
                    add(*w, gw);
                    add(*b, gb);
                }
                Op::Add { a, b } => {
                    add(*a, g.clone());
                    add(*b, g.clone());
                }
                Op::Mul { a, b } => {
                    let mut ga = g.clone();
                    for (gv, &bv) in ga.data_mut().iter_mut().zip(nodes[b.0].value.data()) {
                        *gv *= bv;
                    }
                    let mut gb = g.clone();
                    for (gv, &av) in gb.data_mut().iter_mut().zip(nodes[a.0].value.data()) {
                        *gv *= av;
                    }
                    add(*a, ga);
                    add(*b, gb);
                }
                Op::ConcatChannels { a, b } => {
                    let sa = nodes[a.0].value.shape();
                    let sb = nodes[b.0].value.shape();
                    let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                    let mut ga = Tensor::zeros(sa);
                    let mut gb = Tensor::zeros(sb);
                    for ni in 0..n {
                        let src = &g.data()[ni * (ca + cb) * plane..];
                        ga.data_mut()[ni * ca * plane..(ni + 1) * ca * plane]
                            .copy_from_slice(&src[..ca * plane]);
                        gb.data_mut()[ni * cb * plane..(ni + 1) * cb * plane]
                            .copy_from_slice(&src[ca * plane..(ca + cb) * plane]);
                    }
                    add(*a, ga);
                    add(*b, gb);
                }
                Op::Clamp { x, lo, hi } => {
                    let s = nodes[x.0].value.shape();
                    let plane = s[2] * s[3];
                    let mut gx = g.clone();
                    for (p, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
                        let (l, h) = (lo[p], hi[p]);
                        for (gv, &xv) in chunk
                            .iter_mut()
                            .zip(&nodes[x.0].value.data()[p * plane..(p + 1) * plane])
                        {
                            if xv < l || xv > h {
                                *gv = E::zero();
                            }
                        }
                    }
                    add(*x, gx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    add(*logits, k::softmax_ce_bwd(g.item(), probs, targets));
                }
                Op::MeanAbsError { a, b } => {
                    let scale = g.item() / E::from_f64(nodes[a.0].value.numel() as f64);
                    let mut ga = Tensor::zeros(nodes[a.0].value.shape());
                    for ((gv, &av), &bv) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(nodes[a.0].value.data())
                        .zip(nodes[b.0].value.data())
                    {
                        let d = av - bv;
                        if d > E::zero() {
                            *gv = scale;
                        } else if d < E::zero() {
                            *gv = -scale;
                        }
                    }
                    let gb = ga.map(|v| -v);
                    add(*a, ga);
                    add(*b, gb);
                }
                Op::SumScalars { terms } => {
                    for &t in terms {
                        add(t, Tensor::scalar(g.item()));
                    }
                }
                Op::WeightedSum { x, coeffs } => {
                    let mut gx = Tensor::zeros(nodes[x.0].value.shape());
                    let gv = g.item();
                    for (o, &c) in gx.data_mut().iter_mut().zip(coeffs) {
                        *o = gv * c;
                    }
                    add(*x, gx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<E: Scalar>(
    grads: &mut [Option<Tensor<E>>],
    _nodes: &[Node<E>],
    id: NodeId,
    t: Tensor<E>,
) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        slot => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_pool_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::from_vec(&[1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap(),
            false,
        );
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let c = g.leaf(Tensor::full(&[1, 1, 4, 4], 3.25), false);
        let gap = g.global_avg_pool(c).unwrap();
        assert_eq!(g.value(gap).data(), &[3.25]);
    }

    #[test]
    fn mean_abs_error_values_and_symmetry() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), false);
        let b = g.leaf(Tensor::from_vec(&[2], vec![0.0, 4.0]).unwrap(), false);
        let ab = g.mean_abs_error(a, b).unwrap();
        let ba = g.mean_abs_error(b, a).unwrap();
        assert_eq!(g.value(ab).item(), 1.5);
        assert_eq!(g.value(ab).item(), g.value(ba).item());

        let same = g.mean_abs_error(a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);

        let c = g.leaf(Tensor::zeros(&[3]), false);
        assert!(g.mean_abs_error(a, c).is_err());
    }

    #[test]
    fn clamp_respects_per_channel_bounds() {
        let mut g = Graph::<f64>::new();
        // Two channels with different bounds; +10 everywhere clamps to hi.
        let x = g.leaf(Tensor::full(&[1, 2, 1, 2], 10.0), true);
        let y = g
            .clamp_per_sample_channel(x, vec![0.0, 0.1], vec![0.9, 0.5])
            .unwrap();
        assert_eq!(g.value(y).data(), &[0.9, 0.9, 0.5, 0.5]);
        // Everything was clipped, so no gradient flows back.
        let s = g.weighted_sum(y, vec![1.0; 4]).unwrap();
        g.backward(s, None).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        // f = sum(x) + sum(x) -> df/dx = 2.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), true);
        let s1 = g.weighted_sum(x, vec![1.0, 1.0]).unwrap();
        let s2 = g.weighted_sum(x, vec![1.0, 1.0]).unwrap();
        let tot = g.sum_scalars(&[s1, s2]).unwrap();
        g.backward(tot, None).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }
}
