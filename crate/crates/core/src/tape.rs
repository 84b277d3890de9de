//! Minimal reverse-mode autodiff over whole-tensor ops.
//!
//! Nodes are appended in evaluation order, so reverse creation order is a valid
//! topological order for the backward sweep. An inference tape records values
//! only and never builds backward closures.

use crate::attention;
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Linear,
    Quadratic,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    /// A tape that evaluates ops without recording anything for backward.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; gradients are reported for it after `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.record;
        self.nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push<F>(&mut self, value: Tensor<T>, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor<T>, &[&Tensor<T>], &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.record && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        let inputs = if requires_grad { inputs.to_vec() } else { Vec::new() };
        self.nodes.push(Node { value, inputs, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar (single-element) node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&seed_shape, T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = backward(&g, &inputs, &needs);
            for (var, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        Gradients { grads }
    }

    // ---------------------------------------------------------------- ops

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.shape().len(), 4, "conv3d input must be [C, Z, Y, X]");
        let cin = xv.channels();
        let dims = xv.spatial();
        let cout = wv.shape()[0];
        assert_eq!(wv.shape(), &[cout, cin, geom.kernel[0], geom.kernel[1], geom.kernel[2]], "conv3d weight shape");
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv3d_forward(xv.data(), cin, dims, wv.data(), cout, bias.as_deref(), &geom);
        let o = geom.output(dims);
        let value = Tensor::new(vec![cout, o[0], o[1], o[2]], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, &inputs, move |g, ins, needs| {
            let grads = kernels::conv3d_backward(ins[0].data(), cin, dims, ins[1].data(), cout, g.data(), &geom, needs[0]);
            let mut out = vec![
                grads.dx.map(|dx| Tensor::new(ins[0].shape().to_vec(), dx)),
                Some(Tensor::new(ins[1].shape().to_vec(), grads.dw)),
            ];
            if ins.len() == 3 {
                out.push(Some(Tensor::new(vec![cout], grads.db)));
            }
            out
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, &[x], move |g, _, _| vec![Some(g.map(|v| v * factor))])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.push(value, &[x], |g, ins, _| vec![Some(g.clone().reshape(ins[0].shape()))])
    }

    /// Per-channel FiLM: `x·(1 + scale_c) + shift_c`, with `ss = [scale; shift]` of length `2C`.
    pub fn scale_shift(&mut self, x: Var, ss: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let s = xv.len() / c;
        let ssv = self.value(ss);
        assert_eq!(ssv.len(), 2 * c, "scale_shift expects 2C modulation values");
        let mut out = xv.data().to_vec();
        for ch in 0..c {
            let (sc, sh) = (T::one() + ssv.data()[ch], ssv.data()[c + ch]);
            for v in &mut out[ch * s..(ch + 1) * s] {
                *v = *v * sc + sh;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out);
        self.push(value, &[x, ss], move |g, ins, _| {
            let (xd, ssd) = (ins[0].data(), ins[1].data());
            let mut dx = g.data().to_vec();
            let mut dss = vec![T::zero(); 2 * c];
            for ch in 0..c {
                let sc = T::one() + ssd[ch];
                for i in ch * s..(ch + 1) * s {
                    dss[ch] += g.data()[i] * xd[i];
                    dss[c + ch] += g.data()[i];
                    dx[i] *= sc;
                }
            }
            vec![Some(Tensor::new(ins[0].shape().to_vec(), dx)), Some(Tensor::new(ins[1].shape().to_vec(), dss))]
        })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        assert_eq!(c % groups, 0, "group_norm: {c} channels not divisible into {groups} groups");
        let out = kernels::group_norm_forward(xv.data(), c, groups, self.value(gamma).data(), self.value(beta).data());
        let value = Tensor::new(xv.shape().to_vec(), out);
        self.push(value, &[x, gamma, beta], move |g, ins, _| {
            let (dx, dg, db) = kernels::group_norm_backward(ins[0].data(), c, groups, ins[1].data(), g.data());
            vec![
                Some(Tensor::new(ins[0].shape().to_vec(), dx)),
                Some(Tensor::new(vec![c], dg)),
                Some(Tensor::new(vec![c], db)),
            ]
        })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.push(value, &[x], |g, ins, _| {
            let dx = ins[0].zip_map(g, |v, gv| {
                let s = kernels::sigmoid(v);
                gv * s * (T::one() + v * (T::one() - s))
            });
            vec![Some(dx)]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, &[x], |g, ins, _| {
            vec![Some(ins[0].zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() }))]
        })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, dims) = (xv.channels(), xv.spatial());
        assert!(dims.iter().all(|d| d % 2 == 0), "avg_pool2 needs even extents, got {dims:?}");
        let value = Tensor::new(vec![c, dims[0] / 2, dims[1] / 2, dims[2] / 2], kernels::avg_pool2(xv.data(), c, dims));
        self.push(value, &[x], move |g, ins, _| {
            vec![Some(Tensor::new(ins[0].shape().to_vec(), kernels::avg_pool2_backward(g.data(), c, dims)))]
        })
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, dims) = (xv.channels(), xv.spatial());
        let value = Tensor::new(vec![c, dims[0] * 2, dims[1] * 2, dims[2] * 2], kernels::upsample2(xv.data(), c, dims));
        self.push(value, &[x], move |g, ins, _| {
            vec![Some(Tensor::new(ins[0].shape().to_vec(), kernels::upsample2_backward(g.data(), c, dims)))]
        })
    }

    /// Channel concatenation of two `[C, ...]` tensors with equal trailing dims.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape()[1..], bv.shape()[1..], "concat trailing dims differ");
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let split = av.len();
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let value = Tensor::new(shape, data);
        self.push(value, &[a, b], move |g, ins, _| {
            vec![
                Some(Tensor::new(ins[0].shape().to_vec(), g.data()[..split].to_vec())),
                Some(Tensor::new(ins[1].shape().to_vec(), g.data()[split..].to_vec())),
            ]
        })
    }

    /// Mean over the in-plane `(Y, X)` axes: `[C, Z, Y, X] → [C, Z, 1, 1]`.
    pub fn mean_yx(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, [dz, dy, dx]) = (xv.channels(), xv.spatial());
        let plane = dy * dx;
        let inv = T::one() / T::from_f64(plane as f64);
        let data: Vec<T> = xv.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(vec![c, dz, 1, 1], data);
        self.push(value, &[x], move |g, ins, _| {
            let mut dx_ = Vec::with_capacity(ins[0].len());
            for &gv in g.data() {
                dx_.extend(std::iter::repeat_n(gv * inv, plane));
            }
            vec![Some(Tensor::new(ins[0].shape().to_vec(), dx_))]
        })
    }

    /// Multi-head self-attention on a fused `[3C, Z, Y, X]` projection.
    ///
    /// Channels are laid out as `[q; k; v]`, each split into `heads` contiguous
    /// groups of `C/heads` channels. Returns `[C, Z, Y, X]`.
    pub fn attention(&mut self, qkv: Var, heads: usize, kind: AttentionKind) -> Var {
        let v = self.value(qkv);
        let c3 = v.channels();
        assert_eq!(c3 % 3, 0, "attention expects 3C channels");
        let c = c3 / 3;
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        let spatial = v.shape()[1..].to_vec();
        let n: usize = spatial.iter().product();
        let d = c / heads;
        let (q, k, vv) = split_heads(v.data(), c, heads, n);
        let out = match kind {
            AttentionKind::Linear => attention::linear_attention(&q, &k, &vv),
            AttentionKind::Quadratic => attention::quadratic_attention(&q, &k, &vv),
        }
        .expect("attention shapes are consistent by construction");
        let mut shape = vec![c];
        shape.extend_from_slice(&spatial);
        let value = Tensor::new(shape, merge_heads(out.data(), heads, n, d));
        self.push(value, &[qkv], move |g, ins, _| {
            let (q, k, vv) = split_heads(ins[0].data(), c, heads, n);
            let go = Tensor::new(vec![heads, n, d], split_one(g.data(), heads, n, d));
            let grads = match kind {
                AttentionKind::Linear => attention::linear_attention_backward(&q, &k, &vv, &go),
                AttentionKind::Quadratic => attention::quadratic_attention_backward(&q, &k, &vv, &go),
            }
            .expect("attention shapes are consistent by construction");
            let mut dqkv = merge_heads(grads.dq.data(), heads, n, d);
            dqkv.extend(merge_heads(grads.dk.data(), heads, n, d));
            dqkv.extend(merge_heads(grads.dv.data(), heads, n, d));
            vec![Some(Tensor::new(ins[0].shape().to_vec(), dqkv))]
        })
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = T::from_f64(av.len() as f64);
        let loss: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        self.push(Tensor::scalar(loss), &[a, b], move |g, ins, _| {
            let k = g.data()[0] * T::from_f64(2.0) / n;
            let da = ins[0].zip_map(ins[1], |x, y| (x - y) * k);
            let db = da.map(|v| -v);
            vec![Some(da), Some(db)]
        })
    }

    /// `ce_weight·cross-entropy + dice_weight·(1 − mean soft-Dice over foreground)`.
    ///
    /// `logits` is `[K, ...]`; `labels` holds one class id per voxel.
    pub fn segmentation_loss(&mut self, logits: Var, labels: &[u8], ce_weight: T, dice_weight: T) -> Var {
        let lv = self.value(logits);
        let k = lv.channels();
        let n = lv.len() / k;
        assert_eq!(labels.len(), n, "label count does not match logits");
        let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        assert!(labels.iter().all(|&l| l < k), "label id exceeds class count");
        let probs = softmax_channels(lv.data(), k, n);
        let (loss, _) = seg_loss_terms(&probs, &labels, k, n, ce_weight, dice_weight, false);
        self.push(Tensor::scalar(loss), &[logits], move |g, ins, _| {
            let probs = softmax_channels(ins[0].data(), k, n);
            let (_, dlogits) = seg_loss_terms(&probs, &labels, k, n, ce_weight, dice_weight, true);
            let scale = g.data()[0];
            vec![Some(Tensor::new(ins[0].shape().to_vec(), dlogits.into_iter().map(|v| v * scale).collect()))]
        })
    }

    /// Slice-ordering + slice-distance loss over a score vector (see [`crate::bpr::bpr_losses`]).
    pub fn bpr_loss(&mut self, scores: Var) -> Var {
        let s = self.value(scores).data().to_vec();
        let (order, dist) = crate::bpr::bpr_loss_terms(&s);
        self.push(Tensor::scalar(order + dist), &[scores], |g, ins, _| {
            let grad = crate::bpr::bpr_loss_grad(ins[0].data());
            let scale = g.data()[0];
            vec![Some(Tensor::new(ins[0].shape().to_vec(), grad.into_iter().map(|v| v * scale).collect()))]
        })
    }
}

fn split_one<T: Scalar>(x: &[T], heads: usize, n: usize, d: usize) -> Vec<T> {
    // [heads·d, n] channel-major -> [heads, n, d]
    let mut out = vec![T::zero(); heads * n * d];
    for h in 0..heads {
        for c in 0..d {
            let src = &x[(h * d + c) * n..(h * d + c + 1) * n];
            for (i, &v) in src.iter().enumerate() {
                out[(h * n + i) * d + c] = v;
            }
        }
    }
    out
}

fn split_heads<T: Scalar>(x: &[T], c: usize, heads: usize, n: usize) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = c / heads;
    let part = |i: usize| Tensor::new(vec![heads, n, d], split_one(&x[i * c * n..(i + 1) * c * n], heads, n, d));
    (part(0), part(1), part(2))
}

fn merge_heads<T: Scalar>(x: &[T], heads: usize, n: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); heads * n * d];
    for h in 0..heads {
        for i in 0..n {
            for c in 0..d {
                out[(h * d + c) * n + i] = x[(h * n + i) * d + c];
            }
        }
    }
    out
}

/// Softmax over the leading (class) axis of a `[K, N]` buffer.
pub fn softmax_channels<T: Scalar>(logits: &[T], k: usize, n: usize) -> Vec<T> {
    let mut p = vec![T::zero(); k * n];
    for i in 0..n {
        let m = (0..k).map(|c| logits[c * n + i]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for c in 0..k {
            let e = (logits[c * n + i] - m).exp();
            p[c * n + i] = e;
            total += e;
        }
        for c in 0..k {
            p[c * n + i] /= total;
        }
    }
    p
}

const DICE_SMOOTH: f64 = 1.0;

fn seg_loss_terms<T: Scalar>(
    probs: &[T],
    labels: &[usize],
    k: usize,
    n: usize,
    ce_weight: T,
    dice_weight: T,
    with_grad: bool,
) -> (T, Vec<T>) {
    let nf = T::from_f64(n as f64);
    let eps = T::from_f64(1e-12);
    let ce: T = labels.iter().enumerate().map(|(i, &l)| -(probs[l * n + i] + eps).ln()).sum::<T>() / nf;
    let smooth = T::from_f64(DICE_SMOOTH);
    let fg = k.saturating_sub(1).max(1);
    let first = if k > 1 { 1 } else { 0 };
    let mut dice_sum = T::zero();
    let mut dprobs = if with_grad { vec![T::zero(); k * n] } else { Vec::new() };
    for c in first..k {
        let mut inter = T::zero();
        let mut psum = T::zero();
        let mut gsum = T::zero();
        for i in 0..n {
            let p = probs[c * n + i];
            let is = labels[i] == c;
            psum += p;
            if is {
                inter += p;
                gsum += T::one();
            }
        }
        let num = T::from_f64(2.0) * inter + smooth;
        let den = psum + gsum + smooth;
        dice_sum += num / den;
        if with_grad {
            // d(1 - mean dice)/dp
            let w = -dice_weight / T::from_f64(fg as f64);
            for i in 0..n {
                let gi = if labels[i] == c { T::one() } else { T::zero() };
                let dd = (T::from_f64(2.0) * gi * den - num) / (den * den);
                dprobs[c * n + i] += w * dd;
            }
        }
    }
    let dice_loss = T::one() - dice_sum / T::from_f64(fg as f64);
    let loss = ce_weight * ce + dice_weight * dice_loss;
    if !with_grad {
        return (loss, Vec::new());
    }
    // chain through softmax, then add the CE term (p - onehot)/N
    let mut dlogits = vec![T::zero(); k * n];
    for i in 0..n {
        let dot: T = (0..k).map(|c| probs[c * n + i] * dprobs[c * n + i]).sum();
        for c in 0..k {
            let p = probs[c * n + i];
            let onehot = if labels[i] == c { T::one() } else { T::zero() };
            dlogits[c * n + i] = p * (dprobs[c * n + i] - dot) + ce_weight * (p - onehot) / nf;
        }
    }
    (loss, dlogits)
}
