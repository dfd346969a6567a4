//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the
//! references it needs for the backward rule. Nodes only ever refer to
//! earlier nodes, so walking the tape back to front is a valid reverse
//! topological order and visits each operation exactly once.

pub mod kernels;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use self::kernels::ConvGeom;
use crate::error::dim_err;
use crate::params::{GradientMap, ParamId, ParamStore};
use crate::{Error, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        planes: usize,
        src: (usize, usize),
        dst: (usize, usize),
    },
    Reshape {
        x: Var,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum {
        x: Var,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Option<Var>>,
}

/// Gradients of one scalar with respect to every tape node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; nodes the loss does not depend on get zeros.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
    }

    /// Gradients for every parameter bound with [`Tape::bind`].
    pub fn params(&self, tape: &Tape<T>) -> GradientMap<T> {
        let grads = tape.params.iter().map(|slot| slot.map(|v| self.wrt(tape, v))).collect();
        GradientMap::from_slots(grads)
    }
}

fn same_shape<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{}: shape mismatch {:?} vs {:?}", what, a.shape(), b.shape()));
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records every parameter of `store` as a differentiable leaf.
    pub fn bind(&mut self, store: &ParamStore<T>) {
        self.params = store.iter().map(|(_, _, t)| Some(self.leaf(t.clone(), true))).collect();
    }

    /// Leaf bound to parameter `id`.
    ///
    /// Panics when `id` was not bound; model code always binds its own store first.
    pub fn p(&self, id: ParamId) -> Var {
        self.params
            .get(id.index())
            .copied()
            .flatten()
            .unwrap_or_else(|| panic!("parameter {:?} is not bound to this tape", id))
    }

    // ------------------------------------------------------------ linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: incompatible shapes {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    // ------------------------------------------------------------ elementwise

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(what, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Multiplication by a scalar constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    // ------------------------------------------------------------ softmax

    /// Softmax along `axis`, computed after subtracting each slice's maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(dim_err!("softmax: axis {} out of range for {:?}", axis, t.shape()));
        }
        if !t.all_finite() {
            return Err(Error::Numeric(format!("softmax: non-finite input of shape {:?}", t.shape())));
        }
        let y = kernels::softmax(t.data(), t.shape(), axis);
        let out = Tensor::new(t.shape().to_vec(), y)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    // ------------------------------------------------------------ spatial

    /// Zero-padded 2-D cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize, dilation: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, padding, dilation)?;
        if self.value(b).shape() != [geom.cout] {
            return Err(dim_err!(
                "conv2d: bias shape {:?} does not match {} output channels",
                self.value(b).shape(),
                geom.cout
            ));
        }
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(geom.out_shape(), out)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// 2×2 stride-2 max pooling; ties resolve to the first element in row-major window order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(dim_err!("maxpool2d: need [N,C,H,W] with even H, W, got {:?}", s));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (out, argmax) = kernels::maxpool2x2(self.value(x).data(), n, c, h, w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([n, c, h / 2, w / 2], out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Bilinear upsampling with half-pixel centres: destination `i` samples
    /// source `(i + 0.5)·h/H − 0.5`, clamped to the source extent.
    pub fn upsample_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 4 || height < s[2] || width < s[3] {
            return Err(dim_err!("upsample_bilinear: cannot map {:?} to {}x{}", s, height, width));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let out = kernels::upsample_bilinear(self.value(x).data(), n * c, (h, w), (height, width));
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([n, c, height, width], out)?,
            Op::Upsample {
                x,
                planes: n * c,
                src: (h, w),
                dst: (height, width),
            },
            rg,
        ))
    }

    // ------------------------------------------------------------ layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { x, index }, rg))
    }

    /// Permutes axes: output axis `d` is input axis `perm[d]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("transpose: {:?} is not a permutation of the axes of {:?}", perm, shape));
        }
        let index = kernels::transpose_index(&shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.gather(x, index, out_shape)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!(
                "slice: range {}..{} on axis {} invalid for {:?}",
                start,
                start + len,
                axis,
                shape
            ));
        }
        let index = kernels::slice_index(&shape, axis, start, len);
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, index, out_shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat: no operands"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat: axis {} out of range for {:?}", axis, base));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let agrees = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agrees {
                return Err(dim_err!("concat: {:?} incompatible with {:?} on axis {}", s, base, axis));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Splits `[C,H,W]` into `P×P` patches, one row per patch: `[H·W/P², P²·C]`.
    ///
    /// Patches run row-major over the grid; inside a patch the channel varies
    /// fastest, then the column, then the row.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
            return Err(dim_err!(
                "patchify: H={} W={} not divisible by P={} (shape {:?})",
                s.get(1).copied().unwrap_or(0),
                s.get(2).copied().unwrap_or(0),
                patch,
                s
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let index = kernels::patchify_index(c, h, w, patch);
        self.gather(x, index, vec![h * w / (patch * patch), patch * patch * c])
    }

    /// Exact inverse of [`Tape::patchify`] back to `[C,H,W]`.
    pub fn unpatchify(&mut self, x: Var, channels: usize, height: usize, width: usize, patch: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let expected = [height * width / (patch * patch).max(1), patch * patch * channels];
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) || s != expected {
            return Err(dim_err!(
                "unpatchify: {:?} does not match C={} H={} W={} P={}",
                s,
                channels,
                height,
                width,
                patch
            ));
        }
        let index = kernels::invert_index(&kernels::patchify_index(channels, height, width, patch));
        self.gather(x, index, vec![channels, height, width])
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_rule(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn apply_rule(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(*a) {
                    let da = kernels::matmul_nt(g.data(), self.value(*b).data(), *m, *n, *k);
                    accumulate(&mut grads[a.0], Tensor::new([*m, *k], da)?);
                }
                if self.rg(*b) {
                    let db = kernels::matmul_tn(self.value(*a).data(), g.data(), *m, *k, *n);
                    accumulate(&mut grads[b.0], Tensor::new([*k, *n], db)?);
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[a.0], Tensor::new(shape_of(*a), d)?);
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[b.0], Tensor::new(shape_of(*b), d)?);
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                accumulate(&mut grads[x.0], g.map(|v| v * c));
            }
            Op::Relu { x } => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(&mut grads[x.0], Tensor::new(shape_of(*x), d)?);
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                accumulate(&mut grads[x.0], Tensor::full(shape_of(*x), gv));
            }
            Op::Softmax { x, axis } => {
                let d = kernels::softmax_backward(out.data(), g.data(), out.shape(), *axis);
                accumulate(&mut grads[x.0], Tensor::new(shape_of(*x), d)?);
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.rg(*x) {
                    let d = kernels::conv2d_backward_input(g.data(), self.value(*w).data(), geom);
                    accumulate(&mut grads[x.0], Tensor::new(shape_of(*x), d)?);
                }
                if self.rg(*w) {
                    let d = kernels::conv2d_backward_weight(g.data(), self.value(*x).data(), geom);
                    accumulate(&mut grads[w.0], Tensor::new(shape_of(*w), d)?);
                }
                if self.rg(*b) {
                    let d = kernels::conv2d_backward_bias(g.data(), geom);
                    accumulate(&mut grads[b.0], Tensor::new(shape_of(*b), d)?);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                accumulate(&mut grads[x.0], Tensor::new(shape_of(*x), d)?);
            }
            Op::Upsample { x, planes, src, dst } => {
                let d = kernels::upsample_bilinear_backward(g.data(), *planes, *src, *dst);
                accumulate(&mut grads[x.0], Tensor::new(shape_of(*x), d)?);
            }
            Op::Reshape { x } => {
                accumulate(&mut grads[x.0], g.reshaped(shape_of(*x))?);
            }
            Op::Gather { x, index } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in index.iter().zip(g.data()) {
                    d[src] += gv;
                }
                accumulate(&mut grads[x.0], Tensor::new(shape_of(*x), d)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        accumulate(&mut grads[p.0], Tensor::new(shape_of(p), d)?);
                    }
                    offset += len;
                }
            }
        }
        Ok(())
    }

    /// Fingerprint of every piecewise-linear branch taken on this tape.
    ///
    /// Covers the sign class of each relu input and each max-pool argmax.
    /// Two evaluations with equal fingerprints lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h = OFFSET;
        let mut mix = |v: u64| {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.value(*x).data() {
                        let class = if v > T::zero() {
                            2
                        } else if v < T::zero() {
                            0
                        } else {
                            1
                        };
                        mix(class);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64)),
                _ => {}
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 6., 7., 8.]);
        let y = tape.matmul(a, i2).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros([2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(matches!(err, Error::Dimension(_)));
        assert!(msg.contains("[2, 3] and [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.; 4]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);

        let x = tape.constant(t(&[2], &[0., 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        let x = tape.constant(t(&[2], &[1000., 1000.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
        let x = tape.constant(t(&[2], &[0., 0.]));
        assert!(matches!(tape.softmax(x, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones([1, 1, 3, 3]));
        let w = tape.constant(Tensor::<f64>::ones([1, 1, 3, 3]));
        let b = tape.constant(Tensor::<f64>::zeros([1]));
        let y = tape.conv2d(x, w, b, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);

        let x5 = tape.constant(Tensor::<f64>::ones([1, 1, 5, 5]));
        let y = tape.conv2d(x5, w, b, 1, 0, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);

        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.7 - 3.0).collect();
        let x = tape.constant(t(&[1, 1, 3, 4], &data));
        let delta = tape.constant(t(&[1, 1, 3, 3], &[0., 0., 0., 0., 1., 0., 0., 0., 0.]));
        let y = tape.conv2d(x, delta, b, 1, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv2d_too_small_output_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones([1, 1, 2, 2]));
        let w = tape.constant(Tensor::<f64>::ones([1, 1, 3, 3]));
        let b = tape.constant(Tensor::<f64>::zeros([1]));
        assert!(matches!(tape.conv2d(x, w, b, 1, 0, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let x = tape.constant(t(&[1, 1, 2, 2], &[-1., -2., -3., -4.]));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0]);
        let x = tape.constant(Tensor::full([1, 2, 4, 4], 2.5f64));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y), &Tensor::full([1, 2, 2, 2], 2.5));
        let odd = tape.constant(Tensor::<f64>::zeros([1, 1, 3, 2]));
        assert!(tape.maxpool2d(odd).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[3., 3., 3., 3.]), true);
        let y = tape.maxpool2d(x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().wrt(&tape, x);
        assert_eq!(g.data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn upsample_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[0., 1.]));
        let y = tape.upsample_bilinear(x, 1, 4).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0.25, 0.75, 1.]);
        let x = tape.constant(t(&[1, 1, 1, 1], &[0.3]));
        let y = tape.upsample_bilinear(x, 5, 3).unwrap();
        assert_eq!(tape.value(y), &Tensor::full([1, 1, 5, 3], 0.3));
        let x = tape.constant(Tensor::full([1, 2, 3, 2], -1.7f64));
        let y = tape.upsample_bilinear(x, 8, 7).unwrap();
        assert_eq!(tape.value(y), &Tensor::full([1, 2, 8, 7], -1.7));
        assert!(tape.upsample_bilinear(x, 2, 7).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1., 0., 2.]));
        let ones = tape.constant(Tensor::ones([3]));
        let zeros = tape.constant(Tensor::zeros([3]));
        let m = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
        let a = tape.add(x, zeros).unwrap();
        assert_eq!(tape.value(a), tape.value(x));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);
        let other = tape.constant(Tensor::zeros([4]));
        assert!(tape.add(x, other).is_err());
    }

    #[test]
    fn relu_subgradient_is_zero_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1., 0., 2.]), true);
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap().wrt(&tape, x);
        assert_eq!(g.data(), &[0., 0., 1.]);
    }

    #[test]
    fn layout_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let r = tape.reshape(x, &[3, 2]).unwrap();
        let back = tape.reshape(r, &[2, 3]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        assert!(tape.reshape(x, &[4]).is_err());

        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[1], &[3.]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3.]);

        let s = tape.slice(x, 1, 0, 3).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        let s = tape.slice(x, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[2., 3., 5., 6.]);
        assert!(tape.slice(x, 1, 2, 2).is_err());

        let tr = tape.transpose(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(tr).data(), &[1., 4., 2., 5., 3., 6.]);
        assert!(tape.transpose(x, &[0, 0]).is_err());

        let bad = tape.constant(Tensor::zeros([3, 3]));
        assert!(tape.concat(&[x, bad], 1).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.5, -1., 2.]), true);
        let s = tape.sum(w);
        assert_eq!(tape.backward(s).unwrap().wrt(&tape, w).data(), &[1., 1., 1.]);

        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        assert_eq!(tape.backward(s).unwrap().wrt(&tape, w).data(), &[2., 4., 6.]);

        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let other = tape.leaf(t(&[2], &[1., 1.]), true);
        let s = tape.sum(other);
        assert_eq!(tape.backward(s).unwrap().wrt(&tape, w).data(), &[0., 0., 0.]);

        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3., -2.]), true);
        let a = tape.scale(x, 2.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        assert_eq!(tape.backward(s).unwrap().wrt(&tape, x).data(), &[3., 3.]);
    }
}
