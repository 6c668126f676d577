//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records operations as they execute; [`backward`](Var::backward)
//! walks the tape in reverse topological order exactly once and accumulates
//! adjoints. Gradients are only propagated along paths that reach a leaf
//! created with `leaf` (parameters, probe inputs); `constant` leaves are
//! excluded at record time, so frozen models cost nothing in the backward
//! pass.
//!
//! Layout convention: images and feature maps are NHWC, token stacks are
//! `[batch, tokens, dim]`, and every reduction/normalization acts on the
//! last dimension unless stated otherwise.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};

enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, S),
    /// x[..., C] * g[C]
    MulLast(usize, usize),
    /// x[..., C] + b[C]
    AddLast(usize, usize),
    /// x[N,H,W,C] + t[N,C], broadcast over H and W
    AddChan(usize, usize),
    Matmul {
        a: usize,
        b: usize,
    },
    /// Batched matmul [B,M,K]·[B,K,N], or [B,M,K]·[B,N,K]ᵀ when `trans_b`.
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    /// NHWC convolution, weight [kh,kw,Cin,Cout], zero padding.
    Conv2d {
        x: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2x(usize),
    BilinearResize {
        x: usize,
        out_h: usize,
        out_w: usize,
    },
    Softmax(usize),
    LogSoftmax(usize),
    /// Normalize over the last dim; affine is applied separately.
    /// Per-row rstd is cached on the node for backward.
    LayerNormCore {
        x: usize,
    },
    /// NHWC group normalization over (H,W,C/groups) per sample and group.
    GroupNormCore {
        x: usize,
        groups: usize,
    },
    Silu(usize),
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Gather {
        x: usize,
        axis: usize,
        indices: Arc<Vec<usize>>,
    },
    /// x[B,C] -> out[B], out[b] = x[b, idx[b]].
    RowSelect {
        x: usize,
        indices: Arc<Vec<usize>>,
    },
    Slice {
        x: usize,
        offset: Vec<usize>,
        size: Vec<usize>,
    },
    /// Prepend a batch axis of size n by copying; adjoint sums over it.
    Repeat0 {
        x: usize,
        n: usize,
    },
    /// Stack inputs along a new leading axis (all same shape).
    Concat0 {
        xs: Vec<usize>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
    /// Cached per-row statistics for the norm ops (rstd), avoiding a
    /// recompute in backward.
    aux: Option<Vec<S>>,
}

pub struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    nan_guard: bool,
}

/// Records operations for one forward/backward pass. Cheap to clone
/// (shared handle); single-threaded by design.
pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

/// Handle to a tape node.
pub struct Var<S: Scalar> {
    tape: Tape<S>,
    idx: usize,
}

impl<S: Scalar> Clone for Var<S> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            idx: self.idx,
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                nan_guard: cfg!(debug_assertions),
            })),
        }
    }

    /// Toggle the hard-error-on-NaN forward check (on by default in debug
    /// builds).
    pub fn set_nan_guard(&self, on: bool) {
        self.inner.borrow_mut().nan_guard = on;
    }

    /// Differentiable input (parameter or probe).
    pub fn leaf(&self, value: Tensor<S>) -> Var<S> {
        self.push(value, Op::Leaf, true, None)
    }

    /// Non-differentiable input; backward never propagates into it.
    pub fn constant(&self, value: Tensor<S>) -> Var<S> {
        self.push(value, Op::Leaf, false, None)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool, aux: Option<Vec<S>>) -> Var<S> {
        let mut inner = self.inner.borrow_mut();
        if inner.nan_guard && !value.is_finite() {
            panic!(
                "non-finite value produced by {} (shape {:?})",
                op_name(&op),
                value.shape()
            );
        }
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux,
        });
        Var {
            tape: self.clone(),
            idx,
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.inner.borrow().nodes[idx].needs_grad
    }

    fn value_of(&self, idx: usize) -> Tensor<S> {
        self.inner.borrow().nodes[idx].value.clone()
    }
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::MulLast(..) => "mul_last",
        Op::AddLast(..) => "add_last",
        Op::AddChan(..) => "add_chan",
        Op::Matmul { .. } => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Conv2d { .. } => "conv2d",
        Op::UpsampleNearest2x(..) => "upsample_nearest_2x",
        Op::BilinearResize { .. } => "bilinear_resize",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LayerNormCore { .. } => "layer_norm",
        Op::GroupNormCore { .. } => "group_norm",
        Op::Silu(..) => "silu",
        Op::Gelu(..) => "gelu",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Reshape(..) => "reshape",
        Op::Permute { .. } => "permute",
        Op::Gather { .. } => "gather",
        Op::RowSelect { .. } => "row_select",
        Op::Slice { .. } => "slice",
        Op::Repeat0 { .. } => "repeat0",
        Op::Concat0 { .. } => "concat0",
    }
}

/// Adjoints produced by a backward pass, indexed by tape node.
pub struct Grads<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient with respect to `var`, zeros if no path reached it.
    pub fn wrt(&self, var: &Var<S>) -> Tensor<S> {
        match &self.grads[var.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }

    pub fn has(&self, var: &Var<S>) -> bool {
        self.grads[var.idx].is_some()
    }
}

impl<S: Scalar> Var<S> {
    pub fn value(&self) -> Tensor<S> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &Tape<S> {
        &self.tape
    }

    fn same_tape(&self, other: &Var<S>) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "vars from different tapes"
        );
    }

    pub fn add(&self, other: &Var<S>) -> Var<S> {
        self.same_tape(other);
        let v = self.value().add_t(&other.value());
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(v, Op::Add(self.idx, other.idx), needs, None)
    }

    pub fn sub(&self, other: &Var<S>) -> Var<S> {
        self.same_tape(other);
        let v = self.value().sub_t(&other.value());
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(v, Op::Sub(self.idx, other.idx), needs, None)
    }

    pub fn mul(&self, other: &Var<S>) -> Var<S> {
        self.same_tape(other);
        let v = self.value().mul_t(&other.value());
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(v, Op::Mul(self.idx, other.idx), needs, None)
    }

    pub fn div(&self, other: &Var<S>) -> Var<S> {
        self.same_tape(other);
        let v = self.value().zip(&other.value(), |a, b| a / b);
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(v, Op::Div(self.idx, other.idx), needs, None)
    }

    pub fn add_scalar(&self, c: S) -> Var<S> {
        let v = self.value().map(|x| x + c);
        let needs = self.tape.needs(self.idx);
        self.tape.push(v, Op::AddScalar(self.idx), needs, None)
    }

    pub fn scale(&self, c: S) -> Var<S> {
        let v = self.value().scale(c);
        let needs = self.tape.needs(self.idx);
        self.tape.push(v, Op::MulScalar(self.idx, c), needs, None)
    }

    /// Elementwise multiply by a per-last-dim vector (affine scale).
    pub fn mul_last(&self, g: &Var<S>) -> Var<S> {
        self.same_tape(g);
        let xv = self.value();
        let gv = g.value();
        let c = *xv.shape().last().unwrap();
        assert_eq!(gv.shape(), &[c], "mul_last wants [C] scale");
        let mut out = vec![S::zero(); xv.numel()];
        for (row, orow) in xv.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            for i in 0..c {
                orow[i] = row[i] * gv.data()[i];
            }
        }
        let needs = self.tape.needs(self.idx) || self.tape.needs(g.idx);
        self.tape.push(
            Tensor::from_vec(xv.shape(), out),
            Op::MulLast(self.idx, g.idx),
            needs,
            None,
        )
    }

    /// Add a per-last-dim bias vector.
    pub fn add_last(&self, b: &Var<S>) -> Var<S> {
        self.same_tape(b);
        let xv = self.value();
        let bv = b.value();
        let c = *xv.shape().last().unwrap();
        assert_eq!(bv.shape(), &[c], "add_last wants [C] bias");
        let mut out = vec![S::zero(); xv.numel()];
        for (row, orow) in xv.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            for i in 0..c {
                orow[i] = row[i] + bv.data()[i];
            }
        }
        let needs = self.tape.needs(self.idx) || self.tape.needs(b.idx);
        self.tape.push(
            Tensor::from_vec(xv.shape(), out),
            Op::AddLast(self.idx, b.idx),
            needs,
            None,
        )
    }

    /// x[N,H,W,C] + t[N,C], broadcasting t over the spatial dims.
    pub fn add_chan(&self, t: &Var<S>) -> Var<S> {
        self.same_tape(t);
        let xv = self.value();
        let tv = t.value();
        let (n, h, w, c) = nhwc(xv.shape());
        assert_eq!(tv.shape(), &[n, c], "add_chan wants [N,C]");
        let mut out = xv.data().to_vec();
        for bi in 0..n {
            let trow = &tv.data()[bi * c..(bi + 1) * c];
            let base = bi * h * w * c;
            for px in 0..h * w {
                let o = base + px * c;
                for i in 0..c {
                    out[o + i] = out[o + i] + trow[i];
                }
            }
        }
        let needs = self.tape.needs(self.idx) || self.tape.needs(t.idx);
        self.tape.push(
            Tensor::from_vec(xv.shape(), out),
            Op::AddChan(self.idx, t.idx),
            needs,
            None,
        )
    }

    /// 2-D matmul. Inputs of higher rank are flattened to
    /// `[prod(leading), last]` on the left.
    pub fn matmul(&self, w: &Var<S>) -> Var<S> {
        self.same_tape(w);
        let xv = self.value();
        let wv = w.value();
        let k = *xv.shape().last().unwrap();
        assert_eq!(wv.shape().len(), 2, "matmul weight must be 2-D");
        assert_eq!(wv.shape()[0], k, "matmul inner dims {:?} x {:?}", xv.shape(), wv.shape());
        let n = wv.shape()[1];
        let m = xv.numel() / k;
        let mut out = vec![S::zero(); m * n];
        matmul(xv.data(), wv.data(), m, k, n, &mut out);
        let mut oshape: Vec<usize> = xv.shape()[..xv.shape().len() - 1].to_vec();
        oshape.push(n);
        let needs = self.tape.needs(self.idx) || self.tape.needs(w.idx);
        self.tape.push(
            Tensor::from_vec(&oshape, out),
            Op::Matmul {
                a: self.idx,
                b: w.idx,
            },
            needs,
            None,
        )
    }

    /// Batched matmul [B,M,K]·[B,K,N] (or ·[B,N,K]ᵀ when `trans_b`).
    pub fn bmm(&self, other: &Var<S>, trans_b: bool) -> Var<S> {
        self.same_tape(other);
        let av = self.value();
        let bv = other.value();
        assert_eq!(av.shape().len(), 3);
        assert_eq!(bv.shape().len(), 3);
        let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], bt);
        let n = if trans_b {
            assert_eq!(bv.shape()[2], k);
            bv.shape()[1]
        } else {
            assert_eq!(bv.shape()[1], k);
            bv.shape()[2]
        };
        let mut out = vec![S::zero(); bt * m * n];
        for i in 0..bt {
            let a_s = &av.data()[i * m * k..(i + 1) * m * k];
            let o_s = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                let b_s = &bv.data()[i * n * k..(i + 1) * n * k];
                matmul_nt(a_s, b_s, m, k, n, o_s);
            } else {
                let b_s = &bv.data()[i * k * n..(i + 1) * k * n];
                matmul(a_s, b_s, m, k, n, o_s);
            }
        }
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(
            Tensor::from_vec(&[bt, m, n], out),
            Op::Bmm {
                a: self.idx,
                b: other.idx,
                trans_b,
            },
            needs,
            None,
        )
    }

    /// NHWC convolution with zero padding. Weight layout [kh,kw,Cin,Cout].
    pub fn conv2d(&self, w: &Var<S>, stride: usize, pad: usize) -> Var<S> {
        self.same_tape(w);
        let xv = self.value();
        let wv = w.value();
        let (n, h, wd, cin) = nhwc(xv.shape());
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [kh,kw,Cin,Cout]");
        let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wcin, cin, "conv channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let col = im2col(&xv, kh, kw, stride, pad, oh, ow);
        let rows = n * oh * ow;
        let kdim = kh * kw * cin;
        let mut out = vec![S::zero(); rows * cout];
        matmul(&col, wv.data(), rows, kdim, cout, &mut out);
        let needs = self.tape.needs(self.idx) || self.tape.needs(w.idx);
        self.tape.push(
            Tensor::from_vec(&[n, oh, ow, cout], out),
            Op::Conv2d {
                x: self.idx,
                w: w.idx,
                kh,
                kw,
                stride,
                pad,
            },
            needs,
            None,
        )
    }

    pub fn upsample_nearest_2x(&self) -> Var<S> {
        let xv = self.value();
        let (n, h, w, c) = nhwc(xv.shape());
        let mut out = vec![S::zero(); n * 4 * h * w * c];
        let (oh, ow) = (2 * h, 2 * w);
        for bi in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let src = &xv.data()[((bi * h + y) * w + x) * c..][..c];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let o = ((bi * oh + 2 * y + dy) * ow + 2 * x + dx) * c;
                            out[o..o + c].copy_from_slice(src);
                        }
                    }
                }
            }
        }
        let needs = self.tape.needs(self.idx);
        self.tape.push(
            Tensor::from_vec(&[n, oh, ow, c], out),
            Op::UpsampleNearest2x(self.idx),
            needs,
            None,
        )
    }

    /// Half-pixel bilinear resize over NHWC.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Var<S> {
        let xv = self.value();
        let (n, h, w, c) = nhwc(xv.shape());
        let mut out = vec![S::zero(); n * out_h * out_w * c];
        for bi in 0..n {
            for oy in 0..out_h {
                let (y0, y1, ty) = bilinear_axis(oy, out_h, h);
                for ox in 0..out_w {
                    let (x0, x1, tx) = bilinear_axis(ox, out_w, w);
                    let w00 = (1.0 - ty) * (1.0 - tx);
                    let w01 = (1.0 - ty) * tx;
                    let w10 = ty * (1.0 - tx);
                    let w11 = ty * tx;
                    let o = ((bi * out_h + oy) * out_w + ox) * c;
                    for ch in 0..c {
                        let v = xv.data()[((bi * h + y0) * w + x0) * c + ch].to_f64_() * w00
                            + xv.data()[((bi * h + y0) * w + x1) * c + ch].to_f64_() * w01
                            + xv.data()[((bi * h + y1) * w + x0) * c + ch].to_f64_() * w10
                            + xv.data()[((bi * h + y1) * w + x1) * c + ch].to_f64_() * w11;
                        out[o + ch] = S::from_f64(v);
                    }
                }
            }
        }
        let needs = self.tape.needs(self.idx);
        self.tape.push(
            Tensor::from_vec(&[n, out_h, out_w, c], out),
            Op::BilinearResize {
                x: self.idx,
                out_h,
                out_w,
            },
            needs,
            None,
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self) -> Var<S> {
        let xv = self.value();
        let c = *xv.shape().last().unwrap();
        let mut out = vec![S::zero(); xv.numel()];
        for (row, orow) in xv.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let m = row.iter().fold(S::neg_infinity(), |a, &b| if b > a { b } else { a });
            let mut z = S::zero();
            for i in 0..c {
                orow[i] = (row[i] - m).exp();
                z = z + orow[i];
            }
            for v in orow.iter_mut() {
                *v = *v / z;
            }
        }
        let needs = self.tape.needs(self.idx);
        self.tape.push(
            Tensor::from_vec(xv.shape(), out),
            Op::Softmax(self.idx),
            needs,
            None,
        )
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&self) -> Var<S> {
        let xv = self.value();
        let c = *xv.shape().last().unwrap();
        let mut out = vec![S::zero(); xv.numel()];
        for (row, orow) in xv.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let m = row.iter().fold(S::neg_infinity(), |a, &b| if b > a { b } else { a });
            let mut z = S::zero();
            for i in 0..c {
                z = z + (row[i] - m).exp();
            }
            let lz = z.ln() + m;
            for i in 0..c {
                orow[i] = row[i] - lz;
            }
        }
        let needs = self.tape.needs(self.idx);
        self.tape.push(
            Tensor::from_vec(xv.shape(), out),
            Op::LogSoftmax(self.idx),
            needs,
            None,
        )
    }

    /// Zero-mean unit-variance normalization over the last dimension.
    pub fn layer_norm(&self, eps: S) -> Var<S> {
        let xv = self.value();
        let c = *xv.shape().last().unwrap();
        let rows = xv.numel() / c;
        let mut out = vec![S::zero(); xv.numel()];
        let mut rstds = vec![S::zero(); rows];
        let cn = S::from_f64(c as f64);
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mut mean = S::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / cn;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / cn;
            let rstd = S::one() / (var + eps).sqrt();
            rstds[r] = rstd;
            for i in 0..c {
                out[r * c + i] = (row[i] - mean) * rstd;
            }
        }
        let needs = self.tape.needs(self.idx);
        self.tape.push(
            Tensor::from_vec(xv.shape(), out),
            Op::LayerNormCore { x: self.idx },
            needs,
            Some(rstds),
        )
    }

    /// NHWC group normalization; statistics over (H,W,C/groups) per sample
    /// and group. Affine is applied separately via `mul_last`/`add_last`.
    pub fn group_norm(&self, groups: usize, eps: S) -> Var<S> {
        let xv = self.value();
        let (n, h, w, c) = nhwc(xv.shape());
        assert_eq!(c % groups, 0, "channels {} not divisible by groups {}", c, groups);
        let cg = c / groups;
        let cnt = S::from_f64((h * w * cg) as f64);
        let mut out = vec![S::zero(); xv.numel()];
        let mut rstds = vec![S::zero(); n * groups];
        for bi in 0..n {
            for g in 0..groups {
                let mut mean = S::zero();
                for px in 0..h * w {
                    let o = (bi * h * w + px) * c + g * cg;
                    for i in 0..cg {
                        mean = mean + xv.data()[o + i];
                    }
                }
                mean = mean / cnt;
                let mut var = S::zero();
                for px in 0..h * w {
                    let o = (bi * h * w + px) * c + g * cg;
                    for i in 0..cg {
                        let d = xv.data()[o + i] - mean;
                        var = var + d * d;
                    }
                }
                var = var / cnt;
                let rstd = S::one() / (var + eps).sqrt();
                rstds[bi * groups + g] = rstd;
                for px in 0..h * w {
                    let o = (bi * h * w + px) * c + g * cg;
                    for i in 0..cg {
                        out[o + i] = (xv.data()[o + i] - mean) * rstd;
                    }
                }
            }
        }
        let needs = self.tape.needs(self.idx);
        self.tape.push(
            Tensor::from_vec(xv.shape(), out),
            Op::GroupNormCore {
                x: self.idx,
                groups,
            },
            needs,
            Some(rstds),
        )
    }

    pub fn silu(&self) -> Var<S> {
        let v = self.value().map(|x| x * sigmoid(x));
        let needs = self.tape.needs(self.idx);
        self.tape.push(v, Op::Silu(self.idx), needs, None)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Var<S> {
        let v = self.value().map(gelu_fwd);
        let needs = self.tape.needs(self.idx);
        self.tape.push(v, Op::Gelu(self.idx), needs, None)
    }

    pub fn sum(&self) -> Var<S> {
        let v = Tensor::scalar(self.value().sum());
        let needs = self.tape.needs(self.idx);
        self.tape.push(v, Op::Sum(self.idx), needs, None)
    }

    pub fn mean(&self) -> Var<S> {
        let v = Tensor::scalar(self.value().mean());
        let needs = self.tape.needs(self.idx);
        self.tape.push(v, Op::Mean(self.idx), needs, None)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<S> {
        let v = self.value().reshaped(shape);
        let needs = self.tape.needs(self.idx);
        self.tape.push(v, Op::Reshape(self.idx), needs, None)
    }

    pub fn permute(&self, axes: &[usize]) -> Var<S> {
        let xv = self.value();
        let v = permute_tensor(&xv, axes);
        let needs = self.tape.needs(self.idx);
        self.tape.push(
            v,
            Op::Permute {
                x: self.idx,
                axes: axes.to_vec(),
            },
            needs,
            None,
        )
    }

    /// Index-select along `axis`.
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Var<S> {
        let xv = self.value();
        let v = gather_tensor(&xv, axis, indices);
        let needs = self.tape.needs(self.idx);
        self.tape.push(
            v,
            Op::Gather {
                x: self.idx,
                axis,
                indices: Arc::new(indices.to_vec()),
            },
            needs,
            None,
        )
    }

    /// Per-row column pick: x[B,C] -> [B] with out[b] = x[b, idx[b]].
    pub fn row_select(&self, indices: &[usize]) -> Var<S> {
        let xv = self.value();
        assert_eq!(xv.shape().len(), 2, "row_select wants [B,C]");
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(indices.len(), b);
        let mut out = vec![S::zero(); b];
        for (bi, &ci) in indices.iter().enumerate() {
            assert!(ci < c, "row_select index {} out of {} classes", ci, c);
            out[bi] = xv.data()[bi * c + ci];
        }
        let needs = self.tape.needs(self.idx);
        self.tape.push(
            Tensor::from_vec(&[b], out),
            Op::RowSelect {
                x: self.idx,
                indices: Arc::new(indices.to_vec()),
            },
            needs,
            None,
        )
    }

    /// Contiguous block slice, one offset/size per axis.
    pub fn slice(&self, offset: &[usize], size: &[usize]) -> Var<S> {
        let xv = self.value();
        let v = slice_tensor(&xv, offset, size);
        let needs = self.tape.needs(self.idx);
        self.tape.push(
            v,
            Op::Slice {
                x: self.idx,
                offset: offset.to_vec(),
                size: size.to_vec(),
            },
            needs,
            None,
        )
    }

    /// Tile into a new leading batch axis: [R...] -> [n, R...].
    pub fn repeat0(&self, n: usize) -> Var<S> {
        let xv = self.value();
        let per = xv.numel();
        let mut out = Vec::with_capacity(n * per);
        for _ in 0..n {
            out.extend_from_slice(xv.data());
        }
        let mut oshape = vec![n];
        oshape.extend_from_slice(xv.shape());
        let needs = self.tape.needs(self.idx);
        self.tape.push(
            Tensor::from_vec(&oshape, out),
            Op::Repeat0 { x: self.idx, n },
            needs,
            None,
        )
    }

    /// Stack same-shaped vars along a new leading axis.
    pub fn concat0(vars: &[Var<S>]) -> Var<S> {
        assert!(!vars.is_empty(), "concat0 of nothing");
        let tape = vars[0].tape.clone();
        let shape0 = vars[0].value().shape().to_vec();
        let mut out = Vec::with_capacity(vars.len() * vars[0].value().numel());
        let mut needs = false;
        let mut xs = Vec::with_capacity(vars.len());
        for v in vars {
            vars[0].same_tape(v);
            let val = v.value();
            assert_eq!(val.shape(), &shape0[..], "concat0 shape mismatch");
            out.extend_from_slice(val.data());
            needs = needs || tape.needs(v.idx);
            xs.push(v.idx);
        }
        let mut oshape = vec![vars.len()];
        oshape.extend_from_slice(&shape0);
        tape.push(Tensor::from_vec(&oshape, out), Op::Concat0 { xs }, needs, None)
    }

    /// Reverse along the width axis of an NHWC tensor (horizontal flip).
    pub fn flip_w(&self) -> Var<S> {
        let (_, _, w, _) = nhwc(&self.value().shape().to_vec());
        let idx: Vec<usize> = (0..w).rev().collect();
        self.gather(2, &idx)
    }

    /// Backward pass from a scalar root. May be called more than once per
    /// tape (each call re-walks the graph).
    pub fn backward(&self) -> Grads<S> {
        let inner = self.tape.inner.borrow();
        assert_eq!(
            inner.nodes[self.idx].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; inner.nodes.len()];
        grads[self.idx] = Some(Tensor::scalar(S::one()));

        for i in (0..=self.idx).rev() {
            let node = &inner.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            backprop(&inner, i, &g, &mut grads);
        }
        Grads { grads }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    S::from_f64(0.5) * x * (S::one() + u.tanh())
}

fn nhwc(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NHWC, got {:?}", shape);
    (shape[0], shape[1], shape[2], shape[3])
}

fn bilinear_axis(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let f = s.floor();
    let t = s - f;
    let i0 = f.max(0.0).min((in_len - 1) as f64) as usize;
    let i1 = (f + 1.0).max(0.0).min((in_len - 1) as f64) as usize;
    (i0, i1, t)
}

fn im2col<S: Scalar>(
    x: &Tensor<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let (n, h, w, c) = nhwc(x.shape());
    let kdim = kh * kw * c;
    let mut col = vec![S::zero(); n * oh * ow * kdim];
    let xd = x.data();
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * kdim;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ix = ix as usize;
                        let src = ((bi * h + iy) * w + ix) * c;
                        let dst = row + (ky * kw + kx) * c;
                        col[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<S: Scalar>(
    dcol: &[S],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [S],
) {
    let kdim = kh * kw * c;
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * kdim;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ix = ix as usize;
                        let dst = ((bi * h + iy) * w + ix) * c;
                        let src = row + (ky * kw + kx) * c;
                        for i in 0..c {
                            dx[dst + i] = dx[dst + i] + dcol[src + i];
                        }
                    }
                }
            }
        }
    }
}

fn permute_tensor<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let shape = x.shape();
    assert_eq!(axes.len(), shape.len());
    let oshape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut istrides = vec![1usize; shape.len()];
    for i in (0..shape.len() - 1).rev() {
        istrides[i] = istrides[i + 1] * shape[i + 1];
    }
    let pstrides: Vec<usize> = axes.iter().map(|&a| istrides[a]).collect();
    let mut out = vec![S::zero(); x.numel()];
    let mut counter = vec![0usize; oshape.len()];
    let xd = x.data();
    for o in out.iter_mut() {
        let mut src = 0;
        for (d, &cnt) in counter.iter().enumerate() {
            src += cnt * pstrides[d];
        }
        *o = xd[src];
        for d in (0..counter.len()).rev() {
            counter[d] += 1;
            if counter[d] < oshape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Tensor::from_vec(&oshape, out)
}

fn gather_tensor<S: Scalar>(x: &Tensor<S>, axis: usize, indices: &[usize]) -> Tensor<S> {
    let shape = x.shape();
    assert!(axis < shape.len());
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let mut oshape = shape.to_vec();
    oshape[axis] = indices.len();
    let mut out = vec![S::zero(); outer * indices.len() * inner];
    let xd = x.data();
    for o in 0..outer {
        for (j, &i) in indices.iter().enumerate() {
            assert!(i < dim, "gather index {} out of axis dim {}", i, dim);
            let src = (o * dim + i) * inner;
            let dst = (o * indices.len() + j) * inner;
            out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
        }
    }
    Tensor::from_vec(&oshape, out)
}

fn slice_tensor<S: Scalar>(x: &Tensor<S>, offset: &[usize], size: &[usize]) -> Tensor<S> {
    let shape = x.shape();
    assert_eq!(offset.len(), shape.len());
    assert_eq!(size.len(), shape.len());
    for d in 0..shape.len() {
        assert!(offset[d] + size[d] <= shape[d], "slice out of bounds on axis {}", d);
    }
    let mut istrides = vec![1usize; shape.len()];
    for i in (0..shape.len() - 1).rev() {
        istrides[i] = istrides[i + 1] * shape[i + 1];
    }
    let numel: usize = size.iter().product();
    let mut out = vec![S::zero(); numel];
    let last = shape.len() - 1;
    let run = size[last];
    let mut counter = vec![0usize; shape.len() - 1];
    let xd = x.data();
    let mut dst = 0;
    loop {
        let mut src = offset[last];
        for d in 0..last {
            src += (offset[d] + counter[d]) * istrides[d];
        }
        out[dst..dst + run].copy_from_slice(&xd[src..src + run]);
        dst += run;
        if last == 0 {
            break;
        }
        let mut d = last - 1;
        loop {
            counter[d] += 1;
            if counter[d] < size[d] {
                break;
            }
            counter[d] = 0;
            if d == 0 {
                return Tensor::from_vec(size, out);
            }
            d -= 1;
        }
        if dst >= numel {
            break;
        }
    }
    Tensor::from_vec(size, out)
}

fn acc<S: Scalar>(slot: &mut Option<Tensor<S>>, add: Tensor<S>) {
    match slot {
        None => *slot = Some(add),
        Some(t) => {
            let d = t.data_mut();
            for (a, b) in d.iter_mut().zip(add.data().iter()) {
                *a = *a + *b;
            }
        }
    }
}

fn backprop<S: Scalar>(
    inner: &TapeInner<S>,
    i: usize,
    g: &Tensor<S>,
    grads: &mut Vec<Option<Tensor<S>>>,
) {
    let needs = |idx: usize| inner.nodes[idx].needs_grad;
    let val = |idx: usize| &inner.nodes[idx].value;
    match &inner.nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*a) {
                acc(&mut grads[*a], g.clone());
            }
            if needs(*b) {
                acc(&mut grads[*b], g.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                acc(&mut grads[*a], g.clone());
            }
            if needs(*b) {
                acc(&mut grads[*b], g.scale(-S::one()));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                acc(&mut grads[*a], g.mul_t(val(*b)));
            }
            if needs(*b) {
                acc(&mut grads[*b], g.mul_t(val(*a)));
            }
        }
        Op::Div(a, b) => {
            if needs(*a) {
                acc(&mut grads[*a], g.zip(val(*b), |gv, bv| gv / bv));
            }
            if needs(*b) {
                let av = val(*a);
                let bv = val(*b);
                let mut d = vec![S::zero(); g.numel()];
                for idx in 0..d.len() {
                    let b2 = bv.data()[idx] * bv.data()[idx];
                    d[idx] = -g.data()[idx] * av.data()[idx] / b2;
                }
                acc(&mut grads[*b], Tensor::from_vec(g.shape(), d));
            }
        }
        Op::AddScalar(a) => {
            if needs(*a) {
                acc(&mut grads[*a], g.clone());
            }
        }
        Op::MulScalar(a, c) => {
            if needs(*a) {
                acc(&mut grads[*a], g.scale(*c));
            }
        }
        Op::MulLast(a, b) => {
            let c = *val(*a).shape().last().unwrap();
            if needs(*a) {
                let gv = val(*b);
                let mut d = vec![S::zero(); g.numel()];
                for (grow, drow) in g.data().chunks_exact(c).zip(d.chunks_exact_mut(c)) {
                    for i2 in 0..c {
                        drow[i2] = grow[i2] * gv.data()[i2];
                    }
                }
                acc(&mut grads[*a], Tensor::from_vec(val(*a).shape(), d));
            }
            if needs(*b) {
                let xv = val(*a);
                let mut d = vec![S::zero(); c];
                for (grow, xrow) in g.data().chunks_exact(c).zip(xv.data().chunks_exact(c)) {
                    for i2 in 0..c {
                        d[i2] = d[i2] + grow[i2] * xrow[i2];
                    }
                }
                acc(&mut grads[*b], Tensor::from_vec(&[c], d));
            }
        }
        Op::AddLast(a, b) => {
            let c = *val(*a).shape().last().unwrap();
            if needs(*a) {
                acc(&mut grads[*a], g.clone());
            }
            if needs(*b) {
                let mut d = vec![S::zero(); c];
                for grow in g.data().chunks_exact(c) {
                    for i2 in 0..c {
                        d[i2] = d[i2] + grow[i2];
                    }
                }
                acc(&mut grads[*b], Tensor::from_vec(&[c], d));
            }
        }
        Op::AddChan(a, b) => {
            if needs(*a) {
                acc(&mut grads[*a], g.clone());
            }
            if needs(*b) {
                let (n, h, w, c) = nhwc(val(*a).shape());
                let mut d = vec![S::zero(); n * c];
                for bi in 0..n {
                    for px in 0..h * w {
                        let o = (bi * h * w + px) * c;
                        for i2 in 0..c {
                            d[bi * c + i2] = d[bi * c + i2] + g.data()[o + i2];
                        }
                    }
                }
                acc(&mut grads[*b], Tensor::from_vec(&[n, c], d));
            }
        }
        Op::Matmul { a, b } => {
            let av = val(*a);
            let bv = val(*b);
            let k = bv.shape()[0];
            let n = bv.shape()[1];
            let m = av.numel() / k;
            if needs(*a) {
                let mut da = vec![S::zero(); m * k];
                matmul_nt(g.data(), bv.data(), m, n, k, &mut da);
                acc(&mut grads[*a], Tensor::from_vec(av.shape(), da));
            }
            if needs(*b) {
                let mut db = vec![S::zero(); k * n];
                matmul_tn(av.data(), g.data(), k, m, n, &mut db);
                acc(&mut grads[*b], Tensor::from_vec(&[k, n], db));
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let av = val(*a);
            let bv = val(*b);
            let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = g.shape()[2];
            if needs(*a) {
                let mut da = vec![S::zero(); av.numel()];
                for bi in 0..bt {
                    let g_s = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let da_s = &mut da[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        // out = A·Bᵀ, B is [n,k]: dA = G·B
                        let b_s = &bv.data()[bi * n * k..(bi + 1) * n * k];
                        matmul(g_s, b_s, m, n, k, da_s);
                    } else {
                        let b_s = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        matmul_nt(g_s, b_s, m, n, k, da_s);
                    }
                }
                acc(&mut grads[*a], Tensor::from_vec(av.shape(), da));
            }
            if needs(*b) {
                let mut db = vec![S::zero(); bv.numel()];
                for bi in 0..bt {
                    let g_s = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let a_s = &av.data()[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        // dB = Gᵀ·A, shape [n,k]
                        let db_s = &mut db[bi * n * k..(bi + 1) * n * k];
                        matmul_tn(g_s, a_s, n, m, k, db_s);
                    } else {
                        let db_s = &mut db[bi * k * n..(bi + 1) * k * n];
                        matmul_tn(a_s, g_s, k, m, n, db_s);
                    }
                }
                acc(&mut grads[*b], Tensor::from_vec(bv.shape(), db));
            }
        }
        Op::Conv2d {
            x,
            w,
            kh,
            kw,
            stride,
            pad,
        } => {
            let xv = val(*x);
            let wv = val(*w);
            let (n, h, wd, cin) = nhwc(xv.shape());
            let cout = wv.shape()[3];
            let (oh, ow) = (g.shape()[1], g.shape()[2]);
            let rows = n * oh * ow;
            let kdim = kh * kw * cin;
            // im2col is recomputed here rather than cached on the node;
            // it is a memory-bound copy, cheap next to the gemms.
            if needs(*w) {
                let col = im2col(xv, *kh, *kw, *stride, *pad, oh, ow);
                let mut dw = vec![S::zero(); kdim * cout];
                matmul_tn(&col, g.data(), kdim, rows, cout, &mut dw);
                acc(&mut grads[*w], Tensor::from_vec(wv.shape(), dw));
            }
            if needs(*x) {
                let mut dcol = vec![S::zero(); rows * kdim];
                matmul_nt(g.data(), wv.data(), rows, cout, kdim, &mut dcol);
                let mut dx = vec![S::zero(); xv.numel()];
                col2im_add(&dcol, n, h, wd, cin, *kh, *kw, *stride, *pad, oh, ow, &mut dx);
                acc(&mut grads[*x], Tensor::from_vec(xv.shape(), dx));
            }
        }
        Op::UpsampleNearest2x(x) => {
            if needs(*x) {
                let xv = val(*x);
                let (n, h, w, c) = nhwc(xv.shape());
                let ow = 2 * w;
                let mut dx = vec![S::zero(); xv.numel()];
                for bi in 0..n {
                    for y in 0..h {
                        for xw in 0..w {
                            let dst = ((bi * h + y) * w + xw) * c;
                            for dy in 0..2 {
                                for dxp in 0..2 {
                                    let src = ((bi * 2 * h + 2 * y + dy) * ow + 2 * xw + dxp) * c;
                                    for i2 in 0..c {
                                        dx[dst + i2] = dx[dst + i2] + g.data()[src + i2];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(&mut grads[*x], Tensor::from_vec(xv.shape(), dx));
            }
        }
        Op::BilinearResize { x, out_h, out_w } => {
            if needs(*x) {
                let xv = val(*x);
                let (n, h, w, c) = nhwc(xv.shape());
                let mut dx = vec![S::zero(); xv.numel()];
                for bi in 0..n {
                    for oy in 0..*out_h {
                        let (y0, y1, ty) = bilinear_axis(oy, *out_h, h);
                        for ox in 0..*out_w {
                            let (x0, x1, tx) = bilinear_axis(ox, *out_w, w);
                            let w00 = S::from_f64((1.0 - ty) * (1.0 - tx));
                            let w01 = S::from_f64((1.0 - ty) * tx);
                            let w10 = S::from_f64(ty * (1.0 - tx));
                            let w11 = S::from_f64(ty * tx);
                            let o = ((bi * out_h + oy) * out_w + ox) * c;
                            for ch in 0..c {
                                let gv = g.data()[o + ch];
                                let d00 = ((bi * h + y0) * w + x0) * c + ch;
                                let d01 = ((bi * h + y0) * w + x1) * c + ch;
                                let d10 = ((bi * h + y1) * w + x0) * c + ch;
                                let d11 = ((bi * h + y1) * w + x1) * c + ch;
                                dx[d00] = dx[d00] + gv * w00;
                                dx[d01] = dx[d01] + gv * w01;
                                dx[d10] = dx[d10] + gv * w10;
                                dx[d11] = dx[d11] + gv * w11;
                            }
                        }
                    }
                }
                acc(&mut grads[*x], Tensor::from_vec(xv.shape(), dx));
            }
        }
        Op::Softmax(x) => {
            if needs(*x) {
                let y = &inner.nodes[i].value;
                let c = *y.shape().last().unwrap();
                let mut dx = vec![S::zero(); y.numel()];
                for ((yrow, grow), drow) in y
                    .data()
                    .chunks_exact(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    let mut dot = S::zero();
                    for i2 in 0..c {
                        dot = dot + yrow[i2] * grow[i2];
                    }
                    for i2 in 0..c {
                        drow[i2] = yrow[i2] * (grow[i2] - dot);
                    }
                }
                acc(&mut grads[*x], Tensor::from_vec(y.shape(), dx));
            }
        }
        Op::LogSoftmax(x) => {
            if needs(*x) {
                let y = &inner.nodes[i].value;
                let c = *y.shape().last().unwrap();
                let mut dx = vec![S::zero(); y.numel()];
                for ((yrow, grow), drow) in y
                    .data()
                    .chunks_exact(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    let mut gsum = S::zero();
                    for i2 in 0..c {
                        gsum = gsum + grow[i2];
                    }
                    for i2 in 0..c {
                        drow[i2] = grow[i2] - yrow[i2].exp() * gsum;
                    }
                }
                acc(&mut grads[*x], Tensor::from_vec(y.shape(), dx));
            }
        }
        Op::LayerNormCore { x } => {
            if needs(*x) {
                let y = &inner.nodes[i].value;
                let rstds = inner.nodes[i].aux.as_ref().unwrap();
                let c = *y.shape().last().unwrap();
                let cn = S::from_f64(c as f64);
                let mut dx = vec![S::zero(); y.numel()];
                for (r, ((yrow, grow), drow)) in y
                    .data()
                    .chunks_exact(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                    .enumerate()
                {
                    let mut gmean = S::zero();
                    let mut gymean = S::zero();
                    for i2 in 0..c {
                        gmean = gmean + grow[i2];
                        gymean = gymean + grow[i2] * yrow[i2];
                    }
                    gmean = gmean / cn;
                    gymean = gymean / cn;
                    let rstd = rstds[r];
                    for i2 in 0..c {
                        drow[i2] = rstd * (grow[i2] - gmean - yrow[i2] * gymean);
                    }
                }
                acc(&mut grads[*x], Tensor::from_vec(y.shape(), dx));
            }
        }
        Op::GroupNormCore { x, groups } => {
            if needs(*x) {
                let y = &inner.nodes[i].value;
                let rstds = inner.nodes[i].aux.as_ref().unwrap();
                let (n, h, w, c) = nhwc(y.shape());
                let cg = c / groups;
                let cnt = S::from_f64((h * w * cg) as f64);
                let mut dx = vec![S::zero(); y.numel()];
                for bi in 0..n {
                    for gidx in 0..*groups {
                        let mut gmean = S::zero();
                        let mut gymean = S::zero();
                        for px in 0..h * w {
                            let o = (bi * h * w + px) * c + gidx * cg;
                            for i2 in 0..cg {
                                gmean = gmean + g.data()[o + i2];
                                gymean = gymean + g.data()[o + i2] * y.data()[o + i2];
                            }
                        }
                        gmean = gmean / cnt;
                        gymean = gymean / cnt;
                        let rstd = rstds[bi * groups + gidx];
                        for px in 0..h * w {
                            let o = (bi * h * w + px) * c + gidx * cg;
                            for i2 in 0..cg {
                                dx[o + i2] =
                                    rstd * (g.data()[o + i2] - gmean - y.data()[o + i2] * gymean);
                            }
                        }
                    }
                }
                acc(&mut grads[*x], Tensor::from_vec(y.shape(), dx));
            }
        }
        Op::Silu(x) => {
            if needs(*x) {
                let xv = val(*x);
                let d = xv.zip(g, |xi, gi| {
                    let s = sigmoid(xi);
                    gi * s * (S::one() + xi * (S::one() - s))
                });
                acc(&mut grads[*x], d);
            }
        }
        Op::Gelu(x) => {
            if needs(*x) {
                let xv = val(*x);
                let c = S::from_f64(0.7978845608028654);
                let a = S::from_f64(0.044715);
                let half = S::from_f64(0.5);
                let three = S::from_f64(3.0);
                let d = xv.zip(g, |xi, gi| {
                    let u = c * (xi + a * xi * xi * xi);
                    let t = u.tanh();
                    let sech2 = S::one() - t * t;
                    let du = c * (S::one() + three * a * xi * xi);
                    gi * (half * (S::one() + t) + half * xi * sech2 * du)
                });
                acc(&mut grads[*x], d);
            }
        }
        Op::Sum(x) => {
            if needs(*x) {
                let xv = val(*x);
                acc(&mut grads[*x], Tensor::full(xv.shape(), g.item()));
            }
        }
        Op::Mean(x) => {
            if needs(*x) {
                let xv = val(*x);
                let c = g.item() / S::from_f64(xv.numel() as f64);
                acc(&mut grads[*x], Tensor::full(xv.shape(), c));
            }
        }
        Op::Reshape(x) => {
            if needs(*x) {
                let xv = val(*x);
                acc(&mut grads[*x], g.reshaped(xv.shape()));
            }
        }
        Op::Permute { x, axes } => {
            if needs(*x) {
                let mut inv = vec![0usize; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inv[a] = d;
                }
                acc(&mut grads[*x], permute_tensor(g, &inv));
            }
        }
        Op::Gather { x, axis, indices } => {
            if needs(*x) {
                let xv = val(*x);
                let shape = xv.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner_sz: usize = shape[*axis + 1..].iter().product();
                let dim = shape[*axis];
                let mut dx = vec![S::zero(); xv.numel()];
                for o in 0..outer {
                    for (j, &isel) in indices.iter().enumerate() {
                        let src = (o * indices.len() + j) * inner_sz;
                        let dst = (o * dim + isel) * inner_sz;
                        for i2 in 0..inner_sz {
                            dx[dst + i2] = dx[dst + i2] + g.data()[src + i2];
                        }
                    }
                }
                acc(&mut grads[*x], Tensor::from_vec(shape, dx));
            }
        }
        Op::RowSelect { x, indices } => {
            if needs(*x) {
                let xv = val(*x);
                let c = xv.shape()[1];
                let mut dx = vec![S::zero(); xv.numel()];
                for (bi, &ci) in indices.iter().enumerate() {
                    dx[bi * c + ci] = dx[bi * c + ci] + g.data()[bi];
                }
                acc(&mut grads[*x], Tensor::from_vec(xv.shape(), dx));
            }
        }
        Op::Slice { x, offset, size } => {
            if needs(*x) {
                let xv = val(*x);
                let shape = xv.shape();
                let mut istrides = vec![1usize; shape.len()];
                for i2 in (0..shape.len() - 1).rev() {
                    istrides[i2] = istrides[i2 + 1] * shape[i2 + 1];
                }
                let mut dx = vec![S::zero(); xv.numel()];
                let last = shape.len() - 1;
                let run = size[last];
                let total: usize = size.iter().product();
                let mut counter = vec![0usize; last];
                let mut src = 0;
                'outer: loop {
                    let mut dst = offset[last];
                    for d in 0..last {
                        dst += (offset[d] + counter[d]) * istrides[d];
                    }
                    for i2 in 0..run {
                        dx[dst + i2] = dx[dst + i2] + g.data()[src + i2];
                    }
                    src += run;
                    if src >= total || last == 0 {
                        break;
                    }
                    let mut d = last - 1;
                    loop {
                        counter[d] += 1;
                        if counter[d] < size[d] {
                            break;
                        }
                        counter[d] = 0;
                        if d == 0 {
                            break 'outer;
                        }
                        d -= 1;
                    }
                }
                acc(&mut grads[*x], Tensor::from_vec(shape, dx));
            }
        }
        Op::Repeat0 { x, n } => {
            if needs(*x) {
                let xv = val(*x);
                let per = xv.numel();
                let mut dx = vec![S::zero(); per];
                for r in 0..*n {
                    for i2 in 0..per {
                        dx[i2] = dx[i2] + g.data()[r * per + i2];
                    }
                }
                acc(&mut grads[*x], Tensor::from_vec(xv.shape(), dx));
            }
        }
        Op::Concat0 { xs } => {
            let per = val(xs[0]).numel();
            for (j, &xi) in xs.iter().enumerate() {
                if needs(xi) {
                    let slice = g.data()[j * per..(j + 1) * per].to_vec();
                    acc(&mut grads[xi], Tensor::from_vec(val(xi).shape(), slice));
                }
            }
        }
    }
}

/// Value-level half-pixel bilinear resize over NHWC (shared with the
/// differentiable op; handy for masks and augmentation outside a tape).
pub fn bilinear_resize_tensor<S: Scalar>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Tensor<S> {
    let tape = Tape::new();
    tape.set_nan_guard(false);
    tape.constant(x.clone()).bilinear_resize(out_h, out_w).value()
}

/// Central-difference gradient estimate of a scalar function, the
/// independent oracle for every adjoint in this module.
pub fn finite_diff<S: Scalar>(
    f: &mut dyn FnMut(&Tensor<S>) -> S,
    x: &Tensor<S>,
    h: S,
) -> Tensor<S> {
    let mut grad = vec![S::zero(); x.numel()];
    let two_h = h + h;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] = x.data()[i] + h;
        let fp = f(&xp);
        let mut xm = x.clone();
        xm.data_mut()[i] = x.data()[i] - h;
        let fm = f(&xm);
        grad[i] = (fp - fm) / two_h;
    }
    Tensor::from_vec(x.shape(), grad)
}

/// Max over coordinates of |a-n| / (|a| + |n| + floor). The floor keeps
/// near-zero coordinates from dominating.
pub fn max_rel_err<S: Scalar>(analytic: &Tensor<S>, numeric: &Tensor<S>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data().iter()) {
        let a = a.to_f64_();
        let n = n.to_f64_();
        let rel = (a - n).abs() / (a.abs() + n.abs() + floor);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
