//! Shared network building blocks: a named parameter registry with freeze
//! flags, weight init, and the layer types used by the denoiser and the
//! classifier.

use crate::autograd::{Tape, Var};
use crate::rng::{normal_tensor, Stream};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Index of a registered parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(usize);

/// Ordered, named parameter tensors plus per-tensor trainability flags.
/// Registration order is the canonical checkpoint order.
pub struct ParamSet<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    trainable: Vec<bool>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> PId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {:?}",
            name
        );
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(true);
        PId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: PId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_by_index(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub fn set_by_index(&mut self, i: usize, t: Tensor<S>) {
        assert_eq!(self.tensors[i].shape(), t.shape(), "parameter shape change");
        self.tensors[i] = t;
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    /// Set trainability from a name predicate; returns how many tensors
    /// remain trainable.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for i in 0..self.names.len() {
            self.trainable[i] = pred(&self.names[i]);
            if self.trainable[i] {
                n += 1;
            }
        }
        n
    }

    /// Bind every parameter onto a tape: trainable ones as leaves,
    /// frozen ones as constants (excluded from backward).
    pub fn bind(&self, tape: &Tape<S>) -> Bound<S> {
        let vars = self
            .tensors
            .iter()
            .zip(self.trainable.iter())
            .map(|(t, &tr)| {
                if tr {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Bind everything as constants (inference / frozen guidance).
    pub fn bind_frozen(&self, tape: &Tape<S>) -> Bound<S> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    pub fn tensor_hashes(&self) -> Vec<(String, u64)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(|t| t.content_hash()))
            .collect()
    }
}

/// Tape-bound parameter vars, aligned with the registry order.
pub struct Bound<S: Scalar> {
    vars: Vec<Var<S>>,
}

impl<S: Scalar> Bound<S> {
    pub fn var(&self, id: PId) -> &Var<S> {
        &self.vars[id.0]
    }

    pub fn var_by_index(&self, i: usize) -> &Var<S> {
        &self.vars[i]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

pub fn init_normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut Stream) -> Tensor<S> {
    normal_tensor::<S>(shape, rng).scale(S::from_f64(std))
}

/// He-style init for conv/linear feeding SiLU.
pub fn init_he<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Stream) -> Tensor<S> {
    init_normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub struct Linear {
    pub w: PId,
    pub b: PId,
}

impl Linear {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut Stream,
    ) -> Self {
        let w = ps.register(format!("{name}.weight"), init_normal(&[d_in, d_out], std, rng));
        let b = ps.register(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn forward<S: Scalar>(&self, bound: &Bound<S>, x: &Var<S>) -> Var<S> {
        x.matmul(bound.var(self.w)).add_last(bound.var(self.b))
    }
}

pub struct Conv2d {
    pub w: PId,
    pub b: PId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Stream,
    ) -> Self {
        let w = ps.register(
            format!("{name}.weight"),
            init_he(&[k, k, c_in, c_out], k * k * c_in, rng),
        );
        let b = ps.register(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv2d {
            w,
            b,
            stride,
            pad,
        }
    }

    /// The output conv of the denoiser starts at exactly zero so a fresh
    /// model predicts eps = 0.
    pub fn new_zeros<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.register(format!("{name}.weight"), Tensor::zeros(&[k, k, c_in, c_out]));
        let b = ps.register(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv2d {
            w,
            b,
            stride,
            pad,
        }
    }

    pub fn forward<S: Scalar>(&self, bound: &Bound<S>, x: &Var<S>) -> Var<S> {
        x.conv2d(bound.var(self.w), self.stride, self.pad)
            .add_last(bound.var(self.b))
    }
}

/// Affine norm parameters, used for both layer norm and group norm.
pub struct Norm {
    pub g: PId,
    pub b: PId,
}

impl Norm {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, dim: usize) -> Self {
        let g = ps.register(format!("{name}.gamma"), Tensor::full(&[dim], S::one()));
        let b = ps.register(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Norm { g, b }
    }

    pub fn layer_norm<S: Scalar>(&self, bound: &Bound<S>, x: &Var<S>) -> Var<S> {
        x.layer_norm(S::from_f64(NORM_EPS))
            .mul_last(bound.var(self.g))
            .add_last(bound.var(self.b))
    }

    pub fn group_norm<S: Scalar>(&self, bound: &Bound<S>, x: &Var<S>, groups: usize) -> Var<S> {
        x.group_norm(groups, S::from_f64(NORM_EPS))
            .mul_last(bound.var(self.g))
            .add_last(bound.var(self.b))
    }
}

/// U-Net residual block: GN → SiLU → conv, timestep bias, GN → SiLU → conv,
/// plus a 1x1 skip projection when the channel width changes.
pub struct ResBlock {
    pub gn1: Norm,
    pub conv1: Conv2d,
    pub temb: Linear,
    pub gn2: Norm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub groups: usize,
}

impl ResBlock {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        temb_dim: usize,
        groups: usize,
        rng: &mut Stream,
    ) -> Self {
        let gn1 = Norm::new(ps, &format!("{name}.norm1"), c_in);
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng);
        let temb = Linear::new(
            ps,
            &format!("{name}.temb_proj"),
            temb_dim,
            c_out,
            (1.0 / temb_dim as f64).sqrt(),
            rng,
        );
        let gn2 = Norm::new(ps, &format!("{name}.norm2"), c_out);
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng);
        let skip = if c_in != c_out {
            Some(Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng))
        } else {
            None
        };
        ResBlock {
            gn1,
            conv1,
            temb,
            gn2,
            conv2,
            skip,
            groups,
        }
    }

    pub fn forward<S: Scalar>(&self, bound: &Bound<S>, x: &Var<S>, temb: &Var<S>) -> Var<S> {
        let h = self.gn1.group_norm(bound, x, self.groups).silu();
        let h = self.conv1.forward(bound, &h);
        let tb = self.temb.forward(bound, temb);
        let h = h.add_chan(&tb);
        let h = self.gn2.group_norm(bound, &h, self.groups).silu();
        let h = self.conv2.forward(bound, &h);
        let sk = match &self.skip {
            Some(conv) => conv.forward(bound, x),
            None => x.clone(),
        };
        h.add(&sk)
    }
}

/// Multi-head attention over token stacks. Returns the output and the
/// post-softmax attention weights `[B*heads, Tq, Tk]`.
pub fn attention<S: Scalar>(
    q: &Var<S>,
    k: &Var<S>,
    v: &Var<S>,
    heads: usize,
) -> (Var<S>, Var<S>) {
    let qs = q.shape();
    let (b, tq, c) = (qs[0], qs[1], qs[2]);
    let tk = k.shape()[1];
    assert_eq!(c % heads, 0);
    let dh = c / heads;
    let split = |x: &Var<S>, t: usize| {
        x.reshape(&[b, t, heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * heads, t, dh])
    };
    let qh = split(q, tq);
    let kh = split(k, tk);
    let vh = split(v, tk);
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let scores = qh.bmm(&kh, true).scale(scale);
    let attn = scores.softmax();
    let out = attn
        .bmm(&vh, false)
        .reshape(&[b, heads, tq, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, tq, c]);
    (out, attn)
}

/// Pre-LN transformer block with a GELU MLP.
pub struct TransformerBlock {
    pub ln1: Norm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut Stream,
    ) -> Self {
        let std = 0.02;
        TransformerBlock {
            ln1: Norm::new(ps, &format!("{name}.ln1"), dim),
            wq: Linear::new(ps, &format!("{name}.wq"), dim, dim, std, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), dim, dim, std, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), dim, dim, std, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), dim, dim, std, rng),
            ln2: Norm::new(ps, &format!("{name}.ln2"), dim),
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, dim * mlp_ratio, std, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), dim * mlp_ratio, dim, std, rng),
            heads,
        }
    }

    pub fn forward<S: Scalar>(&self, bound: &Bound<S>, x: &Var<S>) -> Var<S> {
        let h = self.ln1.layer_norm(bound, x);
        let q = self.wq.forward(bound, &h);
        let k = self.wk.forward(bound, &h);
        let v = self.wv.forward(bound, &h);
        let (att, _) = attention(&q, &k, &v, self.heads);
        let x = x.add(&self.wo.forward(bound, &att));
        let h = self.ln2.layer_norm(bound, &x);
        let h = self.fc2.forward(bound, &self.fc1.forward(bound, &h).gelu());
        x.add(&h)
    }
}

/// Sinusoidal timestep embedding `[B, dim]`: first half sin, second half
/// cos, with log-spaced frequencies.
pub fn sinusoidal_embedding<S: Scalar>(ts: &[usize], dim: usize) -> Tensor<S> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000.0f64).ln() * i as f64 / (half - 1) as f64).exp();
            data.push(S::from_f64((t as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000.0f64).ln() * i as f64 / (half - 1) as f64).exp();
            data.push(S::from_f64((t as f64 * freq).cos()));
        }
    }
    Tensor::from_vec(&[ts.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn bind_respects_freeze_flags() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = substream(1, "init");
        let a = ps.register("backbone.w", init_normal(&[4, 4], 0.1, &mut rng));
        let b = ps.register("head.w", init_normal(&[4, 2], 0.1, &mut rng));
        ps.set_trainable_where(|n| n.starts_with("head."));
        let tape = Tape::new();
        let bound = ps.bind(&tape);
        let x = tape.constant(Tensor::full(&[1, 4], 1.0f32));
        let loss = x
            .matmul(bound.var(a))
            .matmul(bound.var(b))
            .mul(&x.matmul(bound.var(a)).matmul(bound.var(b)))
            .sum();
        let grads = loss.backward();
        assert!(!grads.has(bound.var(a)), "frozen backbone gets no grad");
        assert!(grads.has(bound.var(b)));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let tape = Tape::new();
        let mut rng = substream(2, "attn");
        let q = tape.leaf(normal_tensor::<f32>(&[2, 3, 8], &mut rng));
        let k = tape.leaf(normal_tensor::<f32>(&[2, 5, 8], &mut rng));
        let v = tape.leaf(normal_tensor::<f32>(&[2, 5, 8], &mut rng));
        let (out, attn) = attention(&q, &k, &v, 2);
        assert_eq!(out.value().shape(), &[2, 3, 8]);
        assert_eq!(attn.value().shape(), &[4, 3, 5]);
        for row in attn.value().data().chunks_exact(5) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn sinusoidal_embedding_shape_and_range() {
        let e = sinusoidal_embedding::<f32>(&[1, 100, 200], 64);
        assert_eq!(e.shape(), &[3, 64]);
        for &v in e.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
        let e1 = sinusoidal_embedding::<f32>(&[5], 64);
        let e2 = sinusoidal_embedding::<f32>(&[6], 64);
        assert_ne!(e1.data(), e2.data());
    }
}
