//! Reverse-mode differentiation over a recorded tape of array operations.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in execution order, so the node vector is already a topological order and
//! [`Graph::backward`] walks it once in reverse.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::{broadcast_expand, broadcast_reduce, broadcast_shapes, numel, strides, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Softplus,
    Mish,
    Relu,
    Silu,
    Sigmoid,
    Sqrt,
    Square,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    AddScalar {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Upsample2 {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    BroadcastTo {
        x: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Neg => "neg",
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Sin => "sin",
                UnaryKind::Cos => "cos",
                UnaryKind::Tanh => "tanh",
                UnaryKind::Softplus => "softplus",
                UnaryKind::Mish => "mish",
                UnaryKind::Relu => "relu",
                UnaryKind::Silu => "silu",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Square => "square",
            },
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Conv1d { .. } => "conv1d",
            Op::Upsample2 { .. } => "upsample_linear2",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll { .. } => "sum",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::IndexSelect { .. } => "index_select",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::BroadcastTo { .. } => "broadcast_to",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Grads {
    /// Gradient with respect to a graph node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&n| self.nodes[n].as_ref())
    }

    /// One gradient per store entry, zero-filled for parameters that did not participate.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        (0..store.len())
            .map(|i| {
                let id = store.id_at(i);
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

/// A tape of differentiable operations.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    grad_enabled: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph that still tracks parameter gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
            grad_enabled: true,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode graph; dropout masks come from a generator seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    /// Evaluation-mode graph with no gradient tracking.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Each parameter enters the tape once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, !store.is_frozen());
        self.params.insert(id, v);
        v
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb)
            .unwrap_or_else(|| panic!("cannot broadcast {sa:?} with {sb:?} in {kind:?}"));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f64> = if sa == out_shape && sb == out_shape {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if sa == out_shape && bv.len() == 1 {
            av.iter().map(|&x| f(x, bv[0])).collect()
        } else {
            let ea = expand_to(self.value(a), &out_shape);
            let eb = expand_to(self.value(b), &out_shape);
            ea.iter().zip(eb.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_parts(out_shape, data),
            Op::Binary { kind, a, b },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f = |v: f64| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Sin => v.sin(),
            UnaryKind::Cos => v.cos(),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Softplus => softplus(v),
            UnaryKind::Mish => v * softplus(v).tanh(),
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Silu => v * sigmoid(v),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Square => v * v,
        };
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, Op::Unary { kind, x }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sin, x)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Cos, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }
    /// x·tanh(softplus(x))
    pub fn mish(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Mish, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Silu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar { x }, rg)
    }

    /// Inverted dropout: identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let n = numel(&shape);
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let m = self.constant(Tensor::from_parts(shape, mask));
        self.mul(x, m)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sb.len() == 2, "matmul rhs must be 2-D, got {sb:?}");
        let k = *sa.last().expect("matmul lhs must be at least 1-D");
        assert_eq!(k, sb[0], "matmul inner dimension mismatch {sa:?} x {sb:?}");
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            0.0,
            &mut out,
            n,
            1,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, rg)
    }

    /// Batched product `a[bt, m, k] · b[bt, k, n]`, or `· b[bt, n, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(
            sa.len() == 3 && sb.len() == 3,
            "bmm expects 3-D operands, got {sa:?} and {sb:?}"
        );
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        assert_eq!(bt, sb[0], "bmm batch mismatch");
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        assert_eq!(
            k, kb,
            "bmm inner dimension mismatch {sa:?} x {sb:?} (trans_b={trans_b})"
        );
        let mut out = vec![0.0; bt * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                1.0,
                &av[i * m * k..],
                k,
                1,
                &bv[i * k * n..],
                rsb,
                csb,
                0.0,
                &mut out[i * m * n..],
                n,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_parts(vec![bt, m, n], out),
            Op::Bmm { a, b, trans_b },
            rg,
        )
    }

    // ---- normalization ----------------------------------------------------

    /// Normalizes over the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm needs at least one axis");
        let rows = numel(&shape) / d;
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let out = Tensor::from_parts(shape, xhat.clone());
        let rg = self.rg(x);
        let (xhat, rstd) = if rg {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(out, Op::LayerNorm { x, xhat, rstd }, rg)
    }

    /// Group normalization of `x[n, c, l]` over `groups` channel groups (no affine).
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(
            s.len() == 3 && s[1] % groups == 0,
            "group_norm expects [n, c, l] with c divisible by groups"
        );
        let flat = self.reshape(x, &[s[0], groups, s[1] / groups * s[2]]);
        let normed = self.layer_norm(flat);
        self.reshape(normed, &s)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("softmax needs at least one axis");
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (orow, row) in out.chunks_mut(d).zip(xv.chunks(d)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x }, rg)
    }

    // ---- convolution / resampling ----------------------------------------

    /// 1-D convolution of `x[n, c_in, l]` with `w[c_out, c_in, k]` and optional `b[c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(
            sx.len() == 3 && sw.len() == 3,
            "conv1d expects [n,c,l] input and [co,ci,k] weight"
        );
        let (n, ci, l) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        assert_eq!(sw[1], ci, "conv1d channel mismatch");
        assert!(stride >= 1 && l + 2 * pad >= k, "conv1d geometry invalid");
        let lo = (l + 2 * pad - k) / stride + 1;
        let ck = ci * k;
        let xv = self.value(x).data();
        let mut cols = vec![0.0; n * ck * lo];
        for bi in 0..n {
            let xb = &xv[bi * ci * l..(bi + 1) * ci * l];
            let cb = &mut cols[bi * ck * lo..(bi + 1) * ck * lo];
            for c in 0..ci {
                for kk in 0..k {
                    let row = &mut cb[(c * k + kk) * lo..(c * k + kk + 1) * lo];
                    for (t, slot) in row.iter_mut().enumerate() {
                        let pos = (t * stride + kk) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l {
                            *slot = xb[c * l + pos as usize];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; n * co * lo];
        let wv = self.value(w).data();
        for bi in 0..n {
            gemm(
                co,
                ck,
                lo,
                1.0,
                wv,
                ck,
                1,
                &cols[bi * ck * lo..],
                lo,
                1,
                0.0,
                &mut out[bi * co * lo..],
                lo,
                1,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), co, "conv1d bias length mismatch");
            for bi in 0..n {
                for c in 0..co {
                    for o in &mut out[(bi * co + c) * lo..(bi * co + c + 1) * lo] {
                        *o += bv[c];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let cols = if rg { cols } else { Vec::new() };
        self.push(
            Tensor::from_parts(vec![n, co, lo], out),
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    /// Linear interpolation ×2 along the last axis (half-pixel centers, edge clamped).
    pub fn upsample_linear2(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let l = *shape.last().expect("upsample needs an axis");
        let rows = numel(&shape) / l;
        let xv = self.value(x).data();
        let taps = upsample_taps(l);
        let mut out = vec![0.0; rows * 2 * l];
        for r in 0..rows {
            let src = &xv[r * l..(r + 1) * l];
            for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
                out[r * 2 * l + j] = (1.0 - lam) * src[i0] + lam * src[i1];
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = 2 * l;
        let rg = self.rg(x);
        self.push(Tensor::from_parts(oshape, out), Op::Upsample2 { x }, rg)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(
            axis < shape.len(),
            "sum_axis: axis {axis} out of range for {shape:?}"
        );
        let (outer, dim, inner) = split3(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &xv[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(oshape, out), Op::SumAxis { x, axis }, rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let dim = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / dim)
    }

    // ---- structure --------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat shape mismatch {s:?} vs {first:?}"
                );
            }
            total += s[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = total;
        let (outer, _, inner) = split3(&oshape, axis);
        let mut out = Vec::with_capacity(numel(&oshape));
        for o in 0..outer {
            for &p in parts {
                let dim = self.shape(p)[axis];
                out.extend_from_slice(
                    &self.value(p).data()[o * dim * inner..(o + 1) * dim * inner],
                );
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(oshape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(
            start <= end && end <= shape[axis],
            "slice {start}..{end} out of range for {shape:?}"
        );
        let (outer, dim, inner) = split3(&shape, axis);
        let xv = self.value(x).data();
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * dim + start) * inner..(o * dim + end) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = width;
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(oshape, out),
            Op::Slice { x, axis, start },
            rg,
        )
    }

    /// Gathers entries along `axis` by index (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, index: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, dim, inner) = split3(&shape, axis);
        assert!(
            index.iter().all(|&i| i < dim),
            "index_select index out of range"
        );
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                out.extend_from_slice(&xv[(o * dim + i) * inner..(o * dim + i + 1) * inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = index.len();
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(oshape, out),
            Op::IndexSelect {
                x,
                axis,
                index: index.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone();
        let out = t.reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(x);
        self.push(out, Op::Reshape { x }, rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(perm.len(), shape.len(), "permute rank mismatch");
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let map = permute_index_map(&shape, perm);
        let xv = self.value(x).data();
        let out: Vec<f64> = map.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(oshape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        let s = self.shape(x).to_vec();
        let bs = broadcast_shapes(&s, shape);
        assert_eq!(
            bs.as_deref(),
            Some(shape),
            "cannot broadcast {s:?} to {shape:?}"
        );
        let out = broadcast_expand(self.value(x).data(), &s, shape);
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::BroadcastTo { x },
            rg,
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Consumes the tape and returns d`loss`/d(node) for every node that needs it.
    pub fn backward(self, loss: Var) -> Result<Grads> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if numel(&loss_shape) != 1 {
            return Err(contract(format!(
                "backward requires a scalar loss, got shape {loss_shape:?}"
            )));
        }
        for node in &self.nodes[..=loss.0] {
            if !node.value.is_finite() {
                return Err(Error::Numeric {
                    op: node.op.name().into(),
                });
            }
        }
        let Graph { nodes, params, .. } = self;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(loss_shape, vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let contributions = backward_op(&nodes, i, &gout);
            for (v, g) in contributions {
                if !nodes[v.0].requires_grad {
                    continue;
                }
                if !g.is_finite() {
                    return Err(Error::Numeric {
                        op: format!("{} (backward)", nodes[i].op.name()),
                    });
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(gout);
            }
        }
        let params = params.into_iter().map(|(id, v)| (id, v.0)).collect();
        Ok(Grads {
            nodes: grads,
            params,
        })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn upsample_taps(l: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * l)
        .map(|j| {
            let src = ((j as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(l - 1);
            let i1 = (i0 + 1).min(l - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(&oshape);
    let n = oshape.len();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..n).rev() {
            idx[d] += 1;
            offset += eff[d];
            if idx[d] < oshape[d] {
                break;
            }
            offset -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn expand_to<'a>(t: &'a Tensor, out_shape: &[usize]) -> std::borrow::Cow<'a, [f64]> {
    if t.shape() == out_shape {
        std::borrow::Cow::Borrowed(t.data())
    } else {
        std::borrow::Cow::Owned(broadcast_expand(t.data(), t.shape(), out_shape))
    }
}

/// Reduces a broadcast gradient back onto `in_shape`.
fn unbroadcast(g: Vec<f64>, out_shape: &[usize], in_shape: &[usize]) -> Tensor {
    if out_shape == in_shape {
        return Tensor::from_parts(in_shape.to_vec(), g);
    }
    Tensor::from_parts(in_shape.to_vec(), broadcast_reduce(&g, out_shape, in_shape))
}

fn backward_op(nodes: &[Node], i: usize, gout: &Tensor) -> Vec<(Var, Tensor)> {
    let node = &nodes[i];
    let g = gout.data();
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => vec![],
        Op::Binary { kind, a, b } => {
            let (a, b) = (*a, *b);
            let (av, bv) = (val(a), val(b));
            let out_shape = node.value.shape();
            let expand = |t| expand_to(t, out_shape);
            let mut out = Vec::new();
            if rg(a) {
                let local: Vec<f64> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                    BinaryKind::Mul => g
                        .iter()
                        .zip(expand(bv).iter())
                        .map(|(g, y)| g * y)
                        .collect(),
                    BinaryKind::Div => g
                        .iter()
                        .zip(expand(bv).iter())
                        .map(|(g, y)| g / y)
                        .collect(),
                };
                out.push((a, unbroadcast(local, out_shape, av.shape())));
            }
            if rg(b) {
                let local: Vec<f64> = match kind {
                    BinaryKind::Add => g.to_vec(),
                    BinaryKind::Sub => g.iter().map(|g| -g).collect(),
                    BinaryKind::Mul => g
                        .iter()
                        .zip(expand(av).iter())
                        .map(|(g, x)| g * x)
                        .collect(),
                    BinaryKind::Div => {
                        let (ea, eb) = (expand(av), expand(bv));
                        g.iter()
                            .zip(ea.iter().zip(eb.iter()))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect()
                    }
                };
                out.push((b, unbroadcast(local, out_shape, bv.shape())));
            }
            out
        }
        Op::Unary { kind, x } => {
            let xv = val(*x).data();
            let yv = node.value.data();
            let d: Vec<f64> = (0..xv.len())
                .map(|k| {
                    let (x, y) = (xv[k], yv[k]);
                    let dy = match kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Exp => y,
                        UnaryKind::Log => 1.0 / x,
                        UnaryKind::Sin => x.cos(),
                        UnaryKind::Cos => -x.sin(),
                        UnaryKind::Tanh => 1.0 - y * y,
                        UnaryKind::Softplus => sigmoid(x),
                        UnaryKind::Mish => {
                            let t = softplus(x).tanh();
                            t + x * (1.0 - t * t) * sigmoid(x)
                        }
                        UnaryKind::Relu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Silu => {
                            let s = sigmoid(x);
                            s * (1.0 + x * (1.0 - s))
                        }
                        UnaryKind::Sigmoid => y * (1.0 - y),
                        UnaryKind::Sqrt => 0.5 / y,
                        UnaryKind::Square => 2.0 * x,
                    };
                    dy * g[k]
                })
                .collect();
            vec![(*x, Tensor::from_parts(gout.shape().to_vec(), d))]
        }
        Op::Scale { x, s } => vec![(*x, gout.map(|v| v * s))],
        Op::AddScalar { x } => vec![(*x, gout.clone())],
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.len() / k.max(1);
            let mut out = Vec::new();
            if rg(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, 1.0, g, n, 1, bv.data(), 1, n, 0.0, &mut ga, k, 1);
                out.push((*a, Tensor::from_parts(av.shape().to_vec(), ga)));
            }
            if rg(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, 1.0, av.data(), 1, k, g, n, 1, 0.0, &mut gb, n, 1);
                out.push((*b, Tensor::from_parts(bv.shape().to_vec(), gb)));
            }
            out
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = node.value.shape()[2];
            let mut out = Vec::new();
            if rg(*a) {
                // ga = g · bᵀ (or g · b when b is stored transposed)
                let (rsb, csb) = if *trans_b { (k, 1) } else { (1, n) };
                let mut ga = vec![0.0; bt * m * k];
                for i in 0..bt {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        &g[i * m * n..],
                        n,
                        1,
                        &bv.data()[i * k * n..],
                        rsb,
                        csb,
                        0.0,
                        &mut ga[i * m * k..],
                        k,
                        1,
                    );
                }
                out.push((*a, Tensor::from_parts(av.shape().to_vec(), ga)));
            }
            if rg(*b) {
                let mut gb = vec![0.0; bt * k * n];
                for i in 0..bt {
                    if *trans_b {
                        // gb[n, k] = gᵀ · a
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            &g[i * m * n..],
                            1,
                            n,
                            &av.data()[i * m * k..],
                            k,
                            1,
                            0.0,
                            &mut gb[i * k * n..],
                            k,
                            1,
                        );
                    } else {
                        // gb[k, n] = aᵀ · g
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &av.data()[i * m * k..],
                            1,
                            k,
                            &g[i * m * n..],
                            n,
                            1,
                            0.0,
                            &mut gb[i * k * n..],
                            n,
                            1,
                        );
                    }
                }
                out.push((*b, Tensor::from_parts(bv.shape().to_vec(), gb)));
            }
            out
        }
        Op::LayerNorm { x, xhat, rstd } => {
            let d = *node.value.shape().last().unwrap();
            let mut gx = vec![0.0; g.len()];
            for r in 0..rstd.len() {
                let gr = &g[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gx[r * d + j] = rstd[r] * (gr[j] - mg - xr[j] * mgx);
                }
            }
            vec![(*x, Tensor::from_parts(gout.shape().to_vec(), gx))]
        }
        Op::Softmax { x } => {
            let d = *node.value.shape().last().unwrap();
            let y = node.value.data();
            let mut gx = vec![0.0; g.len()];
            for ((gxr, gr), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gxr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*x, Tensor::from_parts(gout.shape().to_vec(), gx))]
        }
        Op::Conv1d {
            x,
            w,
            b,
            stride,
            pad,
            cols,
        } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, ci, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (co, k) = (wv.shape()[0], wv.shape()[2]);
            let lo = node.value.shape()[2];
            let ck = ci * k;
            let mut out = Vec::new();
            if rg(*w) {
                let mut gw = vec![0.0; co * ck];
                for bi in 0..n {
                    gemm(
                        co,
                        lo,
                        ck,
                        1.0,
                        &g[bi * co * lo..],
                        lo,
                        1,
                        &cols[bi * ck * lo..],
                        1,
                        lo,
                        1.0,
                        &mut gw,
                        ck,
                        1,
                    );
                }
                out.push((*w, Tensor::from_parts(wv.shape().to_vec(), gw)));
            }
            if let Some(b) = b {
                if rg(*b) {
                    let mut gb = vec![0.0; co];
                    for bi in 0..n {
                        for c in 0..co {
                            gb[c] += g[(bi * co + c) * lo..(bi * co + c + 1) * lo]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    out.push((*b, Tensor::from_vec(gb)));
                }
            }
            if rg(*x) {
                let mut gx = vec![0.0; n * ci * l];
                let mut gcols = vec![0.0; ck * lo];
                for bi in 0..n {
                    gemm(
                        ck,
                        co,
                        lo,
                        1.0,
                        wv.data(),
                        1,
                        ck,
                        &g[bi * co * lo..],
                        lo,
                        1,
                        0.0,
                        &mut gcols,
                        lo,
                        1,
                    );
                    let gxb = &mut gx[bi * ci * l..(bi + 1) * ci * l];
                    for c in 0..ci {
                        for kk in 0..k {
                            let row = &gcols[(c * k + kk) * lo..(c * k + kk + 1) * lo];
                            for (t, gv) in row.iter().enumerate() {
                                let pos = (t * stride + kk) as isize - *pad as isize;
                                if pos >= 0 && (pos as usize) < l {
                                    gxb[c * l + pos as usize] += gv;
                                }
                            }
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), gx)));
            }
            out
        }
        Op::Upsample2 { x } => {
            let xv = val(*x);
            let l = *xv.shape().last().unwrap();
            let rows = xv.len() / l;
            let taps = upsample_taps(l);
            let mut gx = vec![0.0; xv.len()];
            for r in 0..rows {
                for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
                    let gv = g[r * 2 * l + j];
                    gx[r * l + i0] += (1.0 - lam) * gv;
                    gx[r * l + i1] += lam * gv;
                }
            }
            vec![(*x, Tensor::from_parts(xv.shape().to_vec(), gx))]
        }
        Op::SumAll { x } => {
            let s = val(*x).shape().to_vec();
            vec![(*x, Tensor::full(&s, g[0]))]
        }
        Op::SumAxis { x, axis } => {
            let s = val(*x).shape().to_vec();
            let (outer, dim, inner) = split3(&s, *axis);
            let mut gx = vec![0.0; numel(&s)];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for d in 0..dim {
                    gx[(o * dim + d) * inner..(o * dim + d + 1) * inner].copy_from_slice(src);
                }
            }
            vec![(*x, Tensor::from_parts(s, gx))]
        }
        Op::Concat { parts, axis } => {
            let oshape = node.value.shape();
            let (outer, total, inner) = split3(oshape, *axis);
            let mut offset = 0;
            let mut out = Vec::new();
            for &p in parts {
                let ps = val(p).shape().to_vec();
                let dim = ps[*axis];
                if rg(p) {
                    let mut gp = Vec::with_capacity(numel(&ps));
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + dim * inner]);
                    }
                    out.push((p, Tensor::from_parts(ps, gp)));
                }
                offset += dim;
            }
            out
        }
        Op::Slice { x, axis, start } => {
            let s = val(*x).shape().to_vec();
            let (outer, dim, inner) = split3(&s, *axis);
            let width = node.value.shape()[*axis];
            let mut gx = vec![0.0; numel(&s)];
            for o in 0..outer {
                gx[(o * dim + start) * inner..(o * dim + start + width) * inner]
                    .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
            }
            vec![(*x, Tensor::from_parts(s, gx))]
        }
        Op::IndexSelect { x, axis, index } => {
            let s = val(*x).shape().to_vec();
            let (outer, dim, inner) = split3(&s, *axis);
            let mut gx = vec![0.0; numel(&s)];
            for o in 0..outer {
                for (j, &i) in index.iter().enumerate() {
                    let src = &g[(o * index.len() + j) * inner..(o * index.len() + j + 1) * inner];
                    for (a, v) in gx[(o * dim + i) * inner..(o * dim + i + 1) * inner]
                        .iter_mut()
                        .zip(src)
                    {
                        *a += v;
                    }
                }
            }
            vec![(*x, Tensor::from_parts(s, gx))]
        }
        Op::Reshape { x } => {
            let s = val(*x).shape().to_vec();
            vec![(*x, Tensor::from_parts(s, g.to_vec()))]
        }
        Op::Permute { x, perm } => {
            let s = val(*x).shape().to_vec();
            let map = permute_index_map(&s, perm);
            let mut gx = vec![0.0; numel(&s)];
            for (k, &j) in map.iter().enumerate() {
                gx[j] = g[k];
            }
            vec![(*x, Tensor::from_parts(s, gx))]
        }
        Op::BroadcastTo { x } => {
            let s = val(*x).shape().to_vec();
            vec![(*x, unbroadcast(g.to_vec(), node.value.shape(), &s))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let p = g.input(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(p, p);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::from_vec(vec![1.0]));
        let unused = store.add("unused", Tensor::from_vec(vec![5.0, 6.0]));
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let loss = g.sum(u);
        let grads = g.backward(loss).unwrap().for_store(&store);
        assert_eq!(grads[1].data(), &[0.0, 0.0]);
        assert!(grads[0].data() == [1.0]);
        assert!(store.get(unused).len() == 2);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_names_the_producing_op() {
        let mut g = Graph::new();
        let p = g.input(Tensor::from_vec(vec![-1.0]));
        let l = g.log(p);
        let loss = g.sum(l);
        match g.backward(loss) {
            Err(Error::Numeric { op }) => assert_eq!(op, "log"),
            other => panic!("expected numeric error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn frozen_store_gets_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![2.0]));
        store.freeze();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let x = g.input(Tensor::from_vec(vec![3.0]));
        let y = g.mul(w, x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(id).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn dropout_identity_in_eval_and_seeded_in_training() {
        let x = Tensor::ones(&[64]);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let d = g.dropout(v, 0.5);
        assert_eq!(g.value(d), &x);

        let run = |seed| {
            let mut g = Graph::training(seed);
            let v = g.constant(x.clone());
            let d = g.dropout(v, 0.5);
            g.value(d).clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        assert!(run(7).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn conv_output_length() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 128]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3]));
        let y = g.conv1d(x, w, None, 2, 1);
        assert_eq!(g.shape(y), &[1, 4, 64]);
        let y = g.conv1d(x, w, None, 1, 1);
        assert_eq!(g.shape(y), &[1, 4, 128]);
    }

    #[test]
    fn upsample_matches_half_pixel_interpolation() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 4.0]));
        let y = g.upsample_linear2(x);
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0, 10.0]));
        let y = g.layer_norm(x);
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
