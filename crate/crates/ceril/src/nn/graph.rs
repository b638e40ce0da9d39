//! Reverse-mode tape with explicit scopes.
//!
//! A [`Graph`] owns every tensor created during one forward pass. Ops
//! record enough structure to backpropagate exactly; [`Graph::backward`]
//! walks the tape once in reverse. There is no global state: dropping the
//! graph frees the tape. Detached tensors are plain leaves that stop
//! gradient flow, which is how losses are routed to specific heads.

use super::kernels::{self, ConvDims};
use crate::scalar::Scalar;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already consumed this tape")]
    DeadTape,
    #[error("non-finite loss value")]
    NonFiniteLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Param(String),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Scale(TensorId, S),
    Exp(TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    Abs(TensorId),
    ClipConst(TensorId, S, S),
    ElemMin(TensorId, TensorId),
    Dense {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
    },
    Conv2d {
        x: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        dims: ConvDims,
    },
    /// Per-channel exponential scan over the leading axis:
    /// out[t] = alpha (x) out[t-1] + conv[t], with optional resets.
    DecayScan {
        conv: TensorId,
        alpha: TensorId,
        init: TensorId,
        resets: Vec<bool>,
        channels: usize,
        plane: usize,
    },
    /// Head-input assembly for shifted features: row 0 takes `first`, row
    /// i>0 takes states[i-1]; rows flagged as episode starts take zeros.
    ShiftConcat {
        states: TensorId,
        first: TensorId,
        starts: Vec<bool>,
        plane: usize,
    },
    MeanPoolHW(TensorId, usize, usize), // (input, channels, plane_hw)
    Reshape(TensorId),
    ConcatRows(TensorId, TensorId),
    RowSelect(TensorId, Vec<usize>),
    SoftmaxRows(TensorId),
    LogSoftmaxRows(TensorId),
    PickPerRow(TensorId, Vec<usize>),
    SumRows(TensorId),
    Mean(TensorId),
    Sum(TensorId),
    MeanAbs(TensorId, TensorId),
    MeanSq(TensorId, TensorId),
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    values: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// One recording scope of the tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Vec<S>>,
    param_cache: HashMap<String, TensorId>,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_cache: HashMap::new(),
            consumed: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<S>, op: Op<S>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            requires_grad,
        });
        self.grads.push(Vec::new());
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<S>, requires_grad: bool) -> TensorId {
        self.push(shape.to_vec(), values, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<S>) -> TensorId {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, v: S) -> TensorId {
        self.constant(&[1], vec![v])
    }

    /// Lease a named parameter into this graph; cached so each parameter is
    /// one node per graph.
    pub fn param(&mut self, store: &super::params::ParamStore<S>, name: &str) -> TensorId {
        if let Some(&id) = self.param_cache.get(name) {
            return id;
        }
        let entry = store.entry(name);
        let id = self.push(
            entry.shape.clone(),
            entry.values.clone(),
            Op::Param(name.to_string()),
            true,
        );
        self.param_cache.insert(name.to_string(), id);
        id
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].values
    }

    pub fn value_scalar(&self, id: TensorId) -> S {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Gradient of a tensor after backward; empty slice if none reached it.
    pub fn grad(&self, id: TensorId) -> &[S] {
        &self.grads[id.0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Copy values into a fresh non-differentiable leaf.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let shape = self.nodes[id.0].shape.clone();
        let values = self.nodes[id.0].values.clone();
        self.leaf(&shape, values, false)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ----- elementwise ops -----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Mul(a, b), rg)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let values = self.values(a).iter().map(|&x| -x).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> TensorId {
        let values = self.values(a).iter().map(|&x| x * c).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Scale(a, c), rg)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let values = self.values(a).iter().map(|&x| x.exp()).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Exp(a), rg)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let values = self.values(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let values = self
            .values(a)
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let values = self.values(a).iter().map(|&x| x.abs()).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Abs(a), rg)
    }

    pub fn clip(&mut self, a: TensorId, lo: S, hi: S) -> TensorId {
        let values = self
            .values(a)
            .iter()
            .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::ClipConst(a, lo, hi), rg)
    }

    pub fn elem_min(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "min shape mismatch");
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::ElemMin(a, b), rg)
    }

    // ----- layers -----

    /// x[B,I] * w[I,O] + bias[O].
    pub fn dense(&mut self, x: TensorId, w: TensorId, bias: Option<TensorId>) -> TensorId {
        let (b, i) = {
            let s = self.shape(x);
            assert_eq!(s.len(), 2, "dense input must be [B, I]");
            (s[0], s[1])
        };
        let (wi, o) = {
            let s = self.shape(w);
            assert_eq!(s.len(), 2, "dense weight must be [I, O]");
            (s[0], s[1])
        };
        assert_eq!(i, wi, "dense shape mismatch: input {i} vs weight {wi}");
        let mut values = vec![S::zero(); b * o];
        if let Some(bid) = bias {
            assert_eq!(self.shape(bid), &[o], "dense bias shape");
            for row in values.chunks_exact_mut(o) {
                row.copy_from_slice(self.values(bid));
            }
        }
        kernels::matmul_accum(self.values(x), self.values(w), &mut values, b, i, o);
        let mut ids = vec![x, w];
        if let Some(bid) = bias {
            ids.push(bid);
        }
        let rg = self.any_grad(&ids);
        self.push(vec![b, o], values, Op::Dense { x, w, bias }, rg)
    }

    /// 2D convolution of x[B,Ci,H,W] with kernel[Co,Ci,kh,kw].
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let (b, ci, h, w) = {
            let s = self.shape(x);
            assert_eq!(s.len(), 4, "conv input must be [B,C,H,W]");
            (s[0], s[1], s[2], s[3])
        };
        let (co, kci, kh, kw) = {
            let s = self.shape(kernel);
            assert_eq!(s.len(), 4, "conv kernel must be [Co,Ci,kh,kw]");
            (s[0], s[1], s[2], s[3])
        };
        assert_eq!(ci, kci, "conv channel mismatch");
        let dims = ConvDims::new(b, ci, h, w, co, kh, kw, stride, pad);
        let mut values = vec![S::zero(); dims.out_len()];
        kernels::conv2d_accum(self.values(x), self.values(kernel), &mut values, &dims);
        if let Some(bid) = bias {
            assert_eq!(self.shape(bid), &[co], "conv bias shape");
            let plane = dims.h_out * dims.w_out;
            let bias_vals = self.values(bid).to_vec();
            for bi in 0..b {
                for (c, &bv) in bias_vals.iter().enumerate() {
                    for v in &mut values[(bi * co + c) * plane..(bi * co + c + 1) * plane] {
                        *v = *v + bv;
                    }
                }
            }
        }
        let mut ids = vec![x, kernel];
        if let Some(bid) = bias {
            ids.push(bid);
        }
        let rg = self.any_grad(&ids);
        self.push(
            vec![b, co, dims.h_out, dims.w_out],
            values,
            Op::Conv2d {
                x,
                kernel,
                bias,
                dims,
            },
            rg,
        )
    }

    /// Causal per-channel decay scan over the leading axis of
    /// conv[D,C,H,W]: out[t] = alpha (x) prev + conv[t], where prev is
    /// out[t-1], `init` for t = 0, or zero at rows flagged in `resets`.
    pub fn decay_scan(
        &mut self,
        conv: TensorId,
        alpha: TensorId,
        init: TensorId,
        resets: Vec<bool>,
    ) -> TensorId {
        let (d, c, h, w) = {
            let s = self.shape(conv);
            assert_eq!(s.len(), 4, "decay scan input must be [D,C,H,W]");
            (s[0], s[1], s[2], s[3])
        };
        assert_eq!(self.shape(alpha), &[c], "alpha must be [C]");
        assert_eq!(self.shape(init), &[c, h, w], "init must be [C,H,W]");
        assert_eq!(resets.len(), d, "reset mask length");
        let plane = h * w;
        let chw = c * plane;
        let mut values = vec![S::zero(); d * chw];
        let alpha_v = self.values(alpha).to_vec();
        {
            let conv_v = self.values(conv);
            let init_v = self.values(init);
            let mut prev: Vec<S> = init_v.to_vec();
            for t in 0..d {
                if resets[t] {
                    prev.iter_mut().for_each(|v| *v = S::zero());
                }
                let out_t = &mut values[t * chw..(t + 1) * chw];
                let conv_t = &conv_v[t * chw..(t + 1) * chw];
                for ch in 0..c {
                    let a = alpha_v[ch];
                    let o = &mut out_t[ch * plane..(ch + 1) * plane];
                    let p = &prev[ch * plane..(ch + 1) * plane];
                    let u = &conv_t[ch * plane..(ch + 1) * plane];
                    for ((ov, &pv), &uv) in o.iter_mut().zip(p).zip(u) {
                        *ov = a * pv + uv;
                    }
                }
                prev.copy_from_slice(out_t);
            }
        }
        let rg = self.any_grad(&[conv, alpha, init]);
        self.push(
            vec![d, c, h, w],
            values,
            Op::DecayScan {
                conv,
                alpha,
                init,
                resets,
                channels: c,
                plane,
            },
            rg,
        )
    }

    /// Assemble per-row head inputs from scan states shifted by one:
    /// output row 0 is `first`, row i is states[i-1]; rows flagged in
    /// `starts` are zero (fresh episodes see an empty accumulator).
    pub fn shift_concat(
        &mut self,
        states: TensorId,
        first: TensorId,
        starts: Vec<bool>,
    ) -> TensorId {
        let (m, c, h, w) = {
            let s = self.shape(states);
            assert_eq!(s.len(), 4);
            (s[0], s[1], s[2], s[3])
        };
        assert_eq!(self.shape(first), &[c, h, w], "first must be [C,H,W]");
        let rows = starts.len();
        assert_eq!(m + 1, rows, "states must hold rows-1 entries");
        let plane = c * h * w;
        let mut values = vec![S::zero(); rows * plane];
        for (i, &is_start) in starts.iter().enumerate() {
            if is_start {
                continue;
            }
            let dst = &mut values[i * plane..(i + 1) * plane];
            if i == 0 {
                dst.copy_from_slice(self.values(first));
            } else {
                let src = &self.nodes[states.0].values[(i - 1) * plane..i * plane];
                dst.copy_from_slice(src);
            }
        }
        let rg = self.any_grad(&[states, first]);
        self.push(
            vec![rows, c, h, w],
            values,
            Op::ShiftConcat {
                states,
                first,
                starts,
                plane,
            },
            rg,
        )
    }

    /// Mean over the spatial axes: [B,C,H,W] -> [B,C].
    pub fn mean_pool_hw(&mut self, x: TensorId) -> TensorId {
        let (b, c, h, w) = {
            let s = self.shape(x);
            assert_eq!(s.len(), 4);
            (s[0], s[1], s[2], s[3])
        };
        let plane = h * w;
        let inv = S::from_f64_lossy(1.0 / plane as f64);
        let mut values = vec![S::zero(); b * c];
        for bc in 0..b * c {
            let src = &self.nodes[x.0].values[bc * plane..(bc + 1) * plane];
            let mut acc = S::zero();
            for &v in src {
                acc = acc + v;
            }
            values[bc] = acc * inv;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![b, c], values, Op::MeanPoolHW(x, c, plane), rg)
    }

    /// Reinterpret the tensor with a new shape of identical size.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.values(x).len(),
            "reshape size mismatch"
        );
        let values = self.values(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape.to_vec(), values, Op::Reshape(x), rg)
    }

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ra, ca) = {
            let s = self.shape(a);
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        let (rb, cb) = {
            let s = self.shape(b);
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        assert_eq!(ca, cb, "concat column mismatch");
        let mut values = Vec::with_capacity((ra + rb) * ca);
        values.extend_from_slice(self.values(a));
        values.extend_from_slice(self.values(b));
        let rg = self.any_grad(&[a, b]);
        self.push(vec![ra + rb, ca], values, Op::ConcatRows(a, b), rg)
    }

    /// Select rows of a [B,F] tensor.
    pub fn row_select(&mut self, x: TensorId, rows: Vec<usize>) -> TensorId {
        let (b, f) = {
            let s = self.shape(x);
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        let mut values = Vec::with_capacity(rows.len() * f);
        for &r in &rows {
            assert!(r < b, "row out of range");
            values.extend_from_slice(&self.nodes[x.0].values[r * f..(r + 1) * f]);
        }
        let rg = self.nodes[x.0].requires_grad;
        let n = rows.len();
        self.push(vec![n, f], values, Op::RowSelect(x, rows), rg)
    }

    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (b, k) = {
            let s = self.shape(x);
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        let mut values = vec![S::zero(); b * k];
        for r in 0..b {
            let row = &self.nodes[x.0].values[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for (o, &v) in values[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = (v - max).exp();
                denom = denom + *o;
            }
            for o in &mut values[r * k..(r + 1) * k] {
                *o = *o / denom;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![b, k], values, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (b, k) = {
            let s = self.shape(x);
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        let mut values = vec![S::zero(); b * k];
        for r in 0..b {
            let row = &self.nodes[x.0].values[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for &v in row {
                denom = denom + (v - max).exp();
            }
            let lse = max + denom.ln();
            for (o, &v) in values[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![b, k], values, Op::LogSoftmaxRows(x), rg)
    }

    /// out[r] = x[r, idx[r]].
    pub fn pick_per_row(&mut self, x: TensorId, idx: Vec<usize>) -> TensorId {
        let (b, k) = {
            let s = self.shape(x);
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        assert_eq!(idx.len(), b, "one index per row");
        let mut values = Vec::with_capacity(b);
        for (r, &a) in idx.iter().enumerate() {
            assert!(a < k, "index out of range");
            values.push(self.nodes[x.0].values[r * k + a]);
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![b], values, Op::PickPerRow(x, idx), rg)
    }

    pub fn sum_rows(&mut self, x: TensorId) -> TensorId {
        let (b, k) = {
            let s = self.shape(x);
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        let mut values = Vec::with_capacity(b);
        for r in 0..b {
            let mut acc = S::zero();
            for &v in &self.nodes[x.0].values[r * k..(r + 1) * k] {
                acc = acc + v;
            }
            values.push(acc);
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![b], values, Op::SumRows(x), rg)
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.values(x).len().max(1);
        let mut acc = S::zero();
        for &v in self.values(x) {
            acc = acc + v;
        }
        let values = vec![acc * S::from_f64_lossy(1.0 / n as f64)];
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![1], values, Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let mut acc = S::zero();
        for &v in self.values(x) {
            acc = acc + v;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![1], vec![acc], Op::Sum(x), rg)
    }

    /// Mean absolute error over all elements.
    pub fn mean_abs_err(&mut self, pred: TensorId, target: TensorId) -> TensorId {
        assert_eq!(self.values(pred).len(), self.values(target).len());
        let n = self.values(pred).len().max(1);
        let mut acc = S::zero();
        for (&a, &b) in self.values(pred).iter().zip(self.values(target)) {
            acc = acc + (a - b).abs();
        }
        let values = vec![acc * S::from_f64_lossy(1.0 / n as f64)];
        let rg = self.any_grad(&[pred, target]);
        self.push(vec![1], values, Op::MeanAbs(pred, target), rg)
    }

    /// Mean squared error over all elements.
    pub fn mean_sq_err(&mut self, pred: TensorId, target: TensorId) -> TensorId {
        assert_eq!(self.values(pred).len(), self.values(target).len());
        let n = self.values(pred).len().max(1);
        let mut acc = S::zero();
        for (&a, &b) in self.values(pred).iter().zip(self.values(target)) {
            let d = a - b;
            acc = acc + d * d;
        }
        let values = vec![acc * S::from_f64_lossy(1.0 / n as f64)];
        let rg = self.any_grad(&[pred, target]);
        self.push(vec![1], values, Op::MeanSq(pred, target), rg)
    }

    // ----- backward -----

    fn ensure_grad(grads: &mut [Vec<S>], nodes: &[Node<S>], id: TensorId) {
        if grads[id.0].is_empty() {
            grads[id.0] = vec![S::zero(); nodes[id.0].values.len()];
        }
    }

    /// Reverse pass from a scalar loss; accumulates gradients of every
    /// reachable differentiable node.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), GraphError> {
        if self.consumed {
            return Err(GraphError::DeadTape);
        }
        if self.values(loss).len() != 1 {
            return Err(GraphError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.value_scalar(loss).is_finite() {
            return Err(GraphError::NonFiniteLoss);
        }
        self.consumed = true;
        self.grads[loss.0] = vec![S::one()];
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.backprop_node(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[S]) {
        let op = self.nodes[i].op.clone();
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let rg = |id: TensorId| nodes[id.0].requires_grad;
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for (id, _) in [(a, 1), (b, 1)] {
                    if rg(id) {
                        Self::ensure_grad(grads, nodes, id);
                        for (d, &gv) in grads[id.0].iter_mut().zip(g) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for (d, &gv) in grads[a.0].iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                if rg(b) {
                    Self::ensure_grad(grads, nodes, b);
                    for (d, &gv) in grads[b.0].iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for ((d, &gv), &bv) in grads[a.0].iter_mut().zip(g).zip(&nodes[b.0].values) {
                        *d = *d + gv * bv;
                    }
                }
                if rg(b) {
                    Self::ensure_grad(grads, nodes, b);
                    for ((d, &gv), &av) in grads[b.0].iter_mut().zip(g).zip(&nodes[a.0].values) {
                        *d = *d + gv * av;
                    }
                }
            }
            Op::Neg(a) => {
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for (d, &gv) in grads[a.0].iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for (d, &gv) in grads[a.0].iter_mut().zip(g) {
                        *d = *d + gv * c;
                    }
                }
            }
            Op::Exp(a) => {
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for ((d, &gv), &yv) in grads[a.0].iter_mut().zip(g).zip(&nodes[i].values) {
                        *d = *d + gv * yv;
                    }
                }
            }
            Op::Tanh(a) => {
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for ((d, &gv), &yv) in grads[a.0].iter_mut().zip(g).zip(&nodes[i].values) {
                        *d = *d + gv * (S::one() - yv * yv);
                    }
                }
            }
            Op::Relu(a) => {
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for ((d, &gv), &xv) in grads[a.0].iter_mut().zip(g).zip(&nodes[a.0].values) {
                        if xv > S::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Abs(a) => {
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for ((d, &gv), &xv) in grads[a.0].iter_mut().zip(g).zip(&nodes[a.0].values) {
                        if xv > S::zero() {
                            *d = *d + gv;
                        } else if xv < S::zero() {
                            *d = *d - gv;
                        }
                    }
                }
            }
            Op::ClipConst(a, lo, hi) => {
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for ((d, &gv), &xv) in grads[a.0].iter_mut().zip(g).zip(&nodes[a.0].values) {
                        if xv >= lo && xv <= hi {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::ElemMin(a, b) => {
                let (av, bv) = (&nodes[a.0].values, &nodes[b.0].values);
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for (k, &gv) in g.iter().enumerate() {
                        if av[k] <= bv[k] {
                            grads[a.0][k] = grads[a.0][k] + gv;
                        }
                    }
                }
                if rg(b) {
                    Self::ensure_grad(grads, nodes, b);
                    for (k, &gv) in g.iter().enumerate() {
                        if av[k] > bv[k] {
                            grads[b.0][k] = grads[b.0][k] + gv;
                        }
                    }
                }
            }
            Op::Dense { x, w, bias } => {
                let b = nodes[x.0].shape[0];
                let i_dim = nodes[x.0].shape[1];
                let o = nodes[w.0].shape[1];
                if rg(x) {
                    Self::ensure_grad(grads, nodes, x);
                    let mut dx = std::mem::take(&mut grads[x.0]);
                    kernels::matmul_grad_x(g, &nodes[w.0].values, &mut dx, b, i_dim, o);
                    grads[x.0] = dx;
                }
                if rg(w) {
                    Self::ensure_grad(grads, nodes, w);
                    let mut dw = std::mem::take(&mut grads[w.0]);
                    kernels::matmul_grad_w(&nodes[x.0].values, g, &mut dw, b, i_dim, o);
                    grads[w.0] = dw;
                }
                if let Some(bid) = bias {
                    if rg(bid) {
                        Self::ensure_grad(grads, nodes, bid);
                        for row in g.chunks_exact(o) {
                            for (d, &gv) in grads[bid.0].iter_mut().zip(row) {
                                *d = *d + gv;
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                dims,
            } => {
                if rg(x) {
                    Self::ensure_grad(grads, nodes, x);
                    let mut dx = std::mem::take(&mut grads[x.0]);
                    kernels::conv2d_grad_x(g, &nodes[kernel.0].values, &mut dx, &dims);
                    grads[x.0] = dx;
                }
                if rg(kernel) {
                    Self::ensure_grad(grads, nodes, kernel);
                    let mut dk = std::mem::take(&mut grads[kernel.0]);
                    kernels::conv2d_grad_k(&nodes[x.0].values, g, &mut dk, &dims);
                    grads[kernel.0] = dk;
                }
                if let Some(bid) = bias {
                    if rg(bid) {
                        Self::ensure_grad(grads, nodes, bid);
                        let plane = dims.h_out * dims.w_out;
                        for b in 0..dims.batch {
                            for c in 0..dims.c_out {
                                let mut acc = S::zero();
                                for &gv in &g[(b * dims.c_out + c) * plane
                                    ..(b * dims.c_out + c + 1) * plane]
                                {
                                    acc = acc + gv;
                                }
                                grads[bid.0][c] = grads[bid.0][c] + acc;
                            }
                        }
                    }
                }
            }
            Op::DecayScan {
                conv,
                alpha,
                init,
                resets,
                channels,
                plane,
            } => {
                let chw = channels * plane;
                let d = resets.len();
                let alpha_v = nodes[alpha.0].values.clone();
                let out_v = &nodes[i].values;
                let init_v = &nodes[init.0].values;
                let mut carry = vec![S::zero(); chw];
                let mut dalpha = vec![S::zero(); channels];
                if rg(conv) {
                    Self::ensure_grad(grads, nodes, conv);
                }
                let mut dconv = if rg(conv) {
                    std::mem::take(&mut grads[conv.0])
                } else {
                    Vec::new()
                };
                let mut dinit = vec![S::zero(); chw];
                for t in (0..d).rev() {
                    // Total gradient reaching state t.
                    let g_t = &g[t * chw..(t + 1) * chw];
                    for (cv, &gv) in carry.iter_mut().zip(g_t) {
                        *cv = *cv + gv;
                    }
                    if !dconv.is_empty() {
                        for (dc, &cv) in dconv[t * chw..(t + 1) * chw].iter_mut().zip(&carry) {
                            *dc = *dc + cv;
                        }
                    }
                    // prev state feeding t: zero on reset, init for t=0.
                    let prev: &[S] = if resets[t] {
                        &[]
                    } else if t == 0 {
                        init_v
                    } else {
                        &out_v[(t - 1) * chw..t * chw]
                    };
                    if !prev.is_empty() {
                        for c in 0..channels {
                            let mut acc = S::zero();
                            for (cv, pv) in carry[c * plane..(c + 1) * plane]
                                .iter()
                                .zip(&prev[c * plane..(c + 1) * plane])
                            {
                                acc = acc + *cv * *pv;
                            }
                            dalpha[c] = dalpha[c] + acc;
                        }
                        if t == 0 && rg(init) {
                            for (dv, (cv, a)) in dinit.iter_mut().zip(
                                carry
                                    .iter()
                                    .zip((0..chw).map(|k| alpha_v[k / plane])),
                            ) {
                                *dv = *dv + *cv * a;
                            }
                        }
                    }
                    // Propagate to state t-1 through the decay edge.
                    if resets[t] {
                        carry.iter_mut().for_each(|v| *v = S::zero());
                    } else {
                        for c in 0..channels {
                            let a = alpha_v[c];
                            for cv in &mut carry[c * plane..(c + 1) * plane] {
                                *cv = *cv * a;
                            }
                        }
                    }
                }
                if !dconv.is_empty() {
                    grads[conv.0] = dconv;
                }
                if rg(alpha) {
                    Self::ensure_grad(grads, nodes, alpha);
                    for (d, &v) in grads[alpha.0].iter_mut().zip(&dalpha) {
                        *d = *d + v;
                    }
                }
                if rg(init) {
                    Self::ensure_grad(grads, nodes, init);
                    for (d, &v) in grads[init.0].iter_mut().zip(&dinit) {
                        *d = *d + v;
                    }
                }
            }
            Op::ShiftConcat {
                states,
                first,
                starts,
                plane,
            } => {
                if rg(states) {
                    Self::ensure_grad(grads, nodes, states);
                    for (r, &is_start) in starts.iter().enumerate().skip(1) {
                        if is_start {
                            continue;
                        }
                        let src = &g[r * plane..(r + 1) * plane];
                        for (d, &gv) in grads[states.0][(r - 1) * plane..r * plane]
                            .iter_mut()
                            .zip(src)
                        {
                            *d = *d + gv;
                        }
                    }
                }
                if rg(first) && !starts[0] {
                    Self::ensure_grad(grads, nodes, first);
                    for (d, &gv) in grads[first.0].iter_mut().zip(&g[0..plane]) {
                        *d = *d + gv;
                    }
                }
            }
            Op::MeanPoolHW(x, _c, plane) => {
                if rg(x) {
                    Self::ensure_grad(grads, nodes, x);
                    let inv = S::from_f64_lossy(1.0 / plane as f64);
                    for (bc, &gv) in g.iter().enumerate() {
                        let gvp = gv * inv;
                        for d in &mut grads[x.0][bc * plane..(bc + 1) * plane] {
                            *d = *d + gvp;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if rg(x) {
                    Self::ensure_grad(grads, nodes, x);
                    for (d, &gv) in grads[x.0].iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = nodes[a.0].values.len();
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for (d, &gv) in grads[a.0].iter_mut().zip(&g[0..na]) {
                        *d = *d + gv;
                    }
                }
                if rg(b) {
                    Self::ensure_grad(grads, nodes, b);
                    for (d, &gv) in grads[b.0].iter_mut().zip(&g[na..]) {
                        *d = *d + gv;
                    }
                }
            }
            Op::RowSelect(x, rows) => {
                if rg(x) {
                    Self::ensure_grad(grads, nodes, x);
                    let f = nodes[x.0].shape[1];
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, &gv) in grads[x.0][r * f..(r + 1) * f]
                            .iter_mut()
                            .zip(&g[k * f..(k + 1) * f])
                        {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if rg(x) {
                    Self::ensure_grad(grads, nodes, x);
                    let k = nodes[x.0].shape[1];
                    let p = &nodes[i].values;
                    for r in 0..nodes[x.0].shape[0] {
                        let pr = &p[r * k..(r + 1) * k];
                        let gr = &g[r * k..(r + 1) * k];
                        let mut dot = S::zero();
                        for (&pv, &gv) in pr.iter().zip(gr) {
                            dot = dot + pv * gv;
                        }
                        for ((d, &pv), &gv) in grads[x.0][r * k..(r + 1) * k]
                            .iter_mut()
                            .zip(pr)
                            .zip(gr)
                        {
                            *d = *d + pv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                if rg(x) {
                    Self::ensure_grad(grads, nodes, x);
                    let k = nodes[x.0].shape[1];
                    let lp = &nodes[i].values;
                    for r in 0..nodes[x.0].shape[0] {
                        let gr = &g[r * k..(r + 1) * k];
                        let mut gsum = S::zero();
                        for &gv in gr {
                            gsum = gsum + gv;
                        }
                        for ((d, &lpv), &gv) in grads[x.0][r * k..(r + 1) * k]
                            .iter_mut()
                            .zip(&lp[r * k..(r + 1) * k])
                            .zip(gr)
                        {
                            *d = *d + gv - lpv.exp() * gsum;
                        }
                    }
                }
            }
            Op::PickPerRow(x, idx) => {
                if rg(x) {
                    Self::ensure_grad(grads, nodes, x);
                    let k = nodes[x.0].shape[1];
                    for (r, &a) in idx.iter().enumerate() {
                        grads[x.0][r * k + a] = grads[x.0][r * k + a] + g[r];
                    }
                }
            }
            Op::SumRows(x) => {
                if rg(x) {
                    Self::ensure_grad(grads, nodes, x);
                    let k = nodes[x.0].shape[1];
                    for (r, &gv) in g.iter().enumerate() {
                        for d in &mut grads[x.0][r * k..(r + 1) * k] {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Mean(x) => {
                if rg(x) {
                    Self::ensure_grad(grads, nodes, x);
                    let inv = S::from_f64_lossy(1.0 / nodes[x.0].values.len().max(1) as f64);
                    let gv = g[0] * inv;
                    for d in &mut grads[x.0] {
                        *d = *d + gv;
                    }
                }
            }
            Op::Sum(x) => {
                if rg(x) {
                    Self::ensure_grad(grads, nodes, x);
                    for d in &mut grads[x.0] {
                        *d = *d + g[0];
                    }
                }
            }
            Op::MeanAbs(a, b) => {
                let n = nodes[a.0].values.len().max(1);
                let gv = g[0] * S::from_f64_lossy(1.0 / n as f64);
                let (av, bv) = (&nodes[a.0].values, &nodes[b.0].values);
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for (k, d) in grads[a.0].iter_mut().enumerate() {
                        let diff = av[k] - bv[k];
                        if diff > S::zero() {
                            *d = *d + gv;
                        } else if diff < S::zero() {
                            *d = *d - gv;
                        }
                    }
                }
                if rg(b) {
                    Self::ensure_grad(grads, nodes, b);
                    for (k, d) in grads[b.0].iter_mut().enumerate() {
                        let diff = av[k] - bv[k];
                        if diff > S::zero() {
                            *d = *d - gv;
                        } else if diff < S::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::MeanSq(a, b) => {
                let n = nodes[a.0].values.len().max(1);
                let two = S::from_f64_lossy(2.0 / n as f64);
                let gv = g[0] * two;
                let (av, bv) = (&nodes[a.0].values, &nodes[b.0].values);
                if rg(a) {
                    Self::ensure_grad(grads, nodes, a);
                    for (k, d) in grads[a.0].iter_mut().enumerate() {
                        *d = *d + gv * (av[k] - bv[k]);
                    }
                }
                if rg(b) {
                    Self::ensure_grad(grads, nodes, b);
                    for (k, d) in grads[b.0].iter_mut().enumerate() {
                        *d = *d - gv * (av[k] - bv[k]);
                    }
                }
            }
        }
    }

    /// Accumulated parameter gradients by name, in tape order.
    pub fn param_grads(&self) -> Vec<(&str, &[S])> {
        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if !self.grads[idx].is_empty() {
                    out.push((name.as_str(), self.grads[idx].as_slice()));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[4], vec![1.0, -2.0, 3.0, 0.5], true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn product_gradient_is_other_factor() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true);
        let y = g.leaf(&[3], vec![4.0, 5.0, 6.0], true);
        let xy = g.mul(x, y);
        let loss = g.sum(xy);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[4.0, 5.0, 6.0]);
        assert_eq!(g.grad(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn dense_identity_passes_through() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 3], vec![0.3, -0.7, 1.1], false);
        let w = g.leaf(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            false,
        );
        let b = g.leaf(&[3], vec![0.0; 3], false);
        let y = g.dense(x, w, Some(b));
        assert_eq!(g.values(y), g.values(x));
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 4], vec![0.5; 4], false);
        let p = g.softmax_rows(x);
        for &v in g.values(p) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_1x1_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 1, 3, 3], (0..9).map(f64::from).collect(), false);
        let k = g.leaf(&[1, 1, 1, 1], vec![1.0], false);
        let y = g.conv2d(x, k, None, 1, 0);
        assert_eq!(g.values(y), g.values(x));
    }

    #[test]
    fn min_and_clip_gate_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&[2], vec![1.0, 5.0], true);
        let b = g.leaf(&[2], vec![3.0, 2.0], true);
        let m = g.elem_min(a, b);
        let loss = g.sum(m);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a), &[1.0, 0.0]);
        assert_eq!(g.grad(b), &[0.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[3], vec![0.5, 1.5, -0.5], true);
        let c = g.clip(x, 0.0, 1.0);
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[2], vec![2.0, 3.0], true);
        let d = g.detach(x);
        let y = g.mul(d, d);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_empty());
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true);
        assert!(matches!(
            g.backward(x),
            Err(GraphError::NonScalarLoss(_))
        ));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(GraphError::DeadTape)));
    }

    #[test]
    fn decay_scan_geometric_impulse() {
        // Unit impulse at bin 0, alpha = 0.5: outputs 1, 0.5, 0.25, ...
        let mut g = Graph::<f64>::new();
        let mut conv_vals = vec![0.0; 4];
        conv_vals[0] = 1.0;
        let conv = g.leaf(&[4, 1, 1, 1], conv_vals, true);
        let alpha = g.leaf(&[1], vec![0.5], true);
        let init = g.leaf(&[1, 1, 1], vec![0.0], false);
        let out = g.decay_scan(conv, alpha, init, vec![false; 4]);
        assert_eq!(g.values(out), &[1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn decay_scan_resets_cut_history() {
        let mut g = Graph::<f64>::new();
        let conv = g.leaf(&[3, 1, 1, 1], vec![1.0, 0.0, 0.0], false);
        let alpha = g.leaf(&[1], vec![0.5], false);
        let init = g.leaf(&[1, 1, 1], vec![8.0], false);
        let out = g.decay_scan(conv, alpha, init, vec![false, false, true]);
        // init contributes at t=0 (8*0.5+1), decays at t=1, reset at t=2.
        assert_eq!(g.values(out), &[5.0, 2.5, 0.0]);
    }
}
