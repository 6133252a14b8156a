//! Dynamic tape-based reverse-mode differentiation over [`Tensor`].
//!
//! The tape records exactly the operations the U-Audio Transformer needs.
//! Every op stores its output; `backward` walks the tape in reverse and
//! accumulates gradients per node, then exposes them by parameter name.
//! Gradients are always double precision; forward outputs are rounded to the
//! tape dtype so single-precision training state stays f32-representable.

use crate::params::ParameterStore;
use crate::tensor::{axpy, dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Dtype, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Additive mask value that underflows to exactly zero attention weight.
pub const MASK_NEG: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a @ b`, rank-2 or batched rank-3; `tb` transposes the last two dims of b.
    Matmul { a: Var, b: Var, tb: bool },
    /// 1D convolution over time: x `[T, Cin]`, w `[k, Cin, Cout]`, bias `[Cout]`.
    Conv1d { x: Var, w: Var, bias: Var, stride: usize, pad: usize },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    MulRow { x: Var, scale: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var, #[allow(dead_code)] c: f64 },
    ScaleRows { x: Var, weights: Vec<f64> },
    Gelu { x: Var },
    Softmax { x: Var, #[allow(dead_code)] mask_add: Option<Vec<f64>> },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Dropout { x: Var, mask: Vec<f64> },
    Embed { table: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { a: Var, b: Var },
    SliceRows { x: Var, start: usize, #[allow(dead_code)] len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    UpsampleNearest2 { x: Var },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var },
    /// Dynamic-position-bias assembly: frame-pair biases gathered by relative
    /// offset, register pairs served by a shared learned bucket.
    AssembleAttnBias { offsets: Var, reg: Var, frames: usize, registers: usize },
    /// Scalar `sum_t row_w[t] * sum_c (pred[t,c] - target[t,c])^2`.
    WeightedSqSum { pred: Var, target: Tensor, row_w: Vec<f64> },
    SumAll { x: Var },
}

struct Node {
    op: Op,
    out: Tensor,
}

/// Recorded computation. One tape per forward/backward pass; parameters are
/// re-registered on each tape from the [`ParameterStore`].
pub struct Tape {
    nodes: Vec<Node>,
    named: BTreeMap<String, usize>,
    dtype: Dtype,
    train: bool,
    rng: ChaCha8Rng,
    check_finite: bool,
}

impl Tape {
    pub fn new(dtype: Dtype) -> Self {
        Tape {
            nodes: Vec::new(),
            named: BTreeMap::new(),
            dtype,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            check_finite: false,
        }
    }

    /// Training-mode tape: dropout active, seeded per invocation.
    pub fn for_training(dtype: Dtype, dropout_seed: u64) -> Self {
        let mut t = Tape::new(dtype);
        t.train = true;
        t.rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        t
    }

    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].out
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let out = Tensor::new(shape, data, self.dtype).expect("internal shape bug");
        if self.check_finite && !out.all_finite() {
            panic!("non-finite values produced by {:?}", op_name(&op));
        }
        self.nodes.push(Node { op, out });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter leaf (deduplicated per tape by name).
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&id) = self.named.get(name) {
            return Ok(Var(id));
        }
        let p = store.get(name)?;
        let out = p.value.clone().to_dtype(self.dtype);
        self.nodes.push(Node { op: Op::Leaf, out });
        let id = self.nodes.len() - 1;
        self.named.insert(name.to_string(), id);
        Ok(Var(id))
    }

    /// Names of all parameters touched by this tape.
    pub fn touched_params(&self) -> Vec<String> {
        self.named.keys().cloned().collect()
    }

    /// Registers a constant input leaf (no gradient consumer).
    pub fn input(&mut self, t: Tensor) -> Var {
        let out = t.to_dtype(self.dtype);
        self.nodes.push(Node { op: Op::Leaf, out });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` on the last two dims.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (batch, m, k) = match ash.len() {
            2 => (1, ash[0], ash[1]),
            3 => (ash[0], ash[1], ash[2]),
            r => panic!("matmul lhs rank {r}"),
        };
        let (bbatch, bk, n) = match bsh.len() {
            2 => {
                if tb {
                    (1, bsh[1], bsh[0])
                } else {
                    (1, bsh[0], bsh[1])
                }
            }
            3 => {
                if tb {
                    (bsh[0], bsh[2], bsh[1])
                } else {
                    (bsh[0], bsh[1], bsh[2])
                }
            }
            r => panic!("matmul rhs rank {r}"),
        };
        assert_eq!(k, bk, "matmul inner dims {ash:?} x {bsh:?}");
        assert_eq!(batch, bbatch, "matmul batch dims {ash:?} x {bsh:?}");
        let mut out = vec![0.0; batch * m * n];
        let adata = self.value(a).data();
        let bdata = self.value(b).data();
        for bi in 0..batch {
            let asl = &adata[bi * m * k..(bi + 1) * m * k];
            let bsl = &bdata[bi * k * n..(bi + 1) * k * n];
            let csl = &mut out[bi * m * n..(bi + 1) * m * n];
            if tb {
                matmul_bt_acc(m, k, n, asl, bsl, csl);
            } else {
                matmul_acc(m, k, n, asl, bsl, csl);
            }
        }
        let shape = if ash.len() == 3 || bsh.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        self.push(Op::Matmul { a, b, tb }, shape, out)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xsh = self.value(x).shape().to_vec();
        let wsh = self.value(w).shape().to_vec();
        assert_eq!(xsh.len(), 2, "conv input must be [T, Cin]");
        assert_eq!(wsh.len(), 3, "conv weight must be [k, Cin, Cout]");
        let (t_in, cin) = (xsh[0], xsh[1]);
        let (k, wcin, cout) = (wsh[0], wsh[1], wsh[2]);
        assert_eq!(cin, wcin, "conv channel mismatch");
        assert_eq!(self.value(bias).len(), cout, "conv bias size");
        assert!(t_in + 2 * pad >= k, "conv input too short");
        let t_out = (t_in + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; t_out * cout];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(bias).data();
            for to in 0..t_out {
                let orow = &mut out[to * cout..(to + 1) * cout];
                orow.copy_from_slice(bd);
                for tap in 0..k {
                    let ti = (to * stride + tap) as isize - pad as isize;
                    if ti < 0 || ti as usize >= t_in {
                        continue;
                    }
                    let xrow = &xd[ti as usize * cin..(ti as usize + 1) * cin];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv != 0.0 {
                            let wrow = &wd[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                            axpy(xv, wrow, orow);
                        }
                    }
                }
            }
        }
        self.push(Op::Conv1d { x, w, bias, stride, pad }, vec![t_out, cout], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Op::Add { a, b }, shape, data)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = *xv.shape().last().unwrap();
        assert_eq!(bv.len(), c, "row bias length");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (r, b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Op::AddRow { x, bias }, shape, data)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        self.push(Op::Mul { a, b }, shape, data)
    }

    pub fn mul_row(&mut self, x: Var, scale: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(scale));
        let c = *xv.shape().last().unwrap();
        assert_eq!(sv.len(), c, "row scale length");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (r, s) in row.iter_mut().zip(sv.data()) {
                *r *= s;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Op::MulRow { x, scale }, shape, data)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| c * v).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Scale { x, c }, shape, data)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| c + v).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::AddConst { x, c }, shape, data)
    }

    /// Per-row constant multiplier on a `[T, C]` tensor; used to zero padded
    /// frames so they cannot leak through convolutions.
    pub fn scale_rows(&mut self, x: Var, weights: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        let (t, c) = (xv.dim(0), xv.dim(1));
        assert_eq!(weights.len(), t, "row weight length");
        let mut data = xv.data().to_vec();
        for (ti, row) in data.chunks_mut(c).enumerate() {
            let w = weights[ti];
            if w != 1.0 {
                for r in row {
                    *r *= w;
                }
            }
        }
        self.push(Op::ScaleRows { x, weights: weights.to_vec() }, vec![t, c], data)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Gelu { x }, shape, data)
    }

    /// Softmax over the last axis with an optional additive key mask shared
    /// across rows. Masked positions get exactly zero weight.
    pub fn softmax_masked(&mut self, x: Var, mask_add: Option<&[f64]>) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        if let Some(m) = mask_add {
            assert_eq!(m.len(), c, "softmax mask length");
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            if let Some(m) = mask_add {
                for (r, &mv) in row.iter_mut().zip(m) {
                    *r += mv;
                }
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            debug_assert!(sum > 0.0, "softmax over fully masked row");
            for r in row.iter_mut() {
                *r /= sum;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Op::Softmax { x, mask_add: mask_add.map(|m| m.to_vec()) }, shape, data)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_masked(x, None)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = 1e-5;
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        assert_eq!(self.value(gain).len(), c, "layernorm gain length");
        assert_eq!(self.value(bias).len(), c, "layernorm bias length");
        let gd = self.value(gain).data().to_vec();
        let bd = self.value(bias).data().to_vec();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (i, r) in row.iter_mut().enumerate() {
                *r = (*r - mean) * inv * gd[i] + bd[i];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Op::LayerNorm { x, gain, bias, eps }, shape, data)
    }

    /// Inverted dropout; identity when the tape is not in training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask: Vec<f64> =
            (0..n).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let data: Vec<f64> =
            self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Dropout { x, mask }, shape, data)
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        assert_eq!(tv.rank(), 2);
        let (v, c) = (tv.dim(0), tv.dim(1));
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            data.extend_from_slice(tv.row(id));
        }
        self.push(Op::Embed { table, ids: ids.to_vec() }, vec![ids.len(), c], data)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).dim(1);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rank(), 2);
            assert_eq!(pv.dim(1), c, "concat_rows col mismatch");
            rows += pv.dim(0);
            data.extend_from_slice(pv.data());
        }
        self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, c], data)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rank(), 2);
        assert_eq!(bv.rank(), 2);
        assert_eq!(av.dim(0), bv.dim(0), "concat_cols row mismatch");
        let (t, ca, cb) = (av.dim(0), av.dim(1), bv.dim(1));
        let mut data = Vec::with_capacity(t * (ca + cb));
        for i in 0..t {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        self.push(Op::ConcatCols { a, b }, vec![t, ca + cb], data)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        let c = xv.dim(1);
        assert!(start + len <= xv.dim(0), "slice_rows out of range");
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows { x, start, len }, vec![len, c], data)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        let (t, c) = (xv.dim(0), xv.dim(1));
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(t * len);
        for i in 0..t {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, vec![t, len], data)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        let (t, c) = (xv.dim(0), xv.dim(1));
        let mut data = Vec::with_capacity(2 * t * c);
        for i in 0..t {
            data.extend_from_slice(xv.row(i));
            data.extend_from_slice(xv.row(i));
        }
        self.push(Op::UpsampleNearest2 { x }, vec![2 * t, c], data)
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2);
        let (n, c) = (xv.dim(0), xv.dim(1));
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        let dh = c / heads;
        let mut data = vec![0.0; n * c];
        let xd = xv.data();
        for h in 0..heads {
            for i in 0..n {
                let src = &xd[i * c + h * dh..i * c + (h + 1) * dh];
                data[(h * n + i) * dh..(h * n + i + 1) * dh].copy_from_slice(src);
            }
        }
        self.push(Op::SplitHeads { x, heads }, vec![heads, n, dh], data)
    }

    pub fn merge_heads(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3);
        let (h, n, dh) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut data = vec![0.0; n * h * dh];
        let xd = xv.data();
        for hi in 0..h {
            for i in 0..n {
                let src = &xd[(hi * n + i) * dh..(hi * n + i + 1) * dh];
                data[i * h * dh + hi * dh..i * h * dh + (hi + 1) * dh].copy_from_slice(src);
            }
        }
        self.push(Op::MergeHeads { x }, vec![n, h * dh], data)
    }

    /// Builds the `[H, n_tot, n_tot]` additive attention bias from per-offset
    /// biases `offsets [2*frames-1, H]` and a shared register bucket `reg [H]`.
    /// Registers occupy the first `registers` positions.
    pub fn assemble_attn_bias(&mut self, offsets: Var, reg: Var, frames: usize, registers: usize) -> Var {
        let ov = self.value(offsets);
        assert_eq!(ov.shape(), &[2 * frames - 1, ov.dim(1)]);
        let heads = ov.dim(1);
        assert_eq!(self.value(reg).len(), heads, "register bias length");
        let n_tot = frames + registers;
        let od = ov.data();
        let rd = self.value(reg).data().to_vec();
        let mut data = vec![0.0; heads * n_tot * n_tot];
        for h in 0..heads {
            for i in 0..n_tot {
                for j in 0..n_tot {
                    let v = if i < registers || j < registers {
                        rd[h]
                    } else {
                        let idx = i as isize - j as isize + frames as isize - 1;
                        od[idx as usize * heads + h]
                    };
                    data[(h * n_tot + i) * n_tot + j] = v;
                }
            }
        }
        self.push(
            Op::AssembleAttnBias { offsets, reg, frames, registers },
            vec![heads, n_tot, n_tot],
            data,
        )
    }

    /// Scalar `sum_t row_w[t] * ||pred[t,:] - target[t,:]||^2`.
    pub fn weighted_sq_sum(&mut self, pred: Var, target: &Tensor, row_w: &[f64]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "loss target shape");
        assert_eq!(pv.rank(), 2);
        assert_eq!(row_w.len(), pv.dim(0), "loss row weight length");
        let mut total = 0.0;
        for (t, w) in row_w.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let pr = pv.row(t);
            let tr = target.row(t);
            let mut s = 0.0;
            for (p, q) in pr.iter().zip(tr) {
                let d = p - q;
                s += d * d;
            }
            total += w * s;
        }
        self.push(
            Op::WeightedSqSum { pred, target: target.clone(), row_w: row_w.to_vec() },
            vec![1],
            vec![total],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::SumAll { x }, vec![1], vec![s])
    }

    /// Linear layer `x @ w + bias` (`w` is `[in, out]`).
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, bias)
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(vec![1], vec![1.0], Dtype::Double).unwrap());
        for id in (0..self.nodes.len()).rev() {
            let gout = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { node_grads: grads, named: self.named.clone() })
    }

    fn backprop_node(&self, id: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (batch, m, k) = match av.rank() {
                    2 => (1, av.dim(0), av.dim(1)),
                    _ => (av.dim(0), av.dim(1), av.dim(2)),
                };
                let n = node.out.dim(node.out.rank() - 1);
                let ga = grad_buf(grads, a.0, av.shape());
                for bi in 0..batch {
                    let gsl = &g[bi * m * n..(bi + 1) * m * n];
                    let bsl = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    let gasl = &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k];
                    if *tb {
                        // y = a b^T, b is [n, k]: da += g b
                        matmul_acc(m, n, k, gsl, bsl, gasl);
                    } else {
                        // da += g b^T, b is [k, n]
                        matmul_bt_acc(m, n, k, gsl, bsl, gasl);
                    }
                }
                let gb = grad_buf(grads, b.0, bv.shape());
                for bi in 0..batch {
                    let gsl = &g[bi * m * n..(bi + 1) * m * n];
                    let asl = &av.data()[bi * m * k..(bi + 1) * m * k];
                    if *tb {
                        // db[n,k] += g^T a
                        let gbsl = &mut gb.data_mut()[bi * n * k..(bi + 1) * n * k];
                        matmul_at_acc(m, n, k, gsl, asl, gbsl);
                    } else {
                        // db[k,n] += a^T g
                        let gbsl = &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n];
                        matmul_at_acc(m, k, n, asl, gsl, gbsl);
                    }
                }
            }
            Op::Conv1d { x, w, bias, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (t_in, cin) = (xv.dim(0), xv.dim(1));
                let (k, cout) = (wv.dim(0), wv.dim(2));
                let t_out = node.out.dim(0);
                {
                    let gb = grad_buf(grads, bias.0, &[cout]);
                    let gbd = gb.data_mut();
                    for to in 0..t_out {
                        axpy(1.0, &g[to * cout..(to + 1) * cout], gbd);
                    }
                }
                {
                    let gw = grad_buf(grads, w.0, wv.shape());
                    let gwd = gw.data_mut();
                    for to in 0..t_out {
                        let grow = &g[to * cout..(to + 1) * cout];
                        for tap in 0..k {
                            let ti = (to * stride + tap) as isize - *pad as isize;
                            if ti < 0 || ti as usize >= t_in {
                                continue;
                            }
                            let xrow = xv.row(ti as usize);
                            for (ci, &xvv) in xrow.iter().enumerate() {
                                if xvv != 0.0 {
                                    axpy(
                                        xvv,
                                        grow,
                                        &mut gwd[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout],
                                    );
                                }
                            }
                        }
                    }
                }
                {
                    let gx = grad_buf(grads, x.0, xv.shape());
                    let gxd = gx.data_mut();
                    let wd = wv.data();
                    for to in 0..t_out {
                        let grow = &g[to * cout..(to + 1) * cout];
                        for tap in 0..k {
                            let ti = (to * stride + tap) as isize - *pad as isize;
                            if ti < 0 || ti as usize >= t_in {
                                continue;
                            }
                            let base = ti as usize * cin;
                            for ci in 0..cin {
                                let wrow = &wd[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                                gxd[base + ci] += dot(wrow, grow);
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                grad_buf(grads, a.0, node.out.shape()).add_assign(g);
                grad_buf(grads, b.0, node.out.shape()).add_assign(g);
            }
            Op::AddRow { x, bias } => {
                grad_buf(grads, x.0, node.out.shape()).add_assign(g);
                let c = self.value(*bias).len();
                let gb = grad_buf(grads, bias.0, self.value(*bias).shape());
                let gbd = gb.data_mut();
                for row in g.chunks(c) {
                    axpy(1.0, row, gbd);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                {
                    let ga = grad_buf(grads, a.0, node.out.shape());
                    for ((gi, &bi), gai) in g.iter().zip(bv).zip(ga.data_mut()) {
                        *gai += gi * bi;
                    }
                }
                let gb = grad_buf(grads, b.0, node.out.shape());
                for ((gi, &ai), gbi) in g.iter().zip(av).zip(gb.data_mut()) {
                    *gbi += gi * ai;
                }
            }
            Op::MulRow { x, scale } => {
                let xv = self.value(*x);
                let sv = self.value(*scale);
                let c = sv.len();
                {
                    let gx = grad_buf(grads, x.0, xv.shape());
                    for (row_g, row_gx) in g.chunks(c).zip(gx.data_mut().chunks_mut(c)) {
                        for ((gi, &si), gxi) in row_g.iter().zip(sv.data()).zip(row_gx) {
                            *gxi += gi * si;
                        }
                    }
                }
                let gs = grad_buf(grads, scale.0, sv.shape());
                let gsd = gs.data_mut();
                for (row_g, row_x) in g.chunks(c).zip(xv.data().chunks(c)) {
                    for ((gi, &xi), gsi) in row_g.iter().zip(row_x).zip(gsd.iter_mut()) {
                        *gsi += gi * xi;
                    }
                }
            }
            Op::Scale { x, c } => {
                let gx = grad_buf(grads, x.0, node.out.shape());
                axpy(*c, g, gx.data_mut());
            }
            Op::AddConst { x, .. } => {
                grad_buf(grads, x.0, node.out.shape()).add_assign(g);
            }
            Op::ScaleRows { x, weights } => {
                let c = node.out.dim(1);
                let gx = grad_buf(grads, x.0, node.out.shape());
                for (ti, (row_g, row_gx)) in
                    g.chunks(c).zip(gx.data_mut().chunks_mut(c)).enumerate()
                {
                    let w = weights[ti];
                    if w != 0.0 {
                        axpy(w, row_g, row_gx);
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let gx = grad_buf(grads, x.0, node.out.shape());
                for ((gi, &xi), gxi) in g.iter().zip(xv).zip(gx.data_mut()) {
                    *gxi += gi * gelu_grad(xi);
                }
            }
            Op::Softmax { x, .. } => {
                let yv = node.out.data();
                let c = *node.out.shape().last().unwrap();
                let gx = grad_buf(grads, x.0, node.out.shape());
                for ((row_y, row_g), row_gx) in
                    yv.chunks(c).zip(g.chunks(c)).zip(gx.data_mut().chunks_mut(c))
                {
                    let dotp: f64 = row_y.iter().zip(row_g).map(|(y, gg)| y * gg).sum();
                    for ((y, gg), gxi) in row_y.iter().zip(row_g).zip(row_gx) {
                        *gxi += y * (gg - dotp);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let c = gv.len();
                {
                    let gb = grad_buf(grads, bias.0, &[c]);
                    let gbd = gb.data_mut();
                    for row in g.chunks(c) {
                        axpy(1.0, row, gbd);
                    }
                }
                // recompute per-row statistics
                let mut ggain = vec![0.0; c];
                {
                    let gx = grad_buf(grads, x.0, xv.shape());
                    for ((row_x, row_g), row_gx) in xv
                        .data()
                        .chunks(c)
                        .zip(g.chunks(c))
                        .zip(gx.data_mut().chunks_mut(c))
                    {
                        let mean = row_x.iter().sum::<f64>() / c as f64;
                        let var =
                            row_x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut m1 = 0.0; // mean of dxhat
                        let mut m2 = 0.0; // mean of dxhat * xhat
                        for i in 0..c {
                            let xhat = (row_x[i] - mean) * inv;
                            let dxhat = row_g[i] * gv[i];
                            ggain[i] += row_g[i] * xhat;
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for i in 0..c {
                            let xhat = (row_x[i] - mean) * inv;
                            let dxhat = row_g[i] * gv[i];
                            row_gx[i] += inv * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
                let gg = grad_buf(grads, gain.0, &[c]);
                axpy(1.0, &ggain, gg.data_mut());
            }
            Op::Dropout { x, mask } => {
                let gx = grad_buf(grads, x.0, node.out.shape());
                for ((gi, &mi), gxi) in g.iter().zip(mask).zip(gx.data_mut()) {
                    *gxi += gi * mi;
                }
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let c = tv.dim(1);
                let gt = grad_buf(grads, table.0, tv.shape());
                let gtd = gt.data_mut();
                for (t, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g[t * c..(t + 1) * c], &mut gtd[id * c..(id + 1) * c]);
                }
            }
            Op::ConcatRows { parts } => {
                let c = node.out.dim(1);
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).dim(0);
                    let gp = grad_buf(grads, p.0, self.value(p).shape());
                    axpy(1.0, &g[offset * c..(offset + rows) * c], gp.data_mut());
                    offset += rows;
                }
            }
            Op::ConcatCols { a, b } => {
                let (t, ca) = (self.value(*a).dim(0), self.value(*a).dim(1));
                let cb = self.value(*b).dim(1);
                let ctot = ca + cb;
                {
                    let ga = grad_buf(grads, a.0, self.value(*a).shape());
                    let gad = ga.data_mut();
                    for i in 0..t {
                        axpy(1.0, &g[i * ctot..i * ctot + ca], &mut gad[i * ca..(i + 1) * ca]);
                    }
                }
                let gb = grad_buf(grads, b.0, self.value(*b).shape());
                let gbd = gb.data_mut();
                for i in 0..t {
                    axpy(1.0, &g[i * ctot + ca..(i + 1) * ctot], &mut gbd[i * cb..(i + 1) * cb]);
                }
            }
            Op::SliceRows { x, start, .. } => {
                let xv = self.value(*x);
                let c = xv.dim(1);
                let gx = grad_buf(grads, x.0, xv.shape());
                axpy(1.0, g, &mut gx.data_mut()[start * c..start * c + g.len()]);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let (t, c) = (xv.dim(0), xv.dim(1));
                let gx = grad_buf(grads, x.0, xv.shape());
                let gxd = gx.data_mut();
                for i in 0..t {
                    axpy(1.0, &g[i * len..(i + 1) * len], &mut gxd[i * c + start..i * c + start + len]);
                }
            }
            Op::UpsampleNearest2 { x } => {
                let xv = self.value(*x);
                let (t, c) = (xv.dim(0), xv.dim(1));
                let gx = grad_buf(grads, x.0, xv.shape());
                let gxd = gx.data_mut();
                for i in 0..t {
                    axpy(1.0, &g[2 * i * c..(2 * i + 1) * c], &mut gxd[i * c..(i + 1) * c]);
                    axpy(1.0, &g[(2 * i + 1) * c..(2 * i + 2) * c], &mut gxd[i * c..(i + 1) * c]);
                }
            }
            Op::SplitHeads { x, heads } => {
                let xv = self.value(*x);
                let (n, c) = (xv.dim(0), xv.dim(1));
                let dh = c / heads;
                let gx = grad_buf(grads, x.0, xv.shape());
                let gxd = gx.data_mut();
                for h in 0..*heads {
                    for i in 0..n {
                        axpy(
                            1.0,
                            &g[(h * n + i) * dh..(h * n + i + 1) * dh],
                            &mut gxd[i * c + h * dh..i * c + (h + 1) * dh],
                        );
                    }
                }
            }
            Op::MergeHeads { x } => {
                let xv = self.value(*x);
                let (h, n, dh) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let gx = grad_buf(grads, x.0, xv.shape());
                let gxd = gx.data_mut();
                for hi in 0..h {
                    for i in 0..n {
                        axpy(
                            1.0,
                            &g[i * h * dh + hi * dh..i * h * dh + (hi + 1) * dh],
                            &mut gxd[(hi * n + i) * dh..(hi * n + i + 1) * dh],
                        );
                    }
                }
            }
            Op::AssembleAttnBias { offsets, reg, frames, registers } => {
                let ov = self.value(*offsets);
                let heads = ov.dim(1);
                let n_tot = frames + registers;
                {
                    let go = grad_buf(grads, offsets.0, ov.shape());
                    let god = go.data_mut();
                    for h in 0..heads {
                        for i in *registers..n_tot {
                            for j in *registers..n_tot {
                                let idx = i as isize - j as isize + *frames as isize - 1;
                                god[idx as usize * heads + h] += g[(h * n_tot + i) * n_tot + j];
                            }
                        }
                    }
                }
                let gr = grad_buf(grads, reg.0, &[heads]);
                let grd = gr.data_mut();
                for h in 0..heads {
                    for i in 0..n_tot {
                        for j in 0..n_tot {
                            if i < *registers || j < *registers {
                                grd[h] += g[(h * n_tot + i) * n_tot + j];
                            }
                        }
                    }
                }
            }
            Op::WeightedSqSum { pred, target, row_w } => {
                let pv = self.value(*pred);
                let c = pv.dim(1);
                let gscalar = g[0];
                let gp = grad_buf(grads, pred.0, pv.shape());
                let gpd = gp.data_mut();
                for (t, w) in row_w.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    let pr = pv.row(t);
                    let tr = target.row(t);
                    let out = &mut gpd[t * c..(t + 1) * c];
                    for ((p, q), o) in pr.iter().zip(tr).zip(out) {
                        *o += gscalar * w * 2.0 * (p - q);
                    }
                }
            }
            Op::SumAll { x } => {
                let gx = grad_buf(grads, x.0, self.value(*x).shape());
                let gs = g[0];
                for v in gx.data_mut() {
                    *v += gs;
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Conv1d { .. } => "conv1d",
        Op::Add { .. } => "add",
        Op::AddRow { .. } => "add_row",
        Op::Mul { .. } => "mul",
        Op::MulRow { .. } => "mul_row",
        Op::Scale { .. } => "scale",
        Op::AddConst { .. } => "add_const",
        Op::ScaleRows { .. } => "scale_rows",
        Op::Gelu { .. } => "gelu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Dropout { .. } => "dropout",
        Op::Embed { .. } => "embed",
        Op::ConcatRows { .. } => "concat_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::UpsampleNearest2 { .. } => "upsample_nearest2",
        Op::SplitHeads { .. } => "split_heads",
        Op::MergeHeads { .. } => "merge_heads",
        Op::AssembleAttnBias { .. } => "assemble_attn_bias",
        Op::WeightedSqSum { .. } => "weighted_sq_sum",
        Op::SumAll { .. } => "sum_all",
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], id: usize, shape: &[usize]) -> &'a mut Tensor {
    if grads[id].is_none() {
        grads[id] = Some(Tensor::zeros(shape, Dtype::Double));
    }
    grads[id].as_mut().unwrap()
}

impl Tensor {
    fn add_assign(&mut self, delta: &[f64]) {
        axpy(1.0, delta, self.data_mut());
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

/// Result of a backward sweep.
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    named: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.node_grads[v.0].as_ref()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name).and_then(|&id| self.node_grads[id].as_ref())
    }

    /// Adds every named gradient into the store (missing ones count as zero).
    pub fn accumulate_into(&self, store: &mut ParameterStore) -> Result<()> {
        for (name, &id) in &self.named {
            if let Some(g) = &self.node_grads[id] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Scaled accumulation used by the batch-parallel trainer.
    pub fn accumulate_scaled_into(&self, store: &mut ParameterStore, scale: f64) -> Result<()> {
        for (name, &id) in &self.named {
            if let Some(g) = &self.node_grads[id] {
                let p = store.get_mut(name)?;
                axpy(scale, g.data(), p.grad.data_mut());
            }
        }
        Ok(())
    }
}

/// One finite-difference comparison entry.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err() <= rel_tol
    }
}

/// Compares analytic gradients against central finite differences with step
/// `1e-4` in double precision. For each parameter up to `samples_per_param`
/// elements are probed (deterministically chosen per name).
pub fn grad_check<F>(
    store: &ParameterStore,
    samples_per_param: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let h = 1e-4;
    let mut tape = Tape::new(Dtype::Double);
    let loss = build(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let touched = tape.touched_params();

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new(Dtype::Double);
        let l = build(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport::default();
    for name in touched {
        let n = store.get(&name)?.value.len();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::params::name_seed(seed, &name));
        let mut idxs: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            let mut set = std::collections::BTreeSet::new();
            while set.len() < samples_per_param {
                set.insert(rng.gen_range(0..n));
            }
            set.into_iter().collect()
        };
        idxs.dedup();
        let zero = Tensor::zeros(store.get(&name)?.value.shape(), Dtype::Double);
        let analytic = grads.by_name(&name).unwrap_or(&zero);
        let mut max_rel = 0.0f64;
        for idx in idxs {
            let mut plus = store.clone();
            plus.get_mut(&name)?.value.data_mut()[idx] += h;
            let lp = eval(&plus)?;
            let mut minus = store.clone();
            minus.get_mut(&name)?.value.data_mut()[idx] -= h;
            let lm = eval(&minus)?;
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.data()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((an - fd).abs() / denom);
        }
        report.entries.push(GradCheckEntry { name, max_rel_err: max_rel });
    }
    Ok(report)
}
