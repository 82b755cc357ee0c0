use std::sync::Arc;

use rand::Rng;

use crate::float::{gemm, Float, MatRef};
use crate::kernels::{self, HeadKv};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var>, lo: usize, hi: usize },
    MatMul(Var, Var),
    Gelu(Var),
    Silu(Var),
    Reshape(Var),
    LayerNorm { x: Var, g: Var, b: Var, mean: Vec<F>, rstd: Vec<F> },
    GroupNorm { x: Var, g: Var, b: Var, groups: usize, mean: Vec<F>, rstd: Vec<F> },
    Attention { q: Var, k: Var, v: Var, heads: usize, limits: Vec<usize>, scale: F, probs: Vec<F>, keep: Option<Vec<F>> },
    GatherRows { table: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample2x(Var),
    Resize { x: Var, rh: Arc<Tensor<F>>, rw: Arc<Tensor<F>> },
    ToCells(Var),
    FromCells(Var),
    SumAll(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<F>, probs: Vec<F> },
    Dropout { x: Var, mask: Vec<F> },
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape built with [`Tape::inference`] only evaluates: nothing is retained
/// for the backward pass and [`Tape::backward`] is unavailable.
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Self- or cross-attention key visibility: query `i` sees keys `0..limits[i]`.
pub struct AttnSpec<'a> {
    pub heads: usize,
    pub limits: &'a [usize],
    pub dropout: f64,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never receives a gradient).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor<F>>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Arc<Tensor<F>>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant_arc(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<F>> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(av.shape(), data);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape(), av.data().iter().map(|&x| x * s).collect());
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `(n x m) + (m)` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let m = bv.numel();
        assert_eq!(xv.numel() % m, 0, "bias length mismatch");
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let out = Tensor::new(xv.shape(), data);
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    /// `x (n x k) @ w (k x out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let cols = self.value(w).dims2().1;
        self.linear_cols(x, w, b, 0, cols)
    }

    /// Linear map restricted to output columns `lo..hi` of `w` (and `b`).
    pub fn linear_cols(&mut self, x: Var, w: Var, b: Option<Var>, lo: usize, hi: usize) -> Var {
        let (n, k) = self.value(x).dims2();
        let (wk, ld) = self.value(w).dims2();
        assert_eq!(k, wk, "linear input width {k} vs weight rows {wk}");
        assert!(lo <= hi && hi <= ld, "column window {lo}..{hi} outside {ld}");
        let mut out = vec![F::zero(); n * (hi - lo)];
        let bias = b.map(|bv| self.data(bv));
        kernels::linear_forward(self.data(x), n, k, self.data(w), ld, lo, hi, bias, &mut out);
        let t = Tensor::new(&[n, hi - lo], out);
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(t, Op::Linear { x, w, b, lo, hi }, &ins)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![F::zero(); n * m];
        gemm(MatRef::new(self.data(a), n, k), MatRef::new(self.data(b), k, m), F::zero(), &mut out, m);
        self.push(Tensor::new(&[n, m], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| kernels::gelu(v)).collect());
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| kernels::silu(v)).collect());
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = (*self.nodes[x.0].value).clone().reshape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Var {
        let (n, c) = self.value(x).dims2();
        let mut out = vec![F::zero(); n * c];
        let (mean, rstd) =
            kernels::layer_norm_forward(self.data(x), c, self.data(g), self.data(b), F::lit(eps), &mut out);
        self.push(Tensor::new(&[n, c], out), Op::LayerNorm { x, g, b, mean, rstd }, &[x, g, b])
    }

    pub fn group_norm(&mut self, x: Var, g: Var, b: Var, groups: usize, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let mut out = vec![F::zero(); n * c * h * w];
        let (mean, rstd) = kernels::group_norm_forward(
            self.data(x),
            n,
            c,
            h * w,
            groups,
            self.data(g),
            self.data(b),
            F::lit(eps),
            &mut out,
        );
        self.push(Tensor::new(&[n, c, h, w], out), Op::GroupNorm { x, g, b, groups, mean, rstd }, &[x, g, b])
    }

    /// Multi-head scaled dot-product attention with per-query key prefixes.
    ///
    /// `q` is `nq x width`, `k` and `v` are `nk x width`. Query `i` attends to
    /// keys `0..spec.limits[i]`. Dropout on attention weights is applied only
    /// when gradients are enabled and `spec.dropout > 0`.
    pub fn attention<R: Rng + ?Sized>(&mut self, q: Var, k: Var, v: Var, spec: &AttnSpec<'_>, rng: &mut R) -> Var {
        let (nq, width) = self.value(q).dims2();
        let (nk, wk) = self.value(k).dims2();
        assert_eq!(width, wk, "attention width mismatch");
        assert_eq!(self.value(v).dims2(), (nk, width), "attention value shape mismatch");
        assert_eq!(spec.limits.len(), nq, "one key limit per query required");
        assert_eq!(width % spec.heads, 0, "heads must divide width");
        let heads = spec.heads;
        let hd = width / heads;
        let scale = F::one() / F::lit(hd as f64).sqrt();
        let train = self.grad_enabled && [q, k, v].iter().any(|x| self.nodes[x.0].needs_grad);
        let use_dropout = train && spec.dropout > 0.0;
        let mut out = vec![F::zero(); nq * width];
        let mut probs = if train { vec![F::zero(); heads * nq * nk] } else { Vec::new() };
        let mut keep = if use_dropout { Some(vec![F::zero(); heads * nq * nk]) } else { None };
        let keep_scale = F::lit(1.0 / (1.0 - spec.dropout));
        let mut kt = vec![F::zero(); hd * nk];
        let mut row_probs = vec![F::zero(); nk];
        let mut head_out = vec![F::zero(); hd];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for h in 0..heads {
            kernels::transpose_head(kd, nk, width, h, hd, &mut kt);
            let kv = HeadKv { kt: &kt, kt_stride: nk, v: vd, v_stride: width, v_offset: h * hd };
            for i in 0..nq {
                let limit = spec.limits[i];
                assert!(limit >= 1 && limit <= nk, "key limit {limit} outside 1..={nk}");
                let qrow = &qd[i * width + h * hd..i * width + (h + 1) * hd];
                kernels::attend_one(qrow, kv, limit, scale, &mut row_probs, &mut head_out);
                if train {
                    let base = (h * nq + i) * nk;
                    probs[base..base + limit].copy_from_slice(&row_probs[..limit]);
                    if let Some(keep) = keep.as_mut() {
                        for j in 0..limit {
                            let m = if rng.random::<f64>() >= spec.dropout { keep_scale } else { F::zero() };
                            keep[base + j] = m;
                            row_probs[j] *= m;
                        }
                        kernels::mix_values(&row_probs[..limit], kv, &mut head_out);
                    }
                }
                out[i * width + h * hd..i * width + (h + 1) * hd].copy_from_slice(&head_out);
            }
        }
        let t = Tensor::new(&[nq, width], out);
        let op = Op::Attention { q, k, v, heads, limits: spec.limits.to_vec(), scale, probs, keep };
        self.push(t, op, &[q, k, v])
    }

    /// Rows `idx` of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let (rows, c) = self.value(table).dims2();
        let src = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < rows, "row index {i} out of range {rows}");
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(Tensor::new(&[idx.len(), c], out), Op::GatherRows { table, idx: idx.to_vec() }, &[table])
    }

    /// Places row `r` of `x` at row `idx[r]` of an `n_rows`-row zero matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_rows: usize) -> Var {
        let (rows, c) = self.value(x).dims2();
        assert_eq!(rows, idx.len(), "scatter index count mismatch");
        let mut out = vec![F::zero(); n_rows * c];
        let src = self.data(x);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < n_rows, "scatter row {i} out of range {n_rows}");
            out[i * c..(i + 1) * c].copy_from_slice(&src[r * c..(r + 1) * c]);
        }
        self.push(Tensor::new(&[n_rows, c], out), Op::ScatterRows { x, idx: idx.to_vec() }, &[x])
    }

    /// 2-D convolution over `(n, c, h, w)` with square kernels `(o, c, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, k, k2) = self.value(w).dims4();
        assert_eq!((wc, k), (c, k2), "conv weight shape mismatch");
        let ho = kernels::conv_out_size(h, k, stride, pad);
        let wo = kernels::conv_out_size(wd, k, stride, pad);
        let plane = ho * wo;
        let ckk = c * k * k;
        let mut col = vec![F::zero(); ckk * plane];
        let mut out = vec![F::zero(); n * o * plane];
        let xd = self.data(x);
        let wdat = self.data(w);
        for img in 0..n {
            kernels::im2col(&xd[img * c * h * wd..(img + 1) * c * h * wd], c, h, wd, k, stride, pad, &mut col);
            let dst = &mut out[img * o * plane..(img + 1) * o * plane];
            gemm(MatRef::new(wdat, o, ckk), MatRef::new(&col, ckk, plane), F::zero(), dst, plane);
            if let Some(bv) = b {
                let bd = self.data(bv);
                for (oc, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[oc]);
                }
            }
        }
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(Tensor::new(&[n, o, ho, wo], out), Op::Conv2d { x, w, b, stride, pad }, &ins)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let xd = self.data(x);
        let mut out = vec![F::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xd[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(&[n, c, 2 * h, 2 * w], out), Op::Upsample2x(x), &[x])
    }

    /// Separable linear resampling of every plane: `out = rh @ x @ rw^T`.
    pub fn resize(&mut self, x: Var, rh: Arc<Tensor<F>>, rw: Arc<Tensor<F>>) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, rh_in) = rh.dims2();
        let (wo, rw_in) = rw.dims2();
        assert_eq!((rh_in, rw_in), (h, w), "resize matrix shape mismatch");
        let xd = self.data(x);
        let mut tmp = vec![F::zero(); ho * w];
        let mut out = vec![F::zero(); n * c * ho * wo];
        for p in 0..n * c {
            gemm(MatRef::new(rh.data(), ho, h), MatRef::new(&xd[p * h * w..(p + 1) * h * w], h, w), F::zero(), &mut tmp, w);
            gemm(
                MatRef::new(&tmp, ho, w),
                MatRef::new(rw.data(), wo, w).t(),
                F::zero(),
                &mut out[p * ho * wo..(p + 1) * ho * wo],
                wo,
            );
        }
        self.push(Tensor::new(&[n, c, ho, wo], out), Op::Resize { x, rh, rw }, &[x])
    }

    /// `(n, c, h, w)` to `(n*h*w, c)`: one row per spatial cell.
    pub fn to_cells(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let xd = self.data(x);
        let hw = h * w;
        let mut out = vec![F::zero(); n * hw * c];
        for img in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(img * hw + p) * c + ch] = xd[(img * c + ch) * hw + p];
                }
            }
        }
        self.push(Tensor::new(&[n * hw, c], out), Op::ToCells(x), &[x])
    }

    /// Inverse of [`Tape::to_cells`].
    pub fn from_cells(&mut self, x: Var, n: usize, h: usize, w: usize) -> Var {
        let (rows, c) = self.value(x).dims2();
        let hw = h * w;
        assert_eq!(rows, n * hw, "from_cells row count mismatch");
        let xd = self.data(x);
        let mut out = vec![F::zero(); n * c * hw];
        for img in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    out[(img * c + ch) * hw + p] = xd[(img * hw + p) * c + ch];
                }
            }
        }
        self.push(Tensor::new(&[n, c, h, w], out), Op::FromCells(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: F = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let mut s = F::zero();
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            let d = x - y;
            s += d * d;
        }
        let n = F::lit(av.numel() as f64);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Var {
        let (n, m) = self.value(logits).dims2();
        assert_eq!(targets.len(), n, "one target per row required");
        assert_eq!(weights.len(), n, "one weight per row required");
        let ld = self.data(logits);
        let mut probs = vec![F::zero(); n * m];
        let mut total = F::zero();
        for i in 0..n {
            assert!(targets[i] < m, "target {} outside {m} classes", targets[i]);
            let row = &ld[i * m..(i + 1) * m];
            let pr = &mut probs[i * m..(i + 1) * m];
            let nll = softmax_nll(row, targets[i], pr);
            total += weights[i] * nll;
        }
        let keep = self.grad_enabled && self.nodes[logits.0].needs_grad;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs: if keep { probs } else { Vec::new() },
        };
        self.push(Tensor::scalar(total), op, &[logits])
    }

    /// Inverted dropout. Identity when gradients are disabled or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if !self.grad_enabled || p <= 0.0 {
            return x;
        }
        let keep_scale = F::lit(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<F> =
            (0..xv.numel()).map(|_| if rng.random::<f64>() >= p { keep_scale } else { F::zero() }).collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape(), data);
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse pass from a scalar node. Gradients are returned for every node
    /// on the path to a [`Tape::param`] input.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        self.backward_impl(loss, false)
    }

    /// Like [`Tape::backward`] but keeps the gradient of every intermediate node.
    pub fn backward_retain(&self, loss: Var) -> Grads<F> {
        self.backward_impl(loss, true)
    }

    fn backward_impl(&self, loss: Var, retain: bool) -> Grads<F> {
        assert!(self.grad_enabled, "backward on an inference tape");
        assert_eq!(self.value(loss).numel(), 1, "backward requires a scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![F::one()]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_op(idx, &g, &mut grads);
            if retain {
                grads[idx] = Some(g);
            }
        }
        Grads { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_op(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, self, || gd.to_vec());
                accumulate(grads, *b, self, || gd.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, self, || gd.to_vec());
                accumulate(grads, *b, self, || gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                accumulate(grads, *a, self, || gd.iter().zip(bd).map(|(&x, &y)| x * y).collect());
                accumulate(grads, *b, self, || gd.iter().zip(ad).map(|(&x, &y)| x * y).collect());
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, self, || gd.iter().map(|&v| v * *s).collect());
            }
            Op::AddBias(x, b) => {
                accumulate(grads, *x, self, || gd.to_vec());
                let m = self.value(*b).numel();
                accumulate(grads, *b, self, || {
                    let mut acc = vec![F::zero(); m];
                    for row in gd.chunks_exact(m) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc
                });
            }
            Op::Linear { x, w, b, lo, hi } => {
                let (n, k) = self.value(*x).dims2();
                let ld = self.value(*w).dims2().1;
                let m = hi - lo;
                let wd = self.data(*w);
                accumulate(grads, *x, self, || {
                    let mut dx = vec![F::zero(); n * k];
                    gemm(MatRef::new(gd, n, m), MatRef::strided(&wd[*lo..], k, m, ld).t(), F::zero(), &mut dx, k);
                    dx
                });
                if self.needs(*w) {
                    let xd = self.data(*x);
                    let gw = grad_slot(grads, *w, self);
                    gemm(MatRef::new(xd, n, k).t(), MatRef::new(gd, n, m), F::one(), &mut gw.data_mut()[*lo..], ld);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = grad_slot(grads, *b, self);
                        for row in gd.chunks_exact(m) {
                            for (a, &v) in gb.data_mut()[*lo..*hi].iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2();
                let m = self.value(*b).dims2().1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                accumulate(grads, *a, self, || {
                    let mut da = vec![F::zero(); n * k];
                    gemm(MatRef::new(gd, n, m), MatRef::new(bd, k, m).t(), F::zero(), &mut da, k);
                    da
                });
                accumulate(grads, *b, self, || {
                    let mut db = vec![F::zero(); k * m];
                    gemm(MatRef::new(ad, n, k).t(), MatRef::new(gd, n, m), F::zero(), &mut db, m);
                    db
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                accumulate(grads, *x, self, || gd.iter().zip(xd).map(|(&g, &v)| g * kernels::gelu_grad(v)).collect());
            }
            Op::Silu(x) => {
                let xd = self.data(*x);
                accumulate(grads, *x, self, || gd.iter().zip(xd).map(|(&g, &v)| g * kernels::silu_grad(v)).collect());
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, self, || gd.to_vec());
            }
            Op::LayerNorm { x, g: gamma, b: beta, mean, rstd } => {
                let (n, c) = self.value(*x).dims2();
                let xd = self.data(*x);
                let gam = self.data(*gamma);
                let mut dx = vec![F::zero(); n * c];
                let mut dg = vec![F::zero(); c];
                let mut db = vec![F::zero(); c];
                let inv_c = F::one() / F::lit(c as f64);
                for r in 0..n {
                    let xr = &xd[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxh = F::zero();
                    let mut sum_dxh_xh = F::zero();
                    for i in 0..c {
                        let xh = (xr[i] - mu) * rs;
                        let dxh = gr[i] * gam[i];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dg[i] += gr[i] * xh;
                        db[i] += gr[i];
                    }
                    for i in 0..c {
                        let xh = (xr[i] - mu) * rs;
                        let dxh = gr[i] * gam[i];
                        dx[r * c + i] = rs * (dxh - sum_dxh * inv_c - xh * sum_dxh_xh * inv_c);
                    }
                }
                accumulate(grads, *x, self, || dx);
                accumulate(grads, *gamma, self, || dg);
                accumulate(grads, *beta, self, || db);
            }
            Op::GroupNorm { x, g: gamma, b: beta, groups, mean, rstd } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let cg = c / groups;
                let xd = self.data(*x);
                let gam = self.data(*gamma);
                let mut dx = vec![F::zero(); n * c * hw];
                let mut dg = vec![F::zero(); c];
                let mut db = vec![F::zero(); c];
                let inv = F::one() / F::lit((cg * hw) as f64);
                for img in 0..n {
                    for gr in 0..*groups {
                        let (mu, rs) = (mean[img * groups + gr], rstd[img * groups + gr]);
                        let mut sum_dxh = F::zero();
                        let mut sum_dxh_xh = F::zero();
                        for ci in 0..cg {
                            let ch = gr * cg + ci;
                            let off = (img * c + ch) * hw;
                            for p in 0..hw {
                                let xh = (xd[off + p] - mu) * rs;
                                let dxh = gd[off + p] * gam[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                                dg[ch] += gd[off + p] * xh;
                                db[ch] += gd[off + p];
                            }
                        }
                        for ci in 0..cg {
                            let ch = gr * cg + ci;
                            let off = (img * c + ch) * hw;
                            for p in 0..hw {
                                let xh = (xd[off + p] - mu) * rs;
                                let dxh = gd[off + p] * gam[ch];
                                dx[off + p] = rs * (dxh - sum_dxh * inv - xh * sum_dxh_xh * inv);
                            }
                        }
                    }
                }
                accumulate(grads, *x, self, || dx);
                accumulate(grads, *gamma, self, || dg);
                accumulate(grads, *beta, self, || db);
            }
            Op::Attention { q, k, v, heads, limits, scale, probs, keep } => {
                self.attention_backward(gd, *q, *k, *v, *heads, limits, *scale, probs, keep.as_deref(), grads);
            }
            Op::GatherRows { table, idx } => {
                let (rows, c) = self.value(*table).dims2();
                accumulate(grads, *table, self, || {
                    let mut dt = vec![F::zero(); rows * c];
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, &v) in dt[i * c..(i + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                            *a += v;
                        }
                    }
                    dt
                });
            }
            Op::ScatterRows { x, idx } => {
                let c = self.value(*x).dims2().1;
                accumulate(grads, *x, self, || {
                    let mut dx = Vec::with_capacity(idx.len() * c);
                    for &i in idx {
                        dx.extend_from_slice(&gd[i * c..(i + 1) * c]);
                    }
                    dx
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, c, h, wd) = self.value(*x).dims4();
                let (o, _, k, _) = self.value(*w).dims4();
                let ho = kernels::conv_out_size(h, k, *stride, *pad);
                let wo = kernels::conv_out_size(wd, k, *stride, *pad);
                let plane = ho * wo;
                let ckk = c * k * k;
                let xd = self.data(*x);
                let wdat = self.data(*w);
                let mut col = vec![F::zero(); ckk * plane];
                let mut dw = if self.needs(*w) { Some(vec![F::zero(); o * ckk]) } else { None };
                let mut dx = if self.needs(*x) { Some(vec![F::zero(); n * c * h * wd]) } else { None };
                for img in 0..n {
                    let gimg = &gd[img * o * plane..(img + 1) * o * plane];
                    if let Some(dw) = dw.as_mut() {
                        kernels::im2col(&xd[img * c * h * wd..(img + 1) * c * h * wd], c, h, wd, k, *stride, *pad, &mut col);
                        gemm(MatRef::new(gimg, o, plane), MatRef::new(&col, ckk, plane).t(), F::one(), dw, ckk);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(MatRef::new(wdat, o, ckk).t(), MatRef::new(gimg, o, plane), F::zero(), &mut col, plane);
                        kernels::col2im(&col, c, h, wd, k, *stride, *pad, &mut dx[img * c * h * wd..(img + 1) * c * h * wd]);
                    }
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, self, || dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, self, || dx);
                }
                if let Some(b) = b {
                    accumulate(grads, *b, self, || {
                        let mut db = vec![F::zero(); o];
                        for img in 0..n {
                            for (oc, chunk) in gd[img * o * plane..(img + 1) * o * plane].chunks_exact(plane).enumerate() {
                                for &v in chunk {
                                    db[oc] += v;
                                }
                            }
                        }
                        db
                    });
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                accumulate(grads, *x, self, || {
                    let mut dx = vec![F::zero(); n * c * h * w];
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    dx
                });
            }
            Op::Resize { x, rh, rw } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let ho = rh.dims2().0;
                let wo = rw.dims2().0;
                accumulate(grads, *x, self, || {
                    let mut dx = vec![F::zero(); n * c * h * w];
                    let mut tmp = vec![F::zero(); h * wo];
                    for p in 0..n * c {
                        gemm(
                            MatRef::new(rh.data(), ho, h).t(),
                            MatRef::new(&gd[p * ho * wo..(p + 1) * ho * wo], ho, wo),
                            F::zero(),
                            &mut tmp,
                            wo,
                        );
                        gemm(MatRef::new(&tmp, h, wo), MatRef::new(rw.data(), wo, w), F::zero(), &mut dx[p * h * w..(p + 1) * h * w], w);
                    }
                    dx
                });
            }
            Op::ToCells(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                accumulate(grads, *x, self, || {
                    let mut dx = vec![F::zero(); n * c * hw];
                    for img in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[(img * c + ch) * hw + p] = gd[(img * hw + p) * c + ch];
                            }
                        }
                    }
                    dx
                });
            }
            Op::FromCells(x) => {
                let (n, c, h, w) = g.dims4();
                let hw = h * w;
                accumulate(grads, *x, self, || {
                    let mut dx = vec![F::zero(); n * hw * c];
                    for img in 0..n {
                        for p in 0..hw {
                            for ch in 0..c {
                                dx[(img * hw + p) * c + ch] = gd[(img * c + ch) * hw + p];
                            }
                        }
                    }
                    dx
                });
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, self, || vec![gd[0]; n]);
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let coef = F::lit(2.0) * gd[0] / F::lit(ad.len() as f64);
                accumulate(grads, *a, self, || ad.iter().zip(bd).map(|(&x, &y)| coef * (x - y)).collect());
                accumulate(grads, *b, self, || ad.iter().zip(bd).map(|(&x, &y)| coef * (y - x)).collect());
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let (n, m) = self.value(*logits).dims2();
                accumulate(grads, *logits, self, || {
                    let mut dl = vec![F::zero(); n * m];
                    for i in 0..n {
                        let wgt = weights[i] * gd[0];
                        if wgt == F::zero() {
                            continue;
                        }
                        for j in 0..m {
                            let onehot = if j == targets[i] { F::one() } else { F::zero() };
                            dl[i * m + j] = wgt * (probs[i * m + j] - onehot);
                        }
                    }
                    dl
                });
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, *x, self, || gd.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gd: &[F],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        limits: &[usize],
        scale: F,
        probs: &[F],
        keep: Option<&[F]>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (nq, width) = self.value(q).dims2();
        let nk = self.value(k).dims2().0;
        let hd = width / heads;
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![F::zero(); nq * width];
        let mut dk = vec![F::zero(); nk * width];
        let mut dv = vec![F::zero(); nk * width];
        let mut dp = vec![F::zero(); nq * nk];
        let mut pk = vec![F::zero(); nq * nk];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            let go = MatRef::strided(&gd[h * hd..], nq, hd, width);
            let vh = MatRef::strided(&vd[h * hd..], nk, hd, width);
            let kh = MatRef::strided(&kd[h * hd..], nk, hd, width);
            let qh = MatRef::strided(&qd[h * hd..], nq, hd, width);
            // probabilities actually used for mixing values
            let mixed: &[F] = match keep {
                Some(keep) => {
                    let km = &keep[h * nq * nk..(h + 1) * nq * nk];
                    for ((o, &a), &b) in pk.iter_mut().zip(p).zip(km) {
                        *o = a * b;
                    }
                    &pk
                }
                None => p,
            };
            // dV = P^T dO
            gemm(MatRef::new(mixed, nq, nk).t(), go, F::one(), &mut dv[h * hd..], width);
            // dP = dO V^T
            gemm(go, vh.t(), F::zero(), &mut dp, nk);
            if let Some(keep) = keep {
                let km = &keep[h * nq * nk..(h + 1) * nq * nk];
                for (a, &b) in dp.iter_mut().zip(km) {
                    *a *= b;
                }
            }
            // dS = P * (dP - rowsum(dP * P)), scaled
            for i in 0..nq {
                let lim = limits[i];
                let pr = &p[i * nk..(i + 1) * nk];
                let dr = &mut dp[i * nk..(i + 1) * nk];
                let mut dot = F::zero();
                for j in 0..lim {
                    dot += pr[j] * dr[j];
                }
                for j in 0..lim {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                for x in &mut dr[lim..] {
                    *x = F::zero();
                }
            }
            gemm(MatRef::new(&dp, nq, nk), kh, F::one(), &mut dq[h * hd..], width);
            gemm(MatRef::new(&dp, nq, nk).t(), qh, F::one(), &mut dk[h * hd..], width);
        }
        accumulate(grads, q, self, || dq);
        accumulate(grads, k, self, || dk);
        accumulate(grads, v, self, || dv);
    }
}

/// Numerically stable `-log softmax(row)[target]`; writes softmax into `probs`.
pub fn softmax_nll<F: Float>(row: &[F], target: usize, probs: &mut [F]) -> F {
    let mut max = F::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for (p, &v) in probs.iter_mut().zip(row) {
        *p = (v - max).exp();
        sum += *p;
    }
    let inv = F::one() / sum;
    for p in probs.iter_mut() {
        *p *= inv;
    }
    sum.ln() + max - row[target]
}

fn grad_slot<'g, F: Float>(grads: &'g mut [Option<Tensor<F>>], v: Var, tape: &Tape<F>) -> &'g mut Tensor<F> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(tape.value(v).shape()))
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], v: Var, tape: &Tape<F>, make: impl FnOnce() -> Vec<F>) {
    if !tape.needs(v) {
        return;
    }
    let d = make();
    match grads[v.0].as_mut() {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(d) {
                *a += b;
            }
        }
        None => grads[v.0] = Some(Tensor::new(tape.value(v).shape(), d)),
    }
}
