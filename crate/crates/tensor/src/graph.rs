//! Tape of recorded operations and their reverse-mode adjoints.
//!
//! Nodes are appended in evaluation order, so the tape index order is already
//! a topological order; `backward` walks it in reverse.

use crate::error::{mismatch, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        src: Var,
        indices: Vec<usize>,
    },
    ScatterAddRows {
        src: Var,
        indices: Vec<usize>,
    },
    ScatterMaxRows {
        src: Var,
        winners: Vec<Option<usize>>,
    },
    Sum {
        src: Var,
        axis: usize,
    },
    Mean {
        src: Var,
        axis: usize,
    },
    SumAll(Var),
    Softmax {
        src: Var,
        axis: usize,
    },
    SegmentSoftmax {
        src: Var,
        segments: Vec<usize>,
    },
    L2NormRows(Var),
    MulRows(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
    },
    Upsample2x(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass: values plus the operations that produced them.
///
/// A graph is single-threaded; build one per frame pair.
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    track_kinks: bool,
    kinks: Vec<u64>,
    detached: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
            track_kinks: false,
            kinks: Vec::new(),
            detached: Vec::new(),
            replay: None,
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A constant computed from other graph values (a stop-gradient). During
    /// gradient checks, probes reuse the value seen at the unperturbed point,
    /// so finite differences treat it as a constant too.
    pub fn detached(&mut self, t: Tensor) -> Var {
        let i = self.detached.len();
        let t = match self.replay.as_ref().and_then(|r| r.get(i)) {
            Some(r) if r.shape() == t.shape() => r.clone(),
            _ => t,
        };
        self.detached.push(t.clone());
        self.constant(t)
    }

    pub(crate) fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub(crate) fn set_replay(&mut self, values: Vec<Tensor>) {
        self.replay = Some(values);
    }

    /// Binds a stored parameter as a differentiable leaf. Repeated calls for
    /// the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if self.bound.len() <= i {
            self.bound.resize(i + 1, None);
        }
        if let Some(v) = self.bound[i] {
            return v;
        }
        let v = self.input(store.value(id).clone());
        self.bound[i] = Some(v);
        v
    }

    pub(crate) fn bound_params(&self) -> &[Option<Var>] {
        &self.bound
    }

    /// Records a discrete decision (bucket, argmax) taken outside the graph so
    /// that gradient checks can detect probes that flip it.
    pub fn note_branch(&mut self, key: u64) {
        if self.track_kinks {
            self.kinks.push(key);
        }
    }

    pub(crate) fn set_track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    pub(crate) fn kink_signature(&self) -> &[u64] {
        &self.kinks
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.binary_shapes(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(av.numel());
        for row in av.data().chunks_exact(bv.len()) {
            data.extend(row.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        }
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let t = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().map(|&x| f(x)).collect(),
        );
        let rg = self.any_grad(&[a]);
        self.push(t, op, rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), rg))
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.track_kinks {
            let sig = hash_signs(self.value(a).data());
            self.kinks.push(sig);
        }
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| mismatch("concat", &[], &[]))?;
        let base = self.shape(*first).to_vec();
        axis_split(&base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Selects rows (first axis) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let rows = av.rows();
        let w = av.row_width();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(av.row(i));
        }
        let mut shape = av.shape().to_vec();
        if shape.is_empty() || indices.is_empty() {
            return Err(mismatch("gather_rows", av.shape(), &[indices.len()]));
        }
        shape[0] = indices.len();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::GatherRows {
                src: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Row `i` of `a` is added into output row `indices[i]` of an
    /// `[out_rows, ...]` zero tensor.
    pub fn scatter_add_rows(&mut self, a: Var, indices: &[usize], out_rows: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() == 0 || av.rows() != indices.len() {
            return Err(mismatch("scatter_add_rows", av.shape(), &[indices.len()]));
        }
        let w = av.row_width();
        let mut data = vec![0.0; out_rows * w];
        for (r, &i) in indices.iter().enumerate() {
            if i >= out_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: i,
                    len: out_rows,
                });
            }
            for (d, s) in data[i * w..(i + 1) * w].iter_mut().zip(av.row(r)) {
                *d += s;
            }
        }
        let mut shape = av.shape().to_vec();
        shape[0] = out_rows;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ScatterAddRows {
                src: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise max of the rows sent to each output row. Output rows that
    /// receive nothing are zero. Ties resolve to the earliest source row.
    pub fn scatter_max_rows(&mut self, a: Var, indices: &[usize], out_rows: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() == 0 || av.rows() != indices.len() {
            return Err(mismatch("scatter_max_rows", av.shape(), &[indices.len()]));
        }
        let w = av.row_width();
        let mut data = vec![0.0; out_rows * w];
        let mut winners: Vec<Option<usize>> = vec![None; out_rows * w];
        for (r, &i) in indices.iter().enumerate() {
            if i >= out_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_max_rows",
                    index: i,
                    len: out_rows,
                });
            }
            for (c, &x) in av.row(r).iter().enumerate() {
                let slot = i * w + c;
                match winners[slot] {
                    Some(_) if data[slot] >= x => {}
                    _ => {
                        data[slot] = x;
                        winners[slot] = Some(r);
                    }
                }
            }
        }
        if self.track_kinks {
            let sig = winners.iter().fold(0xcbf29ce484222325u64, |h, w| {
                fnv(h, w.map_or(u64::MAX, |x| x as u64))
            });
            self.kinks.push(sig);
        }
        let mut shape = self.shape(a).to_vec();
        shape[0] = out_rows;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ScatterMaxRows { src: a, winners },
            rg,
        ))
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let av = self.value(a);
        let (outer, len, inner) = axis_split(av.shape(), axis)?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|d| *d /= len as f64);
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let rg = self.any_grad(&[a]);
        let op = if mean {
            Op::Mean { src: a, axis }
        } else {
            Op::Sum { src: a, axis }
        };
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (outer, len, inner) = axis_split(av.shape(), axis)?;
        let x = av.data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len)
                    .map(|l| x[idx(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[idx(l)] - m).exp();
                    data[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    data[idx(l)] /= z;
                }
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Softmax { src: a, axis },
            rg,
        ))
    }

    /// Softmax over groups of a rank-1 tensor: element `i` belongs to group
    /// `segments[i]`, and each group is normalised independently.
    pub fn segment_softmax(
        &mut self,
        a: Var,
        segments: &[usize],
        n_segments: usize,
    ) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 1 || av.numel() != segments.len() {
            return Err(mismatch("segment_softmax", av.shape(), &[segments.len()]));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(TensorError::IndexOutOfRange {
                op: "segment_softmax",
                index: bad,
                len: n_segments,
            });
        }
        let x = av.data();
        let mut maxes = vec![f64::NEG_INFINITY; n_segments];
        for (&s, &v) in segments.iter().zip(x) {
            maxes[s] = maxes[s].max(v);
        }
        let mut data: Vec<f64> = segments
            .iter()
            .zip(x)
            .map(|(&s, &v)| (v - maxes[s]).exp())
            .collect();
        let mut sums = vec![0.0; n_segments];
        for (&s, &e) in segments.iter().zip(&data) {
            sums[s] += e;
        }
        for (&s, e) in segments.iter().zip(data.iter_mut()) {
            *e /= sums[s];
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![segments.len()], data),
            Op::SegmentSoftmax {
                src: a,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Euclidean norm of each row of `[n, ...]`, giving `[n]`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() == 0 {
            return Err(mismatch("l2_norm_rows", av.shape(), &[]));
        }
        let data: Vec<f64> = (0..av.rows())
            .map(|r| av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let n = data.len();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::L2NormRows(a), rg))
    }

    /// Scales row `i` of `a` by `s[i]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if av.rank() == 0 || sv.numel() != av.rows() {
            return Err(mismatch("mul_rows", av.shape(), sv.shape()));
        }
        let w = av.row_width();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * sv.data()[i / w])
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.any_grad(&[a, s]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulRows(a, s), rg))
    }

    /// Same-padded cross-correlation of `[h, w, cin]` with `[k, k, cin, cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var> {
        let geom = self.conv_geom(input, weight, stride)?;
        let out =
            kernels::conv2d_forward(geom, self.value(input).data(), self.value(weight).data());
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(
            Tensor::from_parts(vec![geom.out_h(), geom.out_w(), geom.cout], out),
            Op::Conv2d {
                input,
                weight,
                stride,
            },
            rg,
        ))
    }

    fn conv_geom(&self, input: Var, weight: Var, stride: usize) -> Result<ConvGeom> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let ok = si.len() == 3
            && sw.len() == 4
            && sw[0] == sw[1]
            && sw[0] % 2 == 1
            && sw[2] == si[2]
            && stride > 0
            && si[0] % stride == 0
            && si[1] % stride == 0;
        if !ok {
            return Err(mismatch("conv2d", si, sw));
        }
        Ok(ConvGeom {
            h: si[0],
            w: si[1],
            cin: si[2],
            cout: sw[3],
            k: sw[0],
            stride,
        })
    }

    /// Nearest-neighbour 2x upsampling of `[h, w, c]`.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let iv = self.value(input);
        let s = iv.shape();
        if s.len() != 3 {
            return Err(mismatch("upsample2x", s, &[]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut data = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let src = ((y / 2) * w + x / 2) * c;
                let dst = (y * 2 * w + x) * c;
                data[dst..dst + c].copy_from_slice(&iv.data()[src..src + c]);
            }
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::from_parts(vec![2 * h, 2 * w, c], data),
            Op::Upsample2x(input),
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|d| Tensor::from_parts(n.value.shape().to_vec(), d)))
                .collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_bt_acc(g, bv, ga, m, k, n);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_at_acc(av, g, gb, m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, gv)| *x += gv);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(x, gv)| *x += sign * gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let n = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (gar, gr) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((x, gv), bvv) in gar.iter_mut().zip(gr).zip(bv) {
                            *x += gv * bvv;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (gr, ar) in g.chunks_exact(n).zip(av.chunks_exact(n)) {
                        for ((x, gv), avv) in gb.iter_mut().zip(gr).zip(ar) {
                            *x += gv * avv;
                        }
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let n = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (gar, gr) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((x, gv), d) in gar.iter_mut().zip(gr).zip(bv) {
                            *x += gv / d;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (gr, ar) in g.chunks_exact(n).zip(av.chunks_exact(n)) {
                        for (((x, gv), avv), d) in gb.iter_mut().zip(gr).zip(ar).zip(bv) {
                            *x -= gv * avv / (d * d);
                        }
                    }
                }
            }
            Op::Neg(a) => self.elementwise(grads, *a, g, |_, _| -1.0),
            Op::Scale(a, c) => {
                let c = *c;
                self.elementwise(grads, *a, g, move |_, _| c)
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.elementwise(grads, *a, g, |_, _| 1.0),
            Op::Exp(a) => self.elementwise_y(grads, *a, g, y, |_, yv| yv),
            Op::Tanh(a) => self.elementwise_y(grads, *a, g, y, |_, yv| 1.0 - yv * yv),
            Op::Sigmoid(a) => self.elementwise_y(grads, *a, g, y, |_, yv| yv * (1.0 - yv)),
            Op::Relu(a) => {
                self.elementwise_y(grads, *a, g, y, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Sqrt(a) => {
                self.elementwise_y(
                    grads,
                    *a,
                    g,
                    y,
                    |_, yv| if yv > 0.0 { 0.5 / yv } else { 0.0 },
                )
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis] * inner;
                    if let Some(gv) = self.acc(grads, *v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (d, s) in gv[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows { src, indices } => {
                let w = node.value.row_width();
                if let Some(gs) = self.acc(grads, *src) {
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, s) in gs[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::ScatterAddRows { src, indices } => {
                let w = node.value.row_width();
                if let Some(gs) = self.acc(grads, *src) {
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, s) in gs[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::ScatterMaxRows { src, winners } => {
                let w = node.value.row_width();
                if let Some(gs) = self.acc(grads, *src) {
                    for (slot, win) in winners.iter().enumerate() {
                        if let Some(r) = win {
                            gs[r * w + slot % w] += g[slot];
                        }
                    }
                }
            }
            Op::Sum { src, axis } | Op::Mean { src, axis } => {
                let (outer, len, inner) =
                    axis_split(self.shape(*src), *axis).expect("validated in forward");
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                if let Some(gs) = self.acc(grads, *src) {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut gs[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let gv = g[0];
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += gv);
                }
            }
            Op::Softmax { src, axis } => {
                let (outer, len, inner) =
                    axis_split(node.value.shape(), *axis).expect("validated in forward");
                if let Some(gs) = self.acc(grads, *src) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dotp: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                gs[idx(l)] += y[idx(l)] * (g[idx(l)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::SegmentSoftmax { src, segments } => {
                if let Some(gs) = self.acc(grads, *src) {
                    let n_seg = segments.iter().max().map_or(0, |m| m + 1);
                    let mut dots = vec![0.0; n_seg];
                    for (i, &s) in segments.iter().enumerate() {
                        dots[s] += g[i] * y[i];
                    }
                    for (i, &s) in segments.iter().enumerate() {
                        gs[i] += y[i] * (g[i] - dots[s]);
                    }
                }
            }
            Op::L2NormRows(a) => {
                let av = self.value(*a);
                let w = av.row_width();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, (&nrm, &gv)) in y.iter().zip(g).enumerate() {
                        if nrm == 0.0 {
                            continue;
                        }
                        for (d, x) in ga[r * w..(r + 1) * w].iter_mut().zip(av.row(r)) {
                            *d += gv * x / nrm;
                        }
                    }
                }
            }
            Op::MulRows(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s).data());
                let w = av.row_width();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, gv) in g.iter().enumerate() {
                        ga[i] += gv * sv[i / w];
                    }
                }
                if let Some(gsc) = self.acc(grads, *s) {
                    for (r, gs) in gsc.iter_mut().enumerate() {
                        *gs += kernels::dot(&g[r * w..(r + 1) * w], av.row(r));
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
            } => {
                let geom = self
                    .conv_geom(*input, *weight, *stride)
                    .expect("validated in forward");
                let (iv, wv) = (self.value(*input).data(), self.value(*weight).data());
                // The kernel accumulates, so a fresh accumulator is filled in
                // place; an existing one gets the separately summed term.
                let scratch = |v: Var, n: usize, grads: &mut [Option<Vec<f64>>]| {
                    self.nodes[v.0]
                        .requires_grad
                        .then(|| match grads[v.0].take() {
                            None => (vec![0.0; n], None),
                            Some(acc) => (vec![0.0; n], Some(acc)),
                        })
                };
                let mut gi = scratch(*input, iv.len(), grads);
                let mut gw = scratch(*weight, wv.len(), grads);
                kernels::conv2d_backward(
                    geom,
                    iv,
                    wv,
                    g,
                    gi.as_mut().map(|(d, _)| d.as_mut_slice()),
                    gw.as_mut().map(|(d, _)| d.as_mut_slice()),
                );
                for (v, part) in [(*input, gi), (*weight, gw)] {
                    if let Some((d, prev)) = part {
                        grads[v.0] = Some(match prev {
                            None => d,
                            Some(mut acc) => {
                                acc.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                                acc
                            }
                        });
                    }
                }
            }
            Op::Upsample2x(input) => {
                let s = self.shape(*input);
                let (h, w, c) = (s[0], s[1], s[2]);
                if let Some(gi) = self.acc(grads, *input) {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let dst = ((yy / 2) * w + xx / 2) * c;
                            let src = (yy * 2 * w + xx) * c;
                            for k in 0..c {
                                gi[dst + k] += g[src + k];
                            }
                        }
                    }
                }
            }
        }
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        d: impl Fn(f64, f64) -> f64,
    ) {
        let x = self.value(a).data();
        if let Some(ga) = self.acc(grads, a) {
            for i in 0..ga.len() {
                ga[i] += g[i] * d(x[i], 0.0);
            }
        }
    }

    fn elementwise_y(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        y: &[f64],
        d: impl Fn(f64, f64) -> f64,
    ) {
        let x = self.value(a).data();
        if let Some(ga) = self.acc(grads, a) {
            for i in 0..ga.len() {
                ga[i] += g[i] * d(x[i], y[i]);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn fnv(h: u64, x: u64) -> u64 {
    (h ^ x).wrapping_mul(0x100000001b3)
}

fn hash_signs(x: &[f64]) -> u64 {
    x.iter()
        .fold(0xcbf29ce484222325u64, |h, &v| fnv(h, u64::from(v > 0.0)))
}

/// Gradients of one backward sweep, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter bound on `graph`, indexed by parameter
    /// id; `None` for parameters the loss does not reach.
    pub fn param_grads(&self, graph: &Graph, store: &ParamStore) -> Vec<Option<Tensor>> {
        let bound = graph.bound_params();
        (0..store.len())
            .map(|i| {
                bound
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| self.get(v).cloned())
            })
            .collect()
    }
}
