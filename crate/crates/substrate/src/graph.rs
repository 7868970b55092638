use std::collections::HashMap;

use crate::kernels::{self, conv_out, sigmoid};
use crate::{Error, Float, ParamSet, Result, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p, T> {
    Owned(Tensor<T>),
    Param(&'p Tensor<T>),
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRows(Var, Var),
    AddChannels(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Conv3x3 {
        x: Var,
        w: Var,
        stride: usize,
    },
    Upsample2x(Var),
    Concat0(Vec<Var>),
    Narrow0 {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    NarrowCols {
        x: Var,
        start: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    Silu(Var),
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    MeanLast(Var),
    Mse(Var, Var),
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of forward operations that can be differentiated in reverse.
///
/// Parameters are borrowed from a [`ParamSet`] without copying. A graph is
/// meant to be built, differentiated once and dropped; it is not shared
/// between threads.
pub struct Graph<'p, T: Float> {
    nodes: Vec<Node<'p, T>>,
    params: Option<&'p ParamSet<T>>,
    param_vars: HashMap<usize, Var>,
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

impl<'p, T: Float> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamSet<T>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.value(v).data()
    }

    /// Leaf whose gradient is tracked (useful for checking input gradients).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let idx = params
            .index_of(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if let Some(&v) = self.param_vars.get(&idx) {
            return Ok(v);
        }
        let (_, tensor) = params.get_index(idx).expect("index from index_of");
        self.nodes.push(Node {
            value: Value::Param(tensor),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(idx, v);
        Ok(v)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// `x[n, d] + b[d]`, broadcasting `b` over rows.
    pub fn add_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || self.shape(b) != [xs[1]] {
            return Err(shape_err(
                "add_rows",
                format!("{xs:?} + {:?}", self.shape(b)),
            ));
        }
        let d = xs[1];
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % d])
            .collect();
        let out = Tensor::from_parts(xs.to_vec(), data);
        self.push("add_rows", out, Op::AddRows(x, b), &[x, b])
    }

    /// `x[c, ...] + v[c]`, broadcasting each `v[c]` over channel `c`.
    pub fn add_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x);
        let c = xs[0];
        if self.value(v).numel() != c {
            return Err(shape_err(
                "add_channels",
                format!("{xs:?} + {:?}", self.shape(v)),
            ));
        }
        let per = self.value(x).numel() / c;
        let bias = self.data(v);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &val)| val + bias[i / per])
            .collect();
        let out = Tensor::from_parts(xs.to_vec(), data);
        self.push("add_channels", out, Op::AddChannels(x, v), &[x, v])
    }

    /// `a[m, k] @ b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m, k] @ b[n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("{sa:?} @ {sb:?}{}", if trans_b { "^T" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let bstr = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        T::gemm(
            m,
            k,
            n,
            self.data(a),
            (k as isize, 1),
            self.data(b),
            bstr,
            T::zero(),
            &mut out,
            n as isize,
        );
        let out = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{s:?} is not 2-d")));
        }
        let (m, n) = (s[0], s[1]);
        let out = Tensor::from_parts(vec![n, m], transpose(self.data(x), m, n));
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// 3x3 convolution with zero padding 1: `x[ci, h, w]`, `w[co, ci, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err("conv3x3", format!("input {xs:?}, kernel {ws:?}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Invalid {
                op: "conv3x3",
                detail: format!("stride {stride} (only 1 and 2 supported)"),
            });
        }
        let (ci, h, wd, co) = (xs[0], xs[1], xs[2], ws[0]);
        let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
        let p = ho * wo;
        let k = ci * 9;
        let cols = kernels::im2col(self.data(x), ci, h, wd, stride);
        let mut out = vec![T::zero(); co * p];
        T::gemm(
            co,
            k,
            p,
            self.data(w),
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            T::zero(),
            &mut out,
            p as isize,
        );
        let out = Tensor::from_parts(vec![co, ho, wo], out);
        self.push("conv3x3", out, Op::Conv3x3 { x, w, stride }, &[x, w])
    }

    /// Nearest-neighbour 2x upsampling of `x[c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(shape_err("upsample2x", format!("{s:?} is not [c, h, w]")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xo] = src[(ch * h + y / 2) * w + xo / 2];
                }
            }
        }
        let out = Tensor::from_parts(vec![c, 2 * h, 2 * w], out);
        self.push("upsample2x", out, Op::Upsample2x(x), &[x])
    }

    /// Concatenate along the leading axis (channels for images).
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat0", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat0", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::from_parts(shape, data);
        self.push("concat0", out, Op::Concat0(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s[0] {
            return Err(shape_err("narrow0", format!("{start}+{len} of {s:?}")));
        }
        let per = self.value(x).numel() / s[0];
        let mut shape = s.to_vec();
        shape[0] = len;
        let data = self.data(x)[start * per..(start + len) * per].to_vec();
        let out = Tensor::from_parts(shape, data);
        self.push("narrow0", out, Op::Narrow0 { x, start }, &[x])
    }

    /// Concatenate 2-d tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_cols", format!("{s:?} with {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * wd..(r + 1) * wd]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of a 2-d tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(shape_err("narrow_cols", format!("{start}+{len} of {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::from_parts(vec![rows, len], data);
        self.push("narrow_cols", out, Op::NarrowCols { x, start }, &[x])
    }

    /// Group normalization over the leading (channel) axis.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x);
        let c = s[0];
        if groups == 0
            || !c.is_multiple_of(groups)
            || self.shape(gamma) != [c]
            || self.shape(beta) != [c]
        {
            return Err(shape_err(
                "group_norm",
                format!(
                    "{s:?} in {groups} groups, affine {:?}/{:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::from_f64(eps);
        let sp = self.value(x).numel() / c;
        let y = kernels::group_norm(
            self.data(x),
            c,
            sp,
            groups,
            self.data(gamma),
            self.data(beta),
            eps,
        );
        let out = Tensor::from_parts(s.to_vec(), y);
        self.push(
            "group_norm",
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            &[x, gamma, beta],
        )
    }

    /// Layer normalization over the last axis of `x[n, d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(shape_err("layer_norm", format!("{s:?}")));
        }
        let eps = T::from_f64(eps);
        let y = kernels::layer_norm(self.data(x), s[1], self.data(gamma), self.data(beta), eps);
        let out = Tensor::from_parts(s.to_vec(), y);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            &[x, gamma, beta],
        )
    }

    /// Sigmoid-weighted linear unit, `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push("silu", out, Op::Silu(x), &[x])
    }

    /// Softmax over the last axis of `x[n, m]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis where columns with `mask[j] == false` are excluded.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || mask.is_some_and(|m| m.len() != s[1]) {
            return Err(shape_err(
                "softmax",
                format!("{s:?} with mask {:?}", mask.map(<[bool]>::len)),
            ));
        }
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let y = kernels::softmax_rows(self.data(x), s[1], mask);
        let out = Tensor::from_parts(s.to_vec(), y);
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Rows of `table[v, d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || ids.is_empty() {
            return Err(shape_err(
                "embedding",
                format!("table {s:?}, {} ids", ids.len()),
            ));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid {
                op: "embedding",
                detail: format!("id {bad} outside table of {v} rows"),
            });
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: T = self.data(x).iter().copied().sum();
        self.push("sum_all", Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.value(x).numel() as f64);
        let total: T = self.data(x).iter().copied().sum();
        self.push("mean_all", Tensor::scalar(total / n), Op::MeanAll(x), &[x])
    }

    /// Mean over the last axis of `x[n, m]`, giving `[n]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("mean_last", format!("{s:?} is not 2-d")));
        }
        let (n, m) = (s[0], s[1]);
        let inv = T::one() / T::from_f64(m as f64);
        let data = self
            .data(x)
            .chunks(m)
            .map(|r| r.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_parts(vec![n], data);
        self.push("mean_last", out, Op::MeanLast(x), &[x])
    }

    /// Mean squared difference between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = T::from_f64(self.value(a).numel() as f64);
        let total: T = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push("mse", Tensor::scalar(total / n), Op::Mse(a, b), &[a, b])
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let params = self.param_vars.iter().map(|(&idx, &v)| (idx, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(self.shape(v).to_vec(), data);

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = gd.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect();
                    acc(*a, like(*a, d));
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect();
                    acc(*b, like(*b, d));
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * *c)),
            Op::AddRows(x, b) => {
                if self.needs(*x) {
                    acc(*x, g.clone());
                }
                if self.needs(*b) {
                    let d = self.shape(*b)[0];
                    let mut db = vec![T::zero(); d];
                    for row in gd.chunks(d) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, like(*b, db));
                }
            }
            Op::AddChannels(x, v) => {
                if self.needs(*x) {
                    acc(*x, g.clone());
                }
                if self.needs(*v) {
                    let c = self.value(*v).numel();
                    let per = gd.len() / c;
                    let dv = gd.chunks(per).map(|ch| ch.iter().copied().sum()).collect();
                    acc(*v, like(*v, dv));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = g.shape()[1];
                if self.needs(*a) {
                    // dA = dC @ op(B)^T
                    let mut da = vec![T::zero(); m * k];
                    let bstr = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    T::gemm(
                        m,
                        n,
                        k,
                        gd,
                        (n as isize, 1),
                        self.data(*b),
                        bstr,
                        T::zero(),
                        &mut da,
                        k as isize,
                    );
                    acc(*a, like(*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // dB[n, k] = dC^T @ A
                        T::gemm(
                            n,
                            m,
                            k,
                            gd,
                            (1, n as isize),
                            self.data(*a),
                            (k as isize, 1),
                            T::zero(),
                            &mut db,
                            k as isize,
                        );
                    } else {
                        // dB[k, n] = A^T @ dC
                        T::gemm(
                            k,
                            m,
                            n,
                            self.data(*a),
                            (1, k as isize),
                            gd,
                            (n as isize, 1),
                            T::zero(),
                            &mut db,
                            n as isize,
                        );
                    }
                    acc(*b, like(*b, db));
                }
            }
            Op::Transpose(x) => {
                let s = g.shape();
                acc(*x, like(*x, transpose(gd, s[0], s[1])));
            }
            Op::Reshape(x) => acc(*x, like(*x, gd.to_vec())),
            Op::Conv3x3 { x, w, stride } => {
                let xs = self.shape(*x);
                let (ci, h, wd) = (xs[0], xs[1], xs[2]);
                let co = self.shape(*w)[0];
                let p = g.shape()[1] * g.shape()[2];
                let k = ci * 9;
                if self.needs(*w) {
                    let cols = kernels::im2col(self.data(*x), ci, h, wd, *stride);
                    let mut dw = vec![T::zero(); co * k];
                    T::gemm(
                        co,
                        p,
                        k,
                        gd,
                        (p as isize, 1),
                        &cols,
                        (1, p as isize),
                        T::zero(),
                        &mut dw,
                        k as isize,
                    );
                    acc(*w, like(*w, dw));
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); k * p];
                    T::gemm(
                        k,
                        co,
                        p,
                        self.data(*w),
                        (1, k as isize),
                        gd,
                        (p as isize, 1),
                        T::zero(),
                        &mut dcols,
                        p as isize,
                    );
                    let mut dx = vec![T::zero(); ci * h * wd];
                    kernels::col2im(&dcols, ci, h, wd, *stride, &mut dx);
                    acc(*x, like(*x, dx));
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xo in 0..2 * w {
                            dx[(ch * h + y / 2) * w + xo / 2] += gd[(ch * 2 * h + y) * 2 * w + xo];
                        }
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        acc(p, like(p, gd[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::Narrow0 { x, start } => {
                let per = self.value(*x).numel() / self.shape(*x)[0];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                dx[start * per..start * per + gd.len()].copy_from_slice(gd);
                acc(*x, like(*x, dx));
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let wd = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            dp.extend_from_slice(&gd[r * total + offset..r * total + offset + wd]);
                        }
                        acc(p, like(p, dp));
                    }
                    offset += wd;
                }
            }
            Op::NarrowCols { x, start } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = g.shape()[1];
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                acc(*x, like(*x, dx));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let c = self.shape(*x)[0];
                let sp = self.value(*x).numel() / c;
                let (dx, dg, db) = kernels::group_norm_backward(
                    self.data(*x),
                    gd,
                    c,
                    sp,
                    *groups,
                    self.data(*gamma),
                    *eps,
                );
                if self.needs(*x) {
                    acc(*x, like(*x, dx));
                }
                if self.needs(*gamma) {
                    acc(*gamma, like(*gamma, dg));
                }
                if self.needs(*beta) {
                    acc(*beta, like(*beta, db));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let d = self.shape(*x)[1];
                let (dx, dg, db) =
                    kernels::layer_norm_backward(self.data(*x), gd, d, self.data(*gamma), *eps);
                if self.needs(*x) {
                    acc(*x, like(*x, dx));
                }
                if self.needs(*gamma) {
                    acc(*gamma, like(*gamma, dg));
                }
                if self.needs(*beta) {
                    acc(*beta, like(*beta, db));
                }
            }
            Op::Silu(x) => {
                let d = gd
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &v)| {
                        let s = sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                acc(*x, like(*x, d));
            }
            Op::Softmax(x) => {
                let y = self.data(Var(id));
                let m = g.shape()[1];
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(m).zip(gd.chunks(m)).zip(dx.chunks_mut(m)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..m {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (row, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += gd[row * d + j];
                    }
                }
                acc(*table, like(*table, dt));
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                acc(*x, like(*x, vec![gd[0]; n]));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                let v = gd[0] / T::from_f64(n as f64);
                acc(*x, like(*x, vec![v; n]));
            }
            Op::MeanLast(x) => {
                let m = self.shape(*x)[1];
                let inv = T::one() / T::from_f64(m as f64);
                let dx = (0..self.value(*x).numel())
                    .map(|i| gd[i / m] * inv)
                    .collect();
                acc(*x, like(*x, dx));
            }
            Op::Mse(a, b) => {
                let n = T::from_f64(self.value(*a).numel() as f64);
                let coef = gd[0] * T::from_f64(2.0) / n;
                let diff: Vec<T> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&x, &y)| (x - y) * coef)
                    .collect();
                if self.needs(*b) {
                    acc(*b, like(*b, diff.iter().map(|&v| -v).collect()));
                }
                if self.needs(*a) {
                    acc(*a, like(*a, diff));
                }
            }
        }
    }
}

fn transpose<T: Float>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to any recorded node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients laid out like `params`; unused parameters get zeros.
    pub fn param_grads(&self, params: &ParamSet<T>) -> ParamSet<T> {
        let mut out = params.zeros_like();
        for &(idx, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out.values_mut_at(idx).copy_from_slice(g.data());
            }
        }
        out
    }
}
