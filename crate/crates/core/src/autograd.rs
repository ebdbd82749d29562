//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] evaluates eagerly: every op computes its value on creation and
//! records what it needs for the backward sweep. Nodes are appended in
//! topological order, so [`Graph::backward`] is a single reverse pass.

use crate::error::{shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{gemm, Float, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Option<(Var, Var)>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    SoftmaxCe {
        logits: Var,
        target: Tensor<T>,
        probs: Vec<T>,
    },
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    L2Normalize {
        x: Var,
        inv_norms: Vec<T>,
    },
    TopK {
        x: Var,
        idx: Vec<u32>,
    },
    Resize(Var),
    AdaptivePool(Var),
    CycleShift {
        x: Var,
        offsets: Vec<(isize, isize)>,
    },
    BoxMean {
        x: Var,
        axis: usize,
        p: usize,
    },
    StripPool {
        x: Var,
        rows: Vec<(usize, usize)>,
        cols: Vec<(usize, usize)>,
    },
    Sum(Var),
    SumSq(Var),
    Sqrt(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Tape of eagerly evaluated nodes.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph whose parameters never require gradients (inference, teacher).
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (when the graph has gradients enabled).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(b).numel() != c {
            return Err(shape_err!(
                "add_bias: bias of {} elements for last axis {}",
                self.value(b).numel(),
                c
            ));
        }
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in v.data_mut().chunks_mut(c) {
            for (r, &bb) in row.iter_mut().zip(&bias) {
                *r += bb;
            }
        }
        let g = self.any_grad(&[x, b]);
        Ok(self.push(v, Op::AddBias(x, b), g))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::c(s);
        let v = self.value(x).map(|a| a * s);
        let g = self.any_grad(&[x]);
        self.push(v, Op::Scale(x, s), g)
    }

    /// Multiplies a tensor by a one-element (learnable) scalar.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err!("mul_scalar: scalar has shape {:?}", self.shape(s)));
        }
        let sv = self.value(s)[0];
        let v = self.value(x).map(|a| a * sv);
        let g = self.any_grad(&[x, s]);
        Ok(self.push(v, Op::MulScalar(x, s), g))
    }

    /// Matrix product of 2-D tensors with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err!(
                "matmul: inner dims {k} and {k2} differ ({:?}·{:?}, ta={ta}, tb={tb})",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            false,
        );
        let g = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Matmul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            g,
        ))
    }

    /// `x·W (+ b)` over the last axis; `W` is `cin × cout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, cout) = self.value(w).dims2()?;
        let xs = self.value(x);
        if xs.last_dim() != cin {
            return Err(shape_err!(
                "linear: input {:?} does not end in {cin} channels",
                xs.shape()
            ));
        }
        let rows = xs.numel() / cin;
        let mut out = vec![T::zero(); rows * cout];
        gemm(rows, cin, cout, xs.data(), false, self.value(w).data(), false, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != cout {
                return Err(shape_err!("linear: bias {:?} for {cout} outputs", bias.shape()));
            }
            for row in out.chunks_mut(cout) {
                for (r, &bb) in row.iter_mut().zip(bias.data()) {
                    *r += bb;
                }
            }
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, g))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        let g = self.any_grad(&[x]);
        self.push(v, Op::Relu(x), g)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| {
            let af = a.f64();
            T::c(0.5 * af * (1.0 + kernels::erf(af / std::f64::consts::SQRT_2)))
        });
        let g = self.any_grad(&[x]);
        self.push(v, Op::Gelu(x), g)
    }

    /// Layer normalization over the last axis; `affine = None` skips γ/β.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.last_dim();
        if let Some((gm, bt)) = affine {
            if self.value(gm).numel() != c || self.value(bt).numel() != c {
                return Err(shape_err!("layer_norm: affine params do not match {c} channels"));
            }
        }
        let rows = xs.numel() / c;
        let mut xhat = vec![T::zero(); xs.numel()];
        let mut rstd = vec![T::zero(); rows];
        let inv_c = T::c(1.0 / c as f64);
        let eps = T::c(eps);
        for (r, (row, out)) in xs.data().chunks(c).zip(xhat.chunks_mut(c)).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some((gm, bt)) = affine {
            let (gv, bv) = (self.value(gm).data(), self.value(bt).data());
            for row in out.chunks_mut(c) {
                for ((o, &gg), &bb) in row.iter_mut().zip(gv).zip(bv) {
                    *o = *o * gg + bb;
                }
            }
        }
        let shape = xs.shape().to_vec();
        let mut deps = vec![x];
        if let Some((gm, bt)) = affine {
            deps.extend([gm, bt]);
        }
        let g = self.any_grad(&deps);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma: affine,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let c = xs.last_dim();
        let mut out = xs.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor::from_parts(xs.shape().to_vec(), out);
        let g = self.any_grad(&[x]);
        self.push(v, Op::Softmax(x), g)
    }

    /// Mean over locations of `−Σ_c target·log softmax(logits)` (last axis = classes).
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let ls = self.value(logits);
        if ls.shape() != target.shape() {
            return Err(shape_err!(
                "cross-entropy: logits {:?} vs target {:?}",
                ls.shape(),
                target.shape()
            ));
        }
        let c = ls.last_dim();
        let rows = ls.numel() / c;
        let mut probs = ls.data().to_vec();
        let mut total = 0.0f64;
        for (row, (lrow, trow)) in probs
            .chunks_mut(c)
            .zip(ls.data().chunks(c).zip(target.data().chunks(c)))
        {
            let mx = lrow.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = lrow.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for (&l, &t) in lrow.iter().zip(trow) {
                if t != T::zero() {
                    total -= (t * (l - lse)).f64();
                }
            }
            softmax_in_place(row);
        }
        let loss = T::c(total / rows as f64);
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                target: target.clone(),
                probs,
            },
            g,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(v, Op::Reshape(x), g))
    }

    /// Channels `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.last_dim();
        if start + len > c || len == 0 {
            return Err(shape_err!("slice_last: {start}+{len} exceeds {c} channels"));
        }
        let mut out = Vec::with_capacity(xs.numel() / c * len);
        for row in xs.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SliceLast { x, start }, g))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat_last: no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err!(
                    "concat_last: leading dims {:?} vs {:?}",
                    &s[..s.len() - 1],
                    lead
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let g = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatLast(parts.to_vec()),
            g,
        ))
    }

    /// Dense convolution of an `h × w × cin` map with a `kh × kw × cin × cout` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        let (kh, kw, kc, cout) = match self.shape(w) {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(shape_err!("conv2d: kernel shape {:?} is not kh×kw×cin×cout", s)),
        };
        if kc != dims.2 {
            return Err(shape_err!("conv2d: kernel expects {kc} channels, input has {}", dims.2));
        }
        let geom = ConvGeom::new(dims, (kh, kw), stride, pad).ok_or_else(|| {
            shape_err!(
                "conv2d: input {}×{} smaller than kernel {kh}×{kw} with padding {pad}",
                dims.0,
                dims.1
            )
        })?;
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let rows = geom.oh * geom.ow;
        let mut out = vec![T::zero(); rows * cout];
        gemm(
            rows,
            geom.patch_len(),
            cout,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(shape_err!("conv2d: bias {:?} for {cout} outputs", self.shape(b)));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(cout) {
                for (r, &bb) in row.iter_mut().zip(bias) {
                    *r += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        let cols = if self.any_grad(&[w]) { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::from_parts(vec![geom.oh, geom.ow, cout], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            g,
        ))
    }

    /// Depthwise `k × k` convolution (stride 1, same padding); kernel is `k × k × c`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        let k = match self.shape(w) {
            &[a, bb, c] if a == bb && c == dims.2 && a % 2 == 1 => a,
            s => {
                return Err(shape_err!(
                    "depthwise_conv: kernel {:?} for {} channels",
                    s,
                    dims.2
                ))
            }
        };
        if self.value(b).numel() != dims.2 {
            return Err(shape_err!("depthwise_conv: bias size"));
        }
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            dims,
            self.value(w).data(),
            k,
            self.value(b).data(),
        );
        let g = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(vec![dims.0, dims.1, dims.2], out),
            Op::Depthwise { x, w, b, k },
            g,
        ))
    }

    /// Unit-L2 rows over the last axis; rows with norm below `eps` map to zero.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xs = self.value(x);
        let c = xs.last_dim();
        let mut out = xs.data().to_vec();
        let mut inv_norms = Vec::with_capacity(xs.numel() / c);
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let inv = if n.f64() < eps { T::zero() } else { T::one() / n };
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norms.push(inv);
        }
        let v = Tensor::from_parts(xs.shape().to_vec(), out);
        let g = self.any_grad(&[x]);
        self.push(v, Op::L2Normalize { x, inv_norms }, g)
    }

    /// Per row of the last axis, the `t` largest entries in non-increasing order.
    /// Ties break towards the lower index.
    pub fn top_k(&mut self, x: Var, t: usize) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.last_dim();
        if t == 0 || t > c {
            return Err(shape_err!("top_k: T={t} outside 1..={c}"));
        }
        let rows = xs.numel() / c;
        let mut out = Vec::with_capacity(rows * t);
        let mut idx = Vec::with_capacity(rows * t);
        let mut order: Vec<u32> = Vec::with_capacity(c);
        for row in xs.data().chunks(c) {
            order.clear();
            order.extend(0..c as u32);
            order.sort_by(|&a, &b| {
                row[b as usize]
                    .partial_cmp(&row[a as usize])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for &i in &order[..t] {
                out.push(row[i as usize]);
                idx.push(i);
            }
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = t;
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::TopK { x, idx }, g))
    }

    /// Bilinear resize of an `h × w × c` map (half-pixel centres).
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        if oh == 0 || ow == 0 {
            return Err(shape_err!("resize: empty output size"));
        }
        let out = kernels::resize_forward(self.value(x).data(), dims, oh, ow);
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![oh, ow, dims.2], out),
            Op::Resize(x),
            g,
        ))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        if oh == 0 || ow == 0 {
            return Err(shape_err!("adaptive_avg_pool: empty output size"));
        }
        let out = kernels::adaptive_pool_forward(self.value(x).data(), dims, oh, ow);
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![oh, ow, dims.2], out),
            Op::AdaptivePool(x),
            g,
        ))
    }

    /// Per-channel spatial gather `y(m,n,c) = x(m+δ_m(c), n+δ_n(c), c)`, zero outside.
    pub fn cycle_shift(&mut self, x: Var, offsets: Vec<(isize, isize)>) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        if offsets.len() != dims.2 {
            return Err(shape_err!("cycle_shift: {} offsets for {} channels", offsets.len(), dims.2));
        }
        let out = kernels::cycle_shift_forward(self.value(x).data(), dims, &offsets);
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![dims.0, dims.1, dims.2], out),
            Op::CycleShift { x, offsets },
            g,
        ))
    }

    /// Stride-1, unpadded mean over windows of `p` along `axis` (0=h, 1=w, 2=c).
    pub fn box_mean(&mut self, x: Var, axis: usize, p: usize) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        let n = [dims.0, dims.1, dims.2]
            .get(axis)
            .copied()
            .ok_or_else(|| shape_err!("box_mean: axis {axis}"))?;
        if p == 0 || p > n {
            return Err(shape_err!("box_mean: window {p} on axis of size {n}"));
        }
        let (out, od) = kernels::box_mean_forward(self.value(x).data(), dims, axis, p);
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![od.0, od.1, od.2], out),
            Op::BoxMean { x, axis, p },
            g,
        ))
    }

    /// Strip pooling over the block grid given by row and column bounds.
    pub fn strip_pool(
        &mut self,
        x: Var,
        rows: Vec<(usize, usize)>,
        cols: Vec<(usize, usize)>,
    ) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        let valid = |b: &[(usize, usize)], n: usize| b.iter().all(|&(s, e)| s < e && e <= n);
        if !valid(&rows, dims.0) || !valid(&cols, dims.1) {
            return Err(shape_err!("strip_pool: empty or out-of-range block"));
        }
        let out = kernels::strip_pool_forward(self.value(x).data(), dims, &rows, &cols);
        let n_rows = out.len() / dims.2;
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![n_rows, dims.2], out),
            Op::StripPool { x, rows, cols },
            g,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let g = self.any_grad(&[x]);
        self.push(v, Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().map(|&a| a * a).sum());
        let g = self.any_grad(&[x]);
        self.push(v, Op::SumSq(x), g)
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()).sqrt());
        let g = self.any_grad(&[x]);
        self.push(v, Op::Sqrt(x), g)
    }

    /// Frobenius norm of a tensor.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s = self.sum_sq(x);
        self.sqrt(s)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward: loss must be a scalar, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.shape(v).to_vec();
        self.acc(grads, v, Tensor::from_parts(shape, g));
    }

    fn backward_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.map(|v| -v));
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, gout.clone());
                if self.nodes[b.0].needs_grad {
                    let c = self.value(*b).numel();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.acc_vec(grads, *b, db);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, gout.map(|v| v * s));
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s)[0];
                self.acc(grads, *x, gout.map(|v| v * sv));
                if self.nodes[s.0].needs_grad {
                    let d: T = gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &xv)| g * xv)
                        .sum();
                    self.acc_vec(grads, *s, vec![d]);
                }
            }
            &Op::Matmul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.nodes[a.0].needs_grad {
                    // C = op(A)·op(B); dop(A) = dC·op(B)ᵀ
                    let mut da = vec![T::zero(); m * k];
                    if ta {
                        // A stored k×m: dA = op(B)·dCᵀ
                        gemm(k, n, m, bv, tb, gd, true, &mut da, false);
                    } else {
                        gemm(m, n, k, gd, false, bv, !tb, &mut da, false);
                    }
                    self.acc_vec(grads, a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    if tb {
                        // B stored n×k: dB = dCᵀ·op(A)
                        gemm(n, m, k, gd, true, av, ta, &mut db, false);
                    } else {
                        gemm(k, m, n, av, !ta, gd, false, &mut db, false);
                    }
                    self.acc_vec(grads, b, db);
                }
            }
            &Op::Linear { x, w, b } => {
                let (cin, cout) = self.value(w).dims2()?;
                let rows = gout.numel() / cout;
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); rows * cin];
                    gemm(rows, cout, cin, gd, false, self.value(w).data(), true, &mut dx, false);
                    self.acc_vec(grads, x, dx);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); cin * cout];
                    gemm(cin, rows, cout, self.value(x).data(), true, gd, false, &mut dw, false);
                    self.acc_vec(grads, w, dw);
                }
                if let Some(b) = b {
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![T::zero(); cout];
                        for row in gd.chunks(cout) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.acc_vec(grads, b, db);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc_vec(grads, *x, d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        let a = v.f64();
                        let cdf = 0.5 * (1.0 + kernels::erf(a / std::f64::consts::SQRT_2));
                        let pdf = inv_sqrt_2pi * (-0.5 * a * a).exp();
                        g * T::c(cdf + a * pdf)
                    })
                    .collect();
                self.acc_vec(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).last_dim();
                let inv_c = T::c(1.0 / c as f64);
                let gam = gamma.map(|(gm, _)| self.value(gm).data().to_vec());
                if let Some((gm, bt)) = gamma {
                    let mut dg = vec![T::zero(); c];
                    let mut dbt = vec![T::zero(); c];
                    for (grow, xrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * xrow[j];
                            dbt[j] += grow[j];
                        }
                    }
                    self.acc_vec(grads, *gm, dg);
                    self.acc_vec(grads, *bt, dbt);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); gd.len()];
                    let mut dxh = vec![T::zero(); c];
                    for (r, ((grow, xrow), out)) in gd
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(dx.chunks_mut(c))
                        .enumerate()
                    {
                        for j in 0..c {
                            dxh[j] = match &gam {
                                Some(gv) => grow[j] * gv[j],
                                None => grow[j],
                            };
                        }
                        let m1 = dxh.iter().copied().sum::<T>() * inv_c;
                        let m2 = dxh.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                        for j in 0..c {
                            out[j] = rstd[r] * (dxh[j] - m1 - xrow[j] * m2);
                        }
                    }
                    self.acc_vec(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_vec(grads, *x, dx);
            }
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            } => {
                let c = target.last_dim();
                let rows = target.numel() / c;
                let scale = gd[0] / T::c(rows as f64);
                let mut dz = vec![T::zero(); probs.len()];
                for ((pr, tr), dr) in probs
                    .chunks(c)
                    .zip(target.data().chunks(c))
                    .zip(dz.chunks_mut(c))
                {
                    let tsum: T = tr.iter().copied().sum();
                    for j in 0..c {
                        dr[j] = (pr[j] * tsum - tr[j]) * scale;
                    }
                }
                self.acc_vec(grads, *logits, dz);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, gout.reshape(&shape)?);
            }
            &Op::SliceLast { x, start } => {
                let c = self.value(x).last_dim();
                let len = node.value.last_dim();
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (drow, grow) in dx.chunks_mut(c).zip(gd.chunks(len)) {
                    drow[start..start + len].copy_from_slice(grow);
                }
                self.acc_vec(grads, x, dx);
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let mut off = 0;
                for &p in parts {
                    let wd = self.value(p).last_dim();
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Vec::with_capacity(self.value(p).numel());
                        for grow in gd.chunks(total) {
                            dp.extend_from_slice(&grow[off..off + wd]);
                        }
                        self.acc_vec(grads, p, dp);
                    }
                    off += wd;
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let cout = node.value.last_dim();
                let rows = geom.oh * geom.ow;
                let pl = geom.patch_len();
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); pl * cout];
                    gemm(pl, rows, cout, cols, true, gd, false, &mut dw, false);
                    self.acc_vec(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![T::zero(); cout];
                        for row in gd.chunks(cout) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.acc_vec(grads, *b, db);
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![T::zero(); rows * pl];
                    gemm(rows, cout, pl, gd, false, self.value(*w).data(), true, &mut dcols, false);
                    self.acc_vec(grads, *x, kernels::col2im(&dcols, geom));
                }
            }
            &Op::Depthwise { x, w, b, k } => {
                let dims = self.value(x).dims3()?;
                let (dx, dw, db) = kernels::depthwise_adjoint(
                    gd,
                    self.value(x).data(),
                    dims,
                    self.value(w).data(),
                    k,
                );
                self.acc_vec(grads, x, dx);
                self.acc_vec(grads, w, dw);
                self.acc_vec(grads, b, db);
            }
            Op::L2Normalize { x, inv_norms } => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for (((yr, gr), dr), &inv) in y
                    .chunks(c)
                    .zip(gd.chunks(c))
                    .zip(dx.chunks_mut(c))
                    .zip(inv_norms)
                {
                    if inv == T::zero() {
                        continue;
                    }
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = (gr[j] - yr[j] * dot) * inv;
                    }
                }
                self.acc_vec(grads, *x, dx);
            }
            Op::TopK { x, idx } => {
                let c = self.value(*x).last_dim();
                let t = node.value.last_dim();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (r, (grow, irow)) in gd.chunks(t).zip(idx.chunks(t)).enumerate() {
                    for (&g, &ix) in grow.iter().zip(irow) {
                        dx[r * c + ix as usize] += g;
                    }
                }
                self.acc_vec(grads, *x, dx);
            }
            Op::Resize(x) => {
                let dims = self.value(*x).dims3()?;
                let (oh, ow, _) = node.value.dims3()?;
                self.acc_vec(grads, *x, kernels::resize_adjoint(gd, dims, oh, ow));
            }
            Op::AdaptivePool(x) => {
                let dims = self.value(*x).dims3()?;
                let (oh, ow, _) = node.value.dims3()?;
                self.acc_vec(grads, *x, kernels::adaptive_pool_adjoint(gd, dims, oh, ow));
            }
            Op::CycleShift { x, offsets } => {
                let dims = self.value(*x).dims3()?;
                self.acc_vec(grads, *x, kernels::cycle_shift_adjoint(gd, dims, offsets));
            }
            &Op::BoxMean { x, axis, p } => {
                let dims = self.value(x).dims3()?;
                self.acc_vec(grads, x, kernels::box_mean_adjoint(gd, dims, axis, p));
            }
            Op::StripPool { x, rows, cols } => {
                let dims = self.value(*x).dims3()?;
                self.acc_vec(grads, *x, kernels::strip_pool_adjoint(gd, dims, rows, cols));
            }
            Op::Sum(x) => {
                let g = gd[0];
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::full(&shape, g));
            }
            Op::SumSq(x) => {
                let g = gd[0] + gd[0];
                self.acc(grads, *x, self.value(*x).map(|v| v * g));
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                let half = T::c(0.5);
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &yv)| if yv > T::zero() { g * half / yv } else { T::zero() })
                    .collect();
                self.acc_vec(grads, *x, d);
            }
        }
        Ok(())
    }
}

fn softmax_in_place<T: Float>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    let inv = T::one() / s;
    row.iter_mut().for_each(|v| *v *= inv);
}
