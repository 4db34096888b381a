use super::kernels::{gemm, MatRef};
use super::{split_last, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    NodeContract {
        x: Var,
        w: Var,
    },
    Propagate {
        adj: Var,
        x: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat(Var, Var),
    Slice {
        a: Var,
        start: usize,
    },
    Stack {
        inputs: Vec<Var>,
        axis: usize,
    },
    Select {
        a: Var,
        axis: usize,
        index: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of one forward pass, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// topological order for gradient propagation. A tape supports a single
/// backward pass; call [`Tape::reset`] before recording the next step.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

type Grads<T> = [Option<Vec<T>>];

fn grad_of<T>(grads: &mut Grads<T>, v: Var) -> Option<&mut Vec<T>> {
    grads[v.0].as_mut()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[a, b])
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::rowmajor(self.value(a).data(), 0, m, k),
            MatRef::rowmajor(self.value(b).data(), 0, k, n),
            &mut out,
            0,
            n,
            T::zero(),
        );
        let out = Tensor::new([m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Matrix product over matching leading axes: `[..,m,k] · [..,k,n]`, or
    /// `[..,m,k] · [..,n,k]ᵀ` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() >= 2 && sa.len() == sb.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2];
        let r = sa.len();
        let (m, k) = (sa[r.saturating_sub(2)], sa[r.saturating_sub(1)]);
        let (kb, n) = if trans_b {
            (sb[r.saturating_sub(1)], sb[r.saturating_sub(2)])
        } else {
            (sb[r.saturating_sub(2)], sb[r.saturating_sub(1)])
        };
        if !ok || k != kb {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let groups: usize = sa[..r - 2].iter().product();
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); groups * m * n];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for g in 0..groups {
            let bm = if trans_b {
                MatRef::rowmajor(xb, g * n * k, n, k).t()
            } else {
                MatRef::rowmajor(xb, g * k * n, k, n)
            };
            gemm(
                MatRef::rowmajor(xa, g * m * k, m, k),
                bm,
                &mut out,
                g * m * n,
                n,
                T::zero(),
            );
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Per-node feature transform: `out[..,n,f] = Σ_c x[..,n,c]·w[n,c,f]`.
    pub fn batched_node_contract(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let r = sx.len();
        if r < 2 || sw.len() != 3 || sx[r - 2] != sw[0] || sx[r - 1] != sw[1] {
            return Err(Error::dim("batched_node_contract", sx, sw));
        }
        let (nn, c, f) = (sw[0], sw[1], sw[2]);
        let lead: usize = sx[..r - 2].iter().product();
        let mut shape = sx.to_vec();
        shape[r - 1] = f;
        let mut out = vec![T::zero(); lead * nn * f];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for n in 0..nn {
            let xm = MatRef {
                data: xd,
                off: n * c,
                rows: lead,
                cols: c,
                rs: nn * c,
                cs: 1,
            };
            gemm(
                xm,
                MatRef::rowmajor(wd, n * c * f, c, f),
                &mut out,
                n * f,
                nn * f,
                T::zero(),
            );
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::NodeContract { x, w }, &[x, w]))
    }

    /// Left-multiplies every `[N,C]` slice of `x` by the square operator `adj`.
    pub fn propagate(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(adj), self.shape(x));
        let r = sx.len();
        if sa.len() != 2 || sa[0] != sa[1] || r < 2 || sx[r - 2] != sa[0] {
            return Err(Error::dim("propagate", sa, sx));
        }
        let (nn, c) = (sx[r - 2], sx[r - 1]);
        let lead: usize = sx[..r - 2].iter().product();
        let shape = sx.to_vec();
        let mut out = vec![T::zero(); lead * nn * c];
        let (ad, xd) = (self.value(adj).data(), self.value(x).data());
        for b in 0..lead {
            gemm(
                MatRef::rowmajor(ad, 0, nn, nn),
                MatRef::rowmajor(xd, b * nn * c, nn, c),
                &mut out,
                b * nn * c,
                c,
                T::zero(),
            );
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Propagate { adj, x }, &[adj, x]))
    }

    /// Adds `bias` to every trailing block of `x` whose shape equals the bias shape.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let bd = self.value(bias).data();
        let s = bd.len().max(1);
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % s])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, |p, q| p + q, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, |p, q| p - q, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, |p, q| p * q, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    // ---- normalisation ----------------------------------------------------

    /// Softmax over the last axis, stabilised by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().last() == Some(&0) {
            return Err(Error::dim("softmax_rows", av.shape(), &[1]));
        }
        let (rows, n) = split_last(av.shape());
        let mut data = av.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Normalises each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x);
        let f = *sx.last().unwrap_or(&1);
        if self.shape(gain) != [f] || self.shape(bias) != [f] {
            return Err(Error::dim("layer_norm", sx, self.shape(gain)));
        }
        let (rows, _) = split_last(sx);
        let nf = T::lit(f as f64);
        let (xd, gd, bd) = (
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let mut xhat = vec![T::zero(); rows * f];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * f];
        for r in 0..rows {
            let row = &xd[r * f..(r + 1) * f];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..f {
                let h = (row[j] - mean) * rs;
                xhat[r * f + j] = h;
                out[r * f + j] = h * gd[j] + bd[j];
            }
        }
        let out = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // ---- layout -----------------------------------------------------------

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_last", sa, sb));
        }
        let (rows, p) = split_last(sa);
        let q = *sb.last().unwrap();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * p..(r + 1) * p]);
            out.extend_from_slice(&bd[r * q..(r + 1) * q]);
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a);
        let (rows, p) = split_last(sa);
        if sa.is_empty() || start + len > p {
            return Err(Error::dim("slice_last", sa, &[start, len]));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = len;
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&ad[r * p + start..r * p + start + len]);
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Slice { a, start }, &[a]))
    }

    /// Stacks equally shaped tensors along a new axis at position `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let s = self.shape(*first).to_vec();
        if axis > s.len() {
            return Err(Error::dim("stack", &s, &[axis]));
        }
        for v in inputs {
            if self.shape(*v) != s.as_slice() {
                return Err(Error::dim("stack", &s, self.shape(*v)));
            }
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let k = inputs.len();
        let mut out = vec![T::zero(); outer * k * inner];
        for (j, v) in inputs.iter().enumerate() {
            let d = self.value(*v).data();
            for o in 0..outer {
                out[(o * k + j) * inner..(o * k + j + 1) * inner]
                    .copy_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s.clone();
        shape.insert(axis, k);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Stack {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Picks entry `index` of axis `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(Error::dim("select", &s, &[axis, index]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let k = s[axis];
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * k + index) * inner;
            out.extend_from_slice(&d[base..base + inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Select { a, axis, index }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::lit(v.numel().max(1) as f64);
        let s = v.data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    // ---- reverse pass -----------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. Fails on a non-scalar loss or on a tape already consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; reset it before recording again".into(),
            ));
        }
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads = self
            .nodes
            .iter()
            .map(|n| n.requires_grad.then(|| vec![T::zero(); n.value.numel()]))
            .collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0].as_mut().unwrap()[0] = T::one();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let g = upper[0].as_deref().unwrap();
            backprop(&self.nodes, i, g, lower);
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut Grads<T>) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            let gm = MatRef::rowmajor(g, 0, m, n);
            if let Some(ga) = grad_of(grads, *a) {
                let bm = MatRef::rowmajor(val(*b).data(), 0, k, n);
                gemm(gm, bm.t(), ga, 0, k, T::one());
            }
            if let Some(gb) = grad_of(grads, *b) {
                let am = MatRef::rowmajor(val(*a).data(), 0, m, k);
                gemm(am.t(), gm, gb, 0, n, T::one());
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let sa = val(*a).shape();
            let r = sa.len();
            let (m, k) = (sa[r - 2], sa[r - 1]);
            let n = out.shape()[r - 1];
            let groups: usize = sa[..r - 2].iter().product();
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(ga) = grad_of(grads, *a) {
                for q in 0..groups {
                    let gm = MatRef::rowmajor(g, q * m * n, m, n);
                    // ga = g · Bᵀ where B is the effective [k,n] operand.
                    let bt = if *trans_b {
                        MatRef::rowmajor(bd, q * n * k, n, k)
                    } else {
                        MatRef::rowmajor(bd, q * k * n, k, n).t()
                    };
                    gemm(gm, bt, ga, q * m * k, k, T::one());
                }
            }
            if let Some(gb) = grad_of(grads, *b) {
                for q in 0..groups {
                    let gm = MatRef::rowmajor(g, q * m * n, m, n);
                    let am = MatRef::rowmajor(ad, q * m * k, m, k);
                    if *trans_b {
                        gemm(gm.t(), am, gb, q * n * k, k, T::one());
                    } else {
                        gemm(am.t(), gm, gb, q * k * n, n, T::one());
                    }
                }
            }
        }
        Op::NodeContract { x, w } => {
            let sw = val(*w).shape();
            let (nn, c, f) = (sw[0], sw[1], sw[2]);
            let lead = val(*x).numel() / (nn * c);
            let (xd, wd) = (val(*x).data(), val(*w).data());
            let gslice = |n: usize| MatRef {
                data: g,
                off: n * f,
                rows: lead,
                cols: f,
                rs: nn * f,
                cs: 1,
            };
            if let Some(gx) = grad_of(grads, *x) {
                for n in 0..nn {
                    let wm = MatRef::rowmajor(wd, n * c * f, c, f);
                    gemm(gslice(n), wm.t(), gx, n * c, nn * c, T::one());
                }
            }
            if let Some(gw) = grad_of(grads, *w) {
                for n in 0..nn {
                    let xm = MatRef {
                        data: xd,
                        off: n * c,
                        rows: lead,
                        cols: c,
                        rs: nn * c,
                        cs: 1,
                    };
                    gemm(xm.t(), gslice(n), gw, n * c * f, f, T::one());
                }
            }
        }
        Op::Propagate { adj, x } => {
            let sx = val(*x).shape();
            let r = sx.len();
            let (nn, c) = (sx[r - 2], sx[r - 1]);
            let lead: usize = sx[..r - 2].iter().product();
            let (ad, xd) = (val(*adj).data(), val(*x).data());
            if let Some(gx) = grad_of(grads, *x) {
                let am = MatRef::rowmajor(ad, 0, nn, nn);
                for b in 0..lead {
                    let gm = MatRef::rowmajor(g, b * nn * c, nn, c);
                    gemm(am.t(), gm, gx, b * nn * c, c, T::one());
                }
            }
            if let Some(ga) = grad_of(grads, *adj) {
                for b in 0..lead {
                    let gm = MatRef::rowmajor(g, b * nn * c, nn, c);
                    let xm = MatRef::rowmajor(xd, b * nn * c, nn, c);
                    gemm(gm, xm.t(), ga, 0, nn, T::one());
                }
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(gx) = grad_of(grads, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = grad_of(grads, *bias) {
                let s = gb.len().max(1);
                for (j, &v) in g.iter().enumerate() {
                    gb[j % s] += v;
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = grad_of(grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_of(grads, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_of(grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_of(grads, *b) {
                for (d, &v) in gb.iter_mut().zip(g) {
                    *d -= v;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = grad_of(grads, *a) {
                for ((d, &v), &o) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                    *d += v * o;
                }
            }
            if let Some(gb) = grad_of(grads, *b) {
                for ((d, &v), &o) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                    *d += v * o;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = grad_of(grads, *a) {
                for (d, &v) in ga.iter_mut().zip(g) {
                    *d += v * *s;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = grad_of(grads, *a) {
                add_into(ga, g);
            }
        }
        Op::Relu(a) => {
            if let Some(ga) = grad_of(grads, *a) {
                for ((d, &v), &x) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                    if x > T::zero() {
                        *d += v;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = grad_of(grads, *a) {
                for ((d, &v), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += v * y * (T::one() - y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = grad_of(grads, *a) {
                for ((d, &v), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += v * (T::one() - y * y);
                }
            }
        }
        Op::Abs(a) => {
            if let Some(ga) = grad_of(grads, *a) {
                for ((d, &v), &x) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                    // Subgradient 0 at the kink.
                    if x > T::zero() {
                        *d += v;
                    } else if x < T::zero() {
                        *d -= v;
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(ga) = grad_of(grads, *a) {
                let (rows, n) = split_last(out.shape());
                let y = out.data();
                for r in 0..rows {
                    let span = r * n..(r + 1) * n;
                    let dot: T = g[span.clone()]
                        .iter()
                        .zip(&y[span.clone()])
                        .map(|(&p, &q)| p * q)
                        .sum();
                    for j in span {
                        ga[j] += y[j] * (g[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gd = val(*gain).data();
            let f = gd.len();
            let rows = rstd.len();
            if let Some(gx) = grad_of(grads, *x) {
                let nf = T::lit(f as f64);
                for r in 0..rows {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..f {
                        let d = g[r * f + j] * gd[j];
                        mean_d += d;
                        mean_dx += d * xhat[r * f + j];
                    }
                    mean_d /= nf;
                    mean_dx /= nf;
                    for j in 0..f {
                        let d = g[r * f + j] * gd[j];
                        gx[r * f + j] += rstd[r] * (d - mean_d - xhat[r * f + j] * mean_dx);
                    }
                }
            }
            if let Some(gg) = grad_of(grads, *gain) {
                for (idx, (&v, &h)) in g.iter().zip(xhat).enumerate() {
                    gg[idx % f] += v * h;
                }
            }
            if let Some(gb) = grad_of(grads, *bias) {
                for (idx, &v) in g.iter().enumerate() {
                    gb[idx % f] += v;
                }
            }
        }
        Op::Concat(a, b) => {
            let p = *val(*a).shape().last().unwrap();
            let q = *val(*b).shape().last().unwrap();
            let rows = out.numel() / (p + q).max(1);
            if let Some(ga) = grad_of(grads, *a) {
                for r in 0..rows {
                    add_into(
                        &mut ga[r * p..(r + 1) * p],
                        &g[r * (p + q)..r * (p + q) + p],
                    );
                }
            }
            if let Some(gb) = grad_of(grads, *b) {
                for r in 0..rows {
                    add_into(
                        &mut gb[r * q..(r + 1) * q],
                        &g[r * (p + q) + p..(r + 1) * (p + q)],
                    );
                }
            }
        }
        Op::Slice { a, start } => {
            if let Some(ga) = grad_of(grads, *a) {
                let p = *val(*a).shape().last().unwrap();
                let len = *out.shape().last().unwrap();
                let rows = out.numel() / len.max(1);
                for r in 0..rows {
                    add_into(
                        &mut ga[r * p + start..r * p + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            }
        }
        Op::Stack { inputs, axis } => {
            let s = val(inputs[0]).shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[*axis..].iter().product();
            let k = inputs.len();
            for (j, v) in inputs.iter().enumerate() {
                if let Some(gv) = grad_of(grads, *v) {
                    for o in 0..outer {
                        add_into(
                            &mut gv[o * inner..(o + 1) * inner],
                            &g[(o * k + j) * inner..(o * k + j + 1) * inner],
                        );
                    }
                }
            }
        }
        Op::Select { a, axis, index } => {
            if let Some(ga) = grad_of(grads, *a) {
                let s = val(*a).shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let k = s[*axis];
                for o in 0..outer {
                    let base = (o * k + index) * inner;
                    add_into(&mut ga[base..base + inner], &g[o * inner..(o + 1) * inner]);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = grad_of(grads, *a) {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = grad_of(grads, *a) {
                let s = g[0] / T::lit(ga.len().max(1) as f64);
                for d in ga.iter_mut() {
                    *d += s;
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let r = tape.constant(t(&[1, 2], &[1., 0.]));
        let c = tape.constant(t(&[2, 1], &[0., 1.]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn node_contract_small_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1], &[2.]));
        let w = tape.constant(t(&[1, 1, 1], &[3.]));
        let y = tape.batched_node_contract(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[6.]);

        let x = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let mut eye = Tensor::zeros([2, 2, 2]);
        for n in 0..2 {
            for c in 0..2 {
                eye.set(&[n, c, c], 1.0);
            }
        }
        let w = tape.constant(eye);
        let y = tape.batched_node_contract(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);

        let bad = tape.constant(Tensor::zeros([3, 2, 2]));
        assert!(matches!(
            tape.batched_node_contract(x, bad),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3], &[0., 0., 0.]));
        let s = tape.softmax_rows(a).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let a = tape.constant(t(&[2], &[1000., 0.]));
        let s = tape.softmax_rows(a).unwrap();
        let d = tape.value(s).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);
    }

    #[test]
    fn activations_at_known_points() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_f64([3], &[-2., 3., 0.]).unwrap());
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0., 3., 0.]);
        let s = tape.sigmoid(a);
        assert_eq!(tape.value(s).data()[2], 0.5);
        let th = tape.tanh(a);
        assert_eq!(tape.value(th).data()[2], 0.0);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        let g = tape.constant(Tensor::full([3], 1.0));
        let b = tape.constant(Tensor::zeros([3]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (v, e) in tape.value(y).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
        let c = tape.constant(t(&[3], &[5., 5., 5.]));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 0.]);
    }

    #[test]
    fn concat_and_slice() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[1], &[3.]));
        let c = tape.concat_last(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3.]);

        let e = tape.constant(Tensor::zeros([0]));
        let c = tape.concat_last(a, e).unwrap();
        assert_eq!(tape.value(c), tape.value(a));

        let m = tape.constant(Tensor::zeros([2, 3]));
        let n = tape.constant(Tensor::zeros([3, 1]));
        assert!(tape.concat_last(m, n).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[0.5, -1., 2.]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 1.]);

        tape.reset();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_contract_and_state_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::State(_))));
        tape.reset();
        let x = tape.param(t(&[2], &[1., 2.]));
        let s = tape.sum(x);
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let unused = tape.param(t(&[2], &[1., 2.]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn stack_select_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.param(t(&[2, 3], &[7., 8., 9., 10., 11., 12.]));
        let s = tape.stack(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(s), &[2, 2, 3]);
        assert_eq!(
            tape.value(s).data(),
            &[1., 2., 3., 7., 8., 9., 4., 5., 6., 10., 11., 12.]
        );
        let back = tape.select(s, 1, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
        let l = tape.sum(back);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.; 6]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.; 6]);
    }
}
