//! Dense f64 tensors with reverse-mode autodiff.
//!
//! Graphs are define-by-run: every operation that sees at least one tracked
//! input records its parents and a backward closure; everything else is a
//! plain value computation with zero graph overhead. That split lets the
//! autoregressive sampler reuse the forward kernels without paying for
//! bookkeeping it never uses.
//!
//! Conventions, fixed once for the whole crate:
//! - 64-bit floats, row-major layout, NCHW for image tensors.
//! - No broadcasting except scalar-with-tensor and the explicit
//!   `broadcast_batch` / `broadcast_spatial` ops.
//! - Tensors are immutable; "updating" a parameter means building a new
//!   tensor. `tracked_view` and `detach` share the underlying buffer.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Gradient contributions for each parent, in parent order. `None` marks a
/// parent that is not tracked, so its gradient is never materialized.
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

enum Node {
    /// A tracked input: gradients accumulate here and surface in the
    /// [`GradientMap`].
    Leaf,
    /// An interior operation with its inputs and vector-Jacobian product.
    Op { parents: Vec<Tensor>, backward: BackwardFn },
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Rc<[f64]>,
    node: Option<Node>,
}

/// A dense n-dimensional array of f64, optionally attached to the
/// computation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?}, tracked={})", self.id(), self.shape(), self.is_tracked())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("empty shape list".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(format!("zero dimension in {shape:?}")));
    }
    Ok(())
}

impl Tensor {
    // ---- construction ----

    /// New untracked tensor with every element equal to `value`.
    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        Ok(Tensor::raw(shape.to_vec(), vec![value; n].into(), None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::full(shape, 0.0)
    }

    /// New untracked tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor::raw(shape.to_vec(), data.into(), None))
    }

    /// Shape-[1] wrapper around one value.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::raw(vec![1], vec![value].into(), None)
    }

    fn raw(shape: Vec<usize>, data: Rc<[f64]>, node: Option<Node>) -> Tensor {
        Tensor(Rc::new(Inner { id: next_id(), shape, data, node }))
    }

    /// Core op constructor: drops the graph node entirely when no parent is
    /// tracked, so inference paths never allocate closures.
    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: F) -> Tensor
    where
        F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        Tensor::from_op_shared(shape, data.into(), parents, backward)
    }

    fn from_op_shared<F>(shape: Vec<usize>, data: Rc<[f64]>, parents: Vec<Tensor>, backward: F) -> Tensor
    where
        F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let node = if parents.iter().any(Tensor::is_tracked) {
            Some(Node::Op { parents, backward: Box::new(backward) })
        } else {
            None
        };
        Tensor::raw(shape, data, node)
    }

    /// Same values, new identity, gradient tracking on. This is how model
    /// parameters and probe inputs enter the graph.
    pub fn tracked_view(&self) -> Tensor {
        Tensor::raw(self.shape().to_vec(), self.0.data.clone(), Some(Node::Leaf))
    }

    /// Same values, no graph node. Shares the buffer.
    pub fn detach(&self) -> Tensor {
        Tensor::raw(self.shape().to_vec(), self.0.data.clone(), None)
    }

    // ---- accessors ----

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.0.node.is_some()
    }

    /// Value of a shape-[1] tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data[0]
    }

    // ---- elementwise binary ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = zip_map(self.data(), other.data(), |a, b| a + b);
        let (ta, tb) = (self.is_tracked(), other.is_tracked());
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], move |g| {
            vec![ta.then(|| g.to_vec()), tb.then(|| g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = zip_map(self.data(), other.data(), |a, b| a - b);
        let (ta, tb) = (self.is_tracked(), other.is_tracked());
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], move |g| {
            vec![ta.then(|| g.to_vec()), tb.then(|| g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = zip_map(self.data(), other.data(), |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        let (ta, tb) = (a.is_tracked(), b.is_tracked());
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![a.clone(), b.clone()], move |g| {
            vec![
                ta.then(|| zip_map(g, b.data(), |g, b| g * b)),
                tb.then(|| zip_map(g, a.data(), |g, a| g * a)),
            ]
        }))
    }

    // ---- scalar and unary ----

    pub fn neg(&self) -> Tensor {
        self.map_unary(|x| -x, |g, x, _| {
            let _ = x;
            -g
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map_unary(move |x| c * x, move |g, _, _| c * g)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map_unary(move |x| x + c, |g, _, _| g)
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary(libm::exp, |g, _, y| g * y)
    }

    pub fn ln(&self) -> Tensor {
        self.map_unary(libm::log, |g, x, _| g / x)
    }

    pub fn tanh(&self) -> Tensor {
        self.map_unary(libm::tanh, |g, _, y| g * (1.0 - y * y))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map_unary(sigmoid_scalar, |g, _, y| g * y * (1.0 - y))
    }

    /// Numerically stable log(1 + exp(x)).
    pub fn softplus(&self) -> Tensor {
        self.map_unary(
            |x| libm::log1p(libm::exp(-libm::fabs(x))) + if x > 0.0 { x } else { 0.0 },
            |g, x, _| g * sigmoid_scalar(x),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.map_unary(|x| if x > 0.0 { x } else { 0.0 }, |g, x, _| if x > 0.0 { g } else { 0.0 })
    }

    pub fn square(&self) -> Tensor {
        self.map_unary(|x| x * x, |g, x, _| 2.0 * x * g)
    }

    /// Clamp to [lo, hi]; gradient passes through the interior (boundary
    /// inclusive) and is zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp bounds out of order");
        self.map_unary(
            move |x| x.max(lo).min(hi),
            move |g, x, _| if x >= lo && x <= hi { g } else { 0.0 },
        )
    }

    /// Shared unary scaffold. `df(g, x, y)` sees the upstream gradient, the
    /// input element, and the output element.
    fn map_unary<F, D>(&self, f: F, df: D) -> Tensor
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64, f64) -> f64 + 'static,
    {
        let out: Rc<[f64]> = self.data().iter().map(|&x| f(x)).collect::<Vec<_>>().into();
        let x = self.clone();
        let y = out.clone();
        Tensor::from_op_shared(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let gx = g
                .iter()
                .zip(x.data().iter())
                .zip(y.iter())
                .map(|((&g, &x), &y)| df(g, x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        let inv = 1.0 / n as f64;
        Tensor::from_op(vec![1], vec![s * inv], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// Sum over all axes except the leading (batch) one: [N, ...] -> [N].
    pub fn sum_per_batch(&self) -> Tensor {
        let n = self.shape()[0];
        let per = self.numel() / n;
        let data: Vec<f64> =
            (0..n).map(|i| self.data()[i * per..(i + 1) * per].iter().sum()).collect();
        Tensor::from_op(vec![n], data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n * per];
            for i in 0..n {
                gx[i * per..(i + 1) * per].fill(g[i]);
            }
            vec![Some(gx)]
        })
    }

    // ---- shape ----

    /// New view with the same values. Shares the buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::InvalidShape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape()
            )));
        }
        Ok(Tensor::from_op_shared(shape.to_vec(), self.0.data.clone(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Concatenate along the channel axis: [N,Ca,H,W] + [N,Cb,H,W].
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::InvalidShape(format!("concat_channels {sa:?} vs {sb:?}")));
        }
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut data = Vec::with_capacity((ca + cb) * n * hw);
        for i in 0..n {
            data.extend_from_slice(&self.data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&other.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let (ta, tb) = (self.is_tracked(), other.is_tracked());
        Ok(Tensor::from_op(
            vec![n, ca + cb, sa[2], sa[3]],
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let mut ga = ta.then(|| Vec::with_capacity(n * ca * hw));
                let mut gb = tb.then(|| Vec::with_capacity(n * cb * hw));
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    if let Some(ga) = ga.as_mut() {
                        ga.extend_from_slice(&g[base..base + ca * hw]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    /// Channel range [from, to) of an NCHW tensor.
    pub fn slice_channels(&self, from: usize, to: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || from >= to || to > s[1] {
            return Err(Error::InvalidShape(format!("slice_channels {from}..{to} of {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let cs = to - from;
        let mut data = Vec::with_capacity(n * cs * hw);
        for i in 0..n {
            let base = i * c * hw + from * hw;
            data.extend_from_slice(&self.data()[base..base + cs * hw]);
        }
        let total = n * c * hw;
        Ok(Tensor::from_op(vec![n, cs, s[2], s[3]], data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; total];
            for i in 0..n {
                let base = i * c * hw + from * hw;
                gx[base..base + cs * hw].copy_from_slice(&g[i * cs * hw..(i + 1) * cs * hw]);
            }
            vec![Some(gx)]
        }))
    }

    // ---- linear algebra ----

    /// [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::InvalidShape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        let (ta, tb) = (a.is_tracked(), b.is_tracked());
        Ok(Tensor::from_op(vec![m, n], data, vec![a.clone(), b.clone()], move |g| {
            vec![
                ta.then(|| matmul_nt(g, b.data(), m, n, k)),
                tb.then(|| matmul_tn(a.data(), g, k, m, n)),
            ]
        }))
    }

    /// Affine map of row vectors: x [N,in], w [out,in], b [out] -> [N,out].
    pub fn dense(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sx, sw, sb) = (self.shape(), w.shape(), b.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::InvalidShape(format!("dense x{sx:?} w{sw:?} b{sb:?}")));
        }
        let (n, d_in, d_out) = (sx[0], sx[1], sw[0]);
        let mut data = matmul_nt(self.data(), w.data(), n, d_in, d_out);
        for row in data.chunks_exact_mut(d_out) {
            for (v, bias) in row.iter_mut().zip(b.data()) {
                *v += bias;
            }
        }
        let (x, w, b) = (self.clone(), w.clone(), b.clone());
        let (tx, tw, tb) = (x.is_tracked(), w.is_tracked(), b.is_tracked());
        Ok(Tensor::from_op(vec![n, d_out], data, vec![x.clone(), w.clone(), b], move |g| {
            let gb = tb.then(|| {
                let mut gb = vec![0.0; d_out];
                for row in g.chunks_exact(d_out) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                gb
            });
            vec![
                tx.then(|| matmul_nn(g, w.data(), n, d_out, d_in)),
                tw.then(|| matmul_tn(g, x.data(), d_out, n, d_in)),
                gb,
            ]
        }))
    }

    // ---- broadcasts ----

    /// Repeat a [C,H,W]-like tensor across a new batch axis.
    pub fn broadcast_batch(&self, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::InvalidShape("broadcast_batch to zero".into()));
        }
        let per = self.numel();
        let mut data = Vec::with_capacity(n * per);
        for _ in 0..n {
            data.extend_from_slice(self.data());
        }
        let mut shape = Vec::with_capacity(self.shape().len() + 1);
        shape.push(n);
        shape.extend_from_slice(self.shape());
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; per];
            for chunk in g.chunks_exact(per) {
                for (acc, v) in gx.iter_mut().zip(chunk) {
                    *acc += v;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// [N,C] -> [N,C,h,w], repeating each value over space.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!("broadcast_spatial of {s:?} to {h}x{w}")));
        }
        let (n, c, hw) = (s[0], s[1], h * w);
        let mut data = Vec::with_capacity(n * c * hw);
        for &v in self.data() {
            data.extend(core::iter::repeat(v).take(hw));
        }
        Ok(Tensor::from_op(vec![n, c, h, w], data, vec![self.clone()], move |g| {
            let gx = g.chunks_exact(hw).map(|chunk| chunk.iter().sum()).collect();
            vec![Some(gx)]
        }))
    }

    /// [N,1,H,W] -> [N,K,H,W], repeating the single channel.
    pub fn broadcast_channels(&self, k: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || s[1] != 1 || k == 0 {
            return Err(Error::InvalidShape(format!("broadcast_channels of {s:?} to {k}")));
        }
        let (n, hw) = (s[0], s[2] * s[3]);
        let mut data = Vec::with_capacity(n * k * hw);
        for i in 0..n {
            for _ in 0..k {
                data.extend_from_slice(&self.data()[i * hw..(i + 1) * hw]);
            }
        }
        Ok(Tensor::from_op(vec![n, k, s[2], s[3]], data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n * hw];
            for i in 0..n {
                for c in 0..k {
                    let src = (i * k + c) * hw;
                    for (acc, v) in gx[i * hw..(i + 1) * hw].iter_mut().zip(&g[src..src + hw]) {
                        *acc += v;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    // ---- channel-axis specials ----

    /// Stable log-sum-exp over the channel axis: [N,K,H,W] -> [N,1,H,W].
    pub fn logsumexp_channels(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape(format!("logsumexp_channels of {s:?}")));
        }
        let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
        let mut data = vec![0.0; n * hw];
        for i in 0..n {
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for c in 0..k {
                    m = m.max(self.data()[(i * k + c) * hw + p]);
                }
                let mut acc = 0.0;
                for c in 0..k {
                    acc += libm::exp(self.data()[(i * k + c) * hw + p] - m);
                }
                data[i * hw + p] = m + libm::log(acc);
            }
        }
        let x = self.clone();
        let out: Rc<[f64]> = data.into();
        let lse = out.clone();
        Ok(Tensor::from_op_shared(vec![n, 1, s[2], s[3]], out, vec![self.clone()], move |g| {
            // d lse / d x_c = softmax(x)_c
            let mut gx = vec![0.0; n * k * hw];
            for i in 0..n {
                for p in 0..hw {
                    let l = lse[i * hw + p];
                    let gv = g[i * hw + p];
                    for c in 0..k {
                        let idx = (i * k + c) * hw + p;
                        gx[idx] = gv * libm::exp(x.data()[idx] - l);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Picks, per pixel, the channel named by `targets` (integer values in
    /// [0, K)): [N,K,H,W] gathered by [N,1,H,W] -> [N,1,H,W].
    pub fn gather_channels(&self, targets: &Tensor) -> Result<Tensor> {
        let (s, st) = (self.shape(), targets.shape());
        if s.len() != 4 || st != [s[0], 1, s[2], s[3]] {
            return Err(Error::InvalidShape(format!("gather_channels {s:?} by {st:?}")));
        }
        let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
        let mut idx = Vec::with_capacity(n * hw);
        for &t in targets.data() {
            if libm::trunc(t) != t || t < 0.0 || t >= k as f64 {
                return Err(Error::Contract(format!("gather target {t} outside 0..{k}")));
            }
            idx.push(t as usize);
        }
        let data: Vec<f64> = (0..n * hw)
            .map(|j| {
                let (i, p) = (j / hw, j % hw);
                self.data()[(i * k + idx[j]) * hw + p]
            })
            .collect();
        Ok(Tensor::from_op(
            vec![n, 1, s[2], s[3]],
            data,
            vec![self.clone(), targets.detach()],
            move |g| {
                let mut gx = vec![0.0; n * k * hw];
                for j in 0..n * hw {
                    let (i, p) = (j / hw, j % hw);
                    gx[(i * k + idx[j]) * hw + p] = g[j];
                }
                vec![Some(gx), None]
            },
        ))
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::InvalidShape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    // ---- reverse mode ----

    /// Reverse-mode gradients of a scalar tracked tensor with respect to
    /// every reachable leaf.
    pub fn backward(&self) -> Result<GradientMap> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.is_tracked() {
            return Err(Error::Contract("backward on an untracked tensor".into()));
        }

        // Iterative post-order: parents land before their consumers, so the
        // reversed order processes each node after all of its consumers.
        enum Visit {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut stack = vec![Visit::Enter(self.clone())];
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(t) => {
                    if !seen.insert(t.id()) {
                        continue;
                    }
                    if let Some(Node::Op { parents, .. }) = &t.0.node {
                        let ps: Vec<Tensor> =
                            parents.iter().filter(|p| p.is_tracked()).cloned().collect();
                        stack.push(Visit::Exit(t));
                        for p in ps {
                            if !seen.contains(&p.id()) {
                                stack.push(Visit::Enter(p));
                            }
                        }
                    } else {
                        stack.push(Visit::Exit(t));
                    }
                }
                Visit::Exit(t) => order.push(t),
            }
        }

        let mut grads: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        grads.insert(self.id(), vec![1.0]);
        let mut leaves: BTreeMap<u64, Tensor> = BTreeMap::new();
        for t in order.iter().rev() {
            match &t.0.node {
                Some(Node::Leaf) => {
                    leaves.insert(t.id(), t.clone());
                }
                Some(Node::Op { parents, backward }) => {
                    let g = match grads.remove(&t.id()) {
                        Some(g) => g,
                        None => continue,
                    };
                    let contribs = backward(&g);
                    debug_assert_eq!(contribs.len(), parents.len());
                    for (p, c) in parents.iter().zip(contribs) {
                        let (Some(c), true) = (c, p.is_tracked()) else { continue };
                        debug_assert_eq!(c.len(), p.numel());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&c) {
                                    *a += v;
                                }
                            }
                            None => {
                                grads.insert(p.id(), c);
                            }
                        }
                    }
                }
                None => {}
            }
        }

        let map = leaves
            .into_iter()
            .map(|(id, leaf)| {
                let g = grads.remove(&id).unwrap_or_else(|| vec![0.0; leaf.numel()]);
                (id, Tensor::raw(leaf.shape().to_vec(), g.into(), None))
            })
            .collect();
        Ok(GradientMap { map })
    }
}

/// Gradients keyed by leaf identity; shapes match the leaves exactly.
pub struct GradientMap {
    map: BTreeMap<u64, Tensor>,
}

impl GradientMap {
    /// Gradient with respect to `leaf`, if `leaf` was reachable from the loss.
    pub fn wrt(&self, leaf: &Tensor) -> Option<&Tensor> {
        self.map.get(&leaf.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&a, &b)| f(a, b)).collect()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

// ---- matmul kernels (also used by the convolution lowering) ----

/// a [m,k] x b [k,n] -> [m,n].
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a [m,k] x b^T where b is stored [n,k] -> [m,n].
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// a^T x b where a is stored [k,m], b is [k,n] -> [m,n].
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// ---- finite differences ----

/// Max relative error between analytic gradients of `f` at `point` and
/// central finite differences: max_i |analytic_i - fd_i| / max(1, |analytic_i|).
///
/// `f` must return a scalar tensor and keep the graph alive from its input.
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("eps must be positive".into()));
    }
    let x = point.tracked_view();
    let loss = f(&x)?;
    if loss.numel() != 1 {
        return Err(Error::Contract("finite_difference_check needs a scalar function".into()));
    }
    if !loss.item().is_finite() {
        return Err(Error::Numeric("non-finite function value at base point".into()));
    }
    let grads = loss.backward()?;
    let analytic: Vec<f64> = match grads.wrt(&x) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.numel()],
    };

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let eval = |delta: f64| -> Result<f64> {
            let mut d = point.data().to_vec();
            d[i] += delta;
            let v = f(&Tensor::from_vec(point.shape(), d)?)?.item();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite value perturbing coordinate {i}")));
            }
            Ok(v)
        };
        let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        let rel = libm::fabs(analytic[i] - fd) / libm::fabs(analytic[i]).max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, Stream};
    use proptest::prelude::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut s = Stream::new(seed, domain::PROBE, 0);
        Tensor::from_vec(shape, s.normal_vec(shape.iter().product())).unwrap()
    }

    #[test]
    fn full_fills_and_counts() {
        let z = Tensor::full(&[2, 2], 0.0).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let s = Tensor::full(&[1], 3.5).unwrap();
        assert_eq!(s.data(), &[3.5]);
        let ones = Tensor::full(&[2, 3], 1.0).unwrap();
        assert_eq!(ones.sum_all().item(), 6.0);
    }

    #[test]
    fn bad_shapes_are_rejected() {
        assert!(matches!(Tensor::full(&[], 1.0), Err(Error::InvalidShape(_))));
        assert!(matches!(Tensor::full(&[2, 0], 1.0), Err(Error::InvalidShape(_))));
        assert!(matches!(Tensor::from_vec(&[3], vec![1.0]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn backward_of_square_sum() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().tracked_view();
        let loss = x.mul(&x).unwrap().sum_all();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_of_plain_sum_is_ones() {
        let x = randn(&[2, 3], 1).tracked_view();
        let g = x.sum_all().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let x = randn(&[3], 2).tracked_view();
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
        let untracked = randn(&[1], 3);
        assert!(matches!(untracked.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_linear_over_loss_sums() {
        let x = randn(&[4], 4).tracked_view();
        let l1 = x.mul(&x).unwrap().sum_all();
        let l2 = x.exp().sum_all();
        let combined = l1.add(&l2).unwrap().backward().unwrap();
        let g1 = l1.backward().unwrap();
        let g2 = l2.backward().unwrap();
        for i in 0..4 {
            let want = g1.wrt(&x).unwrap().data()[i] + g2.wrt(&x).unwrap().data()[i];
            assert!((combined.wrt(&x).unwrap().data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let x = randn(&[2, 8], 5);
        let w = randn(&[3, 8], 6);
        let b = randn(&[3], 7);
        let f = |x: &Tensor| x.dense(&w, &b).unwrap().tanh().sum_all().item();
        assert_eq!(f(&x).to_bits(), f(&x).to_bits());
    }

    #[test]
    fn untracked_graphs_allocate_no_nodes() {
        let x = randn(&[4], 8);
        let y = x.exp().sum_all();
        assert!(!y.is_tracked());
        let leaf = x.tracked_view();
        assert!(leaf.exp().sum_all().is_tracked());
    }

    #[test]
    fn detach_blocks_gradients() {
        let x = randn(&[3], 9).tracked_view();
        let y = x.exp().detach().sum_all();
        assert!(!y.is_tracked());
    }

    #[test]
    fn fd_check_is_exact_for_linear_and_quadratic() {
        let p = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        // Power-of-two eps keeps the perturbed sums exact, so a linear
        // function shows literally zero error.
        let lin = finite_difference_check(|x| Ok(x.sum_all()), &p, 1.0 / 65536.0).unwrap();
        assert_eq!(lin, 0.0);
        let quad =
            finite_difference_check(|x| Ok(x.square().sum_all().scale(0.5)), &p, 1e-5).unwrap();
        assert!(quad < 1e-8, "quadratic fd error {quad}");
    }

    #[test]
    fn fd_check_covers_fused_backward_ops() {
        // Ops with hand-written vector-Jacobian products get a direct check;
        // the elementwise ones are exercised by the full-suite gradient test.
        let x = randn(&[2, 3, 2, 2], 11).scale(0.3);
        let t = Tensor::from_vec(&[2, 1, 2, 2], vec![0.0, 2.0, 1.0, 0.0, 2.0, 1.0, 0.0, 1.0]).unwrap();
        let e = finite_difference_check(
            |x| Ok(x.logsumexp_channels()?.sum_all()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "logsumexp fd {e}");
        let e = finite_difference_check(|x| Ok(x.gather_channels(&t)?.sum_all()), &x, 1e-5).unwrap();
        assert!(e < 1e-6, "gather fd {e}");

        let w = randn(&[4, 6], 12).scale(0.2);
        let b = randn(&[4], 13).scale(0.2);
        let xin = randn(&[3, 6], 14);
        let e = finite_difference_check(|x| Ok(x.dense(&w, &b)?.square().sum_all()), &xin, 1e-5)
            .unwrap();
        assert!(e < 1e-6, "dense input fd {e}");
        let e = finite_difference_check(
            |w| Ok(xin.dense(w, &b)?.square().sum_all()),
            &w,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "dense weight fd {e}");

        let a = randn(&[3, 4], 15);
        let e = finite_difference_check(|m| Ok(a.matmul(m)?.tanh().sum_all()), &randn(&[4, 2], 16), 1e-5)
            .unwrap();
        assert!(e < 1e-6, "matmul fd {e}");
    }

    #[test]
    fn broadcast_backward_sums_contributions() {
        let x = randn(&[2, 3], 17).tracked_view();
        let loss = x.broadcast_spatial(2, 2).unwrap().sum_all();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[4.0; 6]);

        let y = randn(&[3, 2, 2], 18).tracked_view();
        let g = y.broadcast_batch(5).unwrap().sum_all().backward().unwrap();
        assert_eq!(g.wrt(&y).unwrap().data(), &[5.0; 12]);
    }

    #[test]
    fn concat_and_slice_roundtrip_values_and_gradients() {
        let a = randn(&[2, 2, 2, 2], 19).tracked_view();
        let b = randn(&[2, 3, 2, 2], 20).tracked_view();
        let cat = a.concat_channels(&b).unwrap();
        assert_eq!(cat.shape(), &[2, 5, 2, 2]);
        let back_a = cat.slice_channels(0, 2).unwrap();
        assert_eq!(back_a.data(), a.data());
        let back_b = cat.slice_channels(2, 5).unwrap();
        assert_eq!(back_b.data(), b.data());

        // Gradient of sum through concat is ones on both parts.
        let g = cat.sum_all().backward().unwrap();
        assert_eq!(g.wrt(&a).unwrap().data(), &[1.0; 16]);
        assert_eq!(g.wrt(&b).unwrap().data(), &[1.0; 24]);
    }

    #[test]
    fn gather_rejects_non_integer_and_out_of_range_targets() {
        let x = randn(&[1, 3, 1, 2], 21);
        let bad = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(x.gather_channels(&bad), Err(Error::Contract(_))));
        let oob = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 3.0]).unwrap();
        assert!(matches!(x.gather_channels(&oob), Err(Error::Contract(_))));
    }

    #[test]
    fn reshape_shares_values_and_checks_counts() {
        let x = randn(&[2, 6], 22);
        let y = x.reshape(&[3, 4]).unwrap();
        assert_eq!(x.data(), y.data());
        assert!(matches!(x.reshape(&[5]), Err(Error::InvalidShape(_))));
    }

    proptest! {
        #[test]
        fn add_commutes_bitwise(xs in prop::collection::vec(-1e3f64..1e3, 1..32)) {
            let n = xs.len();
            let half: Vec<f64> = xs.iter().map(|x| x * 0.5).collect();
            let a = Tensor::from_vec(&[n], xs.clone()).unwrap();
            let b = Tensor::from_vec(&[n], half).unwrap();
            let ab = a.add(&b).unwrap();
            let ba = b.add(&a).unwrap();
            prop_assert_eq!(ab.data(), ba.data());
        }

        #[test]
        fn sum_matches_reference(xs in prop::collection::vec(-1e6f64..1e6, 1..64)) {
            let n = xs.len();
            let t = Tensor::from_vec(&[n], xs.clone()).unwrap();
            let want: f64 = xs.iter().sum();
            prop_assert_eq!(t.sum_all().item(), want);
        }

        #[test]
        fn mul_gradients_are_the_other_factor(
            xs in prop::collection::vec(-10f64..10.0, 2..16),
        ) {
            let n = xs.len();
            let a = Tensor::from_vec(&[n], xs.clone()).unwrap().tracked_view();
            let b = Tensor::from_vec(&[n], xs.iter().rev().cloned().collect()).unwrap();
            let g = a.mul(&b).unwrap().sum_all().backward().unwrap();
            prop_assert_eq!(g.wrt(&a).unwrap().data(), b.data());
        }
    }
}
