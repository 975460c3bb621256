//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to [`Var`] handles together with a
//! closure computing the vector-Jacobian product. [`Graph::backward`]
//! replays the tape once and returns gradients keyed by parameter name.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ops::{self, Conv2dSpec, NormMode, RunningStats};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Inputs handed to a backward closure.
pub struct BackwardArgs<'a, T> {
    pub grad: &'a Tensor<T>,
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Which inputs need a gradient.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> =
    Box<dyn Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients keyed by parameter name, in registration order.
pub type Gradients<T> = IndexMap<String, Tensor<T>>;

/// Recorded operation graph for one forward/backward step.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
    buffer_updates: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            buffer_updates: Vec::new(),
        }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
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
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if self.nodes.iter().any(|n| n.param.as_deref() == Some(name)) {
            return Err(Error::invalid(
                "graph",
                format!("parameter `{name}` registered twice"),
            ));
        }
        let rg = self.grad_enabled;
        Ok(self.leaf(value, rg, Some(name.to_owned())))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op result. Non-finite values are rejected.
    pub fn record(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Queues a non-differentiable buffer update (batch-norm running stats).
    pub fn push_buffer_update(&mut self, name: String, value: Tensor<T>) {
        self.buffer_updates.push((name, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Back-propagates from a scalar `loss`. The graph can only be consumed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                self.nodes[loss.0].value.shape(),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                grads[idx] = Some(grad);
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&args)?;
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[p].value.shape() {
                    return Err(Error::shape(
                        "backward",
                        format!("{:?}", self.nodes[p].value.shape()),
                        g.shape(),
                    ));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for node in &mut self.nodes {
            node.backward = None;
        }
        let mut out = Gradients::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.param, node.requires_grad) {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strided view of an input broadcast to a larger shape. Adjacent axes that
/// are both broadcast, or both contiguous in the input, are merged so the
/// innermost axis is as long a run as possible.
#[derive(Clone, Debug)]
struct Broadcast {
    shape: Vec<usize>,
    /// Input stride per merged axis; 0 on broadcast axes.
    strides: Vec<usize>,
}

impl Broadcast {
    fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let pad = out_shape.len() - in_shape.len();
        let mut strides = vec![0; out_shape.len()];
        let mut stride = 1;
        for i in (0..out_shape.len()).rev() {
            let d = if i < pad { 1 } else { in_shape[i - pad] };
            strides[i] = if d == 1 { 0 } else { stride };
            stride *= d;
        }
        let (mut shape, mut merged) = (Vec::new(), Vec::<usize>::new());
        for (&d, &s) in out_shape.iter().zip(&strides) {
            if d == 1 {
                continue;
            }
            match (shape.last_mut(), merged.last()) {
                (Some(pd), Some(&ps)) if (ps == 0 && s == 0) || (s != 0 && ps == s * d) => {
                    *pd *= d;
                    *merged.last_mut().expect("non-empty") = s;
                }
                _ => {
                    shape.push(d);
                    merged.push(s);
                }
            }
        }
        Self { shape, strides: merged }
    }

    /// Calls `run(src_offset, len, contiguous)` for each innermost run, in
    /// output order.
    fn for_each_run(&self, mut run: impl FnMut(usize, usize, bool)) {
        let Some((&len, outer)) = self.shape.split_last() else {
            run(0, 1, true);
            return;
        };
        let contiguous = *self.strides.last().expect("same rank") != 0;
        let count: usize = outer.iter().product();
        let mut counter = vec![0usize; outer.len()];
        let mut src = 0usize;
        for _ in 0..count {
            run(src, len, contiguous);
            for ax in (0..outer.len()).rev() {
                counter[ax] += 1;
                src += self.strides[ax];
                if counter[ax] < outer[ax] {
                    break;
                }
                src -= self.strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
    }

    fn gather<T: Real>(&self, src: &[T], numel: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(numel);
        self.for_each_run(|s, len, contiguous| {
            if contiguous {
                out.extend_from_slice(&src[s..s + len]);
            } else {
                out.extend(std::iter::repeat_n(src[s], len));
            }
        });
        out
    }

    fn reduce<T: Real>(&self, grad: &[T], gx: &mut [T]) {
        let mut pos = 0;
        self.for_each_run(|s, len, contiguous| {
            let g = &grad[pos..pos + len];
            if contiguous {
                for (o, &v) in gx[s..s + len].iter_mut().zip(g) {
                    *o += v;
                }
            } else {
                gx[s] += g.iter().copied().sum::<T>();
            }
            pos += len;
        });
    }
}

fn unary<T: Real>(
    g: &mut Graph<T>,
    op: &'static str,
    x: Var,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Result<Var> {
    let value = g.value(x).map(f);
    g.record(
        op,
        value,
        &[x],
        Box::new(move |a| {
            let x = a.inputs[0];
            let mut gx = a.grad.clone();
            for ((gv, &xv), &yv) in gx.data_mut().iter_mut().zip(x.data()).zip(a.output.data()) {
                *gv *= df(xv, yv);
            }
            Ok(vec![Some(gx)])
        }),
    )
}

impl<T: Real> Graph<T> {
    /// Materializes numpy-style broadcasting of `x` to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        if in_shape == shape {
            return Ok(x);
        }
        if broadcast_shape(&in_shape, shape).as_deref() != Some(shape) {
            return Err(Error::shape(
                "broadcast_to",
                format!("broadcastable to {shape:?}"),
                &in_shape,
            ));
        }
        let plan = Broadcast::new(&in_shape, shape);
        let value = Tensor::new(shape, plan.gather(self.value(x).data(), shape.iter().product()))?;
        self.record(
            "broadcast_to",
            value,
            &[x],
            Box::new(move |a| {
                let mut gx = Tensor::zeros(&in_shape);
                plan.reduce(a.grad.data(), gx.data_mut());
                Ok(vec![Some(gx)])
            }),
        )
    }

    fn broadcast_pair(&mut self, a: Var, b: Var, op: &'static str) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(op, format!("broadcastable with {sa:?}"), &sb))?;
        Ok((self.broadcast_to(a, &out)?, self.broadcast_to(b, &out)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.record(
            "add",
            value,
            &[a, b],
            Box::new(|a| Ok(vec![Some(a.grad.clone()), Some(a.grad.clone())])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.record(
            "sub",
            value,
            &[a, b],
            Box::new(|a| Ok(vec![Some(a.grad.clone()), Some(a.grad.scale(-T::one()))])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.record(
            "mul",
            value,
            &[a, b],
            Box::new(|a| {
                let ga = a.needs[0]
                    .then(|| a.grad.zip_map(a.inputs[1], "mul", |g, y| g * y))
                    .transpose()?;
                let gb = a.needs[1]
                    .then(|| a.grad.zip_map(a.inputs[0], "mul", |g, x| g * x))
                    .transpose()?;
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "div")?;
        let value = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        self.record(
            "div",
            value,
            &[a, b],
            Box::new(|a| {
                let ga = a.needs[0]
                    .then(|| a.grad.zip_map(a.inputs[1], "div", |g, y| g / y))
                    .transpose()?;
                let gb = a.needs[1]
                    .then(|| -> Result<Tensor<T>> {
                        let gy = a.grad.zip_map(a.output, "div", |g, q| g * q)?;
                        gy.zip_map(a.inputs[1], "div", |gq, y| -gq / y)
                    })
                    .transpose()?;
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let st = T::lit(s);
        unary(self, "scale", x, move |v| v * st, move |_, _| st)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let st = T::lit(s);
        unary(self, "add_scalar", x, move |v| v + st, |_, _| T::one())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        unary(self, "exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        unary(self, "abs", x, |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        unary(self, "square", x, |v| v * v, |x, _| x + x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        unary(self, "relu", x, |v| v.max(T::zero()), |x, _| {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        unary(self, "sigmoid", x, ops::sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        unary(self, "tanh", x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        unary(self, "silu", x, |v| v * ops::sigmoid_scalar(v), |x, _| {
            let s = ops::sigmoid_scalar(x);
            s * (T::one() + x * (T::one() - s))
        })
    }

    pub fn squared_relu(&mut self, x: Var) -> Result<Var> {
        unary(
            self,
            "squared_relu",
            x,
            |v| {
                let r = v.max(T::zero());
                r * r
            },
            |x, _| (x + x).max(T::zero()),
        )
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        unary(self, "softplus", x, ops::softplus_scalar, |x, _| ops::sigmoid_scalar(x))
    }

    /// Clamps into `[lo, hi]`; gradient passes where the input is inside the closed interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (T::lit(lo), T::lit(hi));
        unary(self, "clamp", x, move |v| v.max(l).min(h), move |x, _| {
            if x >= l && x <= h {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let value = Tensor::scalar(self.value(x).sum());
        self.record(
            "sum",
            value,
            &[x],
            Box::new(move |a| Ok(vec![Some(Tensor::full(&shape, a.grad.data()[0]))])),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over `axis`, keeping it with extent one.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("rank > {axis}"), &shape));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&out_shape);
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out.data_mut()[o * inner + i] += src[(o * len + k) * inner + i];
                }
            }
        }
        self.record(
            "sum_axis",
            out,
            &[x],
            Box::new(move |a| {
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx.data_mut()[(o * len + k) * inner + i] = a.grad.data()[o * inner + i];
                        }
                    }
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let value = self.value(x).clone().reshape(shape)?;
        self.record(
            "reshape",
            value,
            &[x],
            Box::new(move |a| Ok(vec![Some(a.grad.clone().reshape(&in_shape)?)])),
        )
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat", "rank >= 2", &first));
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[0] != outer || s[2..] != first[2..] {
                return Err(Error::shape("concat", format!("compatible with {first:?}"), s));
            }
            chans.push(s[1]);
        }
        let total: usize = chans.iter().sum();
        let mut shape = first.clone();
        shape[1] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(x).data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.record(
            "concat",
            value,
            xs,
            Box::new(move |a| {
                let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(outer * c * inner)).collect();
                let gd = a.grad.data();
                let mut off = 0;
                for _ in 0..outer {
                    for (gv, &c) in grads.iter_mut().zip(&chans) {
                        gv.extend_from_slice(&gd[off..off + c * inner]);
                        off += c * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&a.inputs)
                    .map(|(g, x)| Tensor::new(x.shape(), g).map(Some))
                    .collect()
            }),
        )
    }

    /// Channel slice `[start, start+len)` along axis 1.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || start + len > shape[1] {
            return Err(Error::shape(
                "narrow",
                format!("at least {} channels", start + len),
                &shape,
            ));
        }
        let (outer, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * c + start) * inner..(o * c + start + len) * inner]);
        }
        let value = Tensor::new(&out_shape, out)?;
        self.record(
            "narrow",
            value,
            &[x],
            Box::new(move |a| {
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    gx.data_mut()[(o * c + start) * inner..(o * c + start + len) * inner]
                        .copy_from_slice(&a.grad.data()[o * len * inner..(o + 1) * len * inner]);
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let value = ops::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        self.record(
            "conv2d",
            value,
            &parents,
            Box::new(move |a| {
                let need_b = a.needs.get(2).copied().unwrap_or(false);
                let g = ops::conv2d_backward(
                    a.inputs[0],
                    a.inputs[1],
                    a.grad,
                    spec,
                    [a.needs[0], a.needs[1], need_b],
                )?;
                let mut out = vec![g.input, g.kernel];
                if a.inputs.len() == 3 {
                    out.push(g.bias);
                }
                Ok(out)
            }),
        )
    }

    /// Depthwise 3x3-style convolution with "same" padding.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let c = self.shape(x).get(1).copied().unwrap_or(0);
        let k = self.shape(kernel).get(2).copied().unwrap_or(1);
        self.conv2d(x, kernel, bias, Conv2dSpec::depthwise(k, c))
    }

    /// 1x1 convolution with a `[Cout, Cin]` weight matrix.
    pub fn pointwise(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        let kernel = if ws.len() == 2 {
            self.reshape(weight, &[ws[0], ws[1], 1, 1])?
        } else {
            weight
        };
        self.conv2d(x, kernel, bias, Conv2dSpec::same(1))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax_last(self.value(x))?;
        self.record(
            "softmax",
            value,
            &[x],
            Box::new(|a| Ok(vec![Some(ops::softmax_last_backward(a.output, a.grad))])),
        )
    }

    /// Divides each last-axis row by `max(||row||_2, eps)`.
    pub fn l2_normalize_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::shape("l2_normalize", "rank >= 1", &shape))?;
        let eps_t = T::lit(eps);
        let mut value = self.value(x).clone();
        let mut norms = Vec::new();
        for row in value.data_mut().chunks_mut(last) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            let d = n.max(eps_t);
            for v in row.iter_mut() {
                *v /= d;
            }
        }
        self.record(
            "l2_normalize",
            value,
            &[x],
            Box::new(move |a| {
                let mut gx = a.grad.clone();
                for ((gr, yr), &n) in gx
                    .data_mut()
                    .chunks_mut(last)
                    .zip(a.output.data().chunks(last))
                    .zip(&norms)
                {
                    if n <= eps_t {
                        for g in gr.iter_mut() {
                            *g /= eps_t;
                        }
                        continue;
                    }
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for (g, &y) in gr.iter_mut().zip(yr) {
                        *g = (*g - y * dot) / n;
                    }
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[bs, m, k], &[bs2, k2, n]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(Error::shape("bmm", "two rank-3 tensors", &[sa, sb].concat()));
        };
        if bs != bs2 || k != k2 {
            return Err(Error::shape("bmm", format!("[{bs}, {k}, N]"), &sb));
        }
        let value = bmm_kernel(self.value(a), self.value(b), bs, m, k, n, false, false);
        self.record(
            "bmm",
            value,
            &[a, b],
            Box::new(move |args| {
                // dA = G Bᵀ, dB = Aᵀ G
                let ga = args.needs[0]
                    .then(|| bmm_kernel(args.grad, args.inputs[1], bs, m, n, k, false, true));
                let gb = args.needs[1]
                    .then(|| bmm_kernel(args.inputs[0], args.grad, bs, k, m, n, true, false));
                Ok(vec![ga, gb])
            }),
        )
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[b, r, c] = shape.as_slice() else {
            return Err(Error::shape("transpose", "rank-3 tensor", &shape));
        };
        let value = transpose_kernel(self.value(x), b, r, c);
        self.record(
            "transpose",
            value,
            &[x],
            Box::new(move |a| Ok(vec![Some(transpose_kernel(a.grad, b, c, r))])),
        )
    }

    /// Layer norm over axis 1 (channels) with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, cache) = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.record(
            "layer_norm",
            value,
            &[x, gamma, beta],
            Box::new(move |a| {
                let (gx, gg, gb) = ops::layer_norm_backward(&cache, a.inputs[1], a.grad);
                Ok(vec![Some(gx), Some(gg), Some(gb)])
            }),
        )
    }

    /// Batch norm over axis 1. In train mode the updated running stats are
    /// queued under `"{name}.running_mean"` / `"{name}.running_var"`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        stats: &RunningStats<T>,
        mode: NormMode,
        name: &str,
    ) -> Result<Var> {
        let out = ops::batch_norm(self.value(x), self.value(scale), self.value(shift), stats, mode)?;
        if let Some(upd) = out.updated {
            if let (Some(m), Some(v)) = (upd.mean, upd.var) {
                self.push_buffer_update(format!("{name}.running_mean"), m);
                self.push_buffer_update(format!("{name}.running_var"), v);
            }
        }
        let (xhat, inv_std) = (out.xhat, out.inv_std);
        self.record(
            "batch_norm",
            out.output,
            &[x, scale, shift],
            Box::new(move |a| {
                let (gx, gs, gb) = ops::batch_norm_backward(&xhat, &inv_std, a.inputs[1], a.grad, mode);
                Ok(vec![Some(gx), Some(gs), Some(gb)])
            }),
        )
    }

    /// Pads H and W by `pad` on each side, repeating the border pixels.
    pub fn replicate_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("replicate_pad")?;
        if h == 0 || w == 0 {
            return Err(Error::shape("replicate_pad", "non-empty spatial extent", self.shape(x)));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        // Source index of every padded pixel.
        let src_of = move |i: usize| {
            let (img, r, col) = (i / (ph * pw), (i / pw) % ph, i % pw);
            let sr = r.saturating_sub(pad).min(h - 1);
            let sc = col.saturating_sub(pad).min(w - 1);
            (img * h + sr) * w + sc
        };
        let src = self.value(x).data();
        let value = Tensor::new(&[n, c, ph, pw], (0..n * c * ph * pw).map(|i| src[src_of(i)]).collect())?;
        let in_shape = [n, c, h, w];
        self.record(
            "replicate_pad",
            value,
            &[x],
            Box::new(move |a| {
                let mut gx = Tensor::zeros(&in_shape);
                for (i, &gv) in a.grad.data().iter().enumerate() {
                    gx.data_mut()[src_of(i)] += gv;
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    /// Forward difference along axis `axis` (2 = rows, 3 = columns) of an
    /// NCHW tensor; the last row/column is zero.
    pub fn forward_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = self.value(x).dims4("forward_diff")?;
        let step = match axis {
            2 => w,
            3 => 1,
            _ => return Err(Error::invalid("forward_diff", format!("axis {axis} not in {{2, 3}}"))),
        };
        let last = move |i: usize| {
            let (r, col) = ((i / w) % h, i % w);
            if axis == 2 {
                r + 1 == h
            } else {
                col + 1 == w
            }
        };
        let src = self.value(x).data();
        let total = n * c * h * w;
        let value = Tensor::new(
            &shape,
            (0..total)
                .map(|i| if last(i) { T::zero() } else { src[i + step] - src[i] })
                .collect(),
        )?;
        self.record(
            "forward_diff",
            value,
            &[x],
            Box::new(move |a| {
                let mut gx = Tensor::zeros(&shape);
                let gd = a.grad.data();
                for i in 0..total {
                    if !last(i) {
                        gx.data_mut()[i + step] += gd[i];
                        gx.data_mut()[i] -= gd[i];
                    }
                }
                Ok(vec![Some(gx)])
            }),
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn bmm_kernel<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    bs: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Tensor<T> {
    // a is [bs, m, k] (or [bs, k, m] if trans_a); b is [bs, k, n] (or [bs, n, k])
    let mut out = Tensor::zeros(&[bs, m, n]);
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..bs {
        let ao = bi * m * k;
        let bo = bi * k * n;
        let oo = bi * m * n;
        for i in 0..m {
            for p in 0..k {
                let av = if trans_a { ad[ao + p * m + i] } else { ad[ao + i * k + p] };
                let row = &mut out.data_mut()[oo + i * n..oo + (i + 1) * n];
                if trans_b {
                    for (j, o) in row.iter_mut().enumerate() {
                        *o += av * bd[bo + j * k + p];
                    }
                } else {
                    for (o, &bv) in row.iter_mut().zip(&bd[bo + p * n..bo + (p + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
    out
}

fn transpose_kernel<T: Real>(x: &Tensor<T>, b: usize, r: usize, c: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[b, c, r]);
    let src = x.data();
    for bi in 0..b {
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[(bi * c + j) * r + i] = src[(bi * r + i) * c + j];
            }
        }
    }
    out
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences.
///
/// `f` builds the scalar from the variable registered at `point`. Returns
/// `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let x = g.constant(p.clone());
        let y = f(&mut g, x)?;
        let v = g.value(y).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        Ok(v)
    };
    let mut g = Graph::new();
    let x = g.param("x", point.clone())?;
    let y = f(&mut g, x)?;
    let analytic = g
        .backward(y)?
        .shift_remove("x")
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
