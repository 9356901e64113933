use super::conv::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    /// `a` may be single-channel and broadcast over `b`'s channels.
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<T>>,
}

/// Dynamically recorded computation graph with reverse-mode differentiation.
///
/// Every operation appends a node; [`Tape::backward`] walks them in reverse.
/// Gradients accumulate on leaves across repeated `backward` calls until
/// [`Tape::zero_grad`].
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.grad = None;
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a copy of `t` as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let copy = Tensor::from_parts(t.shape.clone(), t.data.clone());
        self.push(copy, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), self.shape(bias), stride, padding)?;
        let out = conv::forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::from_parts(geom.output_shape().to_vec(), out);
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Parameter("upsample factor must be at least 1".into()));
        }
        let (n, c, h, w) = self.value(input).dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(input).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (plane_out, plane_in) in out.chunks_mut((oh * ow).max(1)).zip(src.chunks((h * w).max(1))) {
            for y in 0..oh {
                let row_in = &plane_in[(y / factor) * w..(y / factor + 1) * w];
                for (x, v) in plane_out[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *v = row_in[x / factor];
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::Upsample { input, factor },
            rg,
        ))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).data().iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid(input), rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self
            .value(input)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(Tensor::from_parts(shape, out), Op::Relu(input), rg)
    }

    /// Hadamard product. `a` may be single-channel against a multi-channel
    /// `b` with equal batch and spatial extents; it is then broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let broadcast = if sa == sb {
            false
        } else if sa.len() == 4 && sb.len() == 4 && sa[1] == 1 && sa[0] == sb[0] && sa[2..] == sb[2..] {
            true
        } else {
            return Err(Error::dim(format!(
                "mul: shapes {sa:?} and {sb:?} are neither equal nor mask-broadcastable"
            )));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<T> = if broadcast {
            let (c, plane) = (sb[1], sb[2] * sb[3]);
            bv.iter()
                .enumerate()
                .map(|(i, &y)| {
                    let ni = i / (c * plane);
                    av[ni * plane + i % plane] * y
                })
                .collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| x * y).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(sb, out), Op::Mul { a, b, broadcast }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if na != nb {
            return Err(Error::dim(format!("concat batch axis: {na} vs {nb}")));
        }
        if (ha, wa) != (hb, wb) {
            return Err(Error::dim(format!(
                "concat spatial axes: {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let plane = ha * wa;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for ni in 0..na {
            out.extend_from_slice(&av[ni * ca * plane..(ni + 1) * ca * plane]);
            out.extend_from_slice(&bv[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![na, ca + cb, ha, wa], out),
            Op::Concat(a, b),
            rg,
        ))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let k = T::from_f64(factor);
        let out = self.value(input).data().iter().map(|&x| x * k).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(Tensor::from_parts(shape, out), Op::Scale(input, k), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let out = self
            .value(input)
            .data()
            .iter()
            .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(Tensor::from_parts(shape, out), Op::Clamp { input, lo, hi }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: T = self.value(input).data().iter().copied().sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        if n == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let s: T = self.value(input).data().iter().copied().sum();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(s / T::from_f64(n as f64)), Op::Mean(input), rg))
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(up) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&up).for_each(|(a, &b)| *a += b),
                        None => node.grad = Some(up),
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let g = conv::backward(
                        self.value(input).data(),
                        self.value(weight).data(),
                        &up,
                        &geom,
                        need_input,
                    );
                    if let Some(dx) = g.input {
                        self.send(&mut grads, input, dx);
                    }
                    self.send(&mut grads, weight, g.weight);
                    self.send(&mut grads, bias, g.bias);
                }
                Op::Upsample { input, factor } => {
                    let (n, c, h, w) = self.value(input).dims4()?;
                    let (oh, ow) = (h * factor, w * factor);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for (plane_in, plane_out) in dx.chunks_mut((h * w).max(1)).zip(up.chunks((oh * ow).max(1))) {
                        for y in 0..oh {
                            for x in 0..ow {
                                plane_in[(y / factor) * w + x / factor] += plane_out[y * ow + x];
                            }
                        }
                    }
                    self.send(&mut grads, input, dx);
                }
                Op::Sigmoid(input) => {
                    let s = self.nodes[i].value.data();
                    let dx = s.iter().zip(&up).map(|(&s, &u)| s * (T::one() - s) * u).collect();
                    self.send(&mut grads, input, dx);
                }
                Op::Relu(input) => {
                    let x = self.value(input).data();
                    let dx = x
                        .iter()
                        .zip(&up)
                        .map(|(&x, &u)| if x > T::zero() { u } else { T::zero() })
                        .collect();
                    self.send(&mut grads, input, dx);
                }
                Op::Mul { a, b, broadcast } => {
                    let av = self.value(a).data();
                    let bv = self.value(b).data();
                    if broadcast {
                        let sb = self.shape(b);
                        let (c, plane) = (sb[1], sb[2] * sb[3]);
                        let mut da = vec![T::zero(); av.len()];
                        let mut db = vec![T::zero(); bv.len()];
                        for (idx, &u) in up.iter().enumerate() {
                            let ai = (idx / (c * plane)) * plane + idx % plane;
                            da[ai] += bv[idx] * u;
                            db[idx] = av[ai] * u;
                        }
                        self.send(&mut grads, a, da);
                        self.send(&mut grads, b, db);
                    } else {
                        let da = bv.iter().zip(&up).map(|(&y, &u)| y * u).collect();
                        let db = av.iter().zip(&up).map(|(&x, &u)| x * u).collect();
                        self.send(&mut grads, a, da);
                        self.send(&mut grads, b, db);
                    }
                }
                Op::Concat(a, b) => {
                    let (n, ca, h, w) = self.value(a).dims4()?;
                    let cb = self.shape(b)[1];
                    let plane = h * w;
                    let mut da = Vec::with_capacity(n * ca * plane);
                    let mut db = Vec::with_capacity(n * cb * plane);
                    for ni in 0..n {
                        let base = ni * (ca + cb) * plane;
                        da.extend_from_slice(&up[base..base + ca * plane]);
                        db.extend_from_slice(&up[base + ca * plane..base + (ca + cb) * plane]);
                    }
                    self.send(&mut grads, a, da);
                    self.send(&mut grads, b, db);
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, a, up.clone());
                    self.send(&mut grads, b, up);
                }
                Op::Sub(a, b) => {
                    let neg = up.iter().map(|&u| -u).collect();
                    self.send(&mut grads, a, up);
                    self.send(&mut grads, b, neg);
                }
                Op::Scale(input, k) => {
                    let dx = up.iter().map(|&u| u * k).collect();
                    self.send(&mut grads, input, dx);
                }
                Op::Clamp { input, lo, hi } => {
                    let x = self.value(input).data();
                    let dx = x
                        .iter()
                        .zip(&up)
                        .map(|(&x, &u)| if x < lo || x > hi { T::zero() } else { u })
                        .collect();
                    self.send(&mut grads, input, dx);
                }
                Op::Sum(input) => {
                    let n = self.value(input).numel();
                    self.send(&mut grads, input, vec![up[0]; n]);
                }
                Op::Mean(input) => {
                    let n = self.value(input).numel();
                    let g = up[0] / T::from_f64(n as f64);
                    self.send(&mut grads, input, vec![g; n]);
                }
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], to: Var, g: Vec<T>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
