//! Reverse-mode differentiation over a linear tape of recorded ops.
//!
//! Every op appends a node holding its forward value; [`Tape::gradients`] walks the
//! nodes backwards once, so the tape is single-use per forward pass.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulAdd {
        a: Var,
        b: Var,
        c: Var,
    },
    Sum(Var),
    Concat(Vec<Var>),
    ChwToRows(Var),
    /// Scalar-valued function with caller-supplied partial derivatives.
    ScalarFn {
        inputs: Vec<Var>,
        partials: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `∂loss/∂var`, or `None` when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf. Its gradient is still reported by [`Tape::gradients`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Input)
    }

    /// Leaf bound to a stored parameter; backward accumulates into it if trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut t = store.get(id).tensor.clone();
        t.clear_grad();
        self.push(t, Op::Param(id))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(format!(
                "conv2d expects input [C,H,W] and weight [O,C,k,k], got input {xs:?} and weight {ws:?}"
            )));
        }
        if xs[0] != ws[1] {
            return Err(Error::shape(format!(
                "conv2d input channels {} (input {xs:?}) differ from weight C_in {} (weight {ws:?})",
                xs[0], ws[1]
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(format!(
                "conv2d bias {bs:?} does not match weight {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let k = ws[2];
        if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d kernel {k} larger than padded input {xs:?} (pad {pad})"
            )));
        }
        let geom = ConvGeometry {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ws[0],
            k,
            stride,
            pad,
        };
        let (out, cols) = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_parts(vec![geom.c_out, geom.out_h(), geom.out_w()], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, Op::Relu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let data = softmax_along(t.shape(), t.data(), axis);
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Elementwise `a * b + c`.
    pub fn mul_add(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        self.same_shape(a, b, "mul_add")?;
        self.same_shape(a, c, "mul_add")?;
        let (ta, tb, tc) = (self.value(a), self.value(b), self.value(c));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .zip(tc.data())
            .map(|((x, y), z)| x * y + z)
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::MulAdd { a, b, c }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Concatenate along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat: trailing shape {:?} differs from {:?}",
                    &s[1..],
                    tail
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec())))
    }

    /// Rearrange a `[C, H, W]` head map into `[H*W*(C/width), width]` rows, ordered by
    /// cell (row-major) and then by channel group.
    pub fn chw_to_rows(&mut self, x: Var, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || width == 0 || !s[0].is_multiple_of(width) {
            return Err(Error::shape(format!(
                "chw_to_rows: cannot split {s:?} into rows of {width}"
            )));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let src = self.value(x).data();
        let mut data = vec![0.0; c * hw];
        for ch in 0..c {
            for cell in 0..hw {
                data[cell * c + ch] = src[ch * hw + cell];
            }
        }
        let value = Tensor::from_parts(vec![hw * c / width, width], data);
        Ok(self.push(value, Op::ChwToRows(x)))
    }

    /// Record a scalar function of `inputs` whose partial derivatives the caller has
    /// already computed.
    pub fn scalar_fn(
        &mut self,
        inputs: &[Var],
        value: f64,
        partials: Vec<Vec<f64>>,
    ) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::invalid("scalar_fn: one partial per input required"));
        }
        for (&v, p) in inputs.iter().zip(&partials) {
            if self.value(v).numel() != p.len() {
                return Err(Error::shape(format!(
                    "scalar_fn: partial of length {} for input of shape {:?}",
                    p.len(),
                    self.shape(v)
                )));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                partials,
            },
        ))
    }

    /// Backward sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(up) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input | Op::Param(_) => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let g = conv2d_backward(
                        geom,
                        self.value(*input).data(),
                        cols,
                        self.value(*weight).data(),
                        &up,
                        true,
                    );
                    if let Some(dx) = g.input {
                        add_into(&mut grads[input.0], &dx);
                    }
                    add_into(&mut grads[weight.0], &g.weight);
                    add_into(&mut grads[bias.0], &g.bias);
                }
                Op::Relu(x) => {
                    let d: Vec<f64> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&up)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], &d);
                }
                Op::Softmax { x, axis } => {
                    let y = &self.nodes[i].value;
                    let d = softmax_backward(y.shape(), y.data(), &up, *axis);
                    add_into(&mut grads[x.0], &d);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], &up);
                    add_into(&mut grads[b.0], &up);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = self
                        .value(*b)
                        .data()
                        .iter()
                        .zip(&up)
                        .map(|(x, g)| x * g)
                        .collect();
                    let db: Vec<f64> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(&up)
                        .map(|(x, g)| x * g)
                        .collect();
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::MulAdd { a, b, c } => {
                    let da: Vec<f64> = self
                        .value(*b)
                        .data()
                        .iter()
                        .zip(&up)
                        .map(|(x, g)| x * g)
                        .collect();
                    let db: Vec<f64> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(&up)
                        .map(|(x, g)| x * g)
                        .collect();
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                    add_into(&mut grads[c.0], &up);
                }
                Op::Sum(x) => {
                    let d = vec![up[0]; self.value(*x).numel()];
                    add_into(&mut grads[x.0], &d);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).numel();
                        add_into(&mut grads[p.0], &up[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::ChwToRows(x) => {
                    let s = self.shape(*x);
                    let (c, hw) = (s[0], s[1] * s[2]);
                    let mut d = vec![0.0; c * hw];
                    for ch in 0..c {
                        for cell in 0..hw {
                            d[ch * hw + cell] = up[cell * c + ch];
                        }
                    }
                    add_into(&mut grads[x.0], &d);
                }
                Op::ScalarFn { inputs, partials } => {
                    for (v, p) in inputs.iter().zip(partials) {
                        let d: Vec<f64> = p.iter().map(|x| x * up[0]).collect();
                        add_into(&mut grads[v.0], &d);
                    }
                }
            }
            grads[i] = Some(up);
        }
        Ok(Gradients { grads })
    }

    /// Backpropagate `loss` and accumulate `∂loss/∂p` into every trainable parameter
    /// reachable from it. Frozen parameters are left untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    let p = store.get_mut(id);
                    if p.trainable {
                        p.tensor.accumulate_grad(g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Split a shape around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis` of a row-major array.
pub fn softmax_along(shape: &[usize], data: &[f64], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| data[at(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..len {
                let e = (data[at(j)] - max).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] /= z;
            }
        }
    }
    out
}

fn softmax_backward(shape: &[usize], y: &[f64], up: &[f64], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut d = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| y[at(j)] * up[at(j)]).sum();
            for j in 0..len {
                d[at(j)] = y[at(j)] * (up[at(j)] - dot);
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 3, 3], 1.0));
        let w = tape.input(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.input(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scalar_affine_conv() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 1, 1], &[2.0]));
        let w = tape.input(t(&[1, 1, 1, 1], &[3.0]));
        let b = tape.input(t(&[1], &[0.5]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[6.5]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 4, 4]));
        let w = tape.input(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.input(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(
            err.contains("[2, 4, 4]") && err.contains("[1, 3, 3, 3]"),
            "{err}"
        );
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        let l = tape.sum(y);
        let g = tape.gradients(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_stable_and_symmetric() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let z = tape.input(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(z, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        assert!(tape.softmax(z, 1).is_err());
    }

    #[test]
    fn sum_of_product_grad_is_other_factor() {
        let mut store = ParamStore::new();
        let wid = store.add("w", t(&[3], &[0.5, -1.0, 2.0]), true).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, wid);
        let x = tape.input(t(&[3], &[4.0, 5.0, 6.0]));
        let p = tape.mul(w, x).unwrap();
        let l = tape.sum(p);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(wid).tensor.grad().unwrap(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::new();
        let wid = store.add("w", t(&[2], &[1.0, 1.0]), false).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, wid);
        let l = tape.sum(w);
        tape.backward(l, &mut store).unwrap();
        assert!(store.get(wid).tensor.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        let y = tape.relu(x);
        assert!(tape.gradients(y).is_err());
    }

    #[test]
    fn chw_to_rows_layout() {
        // 4 channels (2 anchors x width 2) on a 1x2 grid
        let mut tape = Tape::new();
        let x = tape.input(t(&[4, 1, 2], &[0., 1., 10., 11., 20., 21., 30., 31.]));
        let r = tape.chw_to_rows(x, 2).unwrap();
        assert_eq!(tape.shape(r), &[4, 2]);
        assert_eq!(
            tape.value(r).data(),
            &[0., 10., 20., 30., 1., 11., 21., 31.]
        );
    }
}
