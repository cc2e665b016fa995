//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! sweeps the node list once in reverse, which is a valid reverse topological
//! order because inputs always precede their consumers.

use std::collections::HashMap;

use super::tensor::gemm;
use super::{Gradients, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    MulScalarVar(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    Sum(usize),
    SumCols(usize),
    SumRows(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// The tape. Build a loss with the op methods, then call [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(usize, String)>,
    by_name: HashMap<String, usize>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Constant copy of `v`, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Registers the parameter `name` of `set` on the tape. Trainable entries
    /// become gradient targets; frozen entries are plain constants. Repeated
    /// registrations return the same node so reuse across time steps
    /// accumulates gradient.
    ///
    /// Panics if the name is absent, which is a wiring bug.
    pub fn param(&mut self, set: &ParameterSet, name: &str) -> Var {
        if let Some(&i) = self.by_name.get(name) {
            return Var(i);
        }
        let p = set
            .entry(name)
            .unwrap_or_else(|| panic!("parameter {name} not found"));
        let v = self.push(Op::Leaf, p.value.clone());
        if p.trainable {
            self.params.push((v.0, name.to_string()));
        }
        self.by_name.insert(name.to_string(), v.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a.0, b.0), out)
    }

    /// `a + bias`, broadcasting a `1 x c` bias over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows(), 1, "add_row bias must be a row");
        assert_eq!(av.cols(), bv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        let c = av.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        self.push(Op::AddRow(a.0, bias.0), out)
    }

    /// `a ⊙ col`, broadcasting an `r x 1` column across the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.cols(), 1, "mul_col expects a column");
        assert_eq!(av.rows(), cv.rows(), "mul_col row mismatch");
        let c = av.cols();
        let mut out = av.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= cv.data()[i / c];
        }
        self.push(Op::MulCol(a.0, col.0), out)
    }

    /// `a · s` for a `1 x 1` node `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        self.push(Op::MulScalarVar(a.0, s.0), out)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self.value(a).zip_map(self.value(b), f);
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::min, Op::Minimum(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a.0, c), out)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a.0), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a.0), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a.0), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a.0), out)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(Op::Softplus(a.0), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a.0), out)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Ln(a.0), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Square(a.0), out)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a.0), out)
    }

    /// `max(a, floor)`; entries held at the floor pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor));
        self.push(Op::ClampMin(a.0, floor), out)
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a.0), out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum, `r x c → r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows())
            .map(|r| av.row_slice(r).iter().sum())
            .collect();
        let out = Tensor::new(av.rows(), 1, data);
        self.push(Op::SumCols(a.0), out)
    }

    /// Per-column sum, `r x c → 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(av.row_slice(r)) {
                *o += v;
            }
        }
        self.push(Op::SumRows(a.0), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat_cols(&tensors);
        self.push(Op::ConcatCols(parts.iter().map(|v| v.0).collect()), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_cols(start, end);
        self.push(Op::SliceCols(a.0, start, end), out)
    }

    /// Reverse sweep from a scalar `loss`. The returned map holds exactly the
    /// trainable parameters that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let ga = acc_slot(&mut grads, *a, m, k);
                    // dA = G · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        (g.data(), n as isize, 1),
                        (bv.data(), 1, n as isize),
                        ga.data_mut(),
                        true,
                    );
                    let gb = acc_slot(&mut grads, *b, k, n);
                    // dB = Aᵀ · G
                    gemm(
                        k,
                        m,
                        n,
                        (av.data(), 1, k as isize),
                        (g.data(), n as isize, 1),
                        gb.data_mut(),
                        true,
                    );
                }
                Op::AddRow(a, bias) => {
                    let c = g.cols();
                    let gb = acc_slot(&mut grads, *bias, 1, c);
                    for (j, v) in g.data().iter().enumerate() {
                        gb.data_mut()[j % c] += v;
                    }
                    accumulate(&mut grads, *a, &g);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (&self.nodes[*a].value, &self.nodes[*col].value);
                    let c = g.cols();
                    let ga = acc_slot(&mut grads, *a, g.rows(), c);
                    for (j, v) in g.data().iter().enumerate() {
                        ga.data_mut()[j] += v * cv.data()[j / c];
                    }
                    let gc = acc_slot(&mut grads, *col, g.rows(), 1);
                    for (j, v) in g.data().iter().enumerate() {
                        gc.data_mut()[j / c] += v * av.data()[j];
                    }
                }
                Op::MulScalarVar(a, s) => {
                    let (av, sv) = (&self.nodes[*a].value, self.nodes[*s].value.item());
                    let dot: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads, *a, &g.map(|x| x * sv));
                    accumulate(&mut grads, *s, &Tensor::scalar(dot));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    accumulate(&mut grads, *a, &g.zip_map(bv, |x, y| x * y));
                    accumulate(&mut grads, *b, &g.zip_map(av, |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, &g.zip_map(bv, |x, y| x / y));
                    // d(a/b)/db = −(a/b)/b = −y/b
                    let gy = g.zip_map(y, |x, q| x * q);
                    accumulate(&mut grads, *b, &gy.zip_map(bv, |x, d| -x / d));
                }
                Op::Minimum(a, b) => {
                    let av = &self.nodes[*a].value;
                    let mask_a = av.zip_map(y, |x, m| if x == m { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g.zip_map(&mask_a, |x, m| x * m));
                    accumulate(&mut grads, *b, &g.zip_map(&mask_a, |x, m| x * (1.0 - m)));
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g.map(|x| x * c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, &g),
                Op::Tanh(a) => accumulate(&mut grads, *a, &g.zip_map(y, |x, t| x * (1.0 - t * t))),
                Op::Sigmoid(a) => {
                    accumulate(&mut grads, *a, &g.zip_map(y, |x, s| x * s * (1.0 - s)))
                }
                Op::Relu(a) => accumulate(
                    &mut grads,
                    *a,
                    &g.zip_map(y, |x, r| if r > 0.0 { x } else { 0.0 }),
                ),
                Op::Softplus(a) => {
                    let av = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, &g.zip_map(av, |x, u| x * sigmoid(u)))
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g.zip_map(y, |x, e| x * e)),
                Op::Ln(a) => {
                    let av = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, &g.zip_map(av, |x, u| x / u))
                }
                Op::Square(a) => {
                    let av = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, &g.zip_map(av, |x, u| 2.0 * x * u))
                }
                Op::Sqrt(a) => accumulate(&mut grads, *a, &g.zip_map(y, |x, s| 0.5 * x / s)),
                Op::ClampMin(a, floor) => {
                    let av = &self.nodes[*a].value;
                    let f = *floor;
                    accumulate(
                        &mut grads,
                        *a,
                        &g.zip_map(av, |x, u| if u > f { x } else { 0.0 }),
                    )
                }
                Op::Sum(a) => {
                    let [r, c] = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, &Tensor::filled(r, c, g.item()));
                }
                Op::SumCols(a) => {
                    let [r, c] = self.nodes[*a].value.shape();
                    let ga = acc_slot(&mut grads, *a, r, c);
                    for (j, v) in ga.data_mut().iter_mut().enumerate() {
                        *v += g.data()[j / c];
                    }
                }
                Op::SumRows(a) => {
                    let [r, c] = self.nodes[*a].value.shape();
                    let ga = acc_slot(&mut grads, *a, r, c);
                    for (j, v) in ga.data_mut().iter_mut().enumerate() {
                        *v += g.data()[j % c];
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        accumulate(&mut grads, p, &g.slice_cols(start, start + w));
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let [r, c] = self.nodes[*a].value.shape();
                    let ga = acc_slot(&mut grads, *a, r, c);
                    let w = end - start;
                    for row in 0..r {
                        for j in 0..w {
                            ga.data_mut()[row * c + start + j] += g.data()[row * w + j];
                        }
                    }
                }
            }
        }

        let mut out = Gradients::new();
        for (idx, name) in &self.params {
            if let Some(g) = grads[*idx].take() {
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

fn acc_slot(grads: &mut [Option<Tensor>], i: usize, r: usize, c: usize) -> &mut Tensor {
    grads[i].get_or_insert_with(|| Tensor::zeros(r, c))
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: &Tensor) {
    match &mut grads[i] {
        Some(t) => t
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.clone()),
    }
}
