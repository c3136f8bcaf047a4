//! Reverse-mode differentiation over dense 2-D `f64` matrices.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! record in reverse and returns gradients for every node that influences the
//! output. Vectors are `1 x d` matrices.

use ndarray::{concatenate, s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `x + row`, row broadcast over x's rows
    AddRow(Var, Var),
    /// `x + c` with a constant matrix
    AddConst(Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    /// elementwise product with a constant mask
    Mask(Var, Array2<f64>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where the output does not depend on a node.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    y
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x d row");
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn add_const(&mut self, x: Var, c: &Array2<f64>) -> Var {
        let v = self.value(x) + c;
        self.push(v, Op::AddConst(x))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x) * k;
        self.push(v, Op::Scale(x, k))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalization with learned `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &(&xhat * self.value(gain)) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(x, start))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x))
    }

    pub fn mask(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let v = self.value(x) * &mask;
        self.push(v, Op::Mask(x, mask))
    }

    /// Back-propagates `seed` (the gradient of some scalar w.r.t. `out`).
    pub fn backward(&self, out: Var, seed: Array2<f64>) -> Gradients {
        assert_eq!(seed.dim(), self.value(out).dim(), "seed shape");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[x.0], g);
                }
                Op::AddConst(x) => accumulate(&mut grads[x.0], g),
                Op::Scale(x, k) => accumulate(&mut grads[x.0], g * *k),
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |v, &yv| *v -= dot * yv);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * self.value(*gain);
                    let d = dxhat.ncols() as f64;
                    let mut gx = dxhat.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let m1 = dr.sum() / d;
                        let m2 = dr.dot(&xr) / d;
                        let is = inv_std[r];
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = is * (dr[j] - m1 - xr[j] * m2);
                        }
                    }
                    accumulate(&mut grads[bias.0], gb);
                    accumulate(&mut grads[gain.0], gg);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |gv, &xv| *gv *= gelu_grad(xv));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        accumulate(&mut grads[p.0], g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        accumulate(&mut grads[p.0], g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    let len = g.ncols();
                    gx.slice_mut(s![.., *start..*start + len]).assign(&g);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MeanRows(x) => {
                    let n = self.value(*x).nrows();
                    let gx = g
                        .broadcast(self.value(*x).dim())
                        .expect("1 x d broadcasts")
                        .mapv(|v| v / n as f64);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Mask(x, mask) => accumulate(&mut grads[x.0], g * mask),
            }
        }
        Gradients(grads)
    }
}
