//! Reverse-mode autodiff over 2-D arrays. Backward passes record their own
//! operations on the same tape, so gradients can be differentiated again.

use ndarray::{Array2, Axis};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    /// `n×m` plus a `1×m` row on every row.
    AddRow(Var, Var),
    SumRows(Var),
    BroadcastRows(Var, usize),
    LeakyRelu(Var),
    /// Elementwise product with a constant of the same shape.
    MulConst(Var, Array2<f64>),
    Mul(Var, Var),
    SumAll(Var),
    BroadcastScalar(Var, (usize, usize)),
    Scale(Var, f64),
    Add(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::LeakyRelu(a)
            | Op::MulConst(a, _)
            | Op::SumAll(a)
            | Op::BroadcastScalar(a, _)
            | Op::Scale(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

fn leaky_slope(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn eval<'a>(op: &Op, value: impl Fn(Var) -> &'a Array2<f64>) -> Array2<f64> {
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => value(*a).dot(value(*b)),
        Op::Transpose(a) => value(*a).t().to_owned(),
        Op::AddRow(a, r) => value(*a) + value(*r),
        Op::SumRows(a) => value(*a).sum_axis(Axis(0)).insert_axis(Axis(0)),
        Op::BroadcastRows(a, n) => {
            let r = value(*a);
            r.broadcast((*n, r.ncols())).expect("row vector").to_owned()
        }
        Op::LeakyRelu(a) => value(*a).mapv(|v| v * leaky_slope(v)),
        Op::MulConst(a, c) => value(*a) * c,
        Op::Mul(a, b) => value(*a) * value(*b),
        Op::SumAll(a) => Array2::from_elem((1, 1), value(*a).sum()),
        Op::BroadcastScalar(a, shape) => Array2::from_elem(*shape, value(*a)[[0, 0]]),
        Op::Scale(a, s) => value(*a) * *s,
        Op::Add(a, b) => value(*a) + value(*b),
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op) -> Var {
        let value = eval(&op, |v| &self.nodes[v.0].value);
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows(), "matmul shapes");
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose(a))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row needs a row vector");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols(), "add_row shapes");
        self.push(Op::AddRow(a, row))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.push(Op::SumRows(a))
    }

    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "broadcast_rows needs a row vector");
        self.push(Op::BroadcastRows(row, n))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.push(Op::LeakyRelu(a))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.value(a).dim(), c.dim(), "mul_const shapes");
        self.push(Op::MulConst(a, c))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shapes");
        self.push(Op::Mul(a, b))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.push(Op::SumAll(a))
    }

    pub fn broadcast_scalar(&mut self, s: Var, shape: (usize, usize)) -> Var {
        assert_eq!(self.value(s).dim(), (1, 1), "broadcast_scalar needs a scalar");
        self.push(Op::BroadcastScalar(s, shape))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::Scale(a, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shapes");
        self.push(Op::Add(a, b))
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn squared_norm(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }

    fn accumulate(&mut self, grads: &mut [Option<Var>], reach: &[bool], target: Var, g: Var) {
        if !reach[target.0] {
            return;
        }
        grads[target.0] = Some(match grads[target.0] {
            Some(prev) => self.add(prev, g),
            None => g,
        });
    }

    /// Vector-Jacobian product `Σ_k seed_kᵀ ∂out_k/∂wrt` for each `wrt`,
    /// recorded on the tape. `None` means no dependence.
    pub fn grad(&mut self, seeds: &[(Var, Array2<f64>)], wrt: &[Var]) -> Vec<Option<Var>> {
        let n = self.nodes.len();
        // Nodes that depend on some `wrt`; gradients flow only through them.
        let mut reach = vec![false; n];
        for v in wrt {
            reach[v.0] = self.nodes[v.0].requires_grad;
        }
        for i in 0..n {
            if !reach[i] && self.nodes[i].requires_grad {
                reach[i] = self.nodes[i].op.inputs().iter().any(|v| reach[v.0]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n];
        for (out, seed) in seeds {
            assert_eq!(self.value(*out).dim(), seed.dim(), "seed shape");
            let s = self.constant(seed.clone());
            self.accumulate(&mut grads, &reach, *out, s);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !reach[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if reach[a.0] {
                        let bt = self.transpose(b);
                        let ga = self.matmul(g, bt);
                        self.accumulate(&mut grads, &reach, a, ga);
                    }
                    if reach[b.0] {
                        let at = self.transpose(a);
                        let gb = self.matmul(at, g);
                        self.accumulate(&mut grads, &reach, b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    self.accumulate(&mut grads, &reach, a, ga);
                }
                Op::AddRow(a, r) => {
                    self.accumulate(&mut grads, &reach, a, g);
                    if reach[r.0] {
                        let gr = self.sum_rows(g);
                        self.accumulate(&mut grads, &reach, r, gr);
                    }
                }
                Op::SumRows(a) => {
                    let rows = self.value(a).nrows();
                    let ga = self.broadcast_rows(g, rows);
                    self.accumulate(&mut grads, &reach, a, ga);
                }
                Op::BroadcastRows(a, _) => {
                    let ga = self.sum_rows(g);
                    self.accumulate(&mut grads, &reach, a, ga);
                }
                Op::LeakyRelu(a) => {
                    // The slope pattern is piecewise constant in the input.
                    let slope = self.value(a).mapv(leaky_slope);
                    let ga = self.mul_const(g, slope);
                    self.accumulate(&mut grads, &reach, a, ga);
                }
                Op::MulConst(a, c) => {
                    let ga = self.mul_const(g, c);
                    self.accumulate(&mut grads, &reach, a, ga);
                }
                Op::Mul(a, b) => {
                    if reach[a.0] {
                        let ga = self.mul(g, b);
                        self.accumulate(&mut grads, &reach, a, ga);
                    }
                    if reach[b.0] {
                        let gb = self.mul(g, a);
                        self.accumulate(&mut grads, &reach, b, gb);
                    }
                }
                Op::SumAll(a) => {
                    let shape = self.value(a).dim();
                    let ga = self.broadcast_scalar(g, shape);
                    self.accumulate(&mut grads, &reach, a, ga);
                }
                Op::BroadcastScalar(a, _) => {
                    let ga = self.sum_all(g);
                    self.accumulate(&mut grads, &reach, a, ga);
                }
                Op::Scale(a, s) => {
                    let ga = self.scale(g, s);
                    self.accumulate(&mut grads, &reach, a, ga);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, &reach, a, g);
                    self.accumulate(&mut grads, &reach, b, g);
                }
            }
        }
        wrt.iter().map(|v| grads.get(v.0).copied().flatten()).collect()
    }

    /// Recomputes every node from the leaf values.
    pub fn replay(&self) -> Vec<Array2<f64>> {
        let mut values: Vec<Array2<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => eval(op, |v| &values[v.0]),
            };
            values.push(v);
        }
        values
    }
}
