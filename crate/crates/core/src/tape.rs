//! A small reverse-mode automatic differentiation tape over `f64` matrices.
//!
//! Every value is a 2-D array; vectors are `1×n` rows. Nodes are appended in
//! evaluation order, so a single reverse sweep from a scalar output visits
//! parents after children.

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (m×n) + row (1×n)` broadcast down the rows.
    AddRow(Var, Var),
    /// `a (m×n) ⊙ col (m×1)` broadcast across the columns.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Sum over rows, `m×n → 1×n`.
    SumRows(Var),
    /// Sum over columns, `m×n → m×1`.
    SumCols(Var),
    /// Softmax down each column.
    SoftmaxCols(Var),
    /// Log-softmax along each row.
    LogSoftmaxRows(Var),
    /// Column-wise maximum over rows, `m×n → 1×n`; stores the argmax row per column.
    MaxRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Gather(Var, Vec<usize>),
    /// Same-padded sliding window of odd width: `n×d → n×(width·d)`.
    Unfold(Var, usize),
    BroadcastRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.derived(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.derived(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.derived(value, Op::Mul(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×n row");
        let value = self.value(a) + self.value(row);
        self.derived(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an m×1 column");
        let value = self.value(a) * self.value(col);
        self.derived(value, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.derived(value, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.derived(value, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.derived(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.derived(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.derived(value, Op::Transpose(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.derived(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.derived(value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.derived(value, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.derived(value, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.derived(value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.derived(value, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        self.derived(value, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.derived(value, Op::Square(a), &[a])
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.derived(value, Op::Softplus(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.derived(value, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.derived(value, Op::MeanAll(a), &[a])
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.derived(value, Op::SumRows(a), &[a])
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.derived(value, Op::SumCols(a), &[a])
    }

    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut col in value.columns_mut() {
            let max = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            col.mapv_inplace(|x| (x - max).exp());
            let z = col.sum();
            col.mapv_inplace(|x| x / z);
        }
        self.derived(value, Op::SoftmaxCols(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.derived(value, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert!(v.nrows() > 0, "max over zero rows");
        let mut argmax = Vec::with_capacity(v.ncols());
        let mut value = Array2::zeros((1, v.ncols()));
        for (j, col) in v.columns().into_iter().enumerate() {
            let mut best = 0;
            for i in 1..col.len() {
                if col[i] > col[best] {
                    best = i;
                }
            }
            argmax.push(best);
            value[[0, j]] = col[best];
        }
        self.derived(value, Op::MaxRows(a, argmax), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.derived(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.derived(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.derived(value, Op::SliceCols(a, start, end), &[a])
    }

    /// Selects rows of `a` by index; indices may repeat.
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.derived(value, Op::Gather(a, rows.to_vec()), &[a])
    }

    pub fn unfold(&mut self, a: Var, width: usize) -> Var {
        assert!(width % 2 == 1, "unfold width must be odd");
        let x = self.value(a);
        let (n, d) = x.dim();
        let half = (width / 2) as isize;
        let mut value = Array2::zeros((n, width * d));
        for i in 0..n {
            for k in 0..width {
                let src = i as isize + k as isize - half;
                if src >= 0 && (src as usize) < n {
                    value
                        .slice_mut(s![i, k * d..(k + 1) * d])
                        .assign(&x.row(src as usize));
                }
            }
        }
        self.derived(value, Op::Unfold(a, width), &[a])
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        assert_eq!(self.shape(a).0, 1, "broadcast_rows expects a 1×n row");
        let value = self
            .value(a)
            .broadcast((rows, self.shape(a).1))
            .expect("broadcast")
            .to_owned();
        self.derived(value, Op::BroadcastRows(a), &[a])
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, col) => {
                acc(*a, g * self.value(*col));
                let d = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*col, d);
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.dot(self.value(*b)));
                acc(*b, g.t().dot(self.value(*a)));
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Tanh(a) => acc(*a, Zip::from(g).and(y).map_collect(|&g, &y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, Zip::from(g).and(y).map_collect(|&g, &y| g * y * (1.0 - y))),
            Op::Relu(a) => acc(
                *a,
                Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::LeakyRelu(a, slope) => acc(
                *a,
                Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| if x > 0.0 { g } else { g * slope }),
            ),
            Op::Exp(a) => acc(*a, g * y),
            Op::Log(a) => acc(*a, g / self.value(*a)),
            Op::Sqrt(a) => acc(*a, Zip::from(g).and(y).map_collect(|&g, &y| 0.5 * g / y)),
            Op::Square(a) => acc(*a, g * self.value(*a) * 2.0),
            Op::Softplus(a) => acc(
                *a,
                Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g * sigmoid(x)),
            ),
            Op::SumAll(a) => {
                let k = g[[0, 0]];
                acc(*a, Array2::from_elem(self.shape(*a), k));
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a);
                let k = g[[0, 0]] / (shape.0 * shape.1) as f64;
                acc(*a, Array2::from_elem(shape, k));
            }
            Op::SumRows(a) => {
                let shape = self.shape(*a);
                acc(*a, g.broadcast(shape).expect("broadcast").to_owned());
            }
            Op::SumCols(a) => {
                let shape = self.shape(*a);
                acc(*a, g.broadcast(shape).expect("broadcast").to_owned());
            }
            Op::SoftmaxCols(a) => {
                let mut d = g * y;
                let colsum = d.sum_axis(Axis(0));
                Zip::from(&mut d)
                    .and(y)
                    .and_broadcast(&colsum.insert_axis(Axis(0)))
                    .for_each(|d, &y, &s| *d -= y * s);
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let rowsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(y)
                    .and_broadcast(&rowsum)
                    .for_each(|d, &y, &s| *d -= y.exp() * s);
                acc(*a, d);
            }
            Op::MaxRows(a, argmax) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (j, &i) in argmax.iter().enumerate() {
                    d[[i, j]] = g[[0, j]];
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    acc(*p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    acc(*p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::Gather(a, rows) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                acc(*a, d);
            }
            Op::Unfold(a, width) => {
                let (n, dim) = self.shape(*a);
                let half = (*width / 2) as isize;
                let mut d = Array2::zeros((n, dim));
                for i in 0..n {
                    for k in 0..*width {
                        let src = i as isize + k as isize - half;
                        if src >= 0 && (src as usize) < n {
                            let mut dst = d.row_mut(src as usize);
                            dst += &g.slice(s![i, k * dim..(k + 1) * dim]);
                        }
                    }
                }
                acc(*a, d);
            }
            Op::BroadcastRows(a) => acc(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
