use super::Tensor;
use crate::error::{contract, Result};

/// Index of a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[m, n] + [1, n]` with the row repeated over the batch.
    AddRow(NodeId, NodeId),
    /// `[1, n]` repeated to `[m, n]`.
    BroadcastRows(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    /// Row sums, `[m, n] -> [m, 1]`.
    SumCols(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Concat(NodeId, NodeId),
    SliceCols(NodeId, usize),
    Clamp(NodeId, f64, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation graph. Every node's inputs are created before it,
/// so insertion order is a topological order and the graph is acyclic by
/// construction. Values are computed eagerly as nodes are added.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `id`; zeros when `id` is unreachable.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// Moves the gradients of `ids` out, in order.
    pub fn collect(&self, ids: &[NodeId]) -> Vec<Tensor> {
        ids.iter().map(|&id| self.get(id)).collect()
    }

    pub fn is_reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c = a · b + beta · c` with explicit strides (row, col) for each operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: slice lengths cover m*k, k*n and m*n elements under the given
    // strides, which the callers derive from validated tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check_rank2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        self.nodes[id.0]
            .value
            .dims2()
            .map_err(|_| contract!("{what}: operand has shape {:?}", self.nodes[id.0].value.shape()))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.check_rank2(a, "matmul")?;
        let (k2, n) = self.check_rank2(b, "matmul")?;
        if k != k2 {
            return Err(contract!("matmul inner dims differ: [{m},{k}] x [{k2},{n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let v = Tensor::matrix(m, n, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), v, ng))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(contract!("{name}: shapes {:?} and {:?} differ", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.check_rank2(a, "add_row")?;
        let (r, n2) = self.check_rank2(row, "add_row")?;
        if r != 1 || n != n2 {
            return Err(contract!("add_row: [{m},{n}] + [{r},{n2}]"));
        }
        let va = self.value(a).data();
        let vr = self.value(row).data();
        let mut data = va.to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (x, y) in chunk.iter_mut().zip(vr) {
                *x += y;
            }
        }
        let v = Tensor::matrix(m, n, data)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Op::AddRow(a, row), v, ng))
    }

    /// Repeats a `[1, n]` row `rows` times.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let (r, n) = self.check_rank2(a, "broadcast_rows")?;
        if r != 1 {
            return Err(contract!("broadcast_rows expects [1, n], got [{r},{n}]"));
        }
        let row = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&row);
        }
        let v = Tensor::matrix(rows, n, data)?;
        let ng = self.ng(a);
        Ok(self.push(Op::BroadcastRows(a), v, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scaled(c);
        let ng = self.ng(a);
        self.push(Op::Scale(a, c), v, ng)
    }

    /// Sum of all elements, `[1, 1]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::Sum(a), v, ng)
    }

    /// Per-row sums, `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.check_rank2(a, "sum_cols")?;
        let va = self.value(a).data();
        let data = (0..m).map(|i| va[i * n..(i + 1) * n].iter().sum()).collect();
        let v = Tensor::matrix(m, 1, data)?;
        let ng = self.ng(a);
        Ok(self.push(Op::SumCols(a), v, ng))
    }

    /// Mean of all elements, `[1, 1]`.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(contract!("mean of an empty tensor"));
        }
        let v = Tensor::scalar(va.sum() / va.len() as f64);
        let ng = self.ng(a);
        Ok(self.push(Op::Mean(a), v, ng))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(op, v, ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Clamps into `[lo, hi]`; the gradient passes through inside the interval
    /// (boundaries included) and is zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Column-wise concatenation `[m, n1] ++ [m, n2] -> [m, n1 + n2]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n1) = self.check_rank2(a, "concat")?;
        let (m2, n2) = self.check_rank2(b, "concat")?;
        if m != m2 {
            return Err(contract!("concat: row counts {m} and {m2} differ"));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            data.extend_from_slice(&va[i * n1..(i + 1) * n1]);
            data.extend_from_slice(&vb[i * n2..(i + 1) * n2]);
        }
        let v = Tensor::matrix(m, n1 + n2, data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Concat(a, b), v, ng))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.check_rank2(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(contract!("slice_cols {start}..{end} out of range for {n} columns"));
        }
        let va = self.value(a).data();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&va[i * n + start..i * n + end]);
        }
        let v = Tensor::matrix(m, w, data)?;
        let ng = self.ng(a);
        Ok(self.push(Op::SliceCols(a, start), v, ng))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.backward_weighted(&[(root, 1.0)])
    }

    /// Gradient of `sum_i w_i * root_i` over scalar roots, in a single sweep.
    pub fn backward_weighted(&self, roots: &[(NodeId, f64)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for &(root, w) in roots {
            let rv = &self.nodes[root.0].value;
            if rv.len() != 1 {
                return Err(contract!("backward root must be scalar, got shape {:?}", rv.shape()));
            }
            let seed = Tensor::filled(rv.shape(), w);
            match &mut grads[root.0] {
                Some(g) => g.add_assign(&seed),
                slot @ None => *slot = Some(seed),
            }
            start = start.max(root.0 + 1);
        }

        for i in (0..start).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        if !self.ng(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn elementwise(&self, a: NodeId, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("rank 2");
                let n = self.value(b).cols();
                if self.ng(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n as isize, 1), self.value(b).data(), (1, n as isize), &mut da, 0.0);
                    self.accumulate(grads, a, Tensor::matrix(m, k, da).expect("shape"));
                }
                if self.ng(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), (1, k as isize), g.data(), (n as isize, 1), &mut db, 0.0);
                    self.accumulate(grads, b, Tensor::matrix(k, n, db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    let vb = self.value(b).data();
                    let d = g.data().iter().zip(vb).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, a, Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
                if self.ng(b) {
                    let va = self.value(a).data();
                    let d = g.data().iter().zip(va).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, b, Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.ng(row) {
                    let n = g.cols();
                    let mut d = vec![0.0; n];
                    for chunk in g.data().chunks(n.max(1)) {
                        for (acc, v) in d.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, row, Tensor::matrix(1, n, d).expect("shape"));
                }
            }
            Op::BroadcastRows(a) => {
                let n = g.cols();
                let mut d = vec![0.0; n];
                for chunk in g.data().chunks(n.max(1)) {
                    for (acc, v) in d.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, a, Tensor::matrix(1, n, d).expect("shape"));
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.scaled(c)),
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, a, Tensor::filled(self.value(a).shape(), gv));
            }
            Op::SumCols(a) => {
                let (m, n) = self.value(a).dims2().expect("rank 2");
                let mut d = Vec::with_capacity(m * n);
                for &gi in g.data() {
                    d.extend(std::iter::repeat_n(gi, n));
                }
                self.accumulate(grads, a, Tensor::matrix(m, n, d).expect("shape"));
            }
            Op::Mean(a) => {
                let va = self.value(a);
                let gv = g.data()[0] / va.len() as f64;
                self.accumulate(grads, a, Tensor::filled(va.shape(), gv));
            }
            Op::Square(a) => {
                let d = self.elementwise(a, g, |x, gy| 2.0 * x * gy);
                self.accumulate(grads, a, d);
            }
            Op::Sqrt(a) => {
                let d = Tensor::new(
                    out.shape().to_vec(),
                    out.data().iter().zip(g.data()).map(|(y, gy)| 0.5 * gy / y).collect(),
                )
                .expect("shape");
                self.accumulate(grads, a, d);
            }
            Op::Exp(a) => {
                let d = Tensor::new(
                    out.shape().to_vec(),
                    out.data().iter().zip(g.data()).map(|(y, gy)| y * gy).collect(),
                )
                .expect("shape");
                self.accumulate(grads, a, d);
            }
            Op::Log(a) => {
                let d = self.elementwise(a, g, |x, gy| gy / x);
                self.accumulate(grads, a, d);
            }
            Op::Tanh(a) => {
                let d = Tensor::new(
                    out.shape().to_vec(),
                    out.data().iter().zip(g.data()).map(|(y, gy)| (1.0 - y * y) * gy).collect(),
                )
                .expect("shape");
                self.accumulate(grads, a, d);
            }
            Op::Sigmoid(a) => {
                let d = Tensor::new(
                    out.shape().to_vec(),
                    out.data().iter().zip(g.data()).map(|(y, gy)| y * (1.0 - y) * gy).collect(),
                )
                .expect("shape");
                self.accumulate(grads, a, d);
            }
            Op::Softplus(a) => {
                let d = self.elementwise(a, g, |x, gy| sigmoid(x) * gy);
                self.accumulate(grads, a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = self.elementwise(a, g, |x, gy| if (lo..=hi).contains(&x) { gy } else { 0.0 });
                self.accumulate(grads, a, d);
            }
            Op::Concat(a, b) => {
                let (m, n1) = self.value(a).dims2().expect("rank 2");
                let n2 = self.value(b).cols();
                let gd = g.data();
                if self.ng(a) {
                    let mut d = Vec::with_capacity(m * n1);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * (n1 + n2)..i * (n1 + n2) + n1]);
                    }
                    self.accumulate(grads, a, Tensor::matrix(m, n1, d).expect("shape"));
                }
                if self.ng(b) {
                    let mut d = Vec::with_capacity(m * n2);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * (n1 + n2) + n1..(i + 1) * (n1 + n2)]);
                    }
                    self.accumulate(grads, b, Tensor::matrix(m, n2, d).expect("shape"));
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(a).dims2().expect("rank 2");
                let w = g.cols();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, a, Tensor::matrix(m, n, d).expect("shape"));
            }
        }
    }
}

pub fn sigmoid_f64(x: f64) -> f64 {
    sigmoid(x)
}

pub fn softplus_f64(x: f64) -> f64 {
    softplus(x)
}
