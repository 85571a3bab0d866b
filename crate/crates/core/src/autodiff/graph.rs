use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    EmbeddingBagMean {
        table: Var,
        bags: Vec<Vec<usize>>,
    },
    ConcatCols(Var, Var),
    LogSoftmax(Var),
    Nll {
        logp: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Sum(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the
/// insertion index is a valid topological order.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Graph::backward`] call, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, or zeros of length `len` if nothing flowed to it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
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

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::NonScalarLoss(n.shape.clone()));
        }
        Ok(n.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    fn rg(&self, a: Var) -> bool {
        self.node(a).requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ((m, k), (k2, n)) = match (rows_cols(sa), rows_cols(sb)) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        debug_assert_eq!(k, k2);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, rg))
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[n]` bias vector to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let (m, n) = match (rows_cols(sx), sb) {
            (Some((m, n)), [nb]) if *nb == n => (m, n),
            _ => return Err(Error::shape("add_row_bias", sx, sb)),
        };
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddRowBias(x, bias), vec![m, n], out, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), vec![], vec![s], rg)
    }

    /// Mean of the embedding rows selected by each bag; output is `[bags, dim]`.
    pub fn embedding_bag_mean(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let st = self.shape(table);
        let (vocab, dim) = rows_cols(st).ok_or_else(|| Error::shape("embedding_bag", st, &[0, 0]))?;
        let tv = self.value(table);
        let mut out = vec![0.0; bags.len() * dim];
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::EmptyTokens("embedding_bag"));
            }
            let row = &mut out[b * dim..(b + 1) * dim];
            for &tok in bag {
                if tok >= vocab {
                    return Err(Error::IndexOutOfRange {
                        op: "embedding_bag",
                        index: tok,
                        bound: vocab,
                    });
                }
                for (o, &e) in row.iter_mut().zip(&tv[tok * dim..(tok + 1) * dim]) {
                    *o += e;
                }
            }
            let inv = 1.0 / bag.len() as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::EmbeddingBagMean {
                table,
                bags: bags.to_vec(),
            },
            vec![bags.len(), dim],
            out,
            rg,
        ))
    }

    /// `[m, p] ++ [m, q] -> [m, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ((m, p), q) = match (rows_cols(sa), rows_cols(sb)) {
            (Some((m, p)), Some((m2, q))) if m == m2 => ((m, p), q),
            _ => return Err(Error::shape("concat_cols", sa, sb)),
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatCols(a, b), vec![m, p + q], out, rg))
    }

    /// Row-wise log-softmax of an `[m, n]` matrix (a `[n]` vector is one row).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = match shape.as_slice() {
            [n] | [_, n] if *n > 0 => *n,
            _ => return Err(Error::shape("log_softmax", &shape, &[0, 0])),
        };
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::LogSoftmax(a), shape, out, rg))
    }

    /// `(1/m) Σ_i w_i · (−logp[i, target_i])` over an `[m, n]` log-prob matrix.
    pub fn nll(&mut self, logp: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let shape = self.shape(logp);
        let (m, n) = match shape {
            [m, n] => (*m, *n),
            [n] => (1, *n),
            _ => return Err(Error::shape("nll", shape, &[targets.len()])),
        };
        if targets.len() != m || m == 0 {
            return Err(Error::shape("nll", shape, &[targets.len()]));
        }
        let weights = match weights {
            Some(w) if w.len() != m => return Err(Error::shape("nll", &[m], &[w.len()])),
            Some(w) => w.to_vec(),
            None => vec![1.0; m],
        };
        let lv = self.value(logp);
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            if t >= n {
                return Err(Error::IndexOutOfRange {
                    op: "nll",
                    index: t,
                    bound: n,
                });
            }
            total -= w * lv[i * n + t];
        }
        let rg = self.rg(logp);
        Ok(self.push(
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                weights,
            },
            vec![],
            vec![total / m as f64],
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Every call starts from fresh
    /// zero buffers; nothing accumulates across calls.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // Only nodes that require gradients carry meaningful entries.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.shape(*a)).unwrap();
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRowBias(x, bias) => {
                let n = self.shape(*bias)[0];
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((o, x), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let out = &node.value;
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out) {
                        *o += x * (1.0 - y * y);
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(av) {
                        *o += 2.0 * v * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x));
            }
            Op::AddScalar(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Sum(a) => {
                let s = g[0];
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::EmbeddingBagMean { table, bags } => {
                let dim = self.shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (b, bag) in bags.iter().enumerate() {
                        let inv = 1.0 / bag.len() as f64;
                        let grow = &g[b * dim..(b + 1) * dim];
                        for &tok in bag {
                            for (o, x) in gt[tok * dim..(tok + 1) * dim].iter_mut().zip(grow) {
                                *o += inv * x;
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let p = self.shape(*a)[1];
                let q = self.shape(*b)[1];
                acc(*a, &mut |ga| {
                    for (dst, src) in ga.chunks_mut(p).zip(g.chunks(p + q)) {
                        dst.iter_mut().zip(&src[..p]).for_each(|(o, x)| *o += x);
                    }
                });
                acc(*b, &mut |gb| {
                    for (dst, src) in gb.chunks_mut(q).zip(g.chunks(p + q)) {
                        dst.iter_mut().zip(&src[p..]).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = *node.shape.last().unwrap();
                let out = &node.value;
                acc(*a, &mut |ga| {
                    for ((dst, gy), y) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let total: f64 = gy.iter().sum();
                        for ((o, gi), yi) in dst.iter_mut().zip(gy).zip(y) {
                            *o += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::Nll { logp, targets, weights } => {
                let n = *self.shape(*logp).last().unwrap();
                let m = targets.len() as f64;
                let s = g[0];
                acc(*logp, &mut |gl| {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        gl[i * n + t] -= s * w / m;
                    }
                });
            }
        }
    }
}

/// Numerically stable `ln Σ exp(x_i)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
