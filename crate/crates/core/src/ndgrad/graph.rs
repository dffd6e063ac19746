use super::tensor::{matmul_nt, matmul_tn};
use super::{GradError, Tensor};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Relu(Var),
    Tanh(Var),
    Sqrt(Var),
    Square(Var),
    Sum { input: Var, axis: Option<usize> },
    Mean { input: Var, axis: Option<usize> },
    /// Per-column standardization; `inv_std` is zero for guarded columns.
    Standardize { input: Var, inv_std: Vec<T> },
    CenterColumns(Var),
    AddBias(Var, Var),
    /// Row-wise L2 normalization; caches the row norms.
    NormalizeRows { input: Var, norms: Vec<T> },
    /// Softmax down each column (over axis 0).
    SoftmaxColumns(Var),
    /// Mean softmax cross-entropy; caches row-wise probabilities.
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    pub op: Op<T>,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// Eagerly evaluated computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Copy of `v` detached from the graph (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(Op::MatMul(a, b), value, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let value = self.value(a).transpose()?;
        Ok(self.push_op(Op::Transpose(a), value, &[a]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, GradError> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, name)?;
        let value = va.zip_map(vb, f);
        Ok(self.push_op(op, value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push_op(Op::Scale(a, k), value, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x + k);
        self.push_op(Op::AddScalar(a, k), value, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_op(Op::Relu(a), value, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        self.push_op(Op::Tanh(a), value, &[a])
    }

    /// Elementwise square root; inputs must be strictly positive.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, GradError> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(GradError::InvalidArgument("sqrt of a non-positive value".into()));
        }
        let value = self.value(a).map(T::sqrt);
        Ok(self.push_op(Op::Sqrt(a), value, &[a]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push_op(Op::Square(a), value, &[a])
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var, GradError> {
        let value = reduce_sum(self.value(a), axis)?;
        Ok(self.push_op(Op::Sum { input: a, axis }, value, &[a]))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var, GradError> {
        let count = match axis {
            None => self.value(a).numel(),
            Some(ax) => *self.shape(a).get(ax).ok_or_else(|| invalid_axis(self.shape(a), ax))?,
        };
        let inv = T::one() / T::of(count as f64);
        let value = reduce_sum(self.value(a), axis)?.map(|x| x * inv);
        Ok(self.push_op(Op::Mean { input: a, axis }, value, &[a]))
    }

    /// Standardizes each column of an `N×D` matrix to zero mean and unit
    /// population standard deviation. Columns whose standard deviation is at
    /// most `epsilon` map to zeros.
    pub fn batch_standardize(&mut self, z: Var, epsilon: T) -> Result<Var, GradError> {
        let x = self.value(z);
        let (n, d) = x.dims2("batch_standardize")?;
        if n < 2 {
            return Err(GradError::DegenerateBatch { op: "batch_standardize", rows: n });
        }
        let inv_n = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); d];
        for j in 0..d {
            let mean = (0..n).map(|i| x.at(i, j)).sum::<T>() * inv_n;
            let var = (0..n).map(|i| (x.at(i, j) - mean).powi(2)).sum::<T>() * inv_n;
            let std = var.sqrt();
            if std > epsilon {
                let inv = T::one() / std;
                inv_std[j] = inv;
                for i in 0..n {
                    out[i * d + j] = (x.at(i, j) - mean) * inv;
                }
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push_op(Op::Standardize { input: z, inv_std }, value, &[z]))
    }

    /// Subtracts each column's mean.
    pub fn center_columns(&mut self, z: Var) -> Result<Var, GradError> {
        let x = self.value(z);
        let (n, d) = x.dims2("center_columns")?;
        let means = column_means(x);
        let mut out = x.clone();
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] = x.at(i, j) - means[j];
            }
        }
        Ok(self.push_op(Op::CenterColumns(z), out, &[z]))
    }

    /// `x + bias` with `bias` broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, GradError> {
        let value = self.value(x).add_row_bias(self.value(bias))?;
        Ok(self.push_op(Op::AddBias(x, bias), value, &[x, bias]))
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, GradError> {
        let v = self.value(x);
        let (n, d) = v.dims2("normalize_rows")?;
        let mut norms = Vec::with_capacity(n);
        let mut out = v.clone();
        for i in 0..n {
            let norm = v.row(i).iter().map(|&a| a * a).sum::<T>().sqrt();
            if !(norm > T::zero()) {
                return Err(GradError::ZeroNorm { op: "normalize_rows", row: i });
            }
            for j in 0..d {
                out.data_mut()[i * d + j] = v.at(i, j) / norm;
            }
            norms.push(norm);
        }
        Ok(self.push_op(Op::NormalizeRows { input: x, norms }, out, &[x]))
    }

    pub fn softmax_columns(&mut self, x: Var) -> Result<Var, GradError> {
        let v = self.value(x);
        let (n, d) = v.dims2("softmax_columns")?;
        let mut out = v.clone();
        for j in 0..d {
            let max = (0..n).map(|i| v.at(i, j)).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for i in 0..n {
                let e = (v.at(i, j) - max).exp();
                out.data_mut()[i * d + j] = e;
                total = total + e;
            }
            for i in 0..n {
                out.data_mut()[i * d + j] = out.data()[i * d + j] / total;
            }
        }
        Ok(self.push_op(Op::SoftmaxColumns(x), out, &[x]))
    }

    /// Mean softmax cross-entropy of `N×C` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, GradError> {
        let v = self.value(logits);
        let (n, c) = v.dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(GradError::ShapeMismatch {
                op: "cross_entropy",
                left: v.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(GradError::InvalidArgument(format!("target class {bad} >= {c}")));
        }
        let probs = softmax_rows(v);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = v.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&a| (a - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - row[t];
        }
        let value = Tensor::scalar(loss / T::of(n as f64));
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push_op(op, value, &[logits]))
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse sweep from a one-element `loss`. Overwrites the gradient of
    /// every node that requires one; unreachable trainable leaves get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        if !self.value(loss).is_scalar() {
            return Err(GradError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut adj)?;
            }
            adj[i] = Some(g);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.grad = if !node.requires_grad {
                None
            } else {
                Some(
                    adj.get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                )
            };
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor<T>,
        adj: &mut [Option<Tensor<T>>],
    ) -> Result<(), GradError> {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut emit = |v: Var, t: Tensor<T>| match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2("matmul")?;
                let (_, n) = vb.dims2("matmul")?;
                if needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt(g.data(), vb.data(), &mut da, m, n, k);
                    emit(*a, Tensor::new(vec![m, k], da)?);
                }
                if needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn(va.data(), g.data(), &mut db, m, k, n);
                    emit(*b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Transpose(a) => emit(*a, g.transpose()?),
            Op::Add(a, b) => {
                if needs(a) {
                    emit(*a, g.clone());
                }
                if needs(b) {
                    emit(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    emit(*a, g.clone());
                }
                if needs(b) {
                    emit(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    emit(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if needs(b) {
                    emit(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                emit(*a, g.map(|x| x * k));
            }
            Op::AddScalar(a, _) => emit(*a, g.clone()),
            Op::Relu(a) => {
                emit(*a, g.zip_map(self.value(*a), |x, y| if y > T::zero() { x } else { T::zero() }))
            }
            Op::Tanh(a) => emit(*a, g.zip_map(&node.value, |x, y| x * (T::one() - y * y))),
            Op::Sqrt(a) => {
                let half = T::of(0.5);
                emit(*a, g.zip_map(&node.value, |x, y| x * half / y))
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                emit(*a, g.zip_map(self.value(*a), |x, y| two * x * y))
            }
            Op::Sum { input, axis } => {
                emit(*input, broadcast_back(g, self.shape(*input), *axis, T::one()))
            }
            Op::Mean { input, axis } => {
                let shape = self.shape(*input);
                let count = axis.map_or_else(|| shape.iter().product(), |ax| shape[ax]);
                let inv = T::one() / T::of(count as f64);
                emit(*input, broadcast_back(g, shape, *axis, inv))
            }
            Op::Standardize { input, inv_std } => {
                let y = &node.value;
                let (n, d) = y.dims2("batch_standardize")?;
                let inv_n = T::one() / T::of(n as f64);
                let mut dx = Tensor::zeros(&[n, d]);
                for j in 0..d {
                    if inv_std[j] == T::zero() {
                        continue;
                    }
                    let mean_g = (0..n).map(|i| g.at(i, j)).sum::<T>() * inv_n;
                    let mean_gy = (0..n).map(|i| g.at(i, j) * y.at(i, j)).sum::<T>() * inv_n;
                    for i in 0..n {
                        dx.data_mut()[i * d + j] =
                            inv_std[j] * (g.at(i, j) - mean_g - y.at(i, j) * mean_gy);
                    }
                }
                emit(*input, dx);
            }
            Op::CenterColumns(a) => {
                let means = column_means(g);
                let (_, d) = g.dims2("center_columns")?;
                let mut dx = g.clone();
                for (k, v) in dx.data_mut().iter_mut().enumerate() {
                    *v = *v - means[k % d];
                }
                emit(*a, dx);
            }
            Op::AddBias(x, bias) => {
                if needs(x) {
                    emit(*x, g.clone());
                }
                if needs(bias) {
                    let summed = reduce_sum(g, Some(0))?;
                    emit(*bias, summed.reshape(self.shape(*bias).to_vec())?);
                }
            }
            Op::NormalizeRows { input, norms } => {
                let y = &node.value;
                let (n, d) = y.dims2("normalize_rows")?;
                let mut dx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    let dot: T = y.row(i).iter().zip(g.row(i)).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx.data_mut()[i * d + j] = (g.at(i, j) - y.at(i, j) * dot) / norms[i];
                    }
                }
                emit(*input, dx);
            }
            Op::SoftmaxColumns(a) => {
                let y = &node.value;
                let (n, d) = y.dims2("softmax_columns")?;
                let mut dx = Tensor::zeros(&[n, d]);
                for j in 0..d {
                    let dot: T = (0..n).map(|i| y.at(i, j) * g.at(i, j)).sum();
                    for i in 0..n {
                        dx.data_mut()[i * d + j] = y.at(i, j) * (g.at(i, j) - dot);
                    }
                }
                emit(*a, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let shape = self.shape(*logits).to_vec();
                let (n, c) = (shape[0], shape[1]);
                let scale = g.item() / T::of(n as f64);
                let mut dx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * c + t] = dx[i * c + t] - T::one();
                }
                for v in &mut dx {
                    *v = *v * scale;
                }
                emit(*logits, Tensor::new(shape, dx)?);
            }
        }
        Ok(())
    }
}

fn invalid_axis(shape: &[usize], axis: usize) -> GradError {
    GradError::InvalidAxis { axis, shape: shape.to_vec() }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn reduce_sum<T: Scalar>(x: &Tensor<T>, axis: Option<usize>) -> Result<Tensor<T>, GradError> {
    let Some(axis) = axis else {
        return Ok(Tensor::scalar(x.sum()));
    };
    if axis >= x.rank() {
        return Err(invalid_axis(x.shape(), axis));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            for k in 0..inner {
                out[o * inner + k] = out[o * inner + k] + x.data()[base + k];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

fn broadcast_back<T: Scalar>(g: &Tensor<T>, shape: &[usize], axis: Option<usize>, k: T) -> Tensor<T> {
    let Some(axis) = axis else {
        return Tensor::full(shape, g.item() * k);
    };
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = Tensor::zeros(shape);
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                out.data_mut()[(o * len + l) * inner + i] = g.data()[o * inner + i] * k;
            }
        }
    }
    out
}

fn column_means<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut means = vec![T::zero(); d];
    for row in x.data().chunks(d) {
        for (m, &v) in means.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    let inv = T::one() / T::of(n as f64);
    means.iter_mut().for_each(|m| *m = *m * inv);
    means
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let c = x.shape()[1];
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&a| (a - max).exp()));
        let total: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / total);
    }
    out
}
