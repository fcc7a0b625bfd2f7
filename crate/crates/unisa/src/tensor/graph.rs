use std::collections::BTreeMap;

use super::dense::{DenseTensor, TensorError};

const NORM_EPS: f64 = 1e-12;

/// Handle to a node inside a [`ValueGraph`]. Only valid for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Named leaf, trainable. Bound through the graph's binding table.
    Leaf(String),
    /// Inline value, never differentiated through.
    Constant(DenseTensor),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    L2Normalize(usize, usize),
    L2Norm(usize),
    SquaredDistance(usize, usize),
    Clamp(usize, f64, f64),
    Scale(usize, f64),
    Concat(Vec<usize>, usize),
    Conv2d(usize, usize),
    AvgPool2(usize),
    /// Pure shape reinterpretation of row-major data; identity math.
    Reshape(usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Append-only computation graph over [`DenseTensor`] values.
///
/// Nodes are created through the builder methods; inputs must already exist,
/// so node ids are always in topological order. `evaluate` runs the forward
/// pass and caches every intermediate value; `gradient` walks the cached
/// graph in reverse. Rebinding a leaf invalidates the cache.
///
/// A graph is single-writer. Distinct graphs are independent and may be
/// evaluated concurrently on different threads.
#[derive(Debug, Default)]
pub struct ValueGraph {
    nodes: Vec<Node>,
    values: Vec<Option<DenseTensor>>,
    params: BTreeMap<String, usize>,
    bindings: BTreeMap<String, DenseTensor>,
    dirty: bool,
}

impl ValueGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Declares a trainable leaf with a fixed shape. The value is supplied
    /// later through [`ValueGraph::bind`].
    pub fn parameter(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape.to_vec()));
        }
        let id = self.push(Op::Leaf(name.to_string()), shape.to_vec());
        self.params.insert(name.to_string(), id.0);
        Ok(id)
    }

    /// Declares and binds a trainable leaf in one step.
    pub fn parameter_with(
        &mut self,
        name: &str,
        value: DenseTensor,
    ) -> Result<NodeId, TensorError> {
        let id = self.parameter(name, value.shape())?;
        self.bind(name, value)?;
        Ok(id)
    }

    /// Binds (or rebinds) a leaf value. Cached forward values are dropped.
    pub fn bind(&mut self, name: &str, value: DenseTensor) -> Result<(), TensorError> {
        let idx = *self
            .params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        if self.nodes[idx].shape != value.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "bind",
                left: self.nodes[idx].shape.clone(),
                right: value.shape().to_vec(),
            });
        }
        self.bindings.insert(name.to_string(), value);
        self.dirty = true;
        Ok(())
    }

    /// Node id of a declared parameter, if present.
    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).map(|&i| NodeId(i))
    }

    pub fn constant(&mut self, value: DenseTensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(DenseTensor::scalar(v))
    }

    pub fn constant_vector(&mut self, v: &[f64]) -> NodeId {
        self.constant(DenseTensor::vector(v.to_vec()).expect("finite vector"))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.elementwise_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a.0, b.0), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.elementwise_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a.0, b.0), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.elementwise_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a.0, b.0), shape))
    }

    /// Matrix product. Accepts rank-2 operands plus the vector promotions
    /// `(k,)x(k,n) -> (n,)`, `(m,k)x(k,) -> (m,)` and the inner product
    /// `(k,)x(k,) -> (1,)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            context: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        let (m, ka) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => return Err(mismatch()),
        };
        let (kb, n) = match sb.len() {
            1 => (sb[0], 1),
            2 => (sb[0], sb[1]),
            _ => return Err(mismatch()),
        };
        if ka != kb {
            return Err(mismatch());
        }
        let shape = match (sa.len(), sb.len()) {
            (1, 1) => vec![1],
            (1, 2) => vec![n],
            (2, 1) => vec![m],
            _ => vec![m, n],
        };
        Ok(self.push(Op::MatMul(a.0, b.0), shape))
    }

    /// Inner product of two equal-length vectors, as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul(a, b)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a.0), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a.0), shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log(a.0), shape)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a.0), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a.0), vec![1])
    }

    /// Softmax over the last axis: the whole vector for rank 1, each row for
    /// rank 2. Output rows are strictly positive and sum to one.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() > 2 {
            return Err(TensorError::BadAxis {
                axis: shape.len() - 1,
                shape,
            });
        }
        Ok(self.push(Op::Softmax(a.0), shape))
    }

    /// Scales slices along `axis` to unit L2 norm. For rank 1 only axis 0 is
    /// valid; for rank 2, axis 1 normalizes rows and axis 0 columns.
    /// Evaluation fails with `DegenerateNorm` when a slice norm is at or
    /// below 1e-12.
    pub fn l2_normalize(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        let ok = match shape.len() {
            1 => axis == 0,
            2 => axis <= 1,
            _ => false,
        };
        if !ok {
            return Err(TensorError::BadAxis { axis, shape });
        }
        Ok(self.push(Op::L2Normalize(a.0, axis), shape))
    }

    /// Euclidean norm of all elements, as a scalar node.
    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2Norm(a.0), vec![1])
    }

    /// Sum of squared elementwise differences, as a scalar node.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                context: "squared_distance",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(self.push(Op::SquaredDistance(a.0, b.0), vec![1]))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Clamp(a.0, lo, hi), shape)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a.0, k), shape)
    }

    /// Concatenation along `axis`. Rank-1 inputs support axis 0; rank-2
    /// inputs support axis 0 (stack rows) and axis 1 (widen rows).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Unsupported("concat of zero nodes"));
        }
        let first = self.shape(parts[0]).to_vec();
        let rank = first.len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(TensorError::BadAxis { axis, shape: first });
        }
        let mut shape = first.clone();
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != rank || (0..rank).any(|d| d != axis && s[d] != first[d]) {
                return Err(TensorError::ShapeMismatch {
                    context: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            shape[axis] += s[axis];
        }
        Ok(self.push(Op::Concat(parts.iter().map(|p| p.0).collect(), axis), shape))
    }

    /// Valid 2-D cross-correlation, stride 1. Input `(C, H, W)`, kernel
    /// `(F, C, KH, KW)`, output `(F, H-KH+1, W-KW+1)`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId, TensorError> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let bad = || TensorError::ShapeMismatch {
            context: "conv2d",
            left: si.clone(),
            right: sk.clone(),
        };
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] > si[1] || sk[3] > si[2] {
            return Err(bad());
        }
        let shape = vec![sk[0], si[1] - sk[2] + 1, si[2] - sk[3] + 1];
        Ok(self.push(Op::Conv2d(input.0, kernel.0), shape))
    }

    /// Reinterprets a node's row-major data under a new shape with the same
    /// element count.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let old: usize = self.shape(a).iter().product();
        let new: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape.to_vec()));
        }
        if old != new {
            return Err(TensorError::ShapeMismatch {
                context: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(self.push(Op::Reshape(a.0), shape.to_vec()))
    }

    /// 2x2 average pooling with stride 2; trailing odd rows/columns are
    /// dropped. Input `(C, H, W)` with H, W >= 2.
    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(TensorError::BadAxis { axis: 0, shape: s });
        }
        let shape = vec![s[0], s[1] / 2, s[2] / 2];
        Ok(self.push(Op::AvgPool2(input.0), shape))
    }

    /// Forward pass up to `root`. Recomputes from scratch after any rebind,
    /// otherwise fills in whatever the cache is missing. Deterministic:
    /// identical leaf bindings yield bit-identical outputs.
    pub fn evaluate(&mut self, root: NodeId) -> Result<DenseTensor, TensorError> {
        if root.0 >= self.nodes.len() {
            return Err(TensorError::InvalidNode(root.0));
        }
        if self.dirty {
            self.values.iter_mut().for_each(|v| *v = None);
            self.dirty = false;
        }
        for i in 0..=root.0 {
            if self.values[i].is_some() {
                continue;
            }
            let value = self.forward(i)?;
            self.values[i] = Some(value);
        }
        Ok(self.values[root.0].clone().expect("just computed"))
    }

    /// Reverse-mode gradients of a scalar `root` with respect to the named
    /// parameters. Parameters the root does not depend on map to zero
    /// tensors of the declared shape.
    pub fn gradient(
        &mut self,
        root: NodeId,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, DenseTensor>, TensorError> {
        for name in wrt {
            if !self.params.contains_key(*name) {
                return Err(TensorError::UnknownParameter((*name).to_string()));
            }
        }
        let value = self.evaluate(root)?;
        if !value.is_scalar() {
            return Err(TensorError::NonScalarRoot(value.shape().to_vec()));
        }

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(vec![1.0]);
        let mut leaf_grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let Some(dy) = adjoints[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf(name) => {
                    let slot = leaf_grads
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; dy.len()]);
                    for (s, d) in slot.iter_mut().zip(&dy) {
                        *s += d;
                    }
                }
                Op::Constant(_) => {}
                op => {
                    let op = op.clone();
                    self.backward(&op, i, &dy, &mut adjoints);
                }
            }
        }

        let mut out = BTreeMap::new();
        for name in wrt {
            let idx = self.params[*name];
            let shape = self.nodes[idx].shape.clone();
            let grad = match leaf_grads.remove(*name) {
                Some(g) => DenseTensor::new(shape, g).expect("gradient is finite"),
                None => DenseTensor::zeros(&shape),
            };
            out.insert((*name).to_string(), grad);
        }
        Ok(out)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.values.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn elementwise_shape(
        &self,
        a: NodeId,
        b: NodeId,
        context: &'static str,
    ) -> Result<Vec<usize>, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let la: usize = sa.iter().product();
        let lb: usize = sb.iter().product();
        if sa == sb {
            Ok(sa.to_vec())
        } else if la == 1 {
            Ok(sb.to_vec())
        } else if lb == 1 {
            Ok(sa.to_vec())
        } else {
            Err(TensorError::ShapeMismatch {
                context,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn value(&self, idx: usize) -> &DenseTensor {
        self.values[idx].as_ref().expect("value cached by evaluate")
    }

    fn forward(&self, i: usize) -> Result<DenseTensor, TensorError> {
        let shape = self.nodes[i].shape.clone();
        let out = match &self.nodes[i].op {
            Op::Leaf(name) => {
                return self
                    .bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| TensorError::UnboundLeaf(name.clone()));
            }
            Op::Constant(t) => return Ok(t.clone()),
            Op::Add(a, b) => broadcast_zip(self.value(*a), self.value(*b), |x, y| x + y),
            Op::Sub(a, b) => broadcast_zip(self.value(*a), self.value(*b), |x, y| x - y),
            Op::Mul(a, b) => broadcast_zip(self.value(*a), self.value(*b), |x, y| x * y),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = promote_left(va.shape());
                let n = promote_right(vb.shape()).1;
                let (da, db) = (va.data(), vb.data());
                let mut out = vec![0.0; m * n];
                for mi in 0..m {
                    for kk in 0..k {
                        let av = da[mi * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let row = &db[kk * n..(kk + 1) * n];
                        let o = &mut out[mi * n..(mi + 1) * n];
                        for ni in 0..n {
                            o[ni] += av * row[ni];
                        }
                    }
                }
                out
            }
            Op::Relu(a) => self.value(*a).data().iter().map(|&x| x.max(0.0)).collect(),
            Op::Exp(a) => self.value(*a).data().iter().map(|&x| x.exp()).collect(),
            Op::Log(a) => self.value(*a).data().iter().map(|&x| x.ln()).collect(),
            Op::Sum(a) => vec![self.value(*a).data().iter().sum()],
            Op::Mean(a) => {
                let v = self.value(*a);
                vec![v.data().iter().sum::<f64>() / v.len() as f64]
            }
            Op::Softmax(a) => {
                let v = self.value(*a);
                let cols = *v.shape().last().expect("rank checked at build");
                let mut out = vec![0.0; v.len()];
                for (row_in, row_out) in v.data().chunks(cols).zip(out.chunks_mut(cols)) {
                    softmax_row(row_in, row_out);
                }
                out
            }
            Op::L2Normalize(a, axis) => {
                let v = self.value(*a);
                let mut out = vec![0.0; v.len()];
                for slice in slices(v.shape(), *axis) {
                    let norm = slice
                        .clone()
                        .map(|j| v.data()[j] * v.data()[j])
                        .sum::<f64>()
                        .sqrt();
                    if norm <= NORM_EPS {
                        return Err(TensorError::DegenerateNorm {
                            norm,
                            min: NORM_EPS,
                        });
                    }
                    for j in slice {
                        out[j] = v.data()[j] / norm;
                    }
                }
                out
            }
            Op::L2Norm(a) => {
                let v = self.value(*a);
                vec![v.data().iter().map(|x| x * x).sum::<f64>().sqrt()]
            }
            Op::SquaredDistance(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()]
            }
            Op::Clamp(a, lo, hi) => self
                .value(*a)
                .data()
                .iter()
                .map(|&x| x.clamp(*lo, *hi))
                .collect(),
            Op::Scale(a, k) => self.value(*a).data().iter().map(|&x| x * k).collect(),
            Op::Concat(parts, axis) => {
                let tensors: Vec<&DenseTensor> = parts.iter().map(|&p| self.value(p)).collect();
                concat_forward(&tensors, *axis, &shape)
            }
            Op::Conv2d(input, kernel) => conv2d_forward(self.value(*input), self.value(*kernel)),
            Op::AvgPool2(a) => avg_pool2_forward(self.value(*a)),
            Op::Reshape(a) => self.value(*a).data().to_vec(),
        };
        // overflow in an op (exp of a huge argument, squared distances of
        // diverged values) surfaces as an error, not a panic
        DenseTensor::new(shape, out)
    }

    fn backward(&self, op: &Op, i: usize, dy: &[f64], adjoints: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf(_) | Op::Constant(_) => unreachable!("handled by caller"),
            Op::Add(a, b) => {
                accumulate_broadcast(adjoints, *a, self.value(*a).len(), dy, |_, d| d);
                accumulate_broadcast(adjoints, *b, self.value(*b).len(), dy, |_, d| d);
            }
            Op::Sub(a, b) => {
                accumulate_broadcast(adjoints, *a, self.value(*a).len(), dy, |_, d| d);
                accumulate_broadcast(adjoints, *b, self.value(*b).len(), dy, |_, d| -d);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let pick = |v: &DenseTensor, j: usize| {
                    if v.len() == 1 {
                        v.data()[0]
                    } else {
                        v.data()[j]
                    }
                };
                accumulate_broadcast(adjoints, *a, va.len(), dy, |j, d| d * pick(vb, j));
                accumulate_broadcast(adjoints, *b, vb.len(), dy, |j, d| d * pick(va, j));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = promote_left(va.shape());
                let n = promote_right(vb.shape()).1;
                let da = slot(adjoints, *a, va.len());
                for mi in 0..m {
                    for kk in 0..k {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            acc += dy[mi * n + ni] * vb.data()[kk * n + ni];
                        }
                        da[mi * k + kk] += acc;
                    }
                }
                let db = slot(adjoints, *b, vb.len());
                for kk in 0..k {
                    for ni in 0..n {
                        let mut acc = 0.0;
                        for mi in 0..m {
                            acc += va.data()[mi * k + kk] * dy[mi * n + ni];
                        }
                        db[kk * n + ni] += acc;
                    }
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let da = slot(adjoints, *a, va.len());
                for (j, d) in dy.iter().enumerate() {
                    if va.data()[j] > 0.0 {
                        da[j] += d;
                    }
                }
            }
            Op::Exp(a) => {
                let y = self.value(i);
                let da = slot(adjoints, *a, y.len());
                for (j, d) in dy.iter().enumerate() {
                    da[j] += d * y.data()[j];
                }
            }
            Op::Log(a) => {
                let va = self.value(*a);
                let da = slot(adjoints, *a, va.len());
                for (j, d) in dy.iter().enumerate() {
                    da[j] += d / va.data()[j];
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                let da = slot(adjoints, *a, len);
                for v in da.iter_mut() {
                    *v += dy[0];
                }
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let da = slot(adjoints, *a, len);
                let d = dy[0] / len as f64;
                for v in da.iter_mut() {
                    *v += d;
                }
            }
            Op::Softmax(a) => {
                let y = self.value(i);
                let cols = *y.shape().last().expect("rank checked at build");
                let da = slot(adjoints, *a, y.len());
                for r in 0..y.len() / cols {
                    let p = &y.data()[r * cols..(r + 1) * cols];
                    let dr = &dy[r * cols..(r + 1) * cols];
                    let inner: f64 = p.iter().zip(dr).map(|(pi, di)| pi * di).sum();
                    for c in 0..cols {
                        da[r * cols + c] += p[c] * (dr[c] - inner);
                    }
                }
            }
            Op::L2Normalize(a, axis) => {
                let (va, y) = (self.value(*a), self.value(i));
                let da = slot(adjoints, *a, va.len());
                for sl in slices(va.shape(), *axis) {
                    let idx: Vec<usize> = sl.collect();
                    let norm = idx
                        .iter()
                        .map(|&j| va.data()[j] * va.data()[j])
                        .sum::<f64>()
                        .sqrt();
                    let inner: f64 = idx.iter().map(|&j| y.data()[j] * dy[j]).sum();
                    for &j in &idx {
                        da[j] += (dy[j] - y.data()[j] * inner) / norm;
                    }
                }
            }
            Op::L2Norm(a) => {
                let va = self.value(*a);
                let r = self.value(i).item().max(NORM_EPS);
                let da = slot(adjoints, *a, va.len());
                for (j, x) in va.data().iter().enumerate() {
                    da[j] += dy[0] * x / r;
                }
            }
            Op::SquaredDistance(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = slot(adjoints, *a, va.len());
                for (j, (x, y)) in va.data().iter().zip(vb.data()).enumerate() {
                    da[j] += dy[0] * 2.0 * (x - y);
                }
                let db = slot(adjoints, *b, vb.len());
                for (j, (x, y)) in va.data().iter().zip(vb.data()).enumerate() {
                    db[j] -= dy[0] * 2.0 * (x - y);
                }
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                let da = slot(adjoints, *a, va.len());
                for (j, d) in dy.iter().enumerate() {
                    let x = va.data()[j];
                    if x >= *lo && x <= *hi {
                        da[j] += d;
                    }
                }
            }
            Op::Scale(a, k) => {
                let len = self.value(*a).len();
                let da = slot(adjoints, *a, len);
                for (j, d) in dy.iter().enumerate() {
                    da[j] += d * k;
                }
            }
            Op::Concat(parts, axis) => {
                let out_shape = self.nodes[i].shape.clone();
                let mut offset = 0usize;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let len = self.value(p).len();
                    let dp = slot(adjoints, p, len);
                    scatter_concat(dy, &out_shape, &ps, *axis, offset, dp);
                    offset += ps[*axis];
                }
            }
            Op::Conv2d(input, kernel) => {
                let (vi, vk) = (self.value(*input), self.value(*kernel));
                let (di_len, dk_len) = (vi.len(), vk.len());
                {
                    let di = slot(adjoints, *input, di_len);
                    conv2d_backward_input(vi.shape(), vk, dy, di);
                }
                let dk = slot(adjoints, *kernel, dk_len);
                conv2d_backward_kernel(vi, vk.shape(), dy, dk);
            }
            Op::Reshape(a) => {
                let len = self.value(*a).len();
                let da = slot(adjoints, *a, len);
                for (j, d) in dy.iter().enumerate() {
                    da[j] += d;
                }
            }
            Op::AvgPool2(a) => {
                let va = self.value(*a);
                let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let (ho, wo) = (h / 2, w / 2);
                let da = slot(adjoints, *a, va.len());
                for ci in 0..c {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let d = dy[ci * ho * wo + oi * wo + oj] * 0.25;
                            for (r, s) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                da[ci * h * w + (2 * oi + r) * w + (2 * oj + s)] += d;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot(adjoints: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    adjoints[idx].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `f(j, dy[j])` into the adjoint of `target`, summing when the target
/// is a broadcast scalar.
fn accumulate_broadcast(
    adjoints: &mut [Option<Vec<f64>>],
    target: usize,
    target_len: usize,
    dy: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    let da = slot(adjoints, target, target_len);
    if target_len == dy.len() {
        for (j, d) in dy.iter().enumerate() {
            da[j] += f(j, *d);
        }
    } else {
        debug_assert_eq!(target_len, 1);
        let mut acc = 0.0;
        for (j, d) in dy.iter().enumerate() {
            acc += f(j, *d);
        }
        da[0] += acc;
    }
}

fn broadcast_zip(a: &DenseTensor, b: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (1, _) => b.data().iter().map(|&y| f(a.data()[0], y)).collect(),
        (_, 1) => a.data().iter().map(|&x| f(x, b.data()[0])).collect(),
        _ => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn promote_left(s: &[usize]) -> (usize, usize) {
    match s.len() {
        1 => (1, s[0]),
        _ => (s[0], s[1]),
    }
}

fn promote_right(s: &[usize]) -> (usize, usize) {
    match s.len() {
        1 => (s[0], 1),
        _ => (s[0], s[1]),
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Iterator over the flat-index slices normalized together by l2_normalize.
fn slices(shape: &[usize], axis: usize) -> Vec<std::vec::IntoIter<usize>> {
    match (shape.len(), axis) {
        (1, _) => vec![(0..shape[0]).collect::<Vec<_>>().into_iter()],
        (2, 1) => {
            let (rows, cols) = (shape[0], shape[1]);
            (0..rows)
                .map(|r| (r * cols..(r + 1) * cols).collect::<Vec<_>>().into_iter())
                .collect()
        }
        (2, 0) => {
            let (rows, cols) = (shape[0], shape[1]);
            (0..cols)
                .map(|c| (0..rows).map(|r| r * cols + c).collect::<Vec<_>>().into_iter())
                .collect()
        }
        _ => unreachable!("rank/axis checked at build"),
    }
}

fn concat_forward(tensors: &[&DenseTensor], axis: usize, out_shape: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; out_shape.iter().product()];
    if out_shape.len() == 1 || axis == 0 {
        let mut pos = 0;
        for t in tensors {
            out[pos..pos + t.len()].copy_from_slice(t.data());
            pos += t.len();
        }
    } else {
        let rows = out_shape[0];
        let out_cols = out_shape[1];
        let mut col_off = 0;
        for t in tensors {
            let cols = t.shape()[1];
            for r in 0..rows {
                out[r * out_cols + col_off..r * out_cols + col_off + cols]
                    .copy_from_slice(&t.data()[r * cols..(r + 1) * cols]);
            }
            col_off += cols;
        }
    }
    out
}

fn scatter_concat(
    dy: &[f64],
    out_shape: &[usize],
    part_shape: &[usize],
    axis: usize,
    offset: usize,
    dp: &mut [f64],
) {
    if out_shape.len() == 1 || axis == 0 {
        let part_len: usize = part_shape.iter().product();
        let row_len: usize = if out_shape.len() == 1 { 1 } else { out_shape[1] };
        let start = offset * row_len;
        for j in 0..part_len {
            dp[j] += dy[start + j];
        }
    } else {
        let rows = out_shape[0];
        let out_cols = out_shape[1];
        let cols = part_shape[1];
        for r in 0..rows {
            for c in 0..cols {
                dp[r * cols + c] += dy[r * out_cols + offset + c];
            }
        }
    }
}

fn conv2d_forward(input: &DenseTensor, kernel: &DenseTensor) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (f, _, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; f * ho * wo];
    let (xd, kd) = (input.data(), kernel.data());
    for fi in 0..f {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c {
                    for r in 0..kh {
                        for s in 0..kw {
                            acc += xd[ci * h * w + (oi + r) * w + (oj + s)]
                                * kd[fi * c * kh * kw + ci * kh * kw + r * kw + s];
                        }
                    }
                }
                out[fi * ho * wo + oi * wo + oj] = acc;
            }
        }
    }
    out
}

fn conv2d_backward_input(in_shape: &[usize], kernel: &DenseTensor, dy: &[f64], di: &mut [f64]) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (f, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let kd = kernel.data();
    for fi in 0..f {
        for oi in 0..ho {
            for oj in 0..wo {
                let d = dy[fi * ho * wo + oi * wo + oj];
                if d == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    for r in 0..kh {
                        for s in 0..kw {
                            di[ci * h * w + (oi + r) * w + (oj + s)] +=
                                d * kd[fi * c * kh * kw + ci * kh * kw + r * kw + s];
                        }
                    }
                }
            }
        }
    }
}

fn avg_pool2_forward(input: &DenseTensor) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    let xd = input.data();
    for ci in 0..c {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = 0.0;
                for (r, s) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    acc += xd[ci * h * w + (2 * oi + r) * w + (2 * oj + s)];
                }
                out[ci * ho * wo + oi * wo + oj] = acc * 0.25;
            }
        }
    }
    out
}

fn conv2d_backward_kernel(input: &DenseTensor, k_shape: &[usize], dy: &[f64], dk: &mut [f64]) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (f, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let xd = input.data();
    for fi in 0..f {
        for oi in 0..ho {
            for oj in 0..wo {
                let d = dy[fi * ho * wo + oi * wo + oj];
                if d == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    for r in 0..kh {
                        for s in 0..kw {
                            dk[fi * c * kh * kw + ci * kh * kw + r * kw + s] +=
                                d * xd[ci * h * w + (oi + r) * w + (oj + s)];
                        }
                    }
                }
            }
        }
    }
}
