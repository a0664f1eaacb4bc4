use std::collections::BTreeMap;

use super::{matmul_raw, transpose_raw, Element, Tensor};
use crate::error::{MoleError, Result};

/// A value flowing through a [`Tape`]. `node` is set only when the value
/// depends on some gradient-requiring leaf.
#[derive(Debug, Clone)]
pub struct Var<T> {
    value: Tensor<T>,
    node: Option<usize>,
}

impl<T: Element> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Self {
            value: value.detached(),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf {
        name: String,
    },
    MatMul {
        // a is saved for b's gradient and vice versa; only when needed.
        a: Option<Vec<T>>,
        b: Option<Vec<T>>,
        p: usize,
        q: usize,
        r: usize,
    },
    Transpose {
        rows: usize,
        cols: usize,
    },
    Add,
    AddRowBias {
        cols: usize,
    },
    Sub,
    Mul {
        a: Option<Vec<T>>,
        b: Option<Vec<T>>,
    },
    MulColumn {
        a: Option<Vec<T>>,
        col: Option<Vec<T>>,
        cols: usize,
    },
    MulScalar {
        a: Option<Vec<T>>,
        s: T,
    },
    Scale {
        c: T,
    },
    Sigmoid {
        out: Vec<T>,
    },
    Silu {
        x: Vec<T>,
    },
    MeanPool {
        rows: usize,
        cols: usize,
    },
    Reshape,
    Column {
        rows: usize,
        cols: usize,
        j: usize,
    },
    Select {
        len: usize,
        i: usize,
    },
    Sum {
        len: usize,
    },
    Mean {
        len: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    parents: [Option<usize>; 2],
}

/// Define-by-run gradient tape. Build a fresh one for every forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients keyed by the name each parameter was registered under.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Vec<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.by_name.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    /// Adds `other` scaled by `weight` into `self`.
    pub fn accumulate(&mut self, other: &Gradients<T>, weight: T) {
        for (name, g) in &other.by_name {
            let slot = self
                .by_name
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for (s, &v) in slot.iter_mut().zip(g) {
                *s = *s + weight * v;
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.by_name.values_mut() {
            for v in g.iter_mut() {
                *v = *v * c;
            }
        }
    }
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a = *a + c;
            }
        }
        None => *slot = Some(contrib),
    }
}

pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // Keep outputs inside the open interval even where rounding would saturate.
    let hi = one - T::epsilon() / (one + one);
    s.max(T::min_positive_value()).min(hi)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that never records; every result is a constant.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var::constant(value)
    }

    /// Registers a parameter. A node is recorded only when the tensor
    /// requires grad and the tape is recording.
    pub fn param(&mut self, name: &str, tensor: &Tensor<T>) -> Var<T> {
        let value = tensor.detached();
        if self.recording && tensor.requires_grad() {
            let id = self.push(
                Op::Leaf {
                    name: name.to_string(),
                },
                [None, None],
            );
            Var {
                value,
                node: Some(id),
            }
        } else {
            Var { value, node: None }
        }
    }

    fn push(&mut self, op: Op<T>, parents: [Option<usize>; 2]) -> usize {
        self.nodes.push(Node { op, parents });
        self.nodes.len() - 1
    }

    fn emit(
        &mut self,
        value: Tensor<T>,
        parents: [Option<usize>; 2],
        op: impl FnOnce() -> Op<T>,
    ) -> Var<T> {
        let node = if self.recording && parents.iter().any(Option::is_some) {
            Some(self.push(op(), parents))
        } else {
            None
        };
        Var { value, node }
    }

    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (p, q) = a.value.dims2("matmul")?;
        let (q2, r) = b.value.dims2("matmul")?;
        if q != q2 {
            return Err(MoleError::dim("matmul", a.shape(), b.shape()));
        }
        let out = matmul_raw(a.value.data(), b.value.data(), p, q, r);
        let value = Tensor::new([p, r], out)?;
        let parents = [a.node, b.node];
        Ok(self.emit(value, parents, || Op::MatMul {
            a: b.node.map(|_| a.value.data().to_vec()),
            b: a.node.map(|_| b.value.data().to_vec()),
            p,
            q,
            r,
        }))
    }

    pub fn transpose(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let (rows, cols) = a.value.dims2("transpose")?;
        let value = Tensor::new([cols, rows], transpose_raw(a.value.data(), rows, cols))?;
        Ok(self.emit(value, [a.node, None], || Op::Transpose { rows, cols }))
    }

    /// `a + b` for equal shapes, or `a[n×d] + b[d]` with `b` broadcast over rows.
    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() == b.shape() {
            let data = zip_map(a.value.data(), b.value.data(), |x, y| x + y);
            let value = Tensor::new(a.shape(), data)?;
            return Ok(self.emit(value, [a.node, b.node], || Op::Add));
        }
        let (_, cols) = a.value.dims2("add")?;
        let bias_like = match b.shape() {
            [d] | [1, d] => *d == cols,
            _ => false,
        };
        if !bias_like {
            return Err(MoleError::dim("add", a.shape(), b.shape()));
        }
        let bias = b.value.data();
        let data = a
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| x + bias[k % cols])
            .collect();
        let value = Tensor::new(a.shape(), data)?;
        Ok(self.emit(value, [a.node, b.node], || Op::AddRowBias { cols }))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(MoleError::dim("sub", a.shape(), b.shape()));
        }
        let data = zip_map(a.value.data(), b.value.data(), |x, y| x - y);
        let value = Tensor::new(a.shape(), data)?;
        Ok(self.emit(value, [a.node, b.node], || Op::Sub))
    }

    /// Elementwise product. `b` may match `a`'s shape, be a per-token column
    /// `[n×1]` broadcast across `a[n×d]`, or hold a single scalar.
    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() == b.shape() {
            let data = zip_map(a.value.data(), b.value.data(), |x, y| x * y);
            let value = Tensor::new(a.shape(), data)?;
            return Ok(self.emit(value, [a.node, b.node], || Op::Mul {
                a: b.node.map(|_| a.value.data().to_vec()),
                b: a.node.map(|_| b.value.data().to_vec()),
            }));
        }
        if b.value.numel() == 1 {
            let s = b.value.data()[0];
            let data = a.value.data().iter().map(|&x| x * s).collect();
            let value = Tensor::new(a.shape(), data)?;
            return Ok(self.emit(value, [a.node, b.node], || Op::MulScalar {
                a: b.node.map(|_| a.value.data().to_vec()),
                s,
            }));
        }
        let (rows, cols) = a.value.dims2("mul")?;
        if b.shape() != [rows, 1] {
            return Err(MoleError::dim("mul", a.shape(), b.shape()));
        }
        let col = b.value.data();
        let data = a
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| x * col[k / cols])
            .collect();
        let value = Tensor::new(a.shape(), data)?;
        Ok(self.emit(value, [a.node, b.node], || Op::MulColumn {
            a: b.node.map(|_| a.value.data().to_vec()),
            col: a.node.map(|_| col.to_vec()),
            cols,
        }))
    }

    pub fn scale(&mut self, a: &Var<T>, c: f64) -> Var<T> {
        let c = T::from_f64_lossy(c);
        let data = a.value.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(a.shape(), data).expect("same shape");
        self.emit(value, [a.node, None], || Op::Scale { c })
    }

    pub fn sigmoid(&mut self, a: &Var<T>) -> Var<T> {
        let data: Vec<T> = a.value.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let value = Tensor::new(a.shape(), data).expect("same shape");
        let out = a.node.map(|_| value.data().to_vec()).unwrap_or_default();
        self.emit(value, [a.node, None], || Op::Sigmoid { out })
    }

    /// x·sigmoid(x).
    pub fn silu(&mut self, a: &Var<T>) -> Var<T> {
        let data = a
            .value
            .data()
            .iter()
            .map(|&x| x * sigmoid_scalar(x))
            .collect();
        let value = Tensor::new(a.shape(), data).expect("same shape");
        self.emit(value, [a.node, None], || Op::Silu {
            x: a.value.data().to_vec(),
        })
    }

    /// Column mean over the token axis: `[n×d] -> [d]`.
    ///
    /// Rows are summed sequentially in index order, so a row permutation can
    /// change the result by rounding only (observed well under 1e-12 in f64).
    pub fn mean_pool_tokens(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let (rows, cols) = x.value.dims2("mean_pool_tokens")?;
        if rows == 0 {
            return Err(MoleError::EmptyInput {
                op: "mean_pool_tokens",
            });
        }
        let data = x.value.data();
        let mut acc = vec![T::zero(); cols];
        for row in data.chunks_exact(cols) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        let n = T::from_usize(rows).expect("row count");
        for a in acc.iter_mut() {
            *a = *a / n;
        }
        let value = Tensor::new([cols], acc)?;
        Ok(self.emit(value, [x.node, None], || Op::MeanPool { rows, cols }))
    }

    pub fn reshape(&mut self, a: &Var<T>, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != a.value.numel() {
            return Err(MoleError::dim("reshape", a.shape(), &shape));
        }
        let value = Tensor::new(shape, a.value.data().to_vec())?;
        Ok(self.emit(value, [a.node, None], || Op::Reshape))
    }

    /// Column `j` of an `[n×e]` matrix as an `[n×1]` matrix.
    pub fn column(&mut self, a: &Var<T>, j: usize) -> Result<Var<T>> {
        let (rows, cols) = a.value.dims2("column")?;
        if j >= cols {
            return Err(MoleError::Contract(format!(
                "column index {j} out of range for {} columns",
                cols
            )));
        }
        let data = (0..rows).map(|i| a.value.get2(i, j)).collect();
        let value = Tensor::new([rows, 1], data)?;
        Ok(self.emit(value, [a.node, None], || Op::Column { rows, cols, j }))
    }

    /// Entry `i` of a flat view as a one-element tensor.
    pub fn select(&mut self, a: &Var<T>, i: usize) -> Result<Var<T>> {
        let len = a.value.numel();
        if i >= len {
            return Err(MoleError::Contract(format!(
                "index {i} out of range for {len} entries"
            )));
        }
        let value = Tensor::scalar(a.value.data()[i]);
        Ok(self.emit(value, [a.node, None], || Op::Select { len, i }))
    }

    pub fn sum(&mut self, a: &Var<T>) -> Var<T> {
        let len = a.value.numel();
        let total = a.value.data().iter().fold(T::zero(), |s, &v| s + v);
        self.emit(Tensor::scalar(total), [a.node, None], || Op::Sum { len })
    }

    pub fn mean(&mut self, a: &Var<T>) -> Var<T> {
        let len = a.value.numel();
        let total = a.value.data().iter().fold(T::zero(), |s, &v| s + v);
        let n = T::from_usize(len).expect("length");
        self.emit(Tensor::scalar(total / n), [a.node, None], || Op::Mean {
            len,
        })
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// registered with `requires_grad`; constants receive nothing.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(MoleError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut out = Gradients::default();
        let Some(root) = loss.node else {
            return Ok(out);
        };
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![T::one()]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let [pa, pb] = node.parents;
            match &node.op {
                Op::Leaf { name } => {
                    let mut slot = out.by_name.remove(name);
                    add_into(&mut slot, g);
                    out.by_name.insert(name.clone(), slot.expect("just set"));
                }
                Op::MatMul { a, b, p, q, r } => {
                    let (p, q, r) = (*p, *q, *r);
                    if let (Some(pa), Some(b)) = (pa, b) {
                        // dA = G·Bᵀ
                        let mut ga = vec![T::zero(); p * q];
                        for i in 0..p {
                            let grow = &g[i * r..(i + 1) * r];
                            for k in 0..q {
                                let brow = &b[k * r..(k + 1) * r];
                                ga[i * q + k] = dot(grow, brow);
                            }
                        }
                        add_into(&mut grads[pa], ga);
                    }
                    if let (Some(pb), Some(a)) = (pb, a) {
                        // dB = Aᵀ·G
                        let mut gb = vec![T::zero(); q * r];
                        for i in 0..p {
                            let grow = &g[i * r..(i + 1) * r];
                            for k in 0..q {
                                let aik = a[i * q + k];
                                let dst = &mut gb[k * r..(k + 1) * r];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d = *d + aik * gv;
                                }
                            }
                        }
                        add_into(&mut grads[pb], gb);
                    }
                }
                Op::Transpose { rows, cols } => {
                    if let Some(pa) = pa {
                        // g is [cols×rows]
                        add_into(&mut grads[pa], transpose_raw(&g, *cols, *rows));
                    }
                }
                Op::Add => {
                    if let Some(pa) = pa {
                        add_into(&mut grads[pa], g.clone());
                    }
                    if let Some(pb) = pb {
                        add_into(&mut grads[pb], g);
                    }
                }
                Op::AddRowBias { cols } => {
                    if let Some(pb) = pb {
                        let mut gb = vec![T::zero(); *cols];
                        for row in g.chunks_exact(*cols) {
                            for (d, &v) in gb.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        add_into(&mut grads[pb], gb);
                    }
                    if let Some(pa) = pa {
                        add_into(&mut grads[pa], g);
                    }
                }
                Op::Sub => {
                    if let Some(pb) = pb {
                        add_into(&mut grads[pb], g.iter().map(|&v| -v).collect());
                    }
                    if let Some(pa) = pa {
                        add_into(&mut grads[pa], g);
                    }
                }
                Op::Mul { a, b } => {
                    if let (Some(pa), Some(b)) = (pa, b) {
                        add_into(&mut grads[pa], zip_map(&g, b, |x, y| x * y));
                    }
                    if let (Some(pb), Some(a)) = (pb, a) {
                        add_into(&mut grads[pb], zip_map(&g, a, |x, y| x * y));
                    }
                }
                Op::MulColumn { a, col, cols } => {
                    if let (Some(pa), Some(col)) = (pa, col) {
                        let ga = g
                            .iter()
                            .enumerate()
                            .map(|(k, &v)| v * col[k / cols])
                            .collect();
                        add_into(&mut grads[pa], ga);
                    }
                    if let (Some(pb), Some(a)) = (pb, a) {
                        let gc = g
                            .chunks_exact(*cols)
                            .zip(a.chunks_exact(*cols))
                            .map(|(gr, ar)| dot(gr, ar))
                            .collect();
                        add_into(&mut grads[pb], gc);
                    }
                }
                Op::MulScalar { a, s } => {
                    if let (Some(pb), Some(a)) = (pb, a) {
                        add_into(&mut grads[pb], vec![dot(&g, a)]);
                    }
                    if let Some(pa) = pa {
                        add_into(&mut grads[pa], g.iter().map(|&v| v * *s).collect());
                    }
                }
                Op::Scale { c } => {
                    if let Some(pa) = pa {
                        add_into(&mut grads[pa], g.iter().map(|&v| v * *c).collect());
                    }
                }
                Op::Sigmoid { out } => {
                    if let Some(pa) = pa {
                        let one = T::one();
                        add_into(&mut grads[pa], zip_map(&g, out, |gv, s| gv * s * (one - s)));
                    }
                }
                Op::Silu { x } => {
                    if let Some(pa) = pa {
                        let one = T::one();
                        let gx = zip_map(&g, x, |gv, xv| {
                            let s = sigmoid_scalar(xv);
                            gv * s * (one + xv * (one - s))
                        });
                        add_into(&mut grads[pa], gx);
                    }
                }
                Op::MeanPool { rows, cols } => {
                    if let Some(pa) = pa {
                        let n = T::from_usize(*rows).expect("row count");
                        let per: Vec<T> = g.iter().map(|&v| v / n).collect();
                        let mut gx = Vec::with_capacity(rows * cols);
                        for _ in 0..*rows {
                            gx.extend_from_slice(&per);
                        }
                        add_into(&mut grads[pa], gx);
                    }
                }
                Op::Reshape => {
                    if let Some(pa) = pa {
                        add_into(&mut grads[pa], g);
                    }
                }
                Op::Column { rows, cols, j } => {
                    if let Some(pa) = pa {
                        let mut gx = vec![T::zero(); rows * cols];
                        for (i, &v) in g.iter().enumerate() {
                            gx[i * cols + j] = v;
                        }
                        add_into(&mut grads[pa], gx);
                    }
                }
                Op::Select { len, i } => {
                    if let Some(pa) = pa {
                        let mut gx = vec![T::zero(); *len];
                        gx[*i] = g[0];
                        add_into(&mut grads[pa], gx);
                    }
                }
                Op::Sum { len } => {
                    if let Some(pa) = pa {
                        add_into(&mut grads[pa], vec![g[0]; *len]);
                    }
                }
                Op::Mean { len } => {
                    if let Some(pa) = pa {
                        let n = T::from_usize(*len).expect("length");
                        add_into(&mut grads[pa], vec![g[0] / n; *len]);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}
