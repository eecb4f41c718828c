//! Dense f64 tensors on a reverse-mode tape.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse creation order (a valid reverse topological order, since an
//! op can only consume already-created tensors) and accumulates gradients.
//! A tensor used by several consumers receives the *sum* of their gradient
//! contributions, which is exactly the mechanism that makes cross-layer
//! parameter sharing work.

use crate::error::{Error, Result};

/// Handle to a tensor stored on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(pub(crate) usize);

/// Plain dense value. Row-major, f64 only.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Raw 2D matrix multiply: a[m,k] * b[k,n] -> out[m,n].
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const MASK_NEG: f64 = -1.0e30;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Bmm { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    SoftmaxLastDim { a: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Gelu { a: TensorId },
    Embedding { table: TensorId, ids: Vec<usize> },
    CrossEntropy { logits: TensorId, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    Reshape { a: TensorId },
    TransposeLast2 { a: TensorId },
    SplitHeads { a: TensorId, n_heads: usize },
    MergeHeads { a: TensorId, n_heads: usize },
    CausalMask { a: TensorId },
    Sum { a: TensorId },
    Mean { a: TensorId },
}

struct Node {
    t: Tensor,
    op: Op,
}

/// Append-only record of operations; reverse traversal is the backward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor (parameter or input).
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        Ok(self.leaf(Tensor::from_vec(data, shape)?))
    }

    /// Insert a trainable leaf.
    pub fn param(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        let mut t = Tensor::from_vec(data, shape)?;
        t.requires_grad = true;
        Ok(self.leaf(t))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].t
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].t.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].t.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].t.grad.as_deref()
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { t, op });
        id
    }

    fn push_op(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> TensorId {
        let t = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push(t, op)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].t.requires_grad
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// 2D matrix product a[m,k] * b[k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::Dimension { op: "matmul", lhs: ash, rhs: bsh });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_op(data, vec![m, n], Op::MatMul { a, b }, rg))
    }

    /// Batched matrix product a[b,m,k] * b[b,k,n].
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::Dimension { op: "bmm", lhs: ash, rhs: bsh });
        }
        let (nb, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut data = vec![0.0; nb * m * n];
        for i in 0..nb {
            let sa = &self.data(a)[i * m * k..(i + 1) * m * k];
            let sb = &self.data(b)[i * k * n..(i + 1) * k * n];
            data[i * m * n..(i + 1) * m * n].copy_from_slice(&matmul_raw(sa, sb, m, k, n));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_op(data, vec![nb, m, n], Op::Bmm { a, b }, rg))
    }

    /// Elementwise addition. Shapes must be equal, or rhs must be a trailing
    /// suffix of lhs (broadcast over the leading dimensions).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    /// Elementwise product, same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn binary_elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !trailing_broadcast_ok(&ash, &bsh) {
            return Err(Error::Dimension { op: name, lhs: ash, rhs: bsh });
        }
        let bn: usize = bsh.iter().product();
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, self.data(b)[i % bn]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_op(data, ash, op, rg))
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push_op(data, shape, Op::Scale { a, c }, rg)
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Contract("softmax on 0-d tensor".into()))?;
        if d == 0 {
            return Err(Error::Contract("softmax over empty last dimension".into()));
        }
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for (row_out, row_in) in data.chunks_mut(d).zip(src.chunks(d)) {
            let mx = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in row_out.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push_op(data, shape, Op::SoftmaxLastDim { a }, rg))
    }

    /// Layer normalization over the last dimension followed by the affine map
    /// `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Contract("layernorm on 0-d tensor".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut data = vec![0.0; src.len()];
        for (row_out, row_in) in data.chunks_mut(d).zip(src.chunks(d)) {
            let mean = row_in.iter().sum::<f64>() / d as f64;
            let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                row_out[j] = (row_in[j] - mean) * inv_std * g[j] + bt[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push_op(data, shape, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push_op(data, shape, Op::Gelu { a }, rg)
    }

    /// Gather rows of `table[vocab, dim]` for token ids laid out as
    /// `batch_shape` (e.g. `[batch, seq]`); output shape is `batch_shape + [dim]`.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize], batch_shape: &[usize]) -> Result<TensorId> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(Error::Dimension { op: "embedding_lookup", lhs: tsh, rhs: vec![] });
        }
        let (vocab, dim) = (tsh[0], tsh[1]);
        let n: usize = batch_shape.iter().product();
        if n != ids.len() {
            return Err(Error::Contract(format!(
                "embedding ids length {} does not match batch shape {:?}",
                ids.len(),
                batch_shape
            )));
        }
        let mut data = vec![0.0; n * dim];
        for (i, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Index { what: "embedding vocab", index: id, bound: vocab });
            }
            data[i * dim..(i + 1) * dim].copy_from_slice(&self.data(table)[id * dim..(id + 1) * dim]);
        }
        let mut shape = batch_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push_op(data, shape, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Mean cross-entropy of `logits[n, vocab]` against class indices.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let mask = vec![true; targets.len()];
        self.cross_entropy_masked(logits, targets, &mask)
    }

    /// Cross-entropy averaged over the rows where `mask` is true.
    pub fn cross_entropy_masked(&mut self, logits: TensorId, targets: &[usize], mask: &[bool]) -> Result<TensorId> {
        let lsh = self.shape(logits).to_vec();
        if lsh.len() != 2 {
            return Err(Error::Dimension { op: "cross_entropy", lhs: lsh, rhs: vec![] });
        }
        let (n, vocab) = (lsh[0], lsh[1]);
        if targets.len() != n || mask.len() != n {
            return Err(Error::Contract(format!(
                "cross_entropy expects {} targets/mask entries, got {}/{}",
                n,
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy mask selects no rows".into()));
        }
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= vocab {
                return Err(Error::Index { what: "cross_entropy target", index: t, bound: vocab });
            }
            let row = &self.data(logits)[i * vocab..(i + 1) * vocab];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
            total += lse - row[t];
        }
        let rg = self.rg(logits);
        Ok(self.push_op(
            vec![total / count as f64],
            vec![1],
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), count },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push_op(data, new_shape.to_vec(), Op::Reshape { a }, rg))
    }

    /// Swap the last two dimensions (2D transpose, batched for 3D inputs).
    pub fn transpose_last2(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension { op: "transpose_last2", lhs: shape, rhs: vec![] });
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let nb: usize = shape[..shape.len() - 2].iter().product();
        let mut data = vec![0.0; nb * m * n];
        for i in 0..nb {
            let s = &self.data(a)[i * m * n..(i + 1) * m * n];
            data[i * m * n..(i + 1) * m * n].copy_from_slice(&transpose_raw(s, m, n));
        }
        let mut new_shape = shape.clone();
        let l = new_shape.len();
        new_shape.swap(l - 2, l - 1);
        let rg = self.rg(a);
        Ok(self.push_op(data, new_shape, Op::TransposeLast2 { a }, rg))
    }

    /// `[batch, seq, heads*dh]` -> `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, a: TensorId, n_heads: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[2] % n_heads != 0 {
            return Err(Error::Dimension { op: "split_heads", lhs: shape, rhs: vec![n_heads] });
        }
        let (b, t, h) = (shape[0], shape[1], shape[2]);
        let dh = h / n_heads;
        let mut data = vec![0.0; b * t * h];
        let src = self.data(a);
        for bi in 0..b {
            for ti in 0..t {
                for hh in 0..n_heads {
                    let dst = ((bi * n_heads + hh) * t + ti) * dh;
                    let from = (bi * t + ti) * h + hh * dh;
                    data[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push_op(data, vec![b * n_heads, t, dh], Op::SplitHeads { a, n_heads }, rg))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: TensorId, n_heads: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[0] % n_heads != 0 {
            return Err(Error::Dimension { op: "merge_heads", lhs: shape, rhs: vec![n_heads] });
        }
        let (bh, t, dh) = (shape[0], shape[1], shape[2]);
        let b = bh / n_heads;
        let h = n_heads * dh;
        let mut data = vec![0.0; b * t * h];
        let src = self.data(a);
        for bi in 0..b {
            for ti in 0..t {
                for hh in 0..n_heads {
                    let from = ((bi * n_heads + hh) * t + ti) * dh;
                    let dst = (bi * t + ti) * h + hh * dh;
                    data[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push_op(data, vec![b, t, h], Op::MergeHeads { a, n_heads }, rg))
    }

    /// Replace entries above the diagonal of each `[seq, seq]` score matrix
    /// with a large negative constant so softmax assigns them zero weight.
    pub fn causal_mask(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::Dimension { op: "causal_mask", lhs: shape, rhs: vec![] });
        }
        let (nb, t) = (shape[0], shape[1]);
        let mut data = self.data(a).to_vec();
        for bi in 0..nb {
            for i in 0..t {
                for j in (i + 1)..t {
                    data[(bi * t + i) * t + j] = MASK_NEG;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push_op(data, shape, Op::CausalMask { a }, rg))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push_op(vec![s], vec![1], Op::Sum { a }, rg)
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.data(a).iter().sum::<f64>() / n;
        let rg = self.rg(a);
        self.push_op(vec![s], vec![1], Op::Mean { a }, rg)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate `grad` on every reachable `requires_grad` tensor.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        for node in &mut self.nodes {
            if node.t.requires_grad {
                node.t.grad = Some(vec![0.0; node.t.data.len()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].t.grad.as_mut() {
            g[0] = 1.0;
        } else {
            // Loss does not depend on any trainable input; nothing to do.
            return Ok(());
        }

        for i in (0..n).rev() {
            if i > loss.0 || !self.nodes[i].t.requires_grad {
                continue;
            }
            let grad = match &self.nodes[i].t.grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}

                Op::MatMul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n2 = self.shape(b)[1];
                    if self.rg(a) {
                        let bt = transpose_raw(self.data(b), k, n2);
                        let da = matmul_raw(&grad, &bt, m, n2, k);
                        self.accumulate(a, &da);
                    }
                    if self.rg(b) {
                        let at = transpose_raw(self.data(a), m, k);
                        let db = matmul_raw(&at, &grad, k, m, n2);
                        self.accumulate(b, &db);
                    }
                }

                Op::Bmm { a, b } => {
                    let ash = self.shape(a).to_vec();
                    let (nb, m, k) = (ash[0], ash[1], ash[2]);
                    let n2 = self.shape(b)[2];
                    if self.rg(a) {
                        let mut da = vec![0.0; nb * m * k];
                        for bi in 0..nb {
                            let g = &grad[bi * m * n2..(bi + 1) * m * n2];
                            let sb = &self.data(b)[bi * k * n2..(bi + 1) * k * n2];
                            let bt = transpose_raw(sb, k, n2);
                            da[bi * m * k..(bi + 1) * m * k].copy_from_slice(&matmul_raw(g, &bt, m, n2, k));
                        }
                        self.accumulate(a, &da);
                    }
                    if self.rg(b) {
                        let mut db = vec![0.0; nb * k * n2];
                        for bi in 0..nb {
                            let g = &grad[bi * m * n2..(bi + 1) * m * n2];
                            let sa = &self.data(a)[bi * m * k..(bi + 1) * m * k];
                            let at = transpose_raw(sa, m, k);
                            db[bi * k * n2..(bi + 1) * k * n2].copy_from_slice(&matmul_raw(&at, g, k, m, n2));
                        }
                        self.accumulate(b, &db);
                    }
                }

                Op::Add { a, b } => {
                    if self.rg(a) {
                        self.accumulate(a, &grad);
                    }
                    if self.rg(b) {
                        let db = reduce_to_suffix(&grad, self.value(b).numel());
                        self.accumulate(b, &db);
                    }
                }

                Op::Mul { a, b } => {
                    let bn = self.value(b).numel();
                    if self.rg(a) {
                        let bdata = self.data(b);
                        let da: Vec<f64> = grad.iter().enumerate().map(|(i, &g)| g * bdata[i % bn]).collect();
                        self.accumulate(a, &da);
                    }
                    if self.rg(b) {
                        let adata = self.data(a);
                        let full: Vec<f64> = grad.iter().zip(adata).map(|(&g, &x)| g * x).collect();
                        let db = reduce_to_suffix(&full, bn);
                        self.accumulate(b, &db);
                    }
                }

                Op::Scale { a, c } => {
                    if self.rg(a) {
                        let da: Vec<f64> = grad.iter().map(|&g| g * c).collect();
                        self.accumulate(a, &da);
                    }
                }

                Op::SoftmaxLastDim { a } => {
                    if self.rg(a) {
                        let d = *self.shape(i_id(i)).last().unwrap();
                        let out = self.data(i_id(i));
                        let mut da = vec![0.0; out.len()];
                        for r in 0..out.len() / d {
                            let o = &out[r * d..(r + 1) * d];
                            let g = &grad[r * d..(r + 1) * d];
                            let dot: f64 = o.iter().zip(g).map(|(&s, &gv)| s * gv).sum();
                            for j in 0..d {
                                da[r * d + j] = o[j] * (g[j] - dot);
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }

                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *self.shape(x).last().unwrap();
                    let src = self.data(x).to_vec();
                    let gdata = self.data(gamma).to_vec();
                    let rows = src.len() / d;
                    let mut dx = vec![0.0; src.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        let xr = &src[r * d..(r + 1) * d];
                        let gr = &grad[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> = gr.iter().zip(&gdata).map(|(&g, &gm)| g * gm).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(&a2, &b2)| a2 * b2).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                            dx[r * d + j] = inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    if self.rg(x) {
                        self.accumulate(x, &dx);
                    }
                    if self.rg(gamma) {
                        self.accumulate(gamma, &dgamma);
                    }
                    if self.rg(beta) {
                        self.accumulate(beta, &dbeta);
                    }
                }

                Op::Gelu { a } => {
                    if self.rg(a) {
                        let src = self.data(a);
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(src)
                            .map(|(&g, &x)| {
                                let inner = GELU_C * (x + 0.044715 * x * x * x);
                                let th = inner.tanh();
                                let sech2 = 1.0 - th * th;
                                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                                g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * dinner)
                            })
                            .collect();
                        self.accumulate(a, &da);
                    }
                }

                Op::Embedding { table, ids } => {
                    if self.rg(table) {
                        let dim = self.shape(table)[1];
                        let mut dt = vec![0.0; self.value(table).numel()];
                        for (i2, &id) in ids.iter().enumerate() {
                            for j in 0..dim {
                                dt[id * dim + j] += grad[i2 * dim + j];
                            }
                        }
                        self.accumulate(table, &dt);
                    }
                }

                Op::CrossEntropy { logits, targets, mask, count } => {
                    if self.rg(logits) {
                        let vocab = self.shape(logits)[1];
                        let src = self.data(logits);
                        let mut dl = vec![0.0; src.len()];
                        let g0 = grad[0] / count as f64;
                        for (r, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
                            if !m {
                                continue;
                            }
                            let row = &src[r * vocab..(r + 1) * vocab];
                            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
                            let z: f64 = exps.iter().sum();
                            for c in 0..vocab {
                                let p = exps[c] / z;
                                dl[r * vocab + c] = g0 * (p - if c == t { 1.0 } else { 0.0 });
                            }
                        }
                        self.accumulate(logits, &dl);
                    }
                }

                Op::Reshape { a } => {
                    if self.rg(a) {
                        self.accumulate(a, &grad);
                    }
                }

                Op::TransposeLast2 { a } => {
                    if self.rg(a) {
                        let out_shape = self.shape(i_id(i)).to_vec();
                        let (m, n2) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                        let nb: usize = out_shape[..out_shape.len() - 2].iter().product();
                        let mut da = vec![0.0; grad.len()];
                        for bi in 0..nb {
                            let g = &grad[bi * m * n2..(bi + 1) * m * n2];
                            da[bi * m * n2..(bi + 1) * m * n2].copy_from_slice(&transpose_raw(g, m, n2));
                        }
                        self.accumulate(a, &da);
                    }
                }

                Op::SplitHeads { a, n_heads } => {
                    if self.rg(a) {
                        let ash = self.shape(a).to_vec();
                        let (b, t, h) = (ash[0], ash[1], ash[2]);
                        let dh = h / n_heads;
                        let mut da = vec![0.0; b * t * h];
                        for bi in 0..b {
                            for ti in 0..t {
                                for hh in 0..n_heads {
                                    let src_i = ((bi * n_heads + hh) * t + ti) * dh;
                                    let dst = (bi * t + ti) * h + hh * dh;
                                    da[dst..dst + dh].copy_from_slice(&grad[src_i..src_i + dh]);
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }

                Op::MergeHeads { a, n_heads } => {
                    if self.rg(a) {
                        let ash = self.shape(a).to_vec();
                        let (bh, t, dh) = (ash[0], ash[1], ash[2]);
                        let b = bh / n_heads;
                        let h = n_heads * dh;
                        let mut da = vec![0.0; bh * t * dh];
                        for bi in 0..b {
                            for ti in 0..t {
                                for hh in 0..n_heads {
                                    let dst = ((bi * n_heads + hh) * t + ti) * dh;
                                    let src_i = (bi * t + ti) * h + hh * dh;
                                    da[dst..dst + dh].copy_from_slice(&grad[src_i..src_i + dh]);
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }

                Op::CausalMask { a } => {
                    if self.rg(a) {
                        let shape = self.shape(a).to_vec();
                        let (nb, t) = (shape[0], shape[1]);
                        let mut da = grad.clone();
                        for bi in 0..nb {
                            for ii in 0..t {
                                for j in (ii + 1)..t {
                                    da[(bi * t + ii) * t + j] = 0.0;
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }

                Op::Sum { a } => {
                    if self.rg(a) {
                        let da = vec![grad[0]; self.value(a).numel()];
                        self.accumulate(a, &da);
                    }
                }

                Op::Mean { a } => {
                    if self.rg(a) {
                        let n2 = self.value(a).numel();
                        let da = vec![grad[0] / n2 as f64; n2];
                        self.accumulate(a, &da);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contribution: &[f64]) {
        let g = self.nodes[id.0]
            .t
            .grad
            .get_or_insert_with(|| vec![0.0; contribution.len()]);
        for (dst, src) in g.iter_mut().zip(contribution) {
            *dst += src;
        }
    }
}

fn i_id(i: usize) -> TensorId {
    TensorId(i)
}

fn trailing_broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    if b.len() > a.len() {
        return false;
    }
    a[a.len() - b.len()..] == *b
}

/// Fold a gradient of shape `[..., suffix]` down to the suffix by summing the
/// leading dimensions.
fn reduce_to_suffix(grad: &[f64], suffix_numel: usize) -> Vec<f64> {
    if grad.len() == suffix_numel {
        return grad.to_vec();
    }
    let mut out = vec![0.0; suffix_numel];
    for (i, &g) in grad.iter().enumerate() {
        out[i % suffix_numel] += g;
    }
    out
}
