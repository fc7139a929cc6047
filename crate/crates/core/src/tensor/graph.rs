use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const COSINE_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    Cosine {
        a: Var,
        b: Var,
        a_norm: Vec<f64>,
        b_norm: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Dynamic tape. Nodes are appended in evaluation order, so construction
/// order is already a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Trainable leaf holding a copy of `t`; its gradient is tracked.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::new(t.shape.clone(), t.data.clone()).expect("valid tensor");
        value.requires_grad = true;
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(Op::Leaf, t, false)
    }

    /// Copies `v`'s current value into a fresh constant, cutting it out of
    /// differentiation.
    pub fn detach(&mut self, v: Var) -> Var {
        let val = self.value(v);
        let t = Tensor::new(val.shape.clone(), val.data.clone()).expect("valid tensor");
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Accumulated gradient of a trainable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.grad = None);
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                left: other.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, needs))
    }

    /// Elementwise sum. `b` may also be a vector matching `a`'s last axis,
    /// in which case it is broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let needs = self.needs(&[a, b]);
        if sa == sb {
            let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x + y);
            return Ok(self.push(Op::Add(a, b), Tensor::new(sa, data)?, needs));
        }
        let last = *sa.last().unwrap_or(&1);
        let is_bias = self.value(b).len() == last && sb.iter().rev().skip(1).all(|&d| d == 1);
        if !is_bias {
            return Err(Error::Shape {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let bias = &self.value(b).data;
        let data = self
            .value(a)
            .data
            .chunks(last)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(Op::AddBias(a, b), Tensor::new(sa, data)?, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                left: sa,
                right: self.shape(b).to_vec(),
            });
        }
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x * y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), Tensor::new(sa, data)?, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|x| x * c).collect())
            .expect("same shape");
        let needs = self.needs(&[a]);
        self.push(Op::Scale(a, c), t, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = &self.value(a).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Transpose(a), Tensor::new(vec![c, r], out)?, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape.clone(), v.data.clone())?.reshaped(shape.to_vec())?;
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Reshape(a), t, needs))
    }

    /// Concatenates 2-D tensors with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat of zero tensors"));
        };
        let (rows, _) = self.dims2(first, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat",
                    left: vec![rows],
                    right: vec![r],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Op::Concat(parts.to_vec()),
            Tensor::new(vec![rows, total], out)?,
            needs,
        ))
    }

    /// Stacks 2-D tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat of zero tensors"));
        };
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: vec![cols],
                    right: vec![c],
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(&self.value(p).data);
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::new(vec![rows, cols], out)?,
            needs,
        ))
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start + width > cols {
            return Err(Error::Index {
                what: "column slice end",
                index: start + width,
                bound: cols,
            });
        }
        let src = &self.value(a).data;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            Op::SliceCols(a, start),
            Tensor::new(vec![rows, width], out)?,
            needs,
        ))
    }

    /// Row lookup: `out[i] = table[ids[i]]`. Serves both embedding tables and
    /// picking positions out of hidden states.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "gather table",
                index: bad,
                bound: rows,
            });
        }
        let src = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Op::Gather(table, ids.to_vec()),
            Tensor::new(vec![ids.len(), cols], out)?,
            needs,
        ))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.last_dim();
        let mut out = v.data.clone();
        if n > 0 {
            out.chunks_mut(n).for_each(softmax_in_place);
        }
        let t = Tensor::new(v.shape.clone(), out).expect("same shape");
        let needs = self.needs(&[a]);
        self.push(Op::Softmax(a), t, needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.value(p).len() != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(xv.shape.clone(), out)?;
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            t,
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|&x| gelu(x)).collect())
            .expect("same shape");
        let needs = self.needs(&[a]);
        self.push(Op::Gelu(a), t, needs)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[B, V]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![b, v],
                right: vec![targets.len()],
            });
        }
        if b == 0 {
            return Err(Error::contract("cross_entropy over an empty batch"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                bound: v,
            });
        }
        let mut probs = self.value(logits).data.clone();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss / b as f64),
            needs,
        ))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data.iter().sum::<f64>() / v.len().max(1) as f64;
        let needs = self.needs(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(m), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let needs = self.needs(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), needs)
    }

    /// Pairwise cosine similarity between the rows of `a` (`[m, d]`) and the
    /// rows of `b` (`[n, d]`), giving `[m, n]`. Row norms are floored at 1e-8.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.dims2(a, "cosine_similarity")?;
        let (n, d2) = self.dims2(b, "cosine_similarity")?;
        if d != d2 {
            return Err(Error::Shape {
                op: "cosine_similarity",
                left: vec![m, d],
                right: vec![n, d2],
            });
        }
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let a_norm = row_norms(av, d);
        let b_norm = row_norms(bv, d);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let dot = dot(&av[i * d..(i + 1) * d], &bv[j * d..(j + 1) * d]);
                out[i * n + j] =
                    dot / (a_norm[i].max(COSINE_NORM_FLOOR) * b_norm[j].max(COSINE_NORM_FLOOR));
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Op::Cosine {
                a,
                b,
                a_norm,
                b_norm,
            },
            Tensor::new(vec![m, n], out)?,
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients land in the grad slots
    /// of trainable leaves and add to whatever is already there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.add_grad(&g);
                continue;
            }
            let node = &self.nodes[i];
            let send = |v: Var, delta: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    let av = &self.value(*a).data;
                    let bv = &self.value(*b).data;
                    if self.nodes[a.0].needs_grad {
                        send(*a, matmul_a_bt(&g, bv, m, n, k), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        send(*b, matmul_at_b(av, &g, m, k, n), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::AddBias(a, b) => {
                    let n = self.value(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    send(*b, gb, &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, &self.value(*b).data, |x, y| x * y);
                    let gb = zip_map(&g, &self.value(*a).data, |x, y| x * y);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Scale(a, c) => {
                    send(*a, g.iter().map(|x| x * c).collect(), &mut grads);
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = g[j * r + i];
                        }
                    }
                    send(*a, out, &mut grads);
                }
                Op::Reshape(a) => send(*a, g, &mut grads),
                Op::Concat(parts) => {
                    let rows = node.value.shape[0];
                    let total = node.value.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        send(p, gp, &mut grads);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        send(p, g[offset..offset + n].to_vec(), &mut grads);
                        offset += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    if !self.nodes[a.0].needs_grad {
                        continue;
                    }
                    let cols = self.shape(*a)[1];
                    let w = node.value.shape[1];
                    let len = self.value(*a).len();
                    let ga = grads[a.0].get_or_insert_with(|| vec![0.0; len]);
                    for (r, gr) in g.chunks(w).enumerate() {
                        let dst = &mut ga[r * cols + start..r * cols + start + w];
                        dst.iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                    }
                }
                Op::Gather(table, ids) => {
                    if !self.nodes[table.0].needs_grad {
                        continue;
                    }
                    let cols = self.shape(*table)[1];
                    let len = self.value(*table).len();
                    let gt = grads[table.0].get_or_insert_with(|| vec![0.0; len]);
                    for (k, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * cols..(id + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                            .for_each(|(d, s)| *d += s);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value.data;
                    let n = node.value.last_dim();
                    let mut out = vec![0.0; y.len()];
                    for ((o, yr), gr) in out.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            o[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    send(*a, out, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let n = node.value.last_dim();
                    let gv = &self.value(*gain).data;
                    let mut gx = vec![0.0; xhat.len()];
                    let mut ggain = vec![0.0; n];
                    let mut gbias = vec![0.0; n];
                    let nf = n as f64;
                    for r in 0..inv_std.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                            ggain[j] += gr[j] * hr[j];
                            gbias[j] += gr[j];
                        }
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            gx[r * n + j] = inv_std[r] / nf * (nf * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                    send(*x, gx, &mut grads);
                    send(*gain, ggain, &mut grads);
                    send(*bias, gbias, &mut grads);
                }
                Op::Gelu(a) => {
                    let xs = &self.value(*a).data;
                    send(*a, zip_map(&g, xs, |gi, x| gi * gelu_grad(x)), &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / targets.len() as f64;
                    let mut out: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        out[r * v + t] -= scale;
                    }
                    send(*logits, out, &mut grads);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    send(*a, vec![g[0] / n as f64; n], &mut grads);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    send(*a, vec![g[0]; n], &mut grads);
                }
                Op::Cosine {
                    a,
                    b,
                    a_norm,
                    b_norm,
                } => {
                    let (m, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[0];
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    let s = &node.value.data;
                    let mut ga = vec![0.0; m * d];
                    let mut gb = vec![0.0; n * d];
                    for i in 0..m {
                        let na = a_norm[i].max(COSINE_NORM_FLOOR);
                        // A floored norm is treated as a constant.
                        let ka = if a_norm[i] > COSINE_NORM_FLOOR {
                            1.0 / (na * na)
                        } else {
                            0.0
                        };
                        for j in 0..n {
                            let nb = b_norm[j].max(COSINE_NORM_FLOOR);
                            let kb = if b_norm[j] > COSINE_NORM_FLOOR {
                                1.0 / (nb * nb)
                            } else {
                                0.0
                            };
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let sij = s[i * n + j];
                            let inv = 1.0 / (na * nb);
                            for t in 0..d {
                                let x = av[i * d + t];
                                let y = bv[j * d + t];
                                ga[i * d + t] += gij * (y * inv - sij * x * ka);
                                gb[j * d + t] += gij * (x * inv - sij * y * kb);
                            }
                        }
                    }
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_norms(data: &[f64], d: usize) -> Vec<f64> {
    data.chunks(d).map(|r| dot(r, r).sqrt()).collect()
}

/// `[m, k] x [k, n]`
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
        }
    }
    c
}

/// `[m, n] x [k, n]^T -> [m, k]`
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut bt = vec![0.0; n * k];
    for j in 0..k {
        for p in 0..n {
            bt[p * k + j] = b[j * n + p];
        }
    }
    matmul_raw(a, &bt, m, n, k)
}

/// `[m, k]^T x [m, n] -> [k, n]`
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[1, 1], &[2.0]));
        let b = g.constant(t(&[1, 1], &[3.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[6.0]);

        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let out = g.matmul(m, b).unwrap();
        assert_eq!(g.value(out).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[0.0, 0.0, 2f64.ln(), 0.0, 1000.0, 0.0]));
        let y = g.softmax(x);
        let v = g.value(y).data();
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[3], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[4], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[5], 0.0, epsilon = 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::filled(&[3], 1.0));
        let zeros = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(t(&[1, 3], &[4.0, 4.0, 4.0]));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let ones2 = g.constant(Tensor::filled(&[2], 1.0));
        let zeros2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, ones2, zeros2, 1e-5).unwrap();
        // variance 1, so the output is +-1/sqrt(1 + eps)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_abs_diff_eq!(g.value(y).data()[0], expect, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(y).data()[1], -expect, epsilon = 1e-15);

        let gain = g.constant(Tensor::zeros(&[3]));
        let bias = g.constant(t(&[3], &[0.1, 0.2, 0.3]));
        let x = g.constant(t(&[2, 3], &[1.0, 5.0, -2.0, 0.3, 0.2, 9.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 8]));
        let l = g.cross_entropy(x, &[3, 7]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 8f64.ln(), epsilon = 1e-14);

        let x = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(g.value(l).item(), -(e / (e + 1.0)).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(l).item(), 0.3133, epsilon = 1e-4);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let x = g.constant(t(&[1, 3], &[margin, 0.0, 0.0]));
            let v = g.cross_entropy(x, &[0]).unwrap();
            let l = g.value(v).item();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);

        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.cross_entropy(x, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_square_sum() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        // a second sweep accumulates
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detached_input_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        // d/dx (x * stop(x)) = stop(x)
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn bias_broadcast_and_shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2], &[10.0, 20.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, bad).is_err());
        assert!(g.mul(a, bad).is_err());
    }

    #[test]
    fn cosine_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]));
        let s = g.cosine_similarity(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn slices_and_row_stacks_route_gradients() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = g.slice_cols(x, 1, 2).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 3.0, 5.0, 6.0]);
        let y = g.param(&t(&[1, 2], &[7.0, 8.0]));
        let c = g.concat_rows(&[s, y]).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2]);
        let w = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = g.mul(c, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
        assert_eq!(g.grad(y).unwrap(), &[5.0, 6.0]);
        assert!(g.slice_cols(x, 2, 2).is_err());
        let z = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.concat_rows(&[s, z]).is_err());
    }
}
