//! Optimal-transport entity alignment: cosine cost, the inexact proximal
//! point (IPOT) solver, an exact small-instance solver and the alignment loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, COSINE_NORM_FLOOR};

const EXP_FLOOR: f64 = 1e-300;
const EXP_CEIL: f64 = 1e300;
pub const EXACT_MAX_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpotConfig {
    pub beta: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
}

impl Default for IpotConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            outer_iters: 50,
            inner_iters: 1,
        }
    }
}

impl IpotConfig {
    pub fn with_outer(outer_iters: usize) -> Self {
        Self {
            outer_iters,
            ..Self::default()
        }
    }
}

/// `1 - cos(x_i, y_j)` and whether some row had a (near) zero norm.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub values: Tensor,
    pub degenerate: bool,
}

fn has_zero_row(t: &Tensor) -> bool {
    (0..t.rows()).any(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() < COSINE_NORM_FLOOR)
}

/// Cosine cost between the rows of `x` (`m x d`) and `y` (`n x d`).
pub fn cost_matrix(x: &Tensor, y: &Tensor) -> Result<CostMatrix> {
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let (c, degenerate) = cost_matrix_var(&mut g, xv, yv)?;
    Ok(CostMatrix {
        values: g.value(c).clone(),
        degenerate,
    })
}

/// Differentiable cosine cost on a graph.
pub fn cost_matrix_var(g: &mut Graph, x: Var, y: Var) -> Result<(Var, bool)> {
    let degenerate = has_zero_row(g.value(x)) || has_zero_row(g.value(y));
    let cos = g.cosine_similarity(x, y)?;
    let ones = g.constant(Tensor::filled(g.shape(cos), 1.0));
    Ok((g.sub(ones, cos)?, degenerate))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub values: Tensor,
    pub iterations_run: usize,
    pub beta: f64,
    /// Some kernel entry had to be clamped.
    pub ill_conditioned: bool,
}

impl TransportPlan {
    /// Frobenius inner product with a cost matrix.
    pub fn cost(&self, c: &Tensor) -> f64 {
        self.values
            .data()
            .iter()
            .zip(c.data())
            .map(|(t, c)| t * c)
            .sum()
    }
}

/// Which scaling vector was just refreshed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingUpdate {
    Row,
    Column,
}

fn check_cost(c: &Tensor) -> Result<(usize, usize)> {
    if c.shape().len() != 2 || c.is_empty() {
        return Err(Error::contract(format!(
            "cost matrix must be a non-empty matrix, got {:?}",
            c.shape()
        )));
    }
    if c.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("cost matrix has non-finite entries"));
    }
    Ok((c.shape()[0], c.shape()[1]))
}

fn scaled_plan(q: &[f64], delta: &[f64], sigma: &[f64]) -> Vec<f64> {
    let n = sigma.len();
    q.iter()
        .enumerate()
        .map(|(k, v)| delta[k / n] * v * sigma[k % n])
        .collect()
}

/// IPOT with uniform marginals `1/m` over rows and `1/n` over columns.
pub fn ipot(c: &Tensor, config: &IpotConfig) -> Result<TransportPlan> {
    ipot_observed(c, config, |_, _, _| {})
}

/// Same as [`ipot`]; `observe(outer, update, plan)` sees the plan implied by the
/// current scaling vectors after every inner update.
pub fn ipot_observed<F>(c: &Tensor, config: &IpotConfig, mut observe: F) -> Result<TransportPlan>
where
    F: FnMut(usize, ScalingUpdate, &[f64]),
{
    let (m, n) = check_cost(c)?;
    if !(config.beta > 0.0) {
        return Err(Error::Config(format!(
            "beta must be positive, got {}",
            config.beta
        )));
    }
    let mut ill_conditioned = false;
    let kernel: Vec<f64> = c
        .data()
        .iter()
        .map(|&v| {
            let a = (-v / config.beta).exp();
            if !(EXP_FLOOR..=EXP_CEIL).contains(&a) {
                ill_conditioned = true;
            }
            a.clamp(EXP_FLOOR, EXP_CEIL)
        })
        .collect();
    let (mf, nf) = (m as f64, n as f64);
    let mut plan = vec![1.0; m * n];
    let mut sigma = vec![1.0 / nf; n];
    let mut delta = vec![0.0; m];
    let mut q = vec![0.0; m * n];
    for outer in 0..config.outer_iters {
        for (qk, (a, t)) in q.iter_mut().zip(kernel.iter().zip(&plan)) {
            *qk = a * t;
        }
        for _ in 0..config.inner_iters {
            for i in 0..m {
                let row = &q[i * n..(i + 1) * n];
                let s: f64 = row.iter().zip(&sigma).map(|(a, b)| a * b).sum();
                delta[i] = 1.0 / (mf * s);
            }
            observe(outer, ScalingUpdate::Row, &scaled_plan(&q, &delta, &sigma));
            for j in 0..n {
                let s: f64 = (0..m).map(|i| q[i * n + j] * delta[i]).sum();
                sigma[j] = 1.0 / (nf * s);
            }
            observe(
                outer,
                ScalingUpdate::Column,
                &scaled_plan(&q, &delta, &sigma),
            );
        }
        plan = scaled_plan(&q, &delta, &sigma);
    }
    if config.outer_iters == 0 {
        plan.fill(1.0 / (mf * nf));
    }
    Ok(TransportPlan {
        values: Tensor::new(vec![m, n], plan)?,
        iterations_run: config.outer_iters,
        beta: config.beta,
        ill_conditioned,
    })
}

/// Exact optimal plan with uniform marginals for `m, n <= 8`, as a basic
/// solution with at most `m + n - 1` nonzeros. Returns `(plan, cost)`.
///
/// Works on integer flows: each row ships `n` units and each column receives
/// `m`, so the plan is `flow / (m n)`.
pub fn exact_ot(c: &Tensor) -> Result<(Tensor, f64)> {
    let (m, n) = check_cost(c)?;
    if m > EXACT_MAX_DIM || n > EXACT_MAX_DIM {
        return Err(Error::contract(format!(
            "exact solver supports at most {EXACT_MAX_DIM}x{EXACT_MAX_DIM}, got {m}x{n}"
        )));
    }
    let mut flow = min_cost_flow(c.data(), m, n);
    reduce_to_basic(&mut flow, c.data(), m, n);
    let total = (m * n) as f64;
    let plan: Vec<f64> = flow.iter().map(|&f| f as f64 / total).collect();
    let cost = plan.iter().zip(c.data()).map(|(p, c)| p * c).sum();
    Ok((Tensor::new(vec![m, n], plan)?, cost))
}

/// Successive shortest augmenting paths on the bipartite transport network.
fn min_cost_flow(cost: &[f64], m: usize, n: usize) -> Vec<i64> {
    // nodes: source, rows, columns, sink
    let (source, sink) = (0, m + n + 1);
    let nodes = m + n + 2;
    let mut row_left = vec![n as i64; m];
    let mut col_left = vec![m as i64; n];
    let mut flow = vec![0i64; m * n];
    loop {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut parent: Vec<Option<usize>> = vec![None; nodes];
        dist[source] = 0.0;
        // Bellman-Ford over the residual graph
        for _ in 0..nodes {
            let mut changed = false;
            let mut relax = |from: usize,
                             to: usize,
                             w: f64,
                             dist: &mut Vec<f64>,
                             parent: &mut Vec<Option<usize>>| {
                if dist[from].is_finite() && dist[from] + w < dist[to] - 1e-12 {
                    dist[to] = dist[from] + w;
                    parent[to] = Some(from);
                    changed = true;
                }
            };
            for i in 0..m {
                if row_left[i] > 0 {
                    relax(source, 1 + i, 0.0, &mut dist, &mut parent);
                }
            }
            for i in 0..m {
                for j in 0..n {
                    relax(1 + i, 1 + m + j, cost[i * n + j], &mut dist, &mut parent);
                    if flow[i * n + j] > 0 {
                        relax(1 + m + j, 1 + i, -cost[i * n + j], &mut dist, &mut parent);
                    }
                }
            }
            for j in 0..n {
                if col_left[j] > 0 {
                    relax(1 + m + j, sink, 0.0, &mut dist, &mut parent);
                }
            }
            if !changed {
                break;
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        let mut path = vec![sink];
        while let Some(p) = parent[*path.last().unwrap()] {
            path.push(p);
        }
        path.reverse();
        let mut amount = i64::MAX;
        for w in path.windows(2) {
            let cap = match (w[0], w[1]) {
                (s, r) if s == source => row_left[r - 1],
                (c, t) if t == sink => col_left[c - 1 - m],
                (row, _) if row <= m => i64::MAX,
                (col, row) => flow[(row - 1) * n + (col - 1 - m)],
            };
            amount = amount.min(cap);
        }
        for w in path.windows(2) {
            match (w[0], w[1]) {
                (s, r) if s == source => row_left[r - 1] -= amount,
                (c, t) if t == sink => col_left[c - 1 - m] -= amount,
                (row, col) if row <= m => flow[(row - 1) * n + (col - 1 - m)] += amount,
                (col, row) => flow[(row - 1) * n + (col - 1 - m)] -= amount,
            }
        }
    }
    flow
}

/// Cancels cycles in the support (rows and columns as nodes, positive cells
/// as edges) until it is a forest. Each shift moves along the non-increasing
/// cost direction, so an optimal flow stays optimal.
fn reduce_to_basic(flow: &mut [i64], cost: &[f64], m: usize, n: usize) {
    'restart: loop {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m + n];
        for i in 0..m {
            for j in 0..n {
                if flow[i * n + j] == 0 {
                    continue;
                }
                if let Some(path) = tree_path(&adj, i, m + j) {
                    // path runs row i ... column j; closing edge (i, j)
                    let mut cells = vec![(i, j)];
                    for w in path.windows(2).rev() {
                        let (a, b) = (w[0], w[1]);
                        cells.push(if a < m { (a, b - m) } else { (b, a - m) });
                    }
                    let signed: f64 = cells
                        .iter()
                        .enumerate()
                        .map(|(k, &(r, c))| {
                            if k % 2 == 0 {
                                cost[r * n + c]
                            } else {
                                -cost[r * n + c]
                            }
                        })
                        .sum();
                    // even cells gain when moving in the + direction
                    let parity = if signed <= 0.0 { 1 } else { 0 };
                    let shift = cells
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| k % 2 == parity)
                        .map(|(_, &(r, c))| flow[r * n + c])
                        .min()
                        .unwrap();
                    for (k, &(r, c)) in cells.iter().enumerate() {
                        if k % 2 == parity {
                            flow[r * n + c] -= shift;
                        } else {
                            flow[r * n + c] += shift;
                        }
                    }
                    continue 'restart;
                }
                adj[i].push(m + j);
                adj[m + j].push(i);
            }
        }
        return;
    }
}

fn tree_path(adj: &[Vec<usize>], from: usize, to: usize) -> Option<Vec<usize>> {
    let mut parent = vec![usize::MAX; adj.len()];
    let mut stack = vec![from];
    parent[from] = from;
    while let Some(v) = stack.pop() {
        if v == to {
            let mut path = vec![to];
            while *path.last().unwrap() != from {
                path.push(parent[*path.last().unwrap()]);
            }
            path.reverse();
            return Some(path);
        }
        for &w in &adj[v] {
            if parent[w] == usize::MAX {
                parent[w] = v;
                stack.push(w);
            }
        }
    }
    None
}

#[derive(Clone, Debug)]
pub struct CeaLoss {
    pub loss: Var,
    pub plan: TransportPlan,
    pub degenerate: bool,
}

/// `<T, C(x, y)>` with the IPOT plan `T` held constant, so gradients reach
/// `x` and `y` only through the cost.
pub fn cea_loss(g: &mut Graph, x: Var, y: Var, config: &IpotConfig) -> Result<CeaLoss> {
    let (c, degenerate) = cost_matrix_var(g, x, y)?;
    let plan = ipot(g.value(c), config)?;
    let t = g.constant(plan.values.clone());
    let weighted = g.mul(t, c)?;
    let loss = g.sum(weighted);
    Ok(CeaLoss {
        loss,
        plan,
        degenerate,
    })
}

/// Row-normalized plan: entry `(i, j)` is the share of token `i` sent to `j`.
pub fn alignment_matrix(plan: &Tensor) -> Result<Tensor> {
    let (m, n) = check_cost(plan)?;
    let mut out = plan.data().to_vec();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::contract(format!("alignment row {i} has no mass")));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![m, n], out)
}

/// Writes a matrix with token labels: a header of column tokens, then one
/// line per row token.
pub fn write_alignment_csv(
    path: &Path,
    row_tokens: &[String],
    col_tokens: &[String],
    matrix: &Tensor,
) -> Result<()> {
    if matrix.shape() != [row_tokens.len(), col_tokens.len()] {
        return Err(Error::Shape {
            op: "alignment csv",
            left: matrix.shape().to_vec(),
            right: vec![row_tokens.len(), col_tokens.len()],
        });
    }
    let io = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec![String::new()];
    header.extend(col_tokens.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for (i, tok) in row_tokens.iter().enumerate() {
        let mut rec = vec![tok.clone()];
        rec.extend(matrix.row(i).iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
