use std::collections::HashMap;

use rand::Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::{NdError, Tensor};

/// Handle to a node on the tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum UnaryOp {
    Neg,
    Tanh,
    Sigmoid,
    Elu,
    Exp,
    Ln,
    Square,
    Sqrt,
    Scale(f64),
    AddConst(f64),
    Clamp(f64, f64),
    Detach,
}

#[derive(Debug, Clone, Copy)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
}

enum Payload {
    Const,
    Param { store_id: u32, id: ParamId },
    Unary { p: usize, op: UnaryOp },
    Binary { a: usize, b: usize, op: BinaryOp },
    MatMul { a: usize, b: usize },
    AddRow { m: usize, row: usize },
    ConcatCols { a: usize, b: usize },
    SliceCols { p: usize, from: usize, to: usize },
    GatherRows { p: usize, indices: Vec<usize> },
    StackRows { parts: Vec<usize> },
    MulCol { m: usize, col: usize },
    Sum { p: usize },
    Mean { p: usize },
    RowSum { p: usize },
    LogSoftmax { p: usize, chunk: usize },
    /// One-hot per chunk in the forward value; backward routes the gradient
    /// through the softmax probabilities (straight-through estimator).
    StraightThrough { p: usize, chunk: usize, probs: Vec<f64> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    payload: Payload,
}

/// Define-by-run gradient tape over 2-D values (scalars are 1x1, row vectors
/// 1xN). Rebuilt per forward pass; [`Tape::backward`] consumes the content.
pub struct Tape {
    nodes: Vec<Node>,
    // One leaf per parameter per tape, so repeated leases (e.g. a GRU unrolled
    // across time) accumulate gradients on a single node.
    param_cache: HashMap<(u32, usize), Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_cache: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, payload: Payload) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, payload });
        Var(self.nodes.len() - 1)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "value_scalar on non-scalar node");
        n.value[0]
    }

    // ---- leaves ---------------------------------------------------------

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push(rows, cols, data, Payload::Const)
    }

    pub fn const_row(&mut self, data: &[f64]) -> Var {
        self.constant(1, data.len(), data.to_vec())
    }

    pub fn const_scalar(&mut self, x: f64) -> Var {
        self.constant(1, 1, vec![x])
    }

    /// Lease a parameter onto the tape. Repeated leases return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.store_id(), id.0);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let t = store.get(id);
        let (rows, cols) = match *t.shape() {
            [r, c] => (r, c),
            [n] => (1, n),
            [] => (1, 1),
            ref s => panic!("parameter '{}' has unsupported rank {:?}", store.name(id), s),
        };
        let v = self.push(
            rows,
            cols,
            t.data().to_vec(),
            Payload::Param { store_id: store.store_id(), id },
        );
        self.param_cache.insert(key, v);
        v
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, p: Var, op: UnaryOp) -> Var {
        let n = &self.nodes[p.0];
        let (rows, cols) = (n.rows, n.cols);
        let value: Vec<f64> = n
            .value
            .iter()
            .map(|&x| match op {
                UnaryOp::Neg => -x,
                UnaryOp::Tanh => x.tanh(),
                UnaryOp::Sigmoid => sigmoid(x),
                UnaryOp::Elu => {
                    if x > 0.0 {
                        x
                    } else {
                        x.exp() - 1.0
                    }
                }
                UnaryOp::Exp => x.exp(),
                UnaryOp::Ln => x.ln(),
                UnaryOp::Square => x * x,
                UnaryOp::Sqrt => x.sqrt(),
                UnaryOp::Scale(c) => c * x,
                UnaryOp::AddConst(c) => c + x,
                UnaryOp::Clamp(lo, hi) => x.clamp(lo, hi),
                UnaryOp::Detach => x,
            })
            .collect();
        self.push(rows, cols, value, Payload::Unary { p: p.0, op })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Neg)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Sigmoid)
    }
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Elu)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Ln)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Sqrt)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, UnaryOp::Scale(c))
    }
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, UnaryOp::AddConst(c))
    }
    /// Clamp with zero gradient wherever the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, UnaryOp::Clamp(lo, hi))
    }
    /// Identity in the forward pass, blocks the gradient entirely.
    pub fn detach(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Detach)
    }

    fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(
            (na.rows, na.cols),
            (nb.rows, nb.cols),
            "elementwise op on mismatched shapes"
        );
        let value: Vec<f64> = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(&x, &y)| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            })
            .collect();
        let (rows, cols) = (na.rows, na.cols);
        self.push(rows, cols, value, Payload::Binary { a: a.0, b: b.0, op })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryOp::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryOp::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryOp::Mul)
    }

    // ---- linear algebra / structure --------------------------------------

    /// [r,k] x [k,c] -> [r,c]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.cols, nb.rows, "matmul inner dims {} vs {}", na.cols, nb.rows);
        let (r, k, c) = (na.rows, na.cols, nb.cols);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for kk in 0..k {
                let av = na.value[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &nb.value[kk * c..(kk + 1) * c];
                let orow = &mut value[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += av * brow[j];
                }
            }
        }
        self.push(r, c, value, Payload::MatMul { a: a.0, b: b.0 })
    }

    /// Add a 1xC row vector to every row of an RxC matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Var {
        let (nm, nr) = (&self.nodes[m.0], &self.nodes[row.0]);
        assert_eq!(nr.rows, 1, "add_row: second operand must be a row vector");
        assert_eq!(nm.cols, nr.cols, "add_row: column mismatch");
        let (rows, cols) = (nm.rows, nm.cols);
        let mut value = nm.value.clone();
        for i in 0..rows {
            for j in 0..cols {
                value[i * cols + j] += nr.value[j];
            }
        }
        self.push(rows, cols, value, Payload::AddRow { m: m.0, row: row.0 })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.rows, nb.rows, "concat_cols: row mismatch");
        let rows = na.rows;
        let (ca, cb) = (na.cols, nb.cols);
        let mut value = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            value.extend_from_slice(&na.value[i * ca..(i + 1) * ca]);
            value.extend_from_slice(&nb.value[i * cb..(i + 1) * cb]);
        }
        self.push(rows, ca + cb, value, Payload::ConcatCols { a: a.0, b: b.0 })
    }

    pub fn slice_cols(&mut self, p: Var, from: usize, to: usize) -> Var {
        let n = &self.nodes[p.0];
        assert!(from < to && to <= n.cols, "slice_cols out of range");
        let rows = n.rows;
        let w = to - from;
        let mut value = Vec::with_capacity(rows * w);
        for i in 0..rows {
            value.extend_from_slice(&n.value[i * n.cols + from..i * n.cols + to]);
        }
        self.push(rows, w, value, Payload::SliceCols { p: p.0, from, to })
    }

    pub fn gather_rows(&mut self, p: Var, indices: &[usize]) -> Var {
        let n = &self.nodes[p.0];
        let cols = n.cols;
        let mut value = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < n.rows, "gather_rows index out of range");
            value.extend_from_slice(&n.value[i * cols..(i + 1) * cols]);
        }
        self.push(
            indices.len(),
            cols,
            value,
            Payload::GatherRows { p: p.0, indices: indices.to_vec() },
        )
    }

    /// Stack equal-width nodes vertically: n parts of [r_i, C] -> [sum r_i, C].
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows: empty");
        let cols = self.nodes[parts[0].0].cols;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let n = &self.nodes[p.0];
            assert_eq!(n.cols, cols, "stack_rows: column mismatch");
            rows += n.rows;
            value.extend_from_slice(&n.value);
        }
        self.push(
            rows,
            cols,
            value,
            Payload::StackRows { parts: parts.iter().map(|v| v.0).collect() },
        )
    }

    /// Multiply every row of an RxC matrix by the matching entry of an Rx1
    /// column vector.
    pub fn mul_col(&mut self, m: Var, col: Var) -> Var {
        let (nm, nc) = (&self.nodes[m.0], &self.nodes[col.0]);
        assert_eq!(nc.cols, 1, "mul_col: second operand must be a column");
        assert_eq!(nm.rows, nc.rows, "mul_col: row mismatch");
        let (rows, cols) = (nm.rows, nm.cols);
        let mut value = nm.value.clone();
        for i in 0..rows {
            for j in 0..cols {
                value[i * cols + j] *= nc.value[i];
            }
        }
        self.push(rows, cols, value, Payload::MulCol { m: m.0, col: col.0 })
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, p: Var) -> Var {
        let s: f64 = self.nodes[p.0].value.iter().sum();
        self.push(1, 1, vec![s], Payload::Sum { p: p.0 })
    }

    pub fn mean(&mut self, p: Var) -> Var {
        let n = &self.nodes[p.0];
        let s: f64 = n.value.iter().sum();
        let m = s / n.value.len() as f64;
        self.push(1, 1, vec![m], Payload::Mean { p: p.0 })
    }

    /// Row-wise sum: [R,C] -> [R,1].
    pub fn row_sum(&mut self, p: Var) -> Var {
        let n = &self.nodes[p.0];
        let (rows, cols) = (n.rows, n.cols);
        let value: Vec<f64> = (0..rows)
            .map(|i| n.value[i * cols..(i + 1) * cols].iter().sum())
            .collect();
        self.push(rows, 1, value, Payload::RowSum { p: p.0 })
    }

    // ---- categorical blocks ----------------------------------------------

    /// Log-softmax applied independently to each `chunk`-wide slice of every
    /// row. Columns must be a multiple of `chunk`.
    pub fn log_softmax(&mut self, p: Var, chunk: usize) -> Var {
        let n = &self.nodes[p.0];
        assert!(chunk > 0 && n.cols % chunk == 0, "log_softmax: bad chunk");
        let (rows, cols) = (n.rows, n.cols);
        let mut value = vec![0.0; rows * cols];
        for i in 0..rows {
            for c0 in (0..cols).step_by(chunk) {
                let seg = &n.value[i * cols + c0..i * cols + c0 + chunk];
                let mx = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + seg.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
                for j in 0..chunk {
                    value[i * cols + c0 + j] = seg[j] - lse;
                }
            }
        }
        self.push(rows, cols, value, Payload::LogSoftmax { p: p.0, chunk })
    }

    fn straight_through_inner(
        &mut self,
        logits: Var,
        chunk: usize,
        mut pick: impl FnMut(&[f64]) -> usize,
    ) -> Var {
        let n = &self.nodes[logits.0];
        assert!(chunk > 0 && n.cols % chunk == 0, "straight_through: bad chunk");
        let (rows, cols) = (n.rows, n.cols);
        let mut probs = vec![0.0; rows * cols];
        let mut value = vec![0.0; rows * cols];
        for i in 0..rows {
            for c0 in (0..cols).step_by(chunk) {
                let seg = &n.value[i * cols + c0..i * cols + c0 + chunk];
                let mx = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..chunk {
                    let e = (seg[j] - mx).exp();
                    probs[i * cols + c0 + j] = e;
                    sum += e;
                }
                for j in 0..chunk {
                    probs[i * cols + c0 + j] /= sum;
                }
                let k = pick(&probs[i * cols + c0..i * cols + c0 + chunk]);
                value[i * cols + c0 + k] = 1.0;
            }
        }
        self.push(rows, cols, value, Payload::StraightThrough { p: logits.0, chunk, probs })
    }

    /// Straight-through categorical sample: one-hot forward value drawn from
    /// softmax(logits) per chunk, softmax gradient backward.
    pub fn straight_through_sample<R: Rng>(
        &mut self,
        logits: Var,
        chunk: usize,
        rng: &mut R,
    ) -> Var {
        self.straight_through_inner(logits, chunk, |p| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (j, &pj) in p.iter().enumerate() {
                acc += pj;
                if u < acc {
                    return j;
                }
            }
            p.len() - 1
        })
    }

    /// Straight-through argmax: deterministic one-hot at the most likely
    /// class, same backward as the sampled variant.
    pub fn straight_through_mode(&mut self, logits: Var, chunk: usize) -> Var {
        self.straight_through_inner(logits, chunk, |p| {
            let mut best = 0;
            for (j, &pj) in p.iter().enumerate() {
                if pj > p[best] {
                    best = j;
                }
            }
            best
        })
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` w.r.t. every parameter that
    /// participated in the graph. Consumes the tape content.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NdError> {
        {
            let n = &self.nodes[loss.0];
            if n.value.len() != 1 {
                return Err(NdError::NonScalarLoss(vec![n.rows, n.cols]));
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Split borrows: read node idx, write parent grads.
            macro_rules! acc {
                ($p:expr, $len:expr, $body:expr) => {{
                    let slot = grads[$p].get_or_insert_with(|| vec![0.0; $len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($body)(slot);
                }};
            }
            let node = &self.nodes[idx];
            match &node.payload {
                Payload::Const | Payload::Param { .. } => {
                    grads[idx] = Some(g); // keep for collection below
                }
                Payload::Unary { p, op } => {
                    if matches!(op, UnaryOp::Detach) {
                        continue;
                    }
                    let p = *p;
                    let op = *op;
                    let pv = &self.nodes[p].value;
                    let yv = &node.value;
                    let plen = pv.len();
                    acc!(p, plen, |slot: &mut Vec<f64>| {
                        for j in 0..plen {
                            let d = match op {
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Tanh => 1.0 - yv[j] * yv[j],
                                UnaryOp::Sigmoid => yv[j] * (1.0 - yv[j]),
                                UnaryOp::Elu => {
                                    if pv[j] > 0.0 {
                                        1.0
                                    } else {
                                        yv[j] + 1.0
                                    }
                                }
                                UnaryOp::Exp => yv[j],
                                UnaryOp::Ln => 1.0 / pv[j],
                                UnaryOp::Square => 2.0 * pv[j],
                                UnaryOp::Sqrt => 0.5 / yv[j],
                                UnaryOp::Scale(c) => c,
                                UnaryOp::AddConst(_) => 1.0,
                                UnaryOp::Clamp(lo, hi) => {
                                    if pv[j] > lo && pv[j] < hi {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::Detach => unreachable!(),
                            };
                            slot[j] += d * g[j];
                        }
                    });
                }
                Payload::Binary { a, b, op } => {
                    let (a, b, op) = (*a, *b, *op);
                    let len = node.value.len();
                    match op {
                        BinaryOp::Add => {
                            acc!(a, len, |s: &mut Vec<f64>| for j in 0..len {
                                s[j] += g[j];
                            });
                            acc!(b, len, |s: &mut Vec<f64>| for j in 0..len {
                                s[j] += g[j];
                            });
                        }
                        BinaryOp::Sub => {
                            acc!(a, len, |s: &mut Vec<f64>| for j in 0..len {
                                s[j] += g[j];
                            });
                            acc!(b, len, |s: &mut Vec<f64>| for j in 0..len {
                                s[j] -= g[j];
                            });
                        }
                        BinaryOp::Mul => {
                            let av = self.nodes[a].value.clone();
                            let bv = self.nodes[b].value.clone();
                            acc!(a, len, |s: &mut Vec<f64>| for j in 0..len {
                                s[j] += bv[j] * g[j];
                            });
                            acc!(b, len, |s: &mut Vec<f64>| for j in 0..len {
                                s[j] += av[j] * g[j];
                            });
                        }
                    }
                }
                Payload::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (r, k) = (self.nodes[a].rows, self.nodes[a].cols);
                    let c = self.nodes[b].cols;
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    // dA = G * B^T
                    acc!(a, r * k, |s: &mut Vec<f64>| {
                        for i in 0..r {
                            for kk in 0..k {
                                let mut acc = 0.0;
                                for j in 0..c {
                                    acc += g[i * c + j] * bv[kk * c + j];
                                }
                                s[i * k + kk] += acc;
                            }
                        }
                    });
                    // dB = A^T * G
                    acc!(b, k * c, |s: &mut Vec<f64>| {
                        for kk in 0..k {
                            for i in 0..r {
                                let aik = av[i * k + kk];
                                if aik == 0.0 {
                                    continue;
                                }
                                for j in 0..c {
                                    s[kk * c + j] += aik * g[i * c + j];
                                }
                            }
                        }
                    });
                }
                Payload::AddRow { m, row } => {
                    let (m, row) = (*m, *row);
                    let (rows, cols) = (node.rows, node.cols);
                    acc!(m, rows * cols, |s: &mut Vec<f64>| for j in 0..rows * cols {
                        s[j] += g[j];
                    });
                    acc!(row, cols, |s: &mut Vec<f64>| {
                        for i in 0..rows {
                            for j in 0..cols {
                                s[j] += g[i * cols + j];
                            }
                        }
                    });
                }
                Payload::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let rows = node.rows;
                    let (ca, cb) = (self.nodes[a].cols, self.nodes[b].cols);
                    acc!(a, rows * ca, |s: &mut Vec<f64>| {
                        for i in 0..rows {
                            for j in 0..ca {
                                s[i * ca + j] += g[i * (ca + cb) + j];
                            }
                        }
                    });
                    acc!(b, rows * cb, |s: &mut Vec<f64>| {
                        for i in 0..rows {
                            for j in 0..cb {
                                s[i * cb + j] += g[i * (ca + cb) + ca + j];
                            }
                        }
                    });
                }
                Payload::SliceCols { p, from, to } => {
                    let (p, from, to) = (*p, *from, *to);
                    let rows = node.rows;
                    let pcols = self.nodes[p].cols;
                    let w = to - from;
                    acc!(p, rows * pcols, |s: &mut Vec<f64>| {
                        for i in 0..rows {
                            for j in 0..w {
                                s[i * pcols + from + j] += g[i * w + j];
                            }
                        }
                    });
                }
                Payload::GatherRows { p, indices } => {
                    let p = *p;
                    let indices = indices.clone();
                    let cols = node.cols;
                    let prows = self.nodes[p].rows;
                    acc!(p, prows * cols, |s: &mut Vec<f64>| {
                        for (out_i, &src_i) in indices.iter().enumerate() {
                            for j in 0..cols {
                                s[src_i * cols + j] += g[out_i * cols + j];
                            }
                        }
                    });
                }
                Payload::StackRows { parts } => {
                    let parts = parts.clone();
                    let cols = node.cols;
                    let mut offset = 0;
                    for p in parts {
                        let prows = self.nodes[p].rows;
                        let plen = prows * cols;
                        let start = offset;
                        acc!(p, plen, |s: &mut Vec<f64>| for j in 0..plen {
                            s[j] += g[start + j];
                        });
                        offset += plen;
                    }
                }
                Payload::MulCol { m, col } => {
                    let (m, col) = (*m, *col);
                    let (rows, cols) = (node.rows, node.cols);
                    let mv = self.nodes[m].value.clone();
                    let cv = self.nodes[col].value.clone();
                    acc!(m, rows * cols, |s: &mut Vec<f64>| {
                        for i in 0..rows {
                            for j in 0..cols {
                                s[i * cols + j] += cv[i] * g[i * cols + j];
                            }
                        }
                    });
                    acc!(col, rows, |s: &mut Vec<f64>| {
                        for i in 0..rows {
                            let mut acc = 0.0;
                            for j in 0..cols {
                                acc += mv[i * cols + j] * g[i * cols + j];
                            }
                            s[i] += acc;
                        }
                    });
                }
                Payload::Sum { p } => {
                    let p = *p;
                    let plen = self.nodes[p].value.len();
                    acc!(p, plen, |s: &mut Vec<f64>| for j in 0..plen {
                        s[j] += g[0];
                    });
                }
                Payload::Mean { p } => {
                    let p = *p;
                    let plen = self.nodes[p].value.len();
                    let w = 1.0 / plen as f64;
                    acc!(p, plen, |s: &mut Vec<f64>| for j in 0..plen {
                        s[j] += w * g[0];
                    });
                }
                Payload::RowSum { p } => {
                    let p = *p;
                    let (rows, cols) = (self.nodes[p].rows, self.nodes[p].cols);
                    acc!(p, rows * cols, |s: &mut Vec<f64>| {
                        for i in 0..rows {
                            for j in 0..cols {
                                s[i * cols + j] += g[i];
                            }
                        }
                    });
                }
                Payload::LogSoftmax { p, chunk } => {
                    let (p, chunk) = (*p, *chunk);
                    let (rows, cols) = (node.rows, node.cols);
                    let yv = node.value.clone();
                    acc!(p, rows * cols, |s: &mut Vec<f64>| {
                        for i in 0..rows {
                            for c0 in (0..cols).step_by(chunk) {
                                let gsum: f64 =
                                    (0..chunk).map(|j| g[i * cols + c0 + j]).sum();
                                for j in 0..chunk {
                                    let pj = yv[i * cols + c0 + j].exp();
                                    s[i * cols + c0 + j] += g[i * cols + c0 + j] - pj * gsum;
                                }
                            }
                        }
                    });
                }
                Payload::StraightThrough { p, chunk, probs } => {
                    let (p, chunk) = (*p, *chunk);
                    let probs = probs.clone();
                    let (rows, cols) = (node.rows, node.cols);
                    // Gradient as if the forward value had been the softmax
                    // probabilities: dlogit_j = p_j * (g_j - sum_c p_c g_c).
                    acc!(p, rows * cols, |s: &mut Vec<f64>| {
                        for i in 0..rows {
                            for c0 in (0..cols).step_by(chunk) {
                                let mut dot = 0.0;
                                for j in 0..chunk {
                                    dot += probs[i * cols + c0 + j] * g[i * cols + c0 + j];
                                }
                                for j in 0..chunk {
                                    let pj = probs[i * cols + c0 + j];
                                    s[i * cols + c0 + j] += pj * (g[i * cols + c0 + j] - dot);
                                }
                            }
                        }
                    });
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Payload::Param { store_id, id } = node.payload {
                if let Some(g) = grads[idx].take() {
                    let shape = if node.rows == 1 {
                        vec![node.cols]
                    } else {
                        vec![node.rows, node.cols]
                    };
                    out.insert(store_id, id, Tensor::new(shape, g));
                }
            }
        }
        self.nodes.clear();
        self.param_cache.clear();
        Ok(out)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
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
