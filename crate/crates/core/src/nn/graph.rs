//! Define-by-run tape. Every op appends a node whose inputs already exist,
//! so the node vector is in topological order and backward is a single
//! reverse sweep.

use super::gemm::{View, ViewMut};
use super::{shape_err, NnError, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `a [m,k] x b [k,n]`, or `a x b^T` with `b [n,k]` when `trans_b`.
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Reshape(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    SwiGlu {
        gate: Var,
        value: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    LogSumExpRows {
        x: Var,
        probs: Vec<T>,
    },
    SoftCap {
        x: Var,
        cap: T,
    },
    ColumnMean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Rebuilt for every training step.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    (numel.checked_div(cols).unwrap_or(0), cols)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf holding a copy of `tensor`; gradients are tracked iff
    /// `tensor.requires_grad`.
    pub fn input(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.values().to_vec(),
            tensor.shape().to_vec(),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var, NnError> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(shape_err("constant", numel, values.len()));
        }
        Ok(self.push(values, shape, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            View::row_major(self.value(a), k),
            View::row_major(self.value(b), n),
            T::zero(),
            ViewMut::row_major(&mut out, n),
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            out,
            vec![m, n],
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: false,
            },
            ng,
        ))
    }

    /// `a [m,k] x b^T` where `b` is `[n,k]`; used for logits against an
    /// embedding table stored one row per token.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            View::row_major(self.value(a), k),
            View::transposed(self.value(b), k),
            T::zero(),
            ViewMut::row_major(&mut out, n),
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            out,
            vec![m, n],
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: true,
            },
            ng,
        ))
    }

    // ---- elementwise and reductions -------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, shape, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(out, shape, Op::Scale(x, factor), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * v).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(out, shape, Op::Square(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(vec![s], vec![1], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vals = self.value(x);
        let s: T = vals.iter().copied().sum::<T>() / T::of(vals.len().max(1) as f64);
        let ng = self.ng(&[x]);
        self.push(vec![s], vec![1], Op::Mean(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NnError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(out, shape, Op::Reshape(x), ng))
    }

    /// Column means of a `[rows, cols]` matrix, shape `[1, cols]`.
    pub fn column_mean(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let vals = self.value(x);
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(&vals[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(rows.max(1) as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(&[x]);
        self.push(out, vec![1, cols], Op::ColumnMean(x), ng)
    }

    /// Elementwise `cap * tanh(x / cap)`.
    pub fn soft_cap(&mut self, x: Var, cap: T) -> Result<Var, NnError> {
        if !(cap > T::zero()) {
            return Err(NnError::Contract(format!("soft cap must be positive, got {cap}")));
        }
        let out = self
            .value(x)
            .iter()
            .map(|&v| cap * (v / cap).tanh())
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(out, shape, Op::SoftCap { x, cap }, ng))
    }

    // ---- transformer primitives -----------------------------------------

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(shape_err("gather", "[V, H]", shape));
        }
        let (v, h) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(NnError::Index {
                    op: "gather",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&self.value(table)[id * h..(id + 1) * h]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            out,
            vec![ids.len(), h],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Bias-free LayerNorm over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Result<Var, NnError> {
        let (rows, cols) = rows_cols(self.shape(x));
        if cols == 0 || self.value(gain).len() != cols {
            return Err(shape_err("layer_norm", cols, self.shape(gain)));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let xs = self.value(x);
        let g = self.value(gain);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        let inv_n = T::one() / T::of(cols as f64);
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, gain]);
        Ok(self.push(out, shape, Op::LayerNorm { x, gain, xhat, rstd }, ng))
    }

    /// Rotary embedding over rows of a `[rows, head_dim]` matrix;
    /// `positions[r]` is the sequence position of row `r`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var, NnError> {
        let (rows, dim) = rows_cols(self.shape(x));
        if dim % 2 != 0 {
            return Err(NnError::Contract(format!("rope needs an even head dim, got {dim}")));
        }
        if positions.len() != rows {
            return Err(shape_err("rope", rows, positions.len()));
        }
        let half = dim / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for j in 0..half {
                let angle = p as f64 * rope_frequency(j, dim, base);
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        let xs = self.value(x);
        let mut out = vec![T::zero(); rows * dim];
        for r in 0..rows {
            for j in 0..half {
                let (c, s) = (cos[r * half + j], sin[r * half + j]);
                let (a, b) = (xs[r * dim + 2 * j], xs[r * dim + 2 * j + 1]);
                out[r * dim + 2 * j] = a * c - b * s;
                out[r * dim + 2 * j + 1] = a * s + b * c;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(out, shape, Op::Rope { x, cos, sin }, ng))
    }

    /// `value * silu(gate)`.
    pub fn swiglu(&mut self, gate: Var, value: Var) -> Result<Var, NnError> {
        if self.shape(gate) != self.shape(value) {
            return Err(shape_err("swiglu", self.shape(gate), self.shape(value)));
        }
        let out = self
            .value(gate)
            .iter()
            .zip(self.value(value))
            .map(|(&a, &b)| b * a * sigmoid(a))
            .collect();
        let shape = self.shape(gate).to_vec();
        let ng = self.ng(&[gate, value]);
        Ok(self.push(out, shape, Op::SwiGlu { gate, value }, ng))
    }

    /// Causal multi-head attention over `[batch * seq, heads * head_dim]`
    /// query/key/value matrices, scores scaled by `1/sqrt(head_dim)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, NnError> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(shape_err("attention", &shape, (self.shape(k), self.shape(v))));
        }
        let (rows, width) = rows_cols(&shape);
        if rows != batch * seq || heads == 0 || width % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("[{batch}*{seq}, heads({heads})*d]"),
                &shape,
            ));
        }
        let hd = width / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * width];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * width + h * hd;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                T::gemm(
                    seq,
                    hd,
                    seq,
                    scale,
                    View::new(qv, base, width, 1),
                    View::new(kv, base, 1, width),
                    T::zero(),
                    ViewMut::row_major(p, seq),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                }
                T::gemm(
                    seq,
                    seq,
                    hd,
                    T::one(),
                    View::row_major(p, seq),
                    View::new(vv, base, width, 1),
                    T::zero(),
                    ViewMut::new(&mut out, base, width, 1),
                );
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            out,
            shape,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    // ---- losses ----------------------------------------------------------

    /// Mean over rows of `-log softmax(logits_r)[targets_r]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NnError> {
        let (rows, vocab) = rows_cols(self.shape(logits));
        if targets.len() != rows {
            return Err(shape_err("softmax_xent", rows, targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(NnError::Index {
                op: "softmax_xent",
                index: t,
                bound: vocab,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let lse = log_sum_exp(row);
            total += lse - row[t];
            row.iter_mut().for_each(|x| *x = flush_subnormal((*x - lse).exp()));
        }
        let loss = total / T::of(rows.max(1) as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Per-row `log(sum(exp(x_r)))`, shape `[rows]`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let mut probs = self.value(x).to_vec();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            out.push(lse);
            row.iter_mut().for_each(|v| *v = flush_subnormal((*v - lse).exp()));
        }
        let ng = self.ng(&[x]);
        self.push(out, vec![rows], Op::LogSumExpRows { x, probs }, ng)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `root`. Gradients of earlier calls are
    /// discarded, so repeated calls give identical results.
    pub fn backward(&mut self, root: Var) -> Result<(), NnError> {
        if root.0 >= self.nodes.len() {
            return Err(NnError::Contract(format!("unknown root node {}", root.0)));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(NnError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if self.nodes[id].needs_grad {
                self.backward_node(id, &gout, &mut grads);
            }
            grads[id] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` (zeros if unreached) into `tensor.grad`.
    pub fn write_grad(&self, v: Var, tensor: &mut Tensor<T>) -> Result<(), NnError> {
        let g = match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.value(v).len()],
        };
        tensor.set_grad(g)
    }

    fn backward_node(&self, id: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                if self.node(a).needs_grad {
                    // dA = dC B^T
                    let ga = self.acc(grads, a);
                    let bview = if trans_b {
                        View::row_major(self.value(b), k)
                    } else {
                        View::transposed(self.value(b), n)
                    };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        View::row_major(gout, n),
                        bview,
                        T::one(),
                        ViewMut::row_major(ga, k),
                    );
                }
                if self.node(b).needs_grad {
                    let gb = self.acc(grads, b);
                    if trans_b {
                        // dB [n,k] = dC^T A
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            View::transposed(gout, n),
                            View::row_major(self.value(a), k),
                            T::one(),
                            ViewMut::row_major(gb, k),
                        );
                    } else {
                        // dB [k,n] = A^T dC
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            View::transposed(self.value(a), k),
                            View::row_major(gout, n),
                            T::one(),
                            ViewMut::row_major(gb, n),
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if self.node(x).needs_grad {
                        axpy(self.acc(grads, x), T::one(), gout);
                    }
                }
            }
            &Op::Scale(x, f) => {
                if self.node(x).needs_grad {
                    axpy(self.acc(grads, x), f, gout);
                }
            }
            &Op::Sum(x) => {
                let g = gout[0];
                self.acc(grads, x).iter_mut().for_each(|v| *v += g);
            }
            &Op::Mean(x) => {
                let n = self.value(x).len().max(1);
                let g = gout[0] / T::of(n as f64);
                self.acc(grads, x).iter_mut().for_each(|v| *v += g);
            }
            &Op::Square(x) => {
                let two = T::of(2.0);
                let xs = self.value(x);
                let gx = self.acc(grads, x);
                for ((g, &xv), &go) in gx.iter_mut().zip(xs).zip(gout) {
                    *g += two * xv * go;
                }
            }
            &Op::Reshape(x) => axpy(self.acc(grads, x), T::one(), gout),
            &Op::ColumnMean(x) => {
                let (rows, cols) = rows_cols(self.shape(x));
                let inv = T::one() / T::of(rows.max(1) as f64);
                let gx = self.acc(grads, x);
                for r in 0..rows {
                    for (g, &go) in gx[r * cols..(r + 1) * cols].iter_mut().zip(gout) {
                        *g += go * inv;
                    }
                }
            }
            &Op::SoftCap { x, cap } => {
                let gx = self.acc(grads, x);
                for ((g, &y), &go) in gx.iter_mut().zip(&node.value).zip(gout) {
                    let t = y / cap;
                    *g += go * (T::one() - t * t);
                }
            }
            Op::Gather { table, ids } => {
                let h = self.shape(*table)[1];
                let gt = self.acc(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut gt[id * h..(id + 1) * h], T::one(), &gout[r * h..(r + 1) * h]);
                }
            }
            Op::LayerNorm { x, gain, xhat, rstd } => {
                let (rows, cols) = rows_cols(&node.shape);
                let g = self.value(*gain);
                if self.node(*gain).needs_grad {
                    let gg = self.acc(grads, *gain);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += gout[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.node(*x).needs_grad {
                    let gx = self.acc(grads, *x);
                    let inv_n = T::one() / T::of(cols as f64);
                    for r in 0..rows {
                        let go = &gout[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let d = go[c] * g[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for c in 0..cols {
                            let d = go[c] * g[c];
                            gx[r * cols + c] += rstd[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin } => {
                let (rows, dim) = rows_cols(&node.shape);
                let half = dim / 2;
                let gx = self.acc(grads, *x);
                for r in 0..rows {
                    for j in 0..half {
                        let (c, s) = (cos[r * half + j], sin[r * half + j]);
                        let (ga, gb) = (gout[r * dim + 2 * j], gout[r * dim + 2 * j + 1]);
                        gx[r * dim + 2 * j] += ga * c + gb * s;
                        gx[r * dim + 2 * j + 1] += gb * c - ga * s;
                    }
                }
            }
            &Op::SwiGlu { gate, value } => {
                let (a, b) = (self.value(gate), self.value(value));
                if self.node(gate).needs_grad {
                    let ga = self.acc(grads, gate);
                    for i in 0..gout.len() {
                        let s = sigmoid(a[i]);
                        // d/da [a * s(a)] = s + a s (1 - s)
                        ga[i] += gout[i] * b[i] * (s + a[i] * s * (T::one() - s));
                    }
                }
                if self.node(value).needs_grad {
                    let gb = self.acc(grads, value);
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * a[i] * sigmoid(a[i]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *batch, *seq, *heads, probs, gout, grads),
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.shape(*logits).last().copied().unwrap_or(1);
                let scale = gout[0] / T::of(targets.len().max(1) as f64);
                let gl = self.acc(grads, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut gl[r * vocab..(r + 1) * vocab];
                    axpy(row, scale, &probs[r * vocab..(r + 1) * vocab]);
                    row[t] -= scale;
                }
            }
            Op::LogSumExpRows { x, probs } => {
                let cols = self.shape(*x).last().copied().unwrap_or(1);
                let gx = self.acc(grads, *x);
                for (r, &go) in gout.iter().enumerate() {
                    axpy(&mut gx[r * cols..(r + 1) * cols], go, &probs[r * cols..(r + 1) * cols]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let width = self.shape(q)[1];
        let hd = width / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![T::zero(); qv.len()];
        let mut gk = vec![T::zero(); kv.len()];
        let mut gv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * width + h * hd;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // dP = dO V^T
                T::gemm(
                    seq,
                    hd,
                    seq,
                    T::one(),
                    View::new(gout, base, width, 1),
                    View::new(vv, base, 1, width),
                    T::zero(),
                    ViewMut::row_major(&mut dp, seq),
                );
                // dV += P^T dO
                T::gemm(
                    seq,
                    seq,
                    hd,
                    T::one(),
                    View::transposed(p, seq),
                    View::new(gout, base, width, 1),
                    T::one(),
                    ViewMut::new(&mut gv, base, width, 1),
                );
                // dS = P * (dP - rowsum(dP * P)) * scale; masked entries have P = 0
                for i in 0..seq {
                    let prow = &p[i * seq..(i + 1) * seq];
                    let drow = &mut dp[i * seq..(i + 1) * seq];
                    let dot: T = prow[..=i].iter().zip(&drow[..=i]).map(|(&a, &b)| a * b).sum();
                    for j in 0..seq {
                        drow[j] = if j <= i {
                            prow[j] * (drow[j] - dot) * scale
                        } else {
                            T::zero()
                        };
                    }
                }
                // dQ += dS K ; dK += dS^T Q
                T::gemm(
                    seq,
                    seq,
                    hd,
                    T::one(),
                    View::row_major(&dp, seq),
                    View::new(kv, base, width, 1),
                    T::one(),
                    ViewMut::new(&mut gq, base, width, 1),
                );
                T::gemm(
                    seq,
                    seq,
                    hd,
                    T::one(),
                    View::transposed(&dp, seq),
                    View::new(qv, base, width, 1),
                    T::one(),
                    ViewMut::new(&mut gk, base, width, 1),
                );
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.node(var).needs_grad {
                axpy(self.acc(grads, var), T::one(), &g);
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }
}

#[inline]
fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Angular frequency of rotary pair `j` for a head of width `dim`.
pub fn rope_frequency(j: usize, dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * j as f64 / dim as f64)
}

/// Max-shifted `log(sum(exp(x)))`.
pub fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Subnormal values become zero: they carry no usable probability mass and
/// arithmetic on them is very slow on common CPUs.
fn flush_subnormal<T: Real>(v: T) -> T {
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

fn softmax_in_place<T: Real>(x: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in x.iter_mut() {
        *v = flush_subnormal((*v - m).exp());
        s += *v;
    }
    let inv = T::one() / s;
    x.iter_mut().for_each(|v| *v = flush_subnormal(*v * inv));
}

/// Max-shifted softmax of one vector.
pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).with_grad()
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = (random(&mut rng, vec![3, 4]), random(&mut rng, vec![4, 2]));
        let mut g = Graph::new();
        let (va, vb) = (g.input(&a), g.input(&b));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.values()[i * 4 + p] * b.values()[p * 2 + j];
                }
                assert!((g.value(c)[i * 2 + j] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_nt_matches_matmul_on_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b) = (random(&mut rng, vec![5, 3]), random(&mut rng, vec![4, 3]));
        let bt = Tensor::from_fn(vec![3, 4], |i| b.values()[(i % 4) * 3 + i / 4]);
        let mut g = Graph::new();
        let (va, vb, vbt) = (g.input(&a), g.input(&b), g.input(&bt));
        let c1 = g.matmul_nt(va, vb).unwrap();
        let c2 = g.matmul(va, vbt).unwrap();
        for (x, y) in g.value(c1).iter().zip(g.value(c2)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![2, 2], vec![4.0, 4.0, 1.0, -1.0]).unwrap();
        let gain = g.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let y = g.layer_norm(x, gain).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_eq!(&g.value(y)[..2], &[0.0, 0.0]);
        assert!((g.value(y)[2] - expect).abs() < 1e-15);
        assert!((g.value(y)[3] + expect).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(vec![20, 16], |_| rng.random_range(-10.0..10.0));
        let mut g = Graph::<f64>::new();
        let vx = g.input(&x);
        let gain = g.constant(vec![16], vec![1.0; 16]).unwrap();
        let y = g.layer_norm(vx, gain).unwrap();
        for row in g.value(y).chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-12);
            assert!((var - 1.0).abs() <= 1e-6, "{var}");
        }
    }

    #[test]
    fn softmax_xent_examples() {
        let cases: [(&[f64], usize, f64); 3] = [
            (&[0.0], 0, 0.0),
            (&[0.5, 0.5, 0.5, 0.5], 2, 4f64.ln()),
            (&[1.0, 2.0, 3.0], 2, (1.0 + (-1f64).exp() + (-2f64).exp()).ln()),
        ];
        for (logits, t, expect) in cases {
            let mut g = Graph::new();
            let l = g.constant(vec![1, logits.len()], logits.to_vec()).unwrap();
            let loss = g.softmax_xent(l, &[t]).unwrap();
            assert!((g.scalar(loss) - expect).abs() < 1e-12, "{logits:?}");
        }
        assert!((0.407606 - (1.0 + (-1f64).exp() + (-2f64).exp()).ln()).abs() < 1e-6);
    }

    #[test]
    fn softmax_xent_target_out_of_range() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(g.softmax_xent(l, &[3]), Err(NnError::Index { .. })));
    }

    #[test]
    fn xent_gradient_sums_to_zero() {
        let mut g = Graph::new();
        let l = g.input(&Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]).with_grad());
        let l2 = g.reshape(l, vec![1, 4]).unwrap();
        let loss = g.softmax_xent(l2, &[1]).unwrap();
        g.backward(loss).unwrap();
        let s: f64 = g.grad(l).unwrap().iter().sum();
        assert!(s.abs() < 1e-15);
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::<f64>::zeros(vec![2, 3, 2]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::<f64>::zeros(vec![3]).with_grad());
        assert!(matches!(g.backward(x), Err(NnError::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // d/dx sum(x + x) = 2
        let mut g = Graph::new();
        let x = g.input(&Tensor::<f64>::zeros(vec![4]).with_grad());
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn gather_rejects_bad_id() {
        let mut g = Graph::<f32>::new();
        let t = g.input(&Tensor::zeros(vec![3, 2]));
        assert!(matches!(g.gather(t, &[0, 3]), Err(NnError::Index { .. })));
    }

    #[test]
    fn rope_rejects_odd_dim() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::zeros(vec![2, 3]));
        assert!(g.rope(x, &[0, 1], 10_000.0).is_err());
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random(&mut rng, vec![6, 4]);
        let k = random(&mut rng, vec![6, 4]);
        let v = Tensor::from_fn(vec![6, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let (vq, vk, vv) = (g.input(&q), g.input(&k), g.input(&v));
        let o = g.causal_attention(vq, vk, vv, 2, 3, 2).unwrap();
        // head 0 column 0 is all ones in V, so outputs are exactly the weight sum
        for r in 0..6 {
            assert!((g.value(o)[r * 4] - 1.0).abs() < 1e-12);
        }
        // first position of each sequence attends only to itself
        assert_eq!(&g.value(o)[..4], &v.values()[..4]);
    }
}
