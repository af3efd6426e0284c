//! Reverse-mode autodiff on a linear tape.
//!
//! Each operation appends a node holding its output buffer plus whatever the
//! backward pass needs (softmax probabilities, norm statistics). Nodes refer
//! to inputs by index, so the tape is a DAG in topological order by
//! construction and `backward` is a single reverse sweep.
//!
//! Gradients only flow into nodes with `requires_grad`; subgraphs fed purely
//! by constants (teacher forward passes, input images) cost nothing extra.

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    /// `a [m,k] * b[n,k]^T`, used by the weight-normalized prototype layer.
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Tile { x: NodeId, reps: usize },
    ConcatRows { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Gelu { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    LogSoftmax { x: NodeId },
    L2NormalizeRows { x: NodeId },
    Sdpa { q: NodeId, k: NodeId, v: NodeId },
    Mha { qkv: NodeId, batch: usize, tokens: usize, heads: usize },
    PatchExtract { images: NodeId, patch: usize },
    PrependCls { patches: NodeId, cls: NodeId, batch: usize },
    GatherRows { x: NodeId, indices: Vec<usize> },
    SumAll { x: NodeId },
}

struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    /// Forward intermediates needed by backward (probs, norm stats, ...).
    saved: Vec<T>,
}

/// Computation tape. Build one per training step and drop it afterwards.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad,
            Vec::new(),
        )
    }

    /// Copies a tensor onto the tape as a constant (never receives grad).
    pub fn constant(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            false,
            Vec::new(),
        )
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new_unchecked(self.nodes[id.0].data.clone(), self.nodes[id.0].shape.clone())
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(
        &mut self,
        data: Vec<T>,
        shape: Vec<usize>,
        op: Op,
        requires_grad: bool,
        saved: Vec<T>,
    ) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            requires_grad,
            grad: None,
            saved,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::shape(op, "rank-2 tensor", format!("shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let n = self.nodes[id.0].data.len();
        let cols = self.shape(id).last().copied().unwrap_or(1).max(1);
        (n / cols, cols)
    }

    // ---- forward ops -----------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rank2("matmul", a)?;
        let (kb, n) = self.rank2("matmul", b)?;
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims to agree ([{m},{ka}] x [{kb},{n}])"),
                "mismatch",
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            false,
            false,
            m,
            ka,
            n,
            T::one(),
            self.value(a),
            self.value(b),
            T::zero(),
            &mut out,
        );
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b }, rg, Vec::new()))
    }

    /// `[m,k] x [n,k]^T -> [m,n]` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rank2("matmul_nt", a)?;
        let (n, kb) = self.rank2("matmul_nt", b)?;
        if ka != kb {
            return Err(Error::shape(
                "matmul_nt",
                format!("shared last dim ([{m},{ka}] x [{n},{kb}]^T)"),
                "mismatch",
            ));
        }
        let mut out = vec![T::zero(); m * n];
        // B^T view: logical [k, n] from buffer [n, k].
        let a_buf = self.value(a);
        let b_buf = self.value(b);
        unsafe {
            T::gemm_raw(
                m,
                ka,
                n,
                T::one(),
                a_buf.as_ptr(),
                ka as isize,
                1,
                b_buf.as_ptr(),
                1,
                ka as isize,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(out, vec![m, n], Op::MatMulNT { a, b }, rg, Vec::new()))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("matching shapes, lhs {:?}", self.shape(a)),
                format!("rhs {:?}", self.shape(b)),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(out, shape, op, rg, Vec::new()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a `[d]` bias to every row of an `[..., d]` tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        if self.shape(bias) != [cols] {
            return Err(Error::shape(
                "add_bias",
                format!("bias [{cols}]"),
                format!("{:?}", self.shape(bias)),
            ));
        }
        let mut out = self.value(x).to_vec();
        let b = self.value(bias);
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] += b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.wants(x) || self.wants(bias);
        Ok(self.push(out, shape, Op::AddBias { x, bias }, rg, Vec::new()))
    }

    /// Repeats a `[r,c]` block `reps` times along rows -> `[reps*r, c]`.
    pub fn tile_rows(&mut self, x: NodeId, reps: usize) -> Result<NodeId> {
        let (r, c) = self.rank2("tile_rows", x)?;
        if reps == 0 {
            return Err(Error::InvalidArgument("tile_rows: reps must be >= 1".into()));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.len() * reps);
        for _ in 0..reps {
            out.extend_from_slice(src);
        }
        let rg = self.wants(x);
        Ok(self.push(out, vec![reps * r, c], Op::Tile { x, reps }, rg, Vec::new()))
    }

    /// Stacks two `[r, c]` tensors along rows.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.rank2("concat_rows", a)?;
        let (rb, cb) = self.rank2("concat_rows", b)?;
        if ca != cb {
            return Err(Error::shape(
                "concat_rows",
                format!("equal column counts ({ca})"),
                format!("{cb}"),
            ));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(out, vec![ra + rb, ca], Op::ConcatRows { a, b }, rg, Vec::new()))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cc = T::from_f64(c);
        let out: Vec<T> = self.value(x).iter().map(|&v| v * cc).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.wants(x);
        Ok(self.push(out, shape, Op::Scale { x, c }, rg, Vec::new()))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<T> = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.wants(x);
        Ok(self.push(out, shape, Op::Gelu { x }, rg, Vec::new()))
    }

    /// LayerNorm over the last dimension with learned `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma/beta [{cols}]"),
                format!("{:?}/{:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let mut out = vec![T::zero(); rows * cols];
        let mut stats = vec![T::zero(); 2 * rows];
        kernels::layer_norm_rows(
            self.value(x),
            rows,
            cols,
            self.value(gamma),
            self.value(beta),
            T::from_f64(eps),
            &mut out,
            &mut stats,
        );
        let shape = self.shape(x).to_vec();
        let rg = self.wants(x) || self.wants(gamma) || self.wants(beta);
        Ok(self.push(out, shape, Op::LayerNorm { x, gamma, beta }, rg, stats))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        let mut out = vec![T::zero(); rows * cols];
        kernels::log_softmax_rows(self.value(x), rows, cols, &mut out);
        let shape = self.shape(x).to_vec();
        let rg = self.wants(x);
        Ok(self.push(out, shape, Op::LogSoftmax { x }, rg, Vec::new()))
    }

    /// Row-wise L2 normalization with a zero-row guard.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        let mut out = vec![T::zero(); rows * cols];
        let mut inv = vec![T::zero(); rows];
        kernels::l2_normalize_rows(self.value(x), rows, cols, &mut out, &mut inv);
        let shape = self.shape(x).to_vec();
        let rg = self.wants(x);
        Ok(self.push(out, shape, Op::L2NormalizeRows { x }, rg, inv))
    }

    /// Single-head scaled dot-product attention. Returns the output node and
    /// a copy of the attention probabilities `[tq, tk]`.
    pub fn scaled_dot_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
    ) -> Result<(NodeId, Tensor<T>)> {
        let (tq, dq) = self.rank2("scaled_dot_attention", q)?;
        let (tk, dk) = self.rank2("scaled_dot_attention", k)?;
        let (tv, dv) = self.rank2("scaled_dot_attention", v)?;
        if dq != dk || tk != tv {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("q [tq,{dq}], k [tk,{dq}], v [tk,dv]"),
                format!("q [{tq},{dq}], k [{tk},{dk}], v [{tv},{dv}]"),
            ));
        }
        let mut probs = vec![T::zero(); tq * tk];
        let mut out = vec![T::zero(); tq * dv];
        kernels::sdpa_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            tq,
            tk,
            dq,
            dv,
            &mut probs,
            &mut out,
        );
        let probs_t = Tensor::new_unchecked(probs.clone(), vec![tq, tk]);
        let rg = self.wants(q) || self.wants(k) || self.wants(v);
        let id = self.push(out, vec![tq, dv], Op::Sdpa { q, k, v }, rg, probs);
        Ok((id, probs_t))
    }

    /// Multi-head self-attention over packed `qkv` rows.
    ///
    /// `qkv` is `[batch*tokens, 3*dim]` laid out `[q | k | v]` per row; the
    /// output is `[batch*tokens, dim]`. Attention probabilities are retained
    /// and can be read back with [`Tape::attn_probs`].
    pub fn multi_head_attention(
        &mut self,
        qkv: NodeId,
        batch: usize,
        tokens: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let (rows, cols) = self.rank2("multi_head_attention", qkv)?;
        if rows != batch * tokens || cols % 3 != 0 || (cols / 3) % heads != 0 || heads == 0 {
            return Err(Error::shape(
                "multi_head_attention",
                format!("[{}*{}, 3*dim] with dim divisible by {heads} heads", batch, tokens),
                format!("[{rows},{cols}]"),
            ));
        }
        let dim = cols / 3;
        let dh = dim / heads;
        let x = self.value(qkv);
        let mut out = vec![T::zero(); rows * dim];
        let mut saved = vec![T::zero(); batch * heads * tokens * tokens];
        let mut q = vec![T::zero(); tokens * dh];
        let mut k = vec![T::zero(); tokens * dh];
        let mut v = vec![T::zero(); tokens * dh];
        let mut o = vec![T::zero(); tokens * dh];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..tokens {
                    let src = (b * tokens + t) * cols + h * dh;
                    q[t * dh..(t + 1) * dh].copy_from_slice(&x[src..src + dh]);
                    k[t * dh..(t + 1) * dh].copy_from_slice(&x[src + dim..src + dim + dh]);
                    v[t * dh..(t + 1) * dh]
                        .copy_from_slice(&x[src + 2 * dim..src + 2 * dim + dh]);
                }
                let pbase = (b * heads + h) * tokens * tokens;
                kernels::sdpa_forward(
                    &q,
                    &k,
                    &v,
                    tokens,
                    tokens,
                    dh,
                    dh,
                    &mut saved[pbase..pbase + tokens * tokens],
                    &mut o,
                );
                for t in 0..tokens {
                    out[(b * tokens + t) * dim + h * dh..(b * tokens + t) * dim + (h + 1) * dh]
                        .copy_from_slice(&o[t * dh..(t + 1) * dh]);
                }
            }
        }
        let rg = self.wants(qkv);
        Ok(self.push(
            out,
            vec![rows, dim],
            Op::Mha { qkv, batch, tokens, heads },
            rg,
            saved,
        ))
    }

    /// Attention probabilities of a `multi_head_attention` node as
    /// `[batch, heads, tokens, tokens]`.
    pub fn attn_probs(&self, id: NodeId) -> Result<Tensor<T>> {
        match &self.nodes[id.0].op {
            Op::Mha { batch, tokens, heads, .. } => Ok(Tensor::new_unchecked(
                self.nodes[id.0].saved.clone(),
                vec![*batch, *heads, *tokens, *tokens],
            )),
            _ => Err(Error::InvalidArgument(
                "attn_probs: node is not a multi_head_attention output".into(),
            )),
        }
    }

    /// Unfolds `[B, C, H, W]` images into `[B*P, C*p*p]` patch rows, with
    /// patches ordered row-major over the grid.
    pub fn patch_extract(&mut self, images: NodeId, patch: usize) -> Result<NodeId> {
        let s = self.shape(images).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("patch_extract", "[B,C,H,W]", format!("{s:?}")));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape(
                "patch_extract",
                format!("H,W divisible by patch {patch}"),
                format!("H={h}, W={w}"),
            ));
        }
        let (gh, gw) = (h / patch, w / patch);
        let p2 = patch * patch;
        let row_len = c * p2;
        let img = self.value(images);
        let mut out = vec![T::zero(); bsz * gh * gw * row_len];
        for b in 0..bsz {
            for gy in 0..gh {
                for gx in 0..gw {
                    let row = ((b * gh + gy) * gw + gx) * row_len;
                    for ch in 0..c {
                        for iy in 0..patch {
                            let src = ((b * c + ch) * h + gy * patch + iy) * w + gx * patch;
                            let dst = row + ch * p2 + iy * patch;
                            out[dst..dst + patch].copy_from_slice(&img[src..src + patch]);
                        }
                    }
                }
            }
        }
        let rg = self.wants(images);
        Ok(self.push(
            out,
            vec![bsz * gh * gw, row_len],
            Op::PatchExtract { images, patch },
            rg,
            Vec::new(),
        ))
    }

    /// Inserts a learned CLS row at the front of every sample:
    /// `[B*P, D] + [1, D] -> [B*(P+1), D]`.
    pub fn prepend_cls(&mut self, patches: NodeId, cls: NodeId, batch: usize) -> Result<NodeId> {
        let (rows, d) = self.rank2("prepend_cls", patches)?;
        if batch == 0 || rows % batch != 0 {
            return Err(Error::shape(
                "prepend_cls",
                format!("rows divisible by batch {batch}"),
                format!("{rows}"),
            ));
        }
        if self.nodes[cls.0].data.len() != d {
            return Err(Error::shape(
                "prepend_cls",
                format!("cls with {d} elements"),
                format!("{}", self.nodes[cls.0].data.len()),
            ));
        }
        let p = rows / batch;
        let src = self.value(patches);
        let cls_data = self.value(cls).to_vec();
        let mut out = vec![T::zero(); batch * (p + 1) * d];
        for b in 0..batch {
            let base = b * (p + 1) * d;
            out[base..base + d].copy_from_slice(&cls_data);
            out[base + d..base + (p + 1) * d].copy_from_slice(&src[b * p * d..(b + 1) * p * d]);
        }
        let rg = self.wants(patches) || self.wants(cls);
        Ok(self.push(
            out,
            vec![batch * (p + 1), d],
            Op::PrependCls { patches, cls, batch },
            rg,
            Vec::new(),
        ))
    }

    /// Selects rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.rank2("gather_rows", x)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("indices < {rows}"),
                format!("{bad}"),
            ));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.wants(x);
        Ok(self.push(
            out,
            vec![indices.len(), cols],
            Op::GatherRows { x, indices: indices.to_vec() },
            rg,
            Vec::new(),
        ))
    }

    /// Sum of all elements -> `[1]`.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.wants(x);
        Ok(self.push(vec![s], vec![1], Op::SumAll { x }, rg, Vec::new()))
    }

    /// Mean of all elements -> `[1]`.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].data.len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- backward --------------------------------------------------------

    fn acc(&mut self, id: NodeId, contrib: Vec<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, c) in g.iter_mut().zip(contrib) {
                    *gi += c;
                }
            }
            None => {
                debug_assert_eq!(contrib.len(), node.data.len());
                node.grad = Some(contrib);
            }
        }
    }

    /// Reverse sweep from a scalar loss. Accumulated gradients are read back
    /// with [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss [1]",
                format!("{:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::InvalidArgument(
                "backward: loss does not depend on any grad-enabled input".into(),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("grad present");
            let op = self.nodes[i].op.clone();
            self.step_backward(i, &g, &op);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize, g: &[T], op: &Op) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(false, true, m, n, k, T::one(), g, self.value(b), T::zero(), &mut da);
                    self.acc(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm(true, false, k, m, n, T::one(), self.value(a), g, T::zero(), &mut db);
                    self.acc(b, db);
                }
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(false, false, m, n, k, T::one(), g, self.value(b), T::zero(), &mut da);
                    self.acc(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); n * k];
                    kernels::gemm(true, false, n, m, k, T::one(), g, self.value(a), T::zero(), &mut db);
                    self.acc(b, db);
                }
            }
            Op::Add { a, b } => {
                if self.wants(a) {
                    self.acc(a, g.to_vec());
                }
                if self.wants(b) {
                    self.acc(b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.wants(a) {
                    self.acc(a, g.to_vec());
                }
                if self.wants(b) {
                    self.acc(b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.wants(a) {
                    let da: Vec<T> = g.iter().zip(self.value(b)).map(|(&gi, &bi)| gi * bi).collect();
                    self.acc(a, da);
                }
                if self.wants(b) {
                    let db: Vec<T> = g.iter().zip(self.value(a)).map(|(&gi, &ai)| gi * ai).collect();
                    self.acc(b, db);
                }
            }
            Op::AddBias { x, bias } => {
                let (rows, cols) = self.rows_cols(x);
                if self.wants(x) {
                    self.acc(x, g.to_vec());
                }
                if self.wants(bias) {
                    let mut db = vec![T::zero(); cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += g[r * cols + j];
                        }
                    }
                    self.acc(bias, db);
                }
            }
            Op::Tile { x, reps } => {
                if self.wants(x) {
                    let n = self.nodes[x.0].data.len();
                    let mut dx = vec![T::zero(); n];
                    for rep in 0..reps {
                        for j in 0..n {
                            dx[j] += g[rep * n + j];
                        }
                    }
                    self.acc(x, dx);
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.nodes[a.0].data.len();
                if self.wants(a) {
                    self.acc(a, g[..na].to_vec());
                }
                if self.wants(b) {
                    self.acc(b, g[na..].to_vec());
                }
            }
            Op::Scale { x, c } => {
                if self.wants(x) {
                    let cc = T::from_f64(c);
                    self.acc(x, g.iter().map(|&v| v * cc).collect());
                }
            }
            Op::Gelu { x } => {
                if self.wants(x) {
                    let dx: Vec<T> = g
                        .iter()
                        .zip(self.value(x))
                        .map(|(&gi, &xi)| gi * kernels::gelu_grad(xi))
                        .collect();
                    self.acc(x, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (rows, cols) = self.rows_cols(x);
                let mut dx = if self.wants(x) { vec![T::zero(); rows * cols] } else { Vec::new() };
                let mut dgamma = if self.wants(gamma) { vec![T::zero(); cols] } else { Vec::new() };
                let mut dbeta = if self.wants(beta) { vec![T::zero(); cols] } else { Vec::new() };
                kernels::layer_norm_backward(
                    g,
                    &self.nodes[x.0].data,
                    rows,
                    cols,
                    &self.nodes[gamma.0].data,
                    &self.nodes[i].saved,
                    &mut dx,
                    &mut dgamma,
                    &mut dbeta,
                );
                if !dx.is_empty() {
                    self.acc(x, dx);
                }
                if !dgamma.is_empty() {
                    self.acc(gamma, dgamma);
                }
                if !dbeta.is_empty() {
                    self.acc(beta, dbeta);
                }
            }
            Op::LogSoftmax { x } => {
                if self.wants(x) {
                    let (rows, cols) = self.rows_cols(x);
                    let y = &self.nodes[i].data;
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let mut gsum = T::zero();
                        for j in 0..cols {
                            gsum += g[r * cols + j];
                        }
                        for j in 0..cols {
                            let idx = r * cols + j;
                            dx[idx] = g[idx] - y[idx].exp() * gsum;
                        }
                    }
                    self.acc(x, dx);
                }
            }
            Op::L2NormalizeRows { x } => {
                if self.wants(x) {
                    let (rows, cols) = self.rows_cols(x);
                    let y = &self.nodes[i].data;
                    let inv = &self.nodes[i].saved;
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let mut dot = T::zero();
                        for j in 0..cols {
                            dot += g[base + j] * y[base + j];
                        }
                        for j in 0..cols {
                            dx[base + j] = inv[r] * (g[base + j] - y[base + j] * dot);
                        }
                    }
                    self.acc(x, dx);
                }
            }
            Op::Sdpa { q, k, v } => {
                let (tq, dh) = (self.shape(q)[0], self.shape(q)[1]);
                let (tk, dv) = (self.shape(v)[0], self.shape(v)[1]);
                let mut dq = if self.wants(q) { vec![T::zero(); tq * dh] } else { Vec::new() };
                let mut dk = if self.wants(k) { vec![T::zero(); tk * dh] } else { Vec::new() };
                let mut dvv = if self.wants(v) { vec![T::zero(); tk * dv] } else { Vec::new() };
                kernels::sdpa_backward(
                    g,
                    &self.nodes[q.0].data,
                    &self.nodes[k.0].data,
                    &self.nodes[v.0].data,
                    &self.nodes[i].saved,
                    tq,
                    tk,
                    dh,
                    dv,
                    &mut dq,
                    &mut dk,
                    &mut dvv,
                );
                if !dq.is_empty() {
                    self.acc(q, dq);
                }
                if !dk.is_empty() {
                    self.acc(k, dk);
                }
                if !dvv.is_empty() {
                    self.acc(v, dvv);
                }
            }
            Op::Mha { qkv, batch, tokens, heads } => {
                if self.wants(qkv) {
                    let cols = self.shape(qkv)[1];
                    let dim = cols / 3;
                    let dh = dim / heads;
                    let x = &self.nodes[qkv.0].data;
                    let saved = &self.nodes[i].saved;
                    let mut dqkv = vec![T::zero(); x.len()];
                    let mut q = vec![T::zero(); tokens * dh];
                    let mut kk = vec![T::zero(); tokens * dh];
                    let mut v = vec![T::zero(); tokens * dh];
                    let mut go = vec![T::zero(); tokens * dh];
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..tokens {
                                let src = (b * tokens + t) * cols + h * dh;
                                q[t * dh..(t + 1) * dh].copy_from_slice(&x[src..src + dh]);
                                kk[t * dh..(t + 1) * dh]
                                    .copy_from_slice(&x[src + dim..src + dim + dh]);
                                v[t * dh..(t + 1) * dh]
                                    .copy_from_slice(&x[src + 2 * dim..src + 2 * dim + dh]);
                                let gsrc = (b * tokens + t) * dim + h * dh;
                                go[t * dh..(t + 1) * dh].copy_from_slice(&g[gsrc..gsrc + dh]);
                            }
                            let pbase = (b * heads + h) * tokens * tokens;
                            let mut dq = vec![T::zero(); tokens * dh];
                            let mut dk = vec![T::zero(); tokens * dh];
                            let mut dv = vec![T::zero(); tokens * dh];
                            kernels::sdpa_backward(
                                &go,
                                &q,
                                &kk,
                                &v,
                                &saved[pbase..pbase + tokens * tokens],
                                tokens,
                                tokens,
                                dh,
                                dh,
                                &mut dq,
                                &mut dk,
                                &mut dv,
                            );
                            for t in 0..tokens {
                                let dst = (b * tokens + t) * cols + h * dh;
                                for j in 0..dh {
                                    dqkv[dst + j] += dq[t * dh + j];
                                    dqkv[dst + dim + j] += dk[t * dh + j];
                                    dqkv[dst + 2 * dim + j] += dv[t * dh + j];
                                }
                            }
                        }
                    }
                    self.acc(qkv, dqkv);
                }
            }
            Op::PatchExtract { images, patch } => {
                if self.wants(images) {
                    let s = self.shape(images).to_vec();
                    let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (gh, gw) = (h / patch, w / patch);
                    let p2 = patch * patch;
                    let row_len = c * p2;
                    let mut dimg = vec![T::zero(); bsz * c * h * w];
                    for b in 0..bsz {
                        for gy in 0..gh {
                            for gx in 0..gw {
                                let row = ((b * gh + gy) * gw + gx) * row_len;
                                for ch in 0..c {
                                    for iy in 0..patch {
                                        let dst =
                                            ((b * c + ch) * h + gy * patch + iy) * w + gx * patch;
                                        let src = row + ch * p2 + iy * patch;
                                        for j in 0..patch {
                                            dimg[dst + j] += g[src + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.acc(images, dimg);
                }
            }
            Op::PrependCls { patches, cls, batch } => {
                let d = self.shape(patches)[1];
                let p = self.shape(patches)[0] / batch;
                if self.wants(patches) {
                    let mut dp = vec![T::zero(); batch * p * d];
                    for b in 0..batch {
                        let base = b * (p + 1) * d;
                        dp[b * p * d..(b + 1) * p * d]
                            .copy_from_slice(&g[base + d..base + (p + 1) * d]);
                    }
                    self.acc(patches, dp);
                }
                if self.wants(cls) {
                    let mut dc = vec![T::zero(); d];
                    for b in 0..batch {
                        let base = b * (p + 1) * d;
                        for j in 0..d {
                            dc[j] += g[base + j];
                        }
                    }
                    self.acc(cls, dc);
                }
            }
            Op::GatherRows { x, ref indices } => {
                if self.wants(x) {
                    let (rows, cols) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![T::zero(); rows * cols];
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..cols {
                            dx[idx * cols + j] += g[r * cols + j];
                        }
                    }
                    self.acc(x, dx);
                }
            }
            Op::SumAll { x } => {
                if self.wants(x) {
                    let n = self.nodes[x.0].data.len();
                    self.acc(x, vec![g[0]; n]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn randv(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn elementwise_forward_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0], vec![2]).unwrap());
        let b = tape.leaf(&Tensor::from_vec(vec![3.0, 5.0], vec![2]).unwrap());
        let s = tape.add(a, b).unwrap();
        let d = tape.sub(a, b).unwrap();
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(s), &[4.0, 7.0]);
        assert_eq!(tape.value(d), &[-2.0, -3.0]);
        assert_eq!(tape.value(m), &[3.0, 10.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            &Tensor::from_vec(vec![1.0, -2.0, 3.0], vec![3])
                .unwrap()
                .with_grad(),
        );
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn aliased_inputs_accumulate_both_paths() {
        // f = sum(x + x) must give grad 2, exercising a == b accumulation.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![5.0], vec![1]).unwrap().with_grad());
        let s = tape.add(x, x).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2.0], vec![1]).unwrap().with_grad());
        let c = tape.constant(&Tensor::from_vec(vec![3.0], vec![1]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0], vec![2]).unwrap().with_grad());
        assert!(tape.backward(x).is_err());
        let c = tape.constant(&Tensor::from_vec(vec![1.0], vec![1]).unwrap());
        let s = tape.sum_all(c).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn matmul_shape_errors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![4, 5]));
        assert!(tape.matmul(a, b).is_err());
        let v = tape.leaf(&Tensor::zeros(vec![3]));
        assert!(tape.matmul(v, b).is_err());
    }

    /// Composite graph exercising matmul, bias, layer norm, GELU and
    /// log-softmax against central finite differences.
    #[test]
    fn mlp_gradients_match_finite_differences() {
        let (rows, din, dh, dout) = (3usize, 4usize, 5usize, 3usize);
        let x = randv(rows * din, 11);
        let sizes = [din * dh, dh, dh, dh, dh * dout, dout];
        let names = ["w1", "b1", "gamma", "beta", "w2", "b2"];
        let total: usize = sizes.iter().sum();
        let theta0 = randv(total, 12);
        let targets = randv(rows * dout, 13);

        let f = |theta: &[f64]| -> f64 {
            let mut parts = Vec::new();
            let mut off = 0;
            for &s in &sizes {
                parts.push(theta[off..off + s].to_vec());
                off += s;
            }
            let mut tape = Tape::<f64>::new();
            let xid = tape.constant(&Tensor::from_vec(x.clone(), vec![rows, din]).unwrap());
            let w1 = tape.leaf(
                &Tensor::from_vec(parts[0].clone(), vec![din, dh]).unwrap().with_grad(),
            );
            let b1 = tape.leaf(&Tensor::from_vec(parts[1].clone(), vec![dh]).unwrap().with_grad());
            let gamma =
                tape.leaf(&Tensor::from_vec(parts[2].clone(), vec![dh]).unwrap().with_grad());
            let beta =
                tape.leaf(&Tensor::from_vec(parts[3].clone(), vec![dh]).unwrap().with_grad());
            let w2 = tape.leaf(
                &Tensor::from_vec(parts[4].clone(), vec![dh, dout]).unwrap().with_grad(),
            );
            let b2 =
                tape.leaf(&Tensor::from_vec(parts[5].clone(), vec![dout]).unwrap().with_grad());
            let h = tape.matmul(xid, w1).unwrap();
            let h = tape.add_bias(h, b1).unwrap();
            let h = tape.layer_norm(h, gamma, beta, 1e-6).unwrap();
            let h = tape.gelu(h).unwrap();
            let y = tape.matmul(h, w2).unwrap();
            let y = tape.add_bias(y, b2).unwrap();
            let ls = tape.log_softmax(y).unwrap();
            let t = tape.constant(&Tensor::from_vec(targets.clone(), vec![rows, dout]).unwrap());
            let prod = tape.mul(ls, t).unwrap();
            let s = tape.sum_all(prod).unwrap();
            let loss = tape.scale(s, -1.0 / rows as f64).unwrap();
            tape.value(loss)[0]
        };

        // Analytic gradients from one tape pass.
        let mut parts = Vec::new();
        let mut off = 0;
        for &s in &sizes {
            parts.push(theta0[off..off + s].to_vec());
            off += s;
        }
        let mut tape = Tape::<f64>::new();
        let xid = tape.constant(&Tensor::from_vec(x.clone(), vec![rows, din]).unwrap());
        let ids: Vec<NodeId> = parts
            .iter()
            .zip([vec![din, dh], vec![dh], vec![dh], vec![dh], vec![dh, dout], vec![dout]])
            .map(|(p, s)| tape.leaf(&Tensor::from_vec(p.clone(), s).unwrap().with_grad()))
            .collect();
        let h = tape.matmul(xid, ids[0]).unwrap();
        let h = tape.add_bias(h, ids[1]).unwrap();
        let h = tape.layer_norm(h, ids[2], ids[3], 1e-6).unwrap();
        let h = tape.gelu(h).unwrap();
        let y = tape.matmul(h, ids[4]).unwrap();
        let y = tape.add_bias(y, ids[5]).unwrap();
        let ls = tape.log_softmax(y).unwrap();
        let t = tape.constant(&Tensor::from_vec(targets.clone(), vec![rows, dout]).unwrap());
        let prod = tape.mul(ls, t).unwrap();
        let s = tape.sum_all(prod).unwrap();
        let loss = tape.scale(s, -1.0 / rows as f64).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic = Vec::with_capacity(total);
        for (id, name) in ids.iter().zip(names) {
            let g = tape.grad(*id).unwrap_or_else(|| panic!("no grad for {name}"));
            analytic.extend_from_slice(g);
        }

        let numeric = gradcheck::central_diff(f, &theta0, 1e-5);
        let worst = gradcheck::max_rel_error(&analytic, &numeric, 1e-2);
        assert!(worst < 1e-7, "worst relative error {worst}");
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (tq, tk, dh, dv) = (3usize, 4usize, 2usize, 2usize);
        let sizes = [tq * dh, tk * dh, tk * dv];
        let total: usize = sizes.iter().sum();
        let theta0 = randv(total, 21);
        let w = randv(tq * dv, 22);

        let f = |theta: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let q = tape.leaf(
                &Tensor::from_vec(theta[..tq * dh].to_vec(), vec![tq, dh]).unwrap().with_grad(),
            );
            let k = tape.leaf(
                &Tensor::from_vec(theta[tq * dh..tq * dh + tk * dh].to_vec(), vec![tk, dh])
                    .unwrap()
                    .with_grad(),
            );
            let v = tape.leaf(
                &Tensor::from_vec(theta[tq * dh + tk * dh..].to_vec(), vec![tk, dv])
                    .unwrap()
                    .with_grad(),
            );
            let (out, _) = tape.scaled_dot_attention(q, k, v).unwrap();
            let wt = tape.constant(&Tensor::from_vec(w.clone(), vec![tq, dv]).unwrap());
            let prod = tape.mul(out, wt).unwrap();
            let loss = tape.sum_all(prod).unwrap();
            tape.value(loss)[0]
        };

        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(
            &Tensor::from_vec(theta0[..tq * dh].to_vec(), vec![tq, dh]).unwrap().with_grad(),
        );
        let k = tape.leaf(
            &Tensor::from_vec(theta0[tq * dh..tq * dh + tk * dh].to_vec(), vec![tk, dh])
                .unwrap()
                .with_grad(),
        );
        let v = tape.leaf(
            &Tensor::from_vec(theta0[tq * dh + tk * dh..].to_vec(), vec![tk, dv])
                .unwrap()
                .with_grad(),
        );
        let (out, probs) = tape.scaled_dot_attention(q, k, v).unwrap();
        // Attention rows are probability distributions.
        for r in 0..tq {
            let s: f64 = probs.data()[r * tk..(r + 1) * tk].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let wt = tape.constant(&Tensor::from_vec(w.clone(), vec![tq, dv]).unwrap());
        let prod = tape.mul(out, wt).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        analytic.extend_from_slice(tape.grad(q).unwrap());
        analytic.extend_from_slice(tape.grad(k).unwrap());
        analytic.extend_from_slice(tape.grad(v).unwrap());

        let numeric = gradcheck::central_diff(f, &theta0, 1e-6);
        let worst = gradcheck::max_rel_error(&analytic, &numeric, 1e-2);
        assert!(worst < 1e-7, "worst relative error {worst}");
    }

    #[test]
    fn multi_head_matches_single_head_sdpa() {
        // heads=1 MHA must agree with the standalone attention op.
        let (tokens, dim) = (5usize, 4usize);
        let qkv_data = randv(tokens * 3 * dim, 31);
        let mut tape = Tape::<f64>::new();
        let qkv = tape.leaf(
            &Tensor::from_vec(qkv_data.clone(), vec![tokens, 3 * dim]).unwrap().with_grad(),
        );
        let out = tape.multi_head_attention(qkv, 1, tokens, 1).unwrap();

        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for t in 0..tokens {
            q.extend_from_slice(&qkv_data[t * 3 * dim..t * 3 * dim + dim]);
            k.extend_from_slice(&qkv_data[t * 3 * dim + dim..t * 3 * dim + 2 * dim]);
            v.extend_from_slice(&qkv_data[t * 3 * dim + 2 * dim..(t + 1) * 3 * dim]);
        }
        let mut ref_tape = Tape::<f64>::new();
        let qn = ref_tape.leaf(&Tensor::from_vec(q, vec![tokens, dim]).unwrap());
        let kn = ref_tape.leaf(&Tensor::from_vec(k, vec![tokens, dim]).unwrap());
        let vn = ref_tape.leaf(&Tensor::from_vec(v, vec![tokens, dim]).unwrap());
        let (ref_out, _) = ref_tape.scaled_dot_attention(qn, kn, vn).unwrap();

        let diff = tape
            .tensor(out)
            .max_abs_diff(&ref_tape.tensor(ref_out));
        assert!(diff < 1e-12, "max diff {diff}");

        let probs = tape.attn_probs(out).unwrap();
        assert_eq!(probs.shape(), &[1, 1, tokens, tokens]);
        for r in 0..tokens {
            let s: f64 = probs.data()[r * tokens..(r + 1) * tokens].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_gradients_match_finite_differences() {
        let (batch, tokens, dim, heads) = (2usize, 3usize, 4usize, 2usize);
        let n = batch * tokens * 3 * dim;
        let theta0 = randv(n, 41);
        let w = randv(batch * tokens * dim, 42);

        let f = |theta: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let qkv = tape.leaf(
                &Tensor::from_vec(theta.to_vec(), vec![batch * tokens, 3 * dim])
                    .unwrap()
                    .with_grad(),
            );
            let out = tape.multi_head_attention(qkv, batch, tokens, heads).unwrap();
            let wt = tape
                .constant(&Tensor::from_vec(w.clone(), vec![batch * tokens, dim]).unwrap());
            let prod = tape.mul(out, wt).unwrap();
            let loss = tape.sum_all(prod).unwrap();
            tape.value(loss)[0]
        };

        let mut tape = Tape::<f64>::new();
        let qkv = tape.leaf(
            &Tensor::from_vec(theta0.clone(), vec![batch * tokens, 3 * dim])
                .unwrap()
                .with_grad(),
        );
        let out = tape.multi_head_attention(qkv, batch, tokens, heads).unwrap();
        let wt =
            tape.constant(&Tensor::from_vec(w.clone(), vec![batch * tokens, dim]).unwrap());
        let prod = tape.mul(out, wt).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(qkv).unwrap().to_vec();

        let numeric = gradcheck::central_diff(f, &theta0, 1e-6);
        let worst = gradcheck::max_rel_error(&analytic, &numeric, 1e-2);
        assert!(worst < 1e-7, "worst relative error {worst}");
    }

    #[test]
    fn patch_extract_layout_and_backward() {
        // 1 image, 2 channels, 4x4, patch 2 -> 4 patches of 8 values.
        let (c, h, w, p) = (2usize, 4usize, 4usize, 2usize);
        let data: Vec<f64> = (0..c * h * w).map(|v| v as f64).collect();
        let mut tape = Tape::<f64>::new();
        let img = tape.leaf(
            &Tensor::from_vec(data, vec![1, c, h, w]).unwrap().with_grad(),
        );
        let patches = tape.patch_extract(img, p).unwrap();
        assert_eq!(tape.shape(patches), &[4, 8]);
        // Patch (0,1) of channel 0: pixels (0,2),(0,3),(1,2),(1,3).
        assert_eq!(&tape.value(patches)[8..12], &[2.0, 3.0, 6.0, 7.0]);
        // Channel 1 section of the same patch.
        assert_eq!(&tape.value(patches)[12..16], &[18.0, 19.0, 22.0, 23.0]);

        // Backward is a permutation: each pixel receives exactly its grad.
        let loss = tape.sum_all(patches).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(img).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn prepend_cls_layout_and_backward() {
        let (batch, p, d) = (2usize, 2usize, 3usize);
        let patches_data: Vec<f64> = (0..batch * p * d).map(|v| v as f64).collect();
        let cls_data = vec![100.0, 200.0, 300.0];
        let mut tape = Tape::<f64>::new();
        let patches = tape.leaf(
            &Tensor::from_vec(patches_data, vec![batch * p, d]).unwrap().with_grad(),
        );
        let cls = tape.leaf(&Tensor::from_vec(cls_data, vec![1, d]).unwrap().with_grad());
        let toks = tape.prepend_cls(patches, cls, batch).unwrap();
        assert_eq!(tape.shape(toks), &[batch * (p + 1), d]);
        assert_eq!(&tape.value(toks)[..3], &[100.0, 200.0, 300.0]);
        assert_eq!(&tape.value(toks)[9..12], &[100.0, 200.0, 300.0]);
        assert_eq!(&tape.value(toks)[3..6], &[0.0, 1.0, 2.0]);

        let loss = tape.sum_all(toks).unwrap();
        tape.backward(loss).unwrap();
        // CLS used once per sample.
        assert_eq!(tape.grad(cls).unwrap(), &[2.0, 2.0, 2.0]);
        assert!(tape.grad(patches).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn gather_tile_concat_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            &Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap().with_grad(),
        );
        let picked = tape.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(picked), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0][..]);
        let tiled = tape.tile_rows(picked, 2).unwrap();
        assert_eq!(tape.shape(tiled), &[6, 2]);
        let cat = tape.concat_rows(tiled, x).unwrap();
        assert_eq!(tape.shape(cat), &[8, 2]);
        let loss = tape.sum_all(cat).unwrap();
        tape.backward(loss).unwrap();
        // Row 0 appears twice via gather (x2 from tile) plus once direct = 3;
        // row 1 appears four times via gather/tile plus once direct = 5.
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0, 5.0, 5.0]);
    }

    #[test]
    fn l2_normalize_gradients_match_finite_differences() {
        let theta0 = randv(6, 51);
        let w = randv(6, 52);
        let f = |theta: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(
                &Tensor::from_vec(theta.to_vec(), vec![2, 3]).unwrap().with_grad(),
            );
            let y = tape.l2_normalize_rows(x).unwrap();
            let wt = tape.constant(&Tensor::from_vec(w.clone(), vec![2, 3]).unwrap());
            let prod = tape.mul(y, wt).unwrap();
            let loss = tape.sum_all(prod).unwrap();
            tape.value(loss)[0]
        };
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            &Tensor::from_vec(theta0.clone(), vec![2, 3]).unwrap().with_grad(),
        );
        let y = tape.l2_normalize_rows(x).unwrap();
        let wt = tape.constant(&Tensor::from_vec(w.clone(), vec![2, 3]).unwrap());
        let prod = tape.mul(y, wt).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        let numeric = gradcheck::central_diff(f, &theta0, 1e-6);
        let worst = gradcheck::max_rel_error(&analytic, &numeric, 1e-2);
        assert!(worst < 1e-7, "worst relative error {worst}");
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(
                &Tensor::from_vec(randv(12, 61).iter().map(|&v| v as f32).collect(), vec![3, 4])
                    .unwrap(),
            );
            let w = tape.leaf(
                &Tensor::from_vec(randv(8, 62).iter().map(|&v| v as f32).collect(), vec![4, 2])
                    .unwrap(),
            );
            let y = tape.matmul(x, w).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.tensor(y)
        };
        assert!(build().bit_eq(&build()));
    }
}
