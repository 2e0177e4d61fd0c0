use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation; inputs always precede the node.
#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Gelu {
        x: Var,
    },
    Exp {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    SplitHeads {
        x: Var,
        n: usize,
        m: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        n: usize,
        m: usize,
        heads: usize,
    },
    RelScores {
        q: Var,
        r: Var,
        buckets: Vec<usize>,
        heads: usize,
    },
    TransposeLast2 {
        x: Var,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Define-by-run record of executed operations.
///
/// Nodes are appended in execution order, so the recorded order is a
/// topological order of the computation graph. [`Tape::backward`] replays it
/// in reverse and sums gradients into inputs shared by several consumers.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are tracked.
    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = true;
        t.grad = None;
        self.push_raw(t, Op::Leaf)
    }

    /// Constant leaf: no gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push_raw(t, Op::Leaf)
    }

    /// Copy of `v` cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    pub(crate) fn push_raw(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        self.push_raw(value, op)
    }

    /// Accumulates d`loss`/d(node) into the grad buffer of every reachable
    /// node that requires a gradient. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
            let node = &mut self.nodes[i].value;
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].value.requires_grad;
        // Zero-initialised adjoint slot for an input, created on first use.
        fn slot<'a, T: Scalar>(adj: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
            adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, k) = (ta.shape()[0], ta.shape()[1]);
                let c = nodes[i].value.shape()[1];
                if wants(*a) {
                    // dA = dC · B_effᵀ
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, c as isize) };
                    let da = slot(adj, nodes, *a);
                    T::gemm(r, c, k, T::one(), g, c as isize, 1, tb.data(), rs, cs, T::one(), da, k as isize, 1);
                }
                if wants(*b) {
                    let db = slot(adj, nodes, *b);
                    if *trans_b {
                        // dB_stored [c,k] = dCᵀ · A
                        T::gemm(c, r, k, T::one(), g, 1, c as isize, ta.data(), k as isize, 1, T::one(), db, k as isize, 1);
                    } else {
                        // dB [k,c] = Aᵀ · dC
                        T::gemm(k, r, c, T::one(), ta.data(), 1, k as isize, g, c as isize, 1, T::one(), db, c as isize, 1);
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (bs, r, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let c = nodes[i].value.shape()[2];
                let (sa, sb, sc) = (r * k, k * c, r * c);
                if wants(*a) {
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, c as isize) };
                    let da = slot(adj, nodes, *a);
                    for bi in 0..bs {
                        T::gemm(
                            r, c, k, T::one(),
                            &g[bi * sc..(bi + 1) * sc], c as isize, 1,
                            &tb.data()[bi * sb..(bi + 1) * sb], rs, cs,
                            T::one(), &mut da[bi * sa..(bi + 1) * sa], k as isize, 1,
                        );
                    }
                }
                if wants(*b) {
                    let db = slot(adj, nodes, *b);
                    for bi in 0..bs {
                        let gs = &g[bi * sc..(bi + 1) * sc];
                        let asl = &ta.data()[bi * sa..(bi + 1) * sa];
                        let dbs = &mut db[bi * sb..(bi + 1) * sb];
                        if *trans_b {
                            T::gemm(c, r, k, T::one(), gs, 1, c as isize, asl, k as isize, 1, T::one(), dbs, k as isize, 1);
                        } else {
                            T::gemm(k, r, c, T::one(), asl, 1, k as isize, gs, c as isize, 1, T::one(), dbs, c as isize, 1);
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    add_into(slot(adj, nodes, *x), g);
                }
                if wants(*bias) {
                    let d = val(*bias).len();
                    let db = slot(adj, nodes, *bias);
                    for row in g.chunks_exact(d) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    add_into(slot(adj, nodes, *a), g);
                }
                if wants(*b) {
                    add_into(slot(adj, nodes, *b), g);
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    add_into(slot(adj, nodes, *a), g);
                }
                if wants(*b) {
                    let db = slot(adj, nodes, *b);
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bd = val(*b).data();
                    let da = slot(adj, nodes, *a);
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if wants(*b) {
                    let ad = val(*a).data();
                    let db = slot(adj, nodes, *b);
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale { x, s } => {
                if wants(*x) {
                    let dx = slot(adj, nodes, *x);
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *s);
                }
            }
            Op::Gelu { x } => {
                if wants(*x) {
                    let xd = val(*x).data();
                    let dx = slot(adj, nodes, *x);
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Exp { x } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let dx = slot(adj, nodes, *x);
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = val(*gain).len();
                let gn = val(*gain).data();
                if wants(*x) {
                    let dx = slot(adj, nodes, *x);
                    let inv_d = T::one() / T::from_usize(d).unwrap();
                    for (row, ((gr, xr), dxr)) in g
                        .chunks_exact(d)
                        .zip(xhat.chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gn[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xr[j];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        let rs = rstd[row];
                        for j in 0..d {
                            let dxh = gr[j] * gn[j];
                            dxr[j] += rs * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                        }
                    }
                }
                if wants(*gain) {
                    let dg = slot(adj, nodes, *gain);
                    for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if wants(*bias) {
                    let db = slot(adj, nodes, *bias);
                    for gr in g.chunks_exact(d) {
                        add_into(db, gr);
                    }
                }
            }
            Op::Softmax { x } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let c = nodes[i].value.last_dim();
                    let dx = slot(adj, nodes, *x);
                    for ((yr, gr), dxr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let c = nodes[i].value.last_dim();
                    let dx = slot(adj, nodes, *x);
                    for ((yr, gr), dxr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..c {
                            dxr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::SplitHeads { x, n, m, heads } => {
                if wants(*x) {
                    let dh = nodes[i].value.last_dim();
                    let dx = slot(adj, nodes, *x);
                    for_each_head_row(*n, *m, *heads, dh, |src, dst| {
                        add_into(&mut dx[src..src + dh], &g[dst..dst + dh]);
                    });
                }
            }
            Op::MergeHeads { x, n, m, heads } => {
                if wants(*x) {
                    let dh = val(*x).last_dim();
                    let dx = slot(adj, nodes, *x);
                    for_each_head_row(*n, *m, *heads, dh, |flat, split| {
                        add_into(&mut dx[split..split + dh], &g[flat..flat + dh]);
                    });
                }
            }
            Op::RelScores { q, r, buckets, heads } => {
                let (tq, tr) = (val(*q), val(*r));
                let (bs, m, dh) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
                let nb = tr.shape()[1];
                let mut dfull = vec![T::zero(); m * nb];
                for b in 0..bs {
                    let h = b % heads;
                    dfull.iter_mut().for_each(|v| *v = T::zero());
                    let gb = &g[b * m * m..(b + 1) * m * m];
                    for ii in 0..m {
                        for jj in 0..m {
                            dfull[ii * nb + buckets[ii * m + jj]] += gb[ii * m + jj];
                        }
                    }
                    let rh = &tr.data()[h * nb * dh..(h + 1) * nb * dh];
                    if wants(*q) {
                        let dq = slot(adj, nodes, *q);
                        T::gemm(m, nb, dh, T::one(), &dfull, nb as isize, 1, rh, dh as isize, 1, T::one(), &mut dq[b * m * dh..(b + 1) * m * dh], dh as isize, 1);
                    }
                    if wants(*r) {
                        let qb = &tq.data()[b * m * dh..(b + 1) * m * dh];
                        let dr = slot(adj, nodes, *r);
                        T::gemm(nb, m, dh, T::one(), &dfull, 1, nb as isize, qb, dh as isize, 1, T::one(), &mut dr[h * nb * dh..(h + 1) * nb * dh], dh as isize, 1);
                    }
                }
            }
            Op::TransposeLast2 { x } => {
                if wants(*x) {
                    let s = val(*x).shape();
                    let (bs, p, q) = (s[0], s[1], s[2]);
                    let dx = slot(adj, nodes, *x);
                    for b in 0..bs {
                        for a in 0..p {
                            for c in 0..q {
                                dx[b * p * q + a * q + c] += g[b * p * q + c * p + a];
                            }
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if wants(*table) {
                    let d = val(*table).last_dim();
                    let dt = slot(adj, nodes, *table);
                    for (k, &row) in idx.iter().enumerate() {
                        add_into(&mut dt[row * d..(row + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    add_into(slot(adj, nodes, *x), g);
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    let dx = slot(adj, nodes, *x);
                    for ((d, &gv), &mv) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * mv;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, mask, probs, count } => {
                if wants(*logits) {
                    let c = val(*logits).last_dim();
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    let dl = slot(adj, nodes, *logits);
                    for (row, (&lab, &on)) in labels.iter().zip(mask).enumerate() {
                        if !on {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == lab { T::one() } else { T::zero() };
                            dl[row * c + j] += scale * (probs[row * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let dx = slot(adj, nodes, *x);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                if wants(*x) {
                    let dx = slot(adj, nodes, *x);
                    let s = g[0] / T::from_usize(dx.len()).unwrap();
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::NormalizeRows { x, norms } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let d = nodes[i].value.last_dim();
                    let dx = slot(adj, nodes, *x);
                    for (row, ((yr, gr), dxr)) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate() {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let inv = T::one() / norms[row];
                        for j in 0..d {
                            dxr[j] += (gr[j] - yr[j] * dot) * inv;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Calls `f(flat_offset, split_offset)` for every (sequence, position, head)
/// row, where `flat` indexes `[n*m, heads*dh]` and `split` indexes
/// `[n*heads, m, dh]`.
pub(crate) fn for_each_head_row(n: usize, m: usize, heads: usize, dh: usize, mut f: impl FnMut(usize, usize)) {
    let d = heads * dh;
    for s in 0..n {
        for pos in 0..m {
            for h in 0..heads {
                let flat = (s * m + pos) * d + h * dh;
                let split = ((s * heads + h) * m + pos) * dh;
                f(flat, split);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
