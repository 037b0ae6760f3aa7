//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] records every operation applied to [`TVar`] handles; a single
//! [`Tape::backward`] pass then fills the gradient of each recorded node.
//! Matrix products are tagged with a [`MacTag`] so multiply-accumulate counts
//! can be attributed to parts of the network.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{dgemm, is_suffix, Tensor};

/// Attribution bucket for multiply-accumulate counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacTag {
    /// Dense product of attention weights against projected values.
    AttnCoreDense,
    /// Value projection inside attention.
    AttnVproj,
    /// Attention output projection.
    AttnOut,
    /// Feed-forward sublayer products.
    Ffn,
    /// Output head products.
    Head,
    /// Everything else.
    Other,
}

/// Forward-pass multiply-accumulate totals, split by attribution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounts {
    /// Attention core evaluated sparsely (active mask entries only).
    pub attn_core_sparse: u64,
    /// Attention core evaluated densely.
    pub attn_core_dense: u64,
    pub attn_vproj: u64,
    pub attn_out: u64,
    pub ffn: u64,
    pub head: u64,
    pub other: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.attn_core_sparse
            + self.attn_core_dense
            + self.attn_vproj
            + self.attn_out
            + self.ffn
            + self.head
            + self.other
    }
}

/// Fixed set of positions allowed to carry attention weight.
///
/// Pairs are (row, col) into a rows×cols score matrix, sorted row-major.
/// Rows with no pairs produce all-zero attention output.
#[derive(Debug, Clone)]
pub struct SparsePattern {
    rows: usize,
    cols: usize,
    pairs: Vec<(usize, usize)>,
    /// Half-open range into `pairs` for each row.
    row_ranges: Vec<(usize, usize)>,
}

impl SparsePattern {
    pub fn new(rows: usize, cols: usize, mut pairs: Vec<(usize, usize)>) -> SparsePattern {
        pairs.sort_unstable();
        pairs.dedup();
        for &(r, c) in &pairs {
            assert!(r < rows && c < cols, "pattern entry ({r}, {c}) outside {rows}x{cols}");
        }
        let mut row_ranges = vec![(0, 0); rows];
        let mut i = 0;
        for r in 0..rows {
            let start = i;
            while i < pairs.len() && pairs[i].0 == r {
                i += 1;
            }
            row_ranges[r] = (start, i);
        }
        SparsePattern {
            rows,
            cols,
            pairs,
            row_ranges,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn active_count(&self) -> usize {
        self.pairs.len()
    }
}

enum Op {
    Leaf,
    /// out = a · b with leading-axis broadcast.
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
        ax1: usize,
        ax2: usize,
    },
    Reshape {
        a: usize,
    },
    /// out = a + b, b broadcast over leading axes of a.
    Add {
        a: usize,
        b: usize,
    },
    /// out = a ⊙ b, b broadcast over leading axes of a.
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    /// Concatenation along the last axis.
    Concat {
        a: usize,
        b: usize,
    },
    /// Slice [start, start+len) of the last axis.
    Slice {
        a: usize,
        start: usize,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    /// Softmax over the last axis; masking is applied at forward time, and
    /// the zero probabilities it leaves behind are all backward needs.
    Softmax {
        a: usize,
    },
    /// Per-row standardization over the last axis, epsilon 1e-5, no affine.
    LayerNorm {
        a: usize,
        inv_std: Vec<f64>,
    },
    /// out[.., i, j] = x[.., i] * w[i, j].
    Embed {
        x: usize,
        w: usize,
    },
    /// Row-sparse softmax of `a` contracted against `m2`, see [`sparse_attention`].
    SparseAttention {
        a: usize,
        m2: usize,
        pattern: Arc<SparsePattern>,
        probs: Tensor,
    },
    /// Masked binary cross entropy against fixed targets, summed over the batch.
    Bce {
        pred: usize,
        target: Tensor,
        active: Tensor,
    },
    /// Sum of all entries.
    Sum {
        a: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Records operations for one forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
    macs: RefCell<MacCounts>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct TVar<'t> {
    tape: &'t Tape,
    id: usize,
}

const LN_EPS: f64 = 1e-5;
const BCE_CLAMP: f64 = 1e-7;

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
            macs: RefCell::new(MacCounts::default()),
        }
    }

    fn push(&self, value: Tensor, op: Op) -> TVar<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            op,
        });
        TVar {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&self, value: Tensor) -> TVar<'_> {
        self.push(value, Op::Leaf)
    }

    /// Clone of the value held at `v`.
    pub fn value(&self, v: TVar<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Clone of the gradient at `v`, if backward has reached it.
    pub fn grad(&self, v: TVar<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Multiply-accumulate totals recorded so far.
    pub fn macs(&self) -> MacCounts {
        *self.macs.borrow()
    }

    fn add_macs(&self, tag: MacTag, count: u64) {
        let mut m = self.macs.borrow_mut();
        match tag {
            MacTag::AttnCoreDense => m.attn_core_dense += count,
            MacTag::AttnVproj => m.attn_vproj += count,
            MacTag::AttnOut => m.attn_out += count,
            MacTag::Ffn => m.ffn += count,
            MacTag::Head => m.head += count,
            MacTag::Other => m.other += count,
        }
    }

    /// Propagate gradients from scalar `loss` to every node that feeds it.
    ///
    /// Fails if called a second time on the same tape, if `loss` is not a
    /// scalar, or if any produced gradient is non-finite.
    pub fn backward(&self, loss: TVar<'_>) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::numerical(
                "backward called twice on the same tape; build a fresh tape per step",
            ));
        }
        self.backward_done.set(true);
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::numerical(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        nodes[loss.id].grad = Some(Tensor::from_vec(&loss_shape, vec![1.0]));

        for id in (0..=loss.id).rev() {
            let Some(g) = nodes[id].grad.take() else {
                continue;
            };
            backprop_node(&mut nodes, id, &g)?;
            nodes[id].grad = Some(g);
        }
        for node in nodes.iter() {
            if let Some(g) = &node.grad {
                if !g.is_finite() {
                    return Err(Error::numerical(
                        "non-finite gradient produced during backward",
                    ));
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Accumulate `src` into the gradient slot of node `id`.
fn accumulate(nodes: &mut [Node], id: usize, src: Tensor) {
    match &mut nodes[id].grad {
        Some(g) => {
            debug_assert_eq!(g.shape(), src.shape());
            for (gi, si) in g.data_mut().iter_mut().zip(src.data()) {
                *gi += si;
            }
        }
        slot @ None => *slot = Some(src),
    }
}

/// Leading-dims broadcast bookkeeping for matmul.
///
/// Returns (lead shape, batch count of a, batch count of b); the operand with
/// fewer leading dims cycles through its batches via modulo, which is exact
/// because its leading dims are a suffix of the other's.
fn matmul_lead(a: &[usize], b: &[usize]) -> (Vec<usize>, usize, usize) {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul needs >=2-d operands, got {a:?} x {b:?}");
    let la = &a[..a.len() - 2];
    let lb = &b[..b.len() - 2];
    let lead = if la.len() >= lb.len() {
        assert!(
            is_suffix(lb, la),
            "matmul leading dims {lb:?} are not a suffix of {la:?}"
        );
        la.to_vec()
    } else {
        assert!(
            is_suffix(la, lb),
            "matmul leading dims {la:?} are not a suffix of {lb:?}"
        );
        lb.to_vec()
    };
    (lead, la.iter().product(), lb.iter().product())
}

fn backprop_node(nodes: &mut [Node], id: usize, g: &Tensor) -> Result<()> {
    // Split at `id` so the output node stays immutably readable while input
    // gradients (always at lower ids) are accumulated.
    let (inputs, rest) = nodes.split_at_mut(id);
    let node = &rest[0];
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (a, b) = (*a, *b);
            let ash = inputs[a].value.shape().to_vec();
            let bsh = inputs[b].value.shape().to_vec();
            let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
            let n = bsh[bsh.len() - 1];
            let (lead, na, nb) = matmul_lead(&ash, &bsh);
            let batches: usize = lead.iter().product::<usize>().max(1);
            let mut da = Tensor::zeros(&ash);
            let mut db = Tensor::zeros(&bsh);
            for batch in 0..batches {
                let (ia, ib) = (batch % na.max(1), batch % nb.max(1));
                let gs = &g.data()[batch * m * n..(batch + 1) * m * n];
                let avs = &inputs[a].value.data()[ia * m * k..(ia + 1) * m * k];
                let bvs = &inputs[b].value.data()[ib * k * n..(ib + 1) * k * n];
                // dA = G · Bᵀ
                let das = &mut da.data_mut()[ia * m * k..(ia + 1) * m * k];
                let mut tmp = vec![0.0; m * k];
                dgemm(m, n, k, gs, n as isize, 1, bvs, 1, n as isize, 0.0, &mut tmp);
                for (d, t) in das.iter_mut().zip(&tmp) {
                    *d += t;
                }
                // dB = Aᵀ · G
                let dbs = &mut db.data_mut()[ib * k * n..(ib + 1) * k * n];
                let mut tmp = vec![0.0; k * n];
                dgemm(k, m, n, avs, 1, k as isize, gs, n as isize, 1, 0.0, &mut tmp);
                for (d, t) in dbs.iter_mut().zip(&tmp) {
                    *d += t;
                }
            }
            accumulate(inputs, a, da);
            accumulate(inputs, b, db);
        }
        Op::Transpose { a, ax1, ax2 } => {
            let (a, ax1, ax2) = (*a, *ax1, *ax2);
            let back = transpose_data(g, ax1, ax2);
            accumulate(inputs, a, back);
        }
        Op::Reshape { a } => {
            let a = *a;
            let shape = inputs[a].value.shape().to_vec();
            accumulate(inputs, a, g.reshaped(&shape));
        }
        Op::Add { a, b } => {
            let (a, b) = (*a, *b);
            accumulate(inputs, a, g.clone());
            let bsh = inputs[b].value.shape().to_vec();
            accumulate(inputs, b, reduce_to_suffix(g, &bsh));
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            let bn = inputs[b].value.numel();
            let mut da = g.clone();
            for (i, d) in da.data_mut().iter_mut().enumerate() {
                *d *= inputs[b].value.data()[i % bn];
            }
            let mut db_full = g.clone();
            for (i, d) in db_full.data_mut().iter_mut().enumerate() {
                *d *= inputs[a].value.data()[i];
            }
            let bsh = inputs[b].value.shape().to_vec();
            accumulate(inputs, a, da);
            accumulate(inputs, b, reduce_to_suffix(&db_full, &bsh));
        }
        Op::Scale { a, c } => {
            let (a, c) = (*a, *c);
            let mut da = g.clone();
            for d in da.data_mut() {
                *d *= c;
            }
            accumulate(inputs, a, da);
        }
        Op::Concat { a, b } => {
            let (a, b) = (*a, *b);
            let wa = inputs[a].value.last_dim();
            let wb = inputs[b].value.last_dim();
            let rows = g.numel() / (wa + wb);
            let mut da = Tensor::zeros(inputs[a].value.shape());
            let mut db = Tensor::zeros(inputs[b].value.shape());
            for r in 0..rows {
                let gr = &g.data()[r * (wa + wb)..(r + 1) * (wa + wb)];
                da.data_mut()[r * wa..(r + 1) * wa].copy_from_slice(&gr[..wa]);
                db.data_mut()[r * wb..(r + 1) * wb].copy_from_slice(&gr[wa..]);
            }
            accumulate(inputs, a, da);
            accumulate(inputs, b, db);
        }
        Op::Slice { a, start } => {
            let (a, start) = (*a, *start);
            let wa = inputs[a].value.last_dim();
            let wo = g.last_dim();
            let rows = g.numel() / wo.max(1);
            let mut da = Tensor::zeros(inputs[a].value.shape());
            for r in 0..rows {
                da.data_mut()[r * wa + start..r * wa + start + wo]
                    .copy_from_slice(&g.data()[r * wo..(r + 1) * wo]);
            }
            accumulate(inputs, a, da);
        }
        Op::Relu { a } => {
            let a = *a;
            let mut da = g.clone();
            for (d, &x) in da.data_mut().iter_mut().zip(inputs[a].value.data()) {
                if x <= 0.0 {
                    *d = 0.0;
                }
            }
            accumulate(inputs, a, da);
        }
        Op::Sigmoid { a } => {
            let a = *a;
            let mut da = g.clone();
            for (d, &y) in da.data_mut().iter_mut().zip(node.value.data()) {
                *d *= y * (1.0 - y);
            }
            accumulate(inputs, a, da);
        }
        Op::Softmax { a } => {
            let a = *a;
            let p = &node.value;
            let w = p.last_dim();
            let rows = p.numel() / w.max(1);
            let mut da = Tensor::zeros(p.shape());
            for r in 0..rows {
                let pr = &p.data()[r * w..(r + 1) * w];
                let gr = &g.data()[r * w..(r + 1) * w];
                let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                let dr = &mut da.data_mut()[r * w..(r + 1) * w];
                for j in 0..w {
                    dr[j] = pr[j] * (gr[j] - dot);
                }
            }
            accumulate(inputs, a, da);
        }
        Op::LayerNorm { a, inv_std } => {
            let a = *a;
            let y = &node.value;
            let w = y.last_dim();
            let rows = y.numel() / w.max(1);
            let mut da = Tensor::zeros(y.shape());
            for r in 0..rows {
                let yr = &y.data()[r * w..(r + 1) * w];
                let gr = &g.data()[r * w..(r + 1) * w];
                let gm: f64 = gr.iter().sum::<f64>() / w as f64;
                let gym: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / w as f64;
                let dr = &mut da.data_mut()[r * w..(r + 1) * w];
                for j in 0..w {
                    dr[j] = inv_std[r] * (gr[j] - gm - yr[j] * gym);
                }
            }
            accumulate(inputs, a, da);
        }
        Op::Embed { x, w } => {
            let (x, w) = (*x, *w);
            let wsh = inputs[w].value.shape().to_vec();
            let (n, d) = (wsh[0], wsh[1]);
            let batches = g.numel() / (n * d);
            let mut dx = Tensor::zeros(inputs[x].value.shape());
            let mut dw = Tensor::zeros(&wsh);
            for b in 0..batches {
                for i in 0..n {
                    let gr = &g.data()[(b * n + i) * d..(b * n + i + 1) * d];
                    let wr = &inputs[w].value.data()[i * d..(i + 1) * d];
                    let xv = inputs[x].value.data()[b * n + i];
                    dx.data_mut()[b * n + i] = gr.iter().zip(wr).map(|(g, w)| g * w).sum();
                    let dwr = &mut dw.data_mut()[i * d..(i + 1) * d];
                    for j in 0..d {
                        dwr[j] += xv * gr[j];
                    }
                }
            }
            accumulate(inputs, x, dx);
            accumulate(inputs, w, dw);
        }
        Op::SparseAttention {
            a,
            m2,
            pattern,
            probs,
        } => {
            let (a, m2) = (*a, *m2);
            let pattern = Arc::clone(pattern);
            let msh = inputs[m2].value.shape().to_vec();
            let dk = msh[msh.len() - 1];
            let batches = inputs[m2].value.numel() / (pattern.cols * dk);
            let mut dm2 = Tensor::zeros(&msh);
            let mut dp = vec![0.0; pattern.pairs.len()];
            for batch in 0..batches {
                let m2s = &inputs[m2].value.data()[batch * pattern.cols * dk..];
                let gs = &g.data()[batch * pattern.rows * dk..];
                let dm2s = &mut dm2.data_mut()[batch * pattern.cols * dk..];
                for (pi, &(r, c)) in pattern.pairs.iter().enumerate() {
                    let p = probs.data()[r * pattern.cols + c];
                    let gr = &gs[r * dk..(r + 1) * dk];
                    let mr = &m2s[c * dk..(c + 1) * dk];
                    dp[pi] += gr.iter().zip(mr).map(|(g, m)| g * m).sum::<f64>();
                    let dmr = &mut dm2s[c * dk..(c + 1) * dk];
                    for j in 0..dk {
                        dmr[j] += p * gr[j];
                    }
                }
            }
            let mut da = Tensor::zeros(inputs[a].value.shape());
            for r in 0..pattern.rows {
                let (s, e) = pattern.row_ranges[r];
                let dot: f64 = (s..e)
                    .map(|pi| {
                        let (_, c) = pattern.pairs[pi];
                        dp[pi] * probs.data()[r * pattern.cols + c]
                    })
                    .sum();
                for pi in s..e {
                    let (_, c) = pattern.pairs[pi];
                    let p = probs.data()[r * pattern.cols + c];
                    da.data_mut()[r * pattern.cols + c] = p * (dp[pi] - dot);
                }
            }
            accumulate(inputs, a, da);
            accumulate(inputs, m2, dm2);
        }
        Op::Bce { pred, target, active } => {
            let pred = *pred;
            let gs = g.item();
            let mut da = Tensor::zeros(inputs[pred].value.shape());
            for (i, d) in da.data_mut().iter_mut().enumerate() {
                if active.data()[i] == 0.0 {
                    continue;
                }
                let p = inputs[pred].value.data()[i];
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                    continue;
                }
                let t = target.data()[i];
                *d = gs * (p - t) / (p * (1.0 - p));
            }
            accumulate(inputs, pred, da);
        }
        Op::Sum { a } => {
            let a = *a;
            let gs = g.item();
            let sh = inputs[a].value.shape().to_vec();
            accumulate(inputs, a, Tensor::from_vec(&sh, vec![gs; inputs[a].value.numel()]));
        }
    }
    Ok(())
}

fn transpose_data(t: &Tensor, ax1: usize, ax2: usize) -> Tensor {
    let shape = t.shape();
    assert!(ax1 < shape.len() && ax2 < shape.len(), "transpose axes out of range");
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax1, ax2);
    let mut out = Tensor::zeros(&out_shape);
    let ndim = shape.len();
    let mut in_strides = vec![1usize; ndim];
    for i in (0..ndim - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(ax1, ax2);
    let mut idx = vec![0usize; ndim];
    for o in 0..t.numel() {
        let mut rem = o;
        for i in 0..ndim {
            let block: usize = out_shape[i + 1..].iter().product();
            idx[i] = rem / block;
            rem %= block;
        }
        let src: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        out.data_mut()[o] = t.data()[src];
    }
    out
}

/// Sum `g` over its leading axes until it matches `shape` (a suffix).
fn reduce_to_suffix(g: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut out = Tensor::zeros(shape);
    for (i, &v) in g.data().iter().enumerate() {
        out.data_mut()[i % n] += v;
    }
    out
}

impl<'t> TVar<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// The tape this variable lives on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    /// Matrix product with leading-axis broadcast; `tag` attributes the MACs.
    pub fn matmul(self, rhs: TVar<'t>, tag: MacTag) -> TVar<'t> {
        let (value, macs) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            let ash = a.shape();
            let bsh = b.shape();
            let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
            let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
            assert_eq!(ka, kb, "matmul inner dims differ: {ash:?} x {bsh:?}");
            let (lead, na, nb) = matmul_lead(ash, bsh);
            let batches: usize = lead.iter().product::<usize>().max(1);
            let mut out_shape = lead;
            out_shape.push(m);
            out_shape.push(n);
            let mut out = Tensor::zeros(&out_shape);
            if nb <= 1 {
                // Shared right operand: one gemm over the stacked rows of a,
                // which are contiguous because the leading dims all come from a.
                dgemm(
                    m * batches,
                    ka,
                    n,
                    a.data(),
                    ka as isize,
                    1,
                    b.data(),
                    n as isize,
                    1,
                    0.0,
                    out.data_mut(),
                );
            } else {
                for batch in 0..batches {
                    let as_ = &a.data()[(batch % na.max(1)) * m * ka..];
                    let bs = &b.data()[(batch % nb) * kb * n..];
                    let os = &mut out.data_mut()[batch * m * n..(batch + 1) * m * n];
                    dgemm(m, ka, n, as_, ka as isize, 1, bs, n as isize, 1, 0.0, os);
                }
            }
            (out, (batches * m * ka * n) as u64)
        };
        self.tape.add_macs(tag, macs);
        self.tape.push(
            value,
            Op::Matmul {
                a: self.id,
                b: rhs.id,
            },
        )
    }

    pub fn transpose(self, ax1: usize, ax2: usize) -> TVar<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            transpose_data(&nodes[self.id].value, ax1, ax2)
        };
        self.tape.push(
            value,
            Op::Transpose {
                a: self.id,
                ax1,
                ax2,
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> TVar<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.reshaped(shape)
        };
        self.tape.push(value, Op::Reshape { a: self.id })
    }

    /// Elementwise sum; `rhs` shape must be a suffix of this shape.
    pub fn add(self, rhs: TVar<'t>) -> TVar<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            assert!(
                is_suffix(b.shape(), a.shape()),
                "add: shape {:?} is not a suffix of {:?}",
                b.shape(),
                a.shape()
            );
            let bn = b.numel().max(1);
            let mut out = a.clone();
            for (i, d) in out.data_mut().iter_mut().enumerate() {
                *d += b.data()[i % bn];
            }
            out
        };
        self.tape.push(
            value,
            Op::Add {
                a: self.id,
                b: rhs.id,
            },
        )
    }

    /// Elementwise product; `rhs` shape must be a suffix of this shape.
    pub fn mul(self, rhs: TVar<'t>) -> TVar<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            assert!(
                is_suffix(b.shape(), a.shape()),
                "mul: shape {:?} is not a suffix of {:?}",
                b.shape(),
                a.shape()
            );
            let bn = b.numel().max(1);
            let mut out = a.clone();
            for (i, d) in out.data_mut().iter_mut().enumerate() {
                *d *= b.data()[i % bn];
            }
            out
        };
        self.tape.push(
            value,
            Op::Mul {
                a: self.id,
                b: rhs.id,
            },
        )
    }

    pub fn scale(self, c: f64) -> TVar<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut out = nodes[self.id].value.clone();
            for d in out.data_mut() {
                *d *= c;
            }
            out
        };
        self.tape.push(value, Op::Scale { a: self.id, c })
    }

    /// Concatenate along the last axis; leading shapes must match.
    pub fn concat(self, rhs: TVar<'t>) -> TVar<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            let (wa, wb) = (a.last_dim(), b.last_dim());
            assert_eq!(
                a.shape()[..a.shape().len() - 1],
                b.shape()[..b.shape().len() - 1],
                "concat leading shapes differ"
            );
            let rows = a.numel() / wa.max(1);
            let mut out_shape = a.shape().to_vec();
            *out_shape.last_mut().unwrap() = wa + wb;
            let mut out = Tensor::zeros(&out_shape);
            for r in 0..rows {
                out.data_mut()[r * (wa + wb)..r * (wa + wb) + wa]
                    .copy_from_slice(&a.data()[r * wa..(r + 1) * wa]);
                out.data_mut()[r * (wa + wb) + wa..(r + 1) * (wa + wb)]
                    .copy_from_slice(&b.data()[r * wb..(r + 1) * wb]);
            }
            out
        };
        self.tape.push(
            value,
            Op::Concat {
                a: self.id,
                b: rhs.id,
            },
        )
    }

    /// Slice [start, start+len) of the last axis.
    pub fn slice(self, start: usize, len: usize) -> TVar<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let w = a.last_dim();
            assert!(start + len <= w, "slice [{start}, {}) exceeds last dim {w}", start + len);
            let rows = a.numel() / w.max(1);
            let mut out_shape = a.shape().to_vec();
            *out_shape.last_mut().unwrap() = len;
            let mut out = Tensor::zeros(&out_shape);
            for r in 0..rows {
                out.data_mut()[r * len..(r + 1) * len]
                    .copy_from_slice(&a.data()[r * w + start..r * w + start + len]);
            }
            out
        };
        self.tape.push(
            value,
            Op::Slice {
                a: self.id,
                start,
            },
        )
    }

    pub fn relu(self) -> TVar<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut out = nodes[self.id].value.clone();
            for d in out.data_mut() {
                *d = d.max(0.0);
            }
            out
        };
        self.tape.push(value, Op::Relu { a: self.id })
    }

    pub fn sigmoid(self) -> TVar<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut out = nodes[self.id].value.clone();
            for d in out.data_mut() {
                *d = stable_sigmoid(*d);
            }
            out
        };
        self.tape.push(value, Op::Sigmoid { a: self.id })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> TVar<'t> {
        self.softmax_impl(None)
    }

    /// Softmax over the last axis with an additive mask of the same shape.
    ///
    /// Entries where the mask is nonzero are treated as inactive: the row max
    /// is taken over active entries only and inactive probabilities are exact
    /// zeros. A row with no active entries comes out all zero. A mask of all
    /// zeros reproduces `softmax` exactly.
    pub fn softmax_masked(self, mask: &Tensor) -> TVar<'t> {
        self.softmax_impl(Some(mask.clone()))
    }

    fn softmax_impl(self, mask: Option<Tensor>) -> TVar<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if let Some(m) = &mask {
                assert_eq!(
                    m.shape(),
                    x.shape(),
                    "softmax mask shape {:?} differs from input {:?}",
                    m.shape(),
                    x.shape()
                );
            }
            let w = x.last_dim();
            let rows = x.numel() / w.max(1);
            let mut out = Tensor::zeros(x.shape());
            for r in 0..rows {
                let xr = &x.data()[r * w..(r + 1) * w];
                let active = |j: usize| mask.as_ref().map_or(true, |m| m.data()[r * w + j] == 0.0);
                let mut mx = f64::NEG_INFINITY;
                for j in 0..w {
                    if active(j) && xr[j] > mx {
                        mx = xr[j];
                    }
                }
                if mx == f64::NEG_INFINITY {
                    continue; // fully inactive row stays zero
                }
                let or = &mut out.data_mut()[r * w..(r + 1) * w];
                let mut sum = 0.0;
                for j in 0..w {
                    if active(j) {
                        or[j] = (xr[j] - mx).exp();
                        sum += or[j];
                    }
                }
                for v in or.iter_mut() {
                    *v /= sum;
                }
            }
            out
        };
        self.tape.push(value, Op::Softmax { a: self.id })
    }

    /// Standardize the last axis to zero mean and unit variance (epsilon 1e-5).
    pub fn layer_norm(self) -> TVar<'t> {
        let (value, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let w = x.last_dim();
            let rows = x.numel() / w.max(1);
            let mut out = Tensor::zeros(x.shape());
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let xr = &x.data()[r * w..(r + 1) * w];
                let mean: f64 = xr.iter().sum::<f64>() / w as f64;
                let var: f64 = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[r] = is;
                let or = &mut out.data_mut()[r * w..(r + 1) * w];
                for j in 0..w {
                    or[j] = (xr[j] - mean) * is;
                }
            }
            (out, inv_std)
        };
        self.tape.push(
            value,
            Op::LayerNorm {
                a: self.id,
                inv_std,
            },
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> TVar<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            Tensor::scalar(nodes[self.id].value.data().iter().sum())
        };
        self.tape.push(value, Op::Sum { a: self.id })
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Position-wise scaling: out[.., i, j] = x[.., i] * w[i, j].
///
/// `x` has shape (.., n) and `w` shape (n, d); the output is (.., n, d).
pub fn embed<'t>(x: TVar<'t>, w: TVar<'t>) -> TVar<'t> {
    let tape = x.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let xv = &nodes[x.id].value;
        let wv = &nodes[w.id].value;
        assert_eq!(wv.shape().len(), 2, "embed weight must be 2-d");
        let (n, d) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(
            xv.last_dim(),
            n,
            "embed: input last dim {} differs from table rows {n}",
            xv.last_dim()
        );
        let batches = xv.numel() / n.max(1);
        let mut out_shape = xv.shape().to_vec();
        out_shape.push(d);
        let mut out = Tensor::zeros(&out_shape);
        for b in 0..batches {
            for i in 0..n {
                let xi = xv.data()[b * n + i];
                let wr = &wv.data()[i * d..(i + 1) * d];
                let or = &mut out.data_mut()[(b * n + i) * d..(b * n + i + 1) * d];
                for j in 0..d {
                    or[j] = xi * wr[j];
                }
            }
        }
        out
    };
    tape.push(value, Op::Embed { x: x.id, w: w.id })
}

/// Row-sparse attention core.
///
/// Applies a softmax to the score matrix `a` (rows×cols) restricted to the
/// active positions of `pattern`, then contracts the resulting weights
/// against `m2` of shape (.., cols, d): out[.., r, :] = sum over active
/// (r, c) of p[r, c] * m2[.., c, :]. The softmax is computed once and shared
/// by every leading batch of `m2`. Multiply-accumulates are recorded under
/// the sparse attention-core bucket.
pub fn sparse_attention<'t>(
    a: TVar<'t>,
    pattern: &Arc<SparsePattern>,
    m2: TVar<'t>,
) -> TVar<'t> {
    let tape = a.tape;
    let (value, probs, macs) = {
        let nodes = tape.nodes.borrow();
        let av = &nodes[a.id].value;
        let mv = &nodes[m2.id].value;
        assert_eq!(
            av.shape(),
            &[pattern.rows, pattern.cols],
            "score shape {:?} differs from pattern {}x{}",
            av.shape(),
            pattern.rows,
            pattern.cols
        );
        let dk = mv.last_dim();
        assert_eq!(
            mv.shape()[mv.shape().len() - 2],
            pattern.cols,
            "m2 shape {:?} does not contract against {} pattern cols",
            mv.shape(),
            pattern.cols
        );
        let batches = mv.numel() / (pattern.cols * dk).max(1);
        let mut probs = Tensor::zeros(&[pattern.rows, pattern.cols]);
        for r in 0..pattern.rows {
            let (s, e) = pattern.row_ranges[r];
            if s == e {
                continue;
            }
            let mut mx = f64::NEG_INFINITY;
            for pi in s..e {
                let (_, c) = pattern.pairs[pi];
                mx = mx.max(av.data()[r * pattern.cols + c]);
            }
            let mut sum = 0.0;
            for pi in s..e {
                let (_, c) = pattern.pairs[pi];
                let v = (av.data()[r * pattern.cols + c] - mx).exp();
                probs.data_mut()[r * pattern.cols + c] = v;
                sum += v;
            }
            for pi in s..e {
                let (_, c) = pattern.pairs[pi];
                probs.data_mut()[r * pattern.cols + c] /= sum;
            }
        }
        let mut out_shape = mv.shape()[..mv.shape().len() - 2].to_vec();
        out_shape.push(pattern.rows);
        out_shape.push(dk);
        let mut out = Tensor::zeros(&out_shape);
        for batch in 0..batches {
            let ms = &mv.data()[batch * pattern.cols * dk..];
            let os = &mut out.data_mut()[batch * pattern.rows * dk..(batch + 1) * pattern.rows * dk];
            for &(r, c) in &pattern.pairs {
                let p = probs.data()[r * pattern.cols + c];
                let mr = &ms[c * dk..(c + 1) * dk];
                let or = &mut os[r * dk..(r + 1) * dk];
                for j in 0..dk {
                    or[j] += p * mr[j];
                }
            }
        }
        let macs = (pattern.pairs.len() * dk * batches) as u64;
        (out, probs, macs)
    };
    {
        let mut m = tape.macs.borrow_mut();
        m.attn_core_sparse += macs;
    }
    tape.push(
        value,
        Op::SparseAttention {
            a: a.id,
            m2: m2.id,
            pattern: Arc::clone(pattern),
            probs,
        },
    )
}

/// Binary cross entropy summed over all active entries.
///
/// `pred` holds probabilities, `target` the 0/1 labels, and `active` a 0/1
/// mask selecting which entries contribute. Predictions are clamped to
/// [1e-7, 1 - 1e-7] before the logs.
pub fn bce_loss<'t>(pred: TVar<'t>, target: &Tensor, active: &Tensor) -> TVar<'t> {
    let tape = pred.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let p = &nodes[pred.id].value;
        assert_eq!(p.shape(), target.shape(), "bce target shape mismatch");
        assert_eq!(p.shape(), active.shape(), "bce active-mask shape mismatch");
        let mut loss = 0.0;
        for i in 0..p.numel() {
            if active.data()[i] == 0.0 {
                continue;
            }
            let pc = p.data()[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let t = target.data()[i];
            loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        Tensor::scalar(loss)
    };
    tape.push(
        value,
        Op::Bce {
            pred: pred.id,
            target: target.clone(),
            active: active.clone(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn matmul_plain_2d() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = a.matmul(b, MacTag::Other);
        assert_eq!(c.value().data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(tape.macs().other, 12);
    }

    #[test]
    fn matmul_broadcasts_shared_left_operand() {
        let mut r = rng();
        let tape = Tape::new();
        let a = tape.leaf(Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r));
        let b = tape.leaf(Tensor::uniform(&[2, 5, 3, 2], -1.0, 1.0, &mut r));
        let c = a.matmul(b, MacTag::Other);
        assert_eq!(c.shape(), vec![2, 5, 4, 2]);
        // Check one batch against a direct 2-d product.
        let tape2 = Tape::new();
        let a2 = tape2.leaf(a.value());
        let b_all = b.value();
        let b2 = tape2.leaf(Tensor::from_vec(&[3, 2], b_all.data()[3 * 3 * 2..4 * 3 * 2].to_vec()));
        let c2 = a2.matmul(b2, MacTag::Other);
        let got = &c.value().data()[3 * 4 * 2..4 * 4 * 2].to_vec();
        assert!(Tensor::from_vec(&[4, 2], got.clone()).max_abs_diff(&c2.value()) < 1e-14);
    }

    #[test]
    fn matmul_broadcasts_shared_right_operand() {
        let mut r = rng();
        let tape = Tape::new();
        let a = tape.leaf(Tensor::uniform(&[3, 4, 2], -1.0, 1.0, &mut r));
        let b = tape.leaf(Tensor::uniform(&[2, 5], -1.0, 1.0, &mut r));
        let c = a.matmul(b, MacTag::Other);
        assert_eq!(c.shape(), vec![3, 4, 5]);
        let a_all = a.value();
        for batch in 0..3 {
            let tape2 = Tape::new();
            let a2 = tape2.leaf(Tensor::from_vec(
                &[4, 2],
                a_all.data()[batch * 8..(batch + 1) * 8].to_vec(),
            ));
            let b2 = tape2.leaf(b.value());
            let c2 = a2.matmul(b2, MacTag::Other);
            let got = Tensor::from_vec(
                &[4, 5],
                c.value().data()[batch * 20..(batch + 1) * 20].to_vec(),
            );
            assert!(got.max_abs_diff(&c2.value()) < 1e-14);
        }
    }

    #[test]
    #[should_panic(expected = "inner dims differ")]
    fn matmul_rejects_bad_inner_dims() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 2]));
        let _ = a.matmul(b, MacTag::Other);
    }

    #[test]
    fn transpose_swaps_axes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let t = a.transpose(0, 1);
        assert_eq!(t.shape(), vec![3, 2]);
        assert_eq!(t.value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let mut r = rng();
        let x = tape.leaf(Tensor::uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut r));
        let y = x.transpose(1, 2);
        assert_eq!(y.shape(), vec![2, 4, 3, 5]);
        // Round trip restores the original.
        let z = y.transpose(1, 2);
        assert_eq!(z.value(), x.value());
    }

    #[test]
    fn add_and_mul_broadcast_suffix() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::from_vec(&[2], vec![10.0, 20.0]));
        assert_eq!(a.add(b).value().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(a.mul(b).value().data(), &[10.0, 40.0, 30.0, 80.0]);
        assert_eq!(a.scale(-2.0).value().data(), &[-2.0, -4.0, -6.0, -8.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 5.0, 6.0]));
        let b = tape.leaf(Tensor::from_vec(&[2, 3], vec![3.0, 4.0, 9.0, 7.0, 8.0, 9.0]));
        let c = a.concat(b);
        assert_eq!(c.shape(), vec![2, 5]);
        assert_eq!(
            c.value().data(),
            &[1.0, 2.0, 3.0, 4.0, 9.0, 5.0, 6.0, 7.0, 8.0, 9.0]
        );
        let sa = c.slice(0, 2);
        let sb = c.slice(2, 3);
        assert_eq!(sa.value(), a.value());
        assert_eq!(sb.value(), b.value());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(&[4, 7], -3.0, 3.0, &mut r));
        let p = x.softmax().value();
        for row in 0..4 {
            let s: f64 = p.data()[row * 7..(row + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.data()[row * 7..(row + 1) * 7].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn masked_softmax_with_zero_mask_matches_plain() {
        let mut r = rng();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(&[3, 5], -2.0, 2.0, &mut r));
        let plain = x.softmax().value();
        let masked = x.softmax_masked(&Tensor::zeros(&[3, 5])).value();
        assert_eq!(plain, masked);
    }

    #[test]
    fn masked_softmax_zeroes_inactive_entries() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 1.0, 1.0]));
        let mask = Tensor::from_vec(
            &[2, 3],
            vec![
                0.0,
                crate::mask::MASKED,
                0.0,
                crate::mask::MASKED,
                crate::mask::MASKED,
                crate::mask::MASKED,
            ],
        );
        let p = x.softmax_masked(&mask).value();
        assert_eq!(p.data()[1], 0.0);
        assert!((p.data()[0] + p.data()[2] - 1.0).abs() < 1e-15);
        // Renormalized over the two active entries with scores 1 and 3.
        let e = |v: f64| v.exp();
        assert!((p.data()[0] - e(1.0) / (e(1.0) + e(3.0))).abs() < 1e-15);
        // Fully inactive row is exactly zero.
        assert_eq!(&p.data()[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut r = rng();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(&[5, 16], -4.0, 4.0, &mut r));
        let y = x.layer_norm().value();
        for row in 0..5 {
            let yr = &y.data()[row * 16..(row + 1) * 16];
            let mean: f64 = yr.iter().sum::<f64>() / 16.0;
            let var: f64 = yr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn embed_scales_rows() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 0.0]));
        let w = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = embed(x, w);
        assert_eq!(y.shape(), vec![2, 2, 3]);
        assert_eq!(
            y.value().data(),
            &[1.0, 2.0, 3.0, -8.0, -10.0, -12.0, 0.5, 1.0, 1.5, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-800.0, 0.0, 800.0]));
        let y = x.sigmoid().value();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 0.5);
        assert_eq!(y.data()[2], 1.0);
        assert!(y.is_finite());
    }

    #[test]
    fn bce_matches_hand_computation() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(&[3], vec![0.9, 0.2, 0.5]));
        let target = Tensor::from_vec(&[3], vec![1.0, 0.0, 1.0]);
        let active = Tensor::from_vec(&[3], vec![1.0, 1.0, 0.0]);
        let loss = bce_loss(p, &target, &active);
        let want = -(0.9f64.ln()) - (0.8f64.ln());
        assert!((loss.value().item() - want).abs() < 1e-15);
    }

    #[test]
    fn bce_clamps_extreme_predictions() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 1.0]));
        let target = Tensor::from_vec(&[2], vec![1.0, 0.0]);
        let active = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let loss = bce_loss(p, &target, &active);
        let want = -2.0 * (1e-7f64).ln();
        assert!((loss.value().item() - want).abs() < 1e-9 * want.abs());
        assert!(loss.value().item().is_finite());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.scale(3.0);
        assert!(tape.backward(y).is_ok());
        let err = tape.backward(y).unwrap_err();
        assert!(err.to_string().contains("backward called twice"));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = x.scale(1.0);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0; 6]));
        let s = x.sum();
        assert_eq!(s.value().item(), 6.0);
        tape.backward(s).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn chained_scale_gradient() {
        // d/dx of 3 * (2x) = 6.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(5.0));
        let y = x.scale(2.0).scale(3.0);
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 6.0);
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // y = x + x => dy/dx = 2 (per entry).
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let y = x.add(x).sum();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn sparse_attention_matches_dense_reference() {
        let mut r = rng();
        // Pattern with a mix of row occupancies, including an empty row.
        let pairs = vec![(0, 0), (0, 2), (1, 1), (3, 0), (3, 1), (3, 2)];
        let pattern = Arc::new(SparsePattern::new(4, 3, pairs.clone()));
        let a_val = Tensor::uniform(&[4, 3], -2.0, 2.0, &mut r);
        let m_val = Tensor::uniform(&[2, 2, 3, 5], -1.0, 1.0, &mut r);

        let tape = Tape::new();
        let a = tape.leaf(a_val.clone());
        let m2 = tape.leaf(m_val.clone());
        let out = sparse_attention(a, &pattern, m2);

        // Dense path: additive mask plus masked softmax plus broadcast matmul.
        let mut mask = Tensor::from_vec(&[4, 3], vec![crate::mask::MASKED; 12]);
        for &(r, c) in &pairs {
            mask.data_mut()[r * 3 + c] = 0.0;
        }
        let tape2 = Tape::new();
        let a2 = tape2.leaf(a_val);
        let m22 = tape2.leaf(m_val);
        let p = a2.softmax_masked(&mask);
        let dense = p.matmul(m22, MacTag::AttnCoreDense);

        assert_eq!(out.shape(), dense.shape());
        assert!(out.value().max_abs_diff(&dense.value()) < 1e-12);
        // Empty row 2 gives zero output in every batch.
        let v = out.value();
        for batch in 0..4 {
            let base = batch * 4 * 5 + 2 * 5;
            assert_eq!(&v.data()[base..base + 5], &[0.0; 5]);
        }
        // Sparse MACs: 6 active entries, d_k 5, 4 batches.
        assert_eq!(tape.macs().attn_core_sparse, 6 * 5 * 4);
        assert_eq!(tape.macs().attn_core_dense, 0);
    }

    #[test]
    fn mac_counts_attribute_by_tag() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 4]));
        let _ = a.matmul(b, MacTag::Ffn);
        let _ = a.matmul(b, MacTag::Head);
        let m = tape.macs();
        assert_eq!(m.ffn, 24);
        assert_eq!(m.head, 24);
        assert_eq!(m.total(), 48);
    }
}
