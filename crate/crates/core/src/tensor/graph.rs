//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] owns every tensor produced during a forward pass. Operations
//! append nodes and return [`TensorId`] handles; [`Graph::backward`] walks
//! the tape in reverse and accumulates gradients into the `grad` buffer of
//! every `requires_grad` leaf. Repeated backward calls keep accumulating;
//! the caller zeroes when it wants a fresh pass. Intermediate gradients live
//! in a per-call workspace, so leaf accumulation stays exact across calls.
//!
//! All loops are sequential with a fixed order: identical inputs and
//! parameters produce bit-identical outputs and gradients.

use crate::error::{Error, Result};
use crate::tensor::{matmul_accum, softmax_slice, Tensor};

/// Probabilities are clamped to [BCE_CLAMP, 1 - BCE_CLAMP] before logs.
pub const BCE_CLAMP: f64 = 1e-7;
/// Fixed layer-norm epsilon, inside the square root.
pub const LN_EPS: f64 = 1e-5;
/// Probability rows fed to `kl_div` must sum to 1 within this tolerance.
pub const KL_ROW_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    AddRowBias { a: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, k: f64 },
    Relu { a: TensorId },
    Sigmoid { a: TensorId },
    Transpose { a: TensorId },
    SliceCols { a: TensorId, start: usize, len: usize },
    ConcatCols { parts: Vec<TensorId> },
    Stack2 { a: TensorId, b: TensorId },
    Unstack2 { a: TensorId, idx: usize },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId },
    SumRows { a: TensorId },
    SumAll { a: TensorId },
    Bce { p: TensorId, target: Vec<f64> },
    KlDiv { teacher: Vec<f64>, student: TensorId },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a graph input. Gradients accumulate into it
    /// iff `requires_grad` is set on the tensor.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Registers a non-differentiable input regardless of its flag.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("[n,k] x [k,m], lhs {sa:?}"),
                format!("rhs {sb:?}"),
            ));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        matmul_accum(self.data(a), self.data(b), n, k, m, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(vec![n, m], out)?, Op::MatMul { a, b }, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Add { a, b }, needs))
    }

    pub fn add_n(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        let mut acc = *ids.first().ok_or_else(|| Error::Usage("add_n of nothing".into()))?;
        for &id in &ids[1..] {
            acc = self.add(acc, id)?;
        }
        Ok(acc)
    }

    /// [r,c] + [c], bias broadcast over rows.
    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(Error::dim("add_row_bias", format!("[r,c] + [c], got {sa:?}"), format!("{sb:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let mut out = self.data(a).to_vec();
        let bd = self.data(bias);
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bd[j];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::from_vec(sa, out)?, Op::AddRowBias { a, bias }, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "mul",
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(shape, out).unwrap(), Op::Scale { a, k }, needs)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(shape, out).unwrap(), Op::Relu { a }, needs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(shape, out).unwrap(), Op::Sigmoid { a }, needs)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::dim("transpose", "rank 2", format!("{sa:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(vec![c, r], out)?, Op::Transpose { a }, needs))
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[1] || len == 0 {
            return Err(Error::dim(
                "slice_cols",
                format!("cols [{start}, {}) within", start + len),
                format!("{sa:?}"),
            ));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(vec![r, len], out)?, Op::SliceCols { a, start, len }, needs))
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of nothing".into()));
        }
        let r = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[0] != r {
                return Err(Error::dim("concat_cols", format!("[{r}, *]"), format!("{sp:?}")));
            }
            total += sp[1];
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p)[1];
                let src = self.data(p);
                out.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_vec(vec![r, total], out)?,
            Op::ConcatCols { parts: parts.to_vec() },
            needs,
        ))
    }

    /// Stacks two same-shape tensors along a new leading axis.
    pub fn stack2(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "stack2",
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        let mut shape = vec![2];
        shape.extend_from_slice(self.shape(a));
        let mut out = Vec::with_capacity(self.data(a).len() * 2);
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Stack2 { a, b }, needs))
    }

    /// Inverse of `stack2`: selects one of the two stacked halves.
    pub fn unstack2(&mut self, a: TensorId, idx: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 || sa[0] != 2 || idx > 1 {
            return Err(Error::dim("unstack2", "[2, ...] and idx in {0,1}", format!("{sa:?} idx {idx}")));
        }
        let half = self.data(a).len() / 2;
        let out = self.data(a)[idx * half..(idx + 1) * half].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(sa[1..].to_vec(), out)?, Op::Unstack2 { a, idx }, needs))
    }

    /// Softmax along `axis`; every lane along that axis sums to one.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::dim("softmax", format!("axis < {}", sa.len()), format!("axis {axis}")));
        }
        let (outer, n, inner) = lane_split(&sa, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        let mut lane = vec![0.0; n];
        let mut lane_out = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for t in 0..n {
                    lane[t] = src[o * n * inner + t * inner + i];
                }
                softmax_slice(&lane, &mut lane_out);
                for t in 0..n {
                    out[o * n * inner + t * inner + i] = lane_out[t];
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(sa, out)?, Op::Softmax { a, axis }, needs))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// per-feature gain and bias. Epsilon is fixed at [`LN_EPS`].
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::Usage("layer_norm on empty tensor".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("gain/bias [{d}]"),
                format!("{:?}/{:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let rows = self.data(x).len() / d;
        let src = self.data(x);
        let (gd, bd) = (self.data(gain).to_vec(), self.data(bias).to_vec());
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Tensor::from_vec(sx, out)?, Op::LayerNorm { x, gain, bias }, needs))
    }

    /// Sums a rank-2 tensor over its rows, producing a rank-1 tensor.
    pub fn sum_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::dim("sum_rows", "rank 2", format!("{sa:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(vec![c], out)?, Op::SumRows { a }, needs))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll { a }, needs)
    }

    /// Mean binary cross-entropy between probabilities `p` and targets `y`,
    /// with probabilities clamped to [BCE_CLAMP, 1 - BCE_CLAMP].
    pub fn bce(&mut self, p: TensorId, y: &Tensor) -> Result<TensorId> {
        if self.shape(p) != y.shape() {
            return Err(Error::dim("bce", format!("{:?}", self.shape(p)), format!("{:?}", y.shape())));
        }
        if let Some(bad) = y.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("bce target {bad} outside [0, 1]")));
        }
        let src = self.data(p);
        let n = src.len() as f64;
        let mut total = 0.0;
        for (&pv, &yv) in src.iter().zip(y.data()) {
            let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln();
        }
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Bce { p, target: y.data().to_vec() },
            needs,
        ))
    }

    /// KL divergence sum_rows sum_c q_t (ln q_t - ln q_s) between a fixed
    /// teacher distribution and a student distribution on the tape. Both
    /// must hold probability rows; gradient reaches the student only.
    pub fn kl_div(&mut self, teacher: &Tensor, student: TensorId) -> Result<TensorId> {
        if teacher.shape() != self.shape(student) {
            return Err(Error::dim(
                "kl_div",
                format!("{:?}", teacher.shape()),
                format!("{:?}", self.shape(student)),
            ));
        }
        if teacher.rank() != 2 {
            return Err(Error::dim("kl_div", "rank 2", format!("{:?}", teacher.shape())));
        }
        let c = teacher.cols();
        validate_prob_rows(teacher.data(), c, "kl_div teacher")?;
        validate_prob_rows(self.data(student), c, "kl_div student")?;
        let sd = self.data(student);
        let mut total = 0.0;
        for (&qt, &qs) in teacher.data().iter().zip(sd) {
            if qt > 0.0 {
                total += qt * (qt.ln() - qs.max(1e-12).ln());
            }
        }
        let needs = self.needs(student);
        Ok(self.push(
            Tensor::scalar(total),
            Op::KlDiv { teacher: teacher.data().to_vec(), student },
            needs,
        ))
    }

    /// Accumulates d(loss)/d(leaf) into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut ws: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        ws[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = ws[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let value = &mut self.nodes[idx].value;
                let acc = value.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, gv) in acc.iter_mut().zip(&g) {
                    *a += gv;
                }
                continue;
            }
            let contributions = self.op_backward(idx, &g);
            for (id, contrib) in contributions {
                if !self.needs(id) {
                    continue;
                }
                let slot = ws[id.0].get_or_insert_with(|| vec![0.0; contrib.len()]);
                for (s, c) in slot.iter_mut().zip(&contrib) {
                    *s += c;
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to each of its inputs, given the
    /// incoming gradient `g` with the node's own shape.
    fn op_backward(&self, idx: usize, g: &[f64]) -> Vec<(TensorId, Vec<f64>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut out = Vec::new();
                if self.needs(*a) {
                    // dA[i,p] = sum_j g[i,j] * b[p,j]
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let g_row = &g[i * m..(i + 1) * m];
                            let b_row = &bd[p * m..(p + 1) * m];
                            for j in 0..m {
                                acc += g_row[j] * b_row[j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    // dB[p,j] = sum_i a[i,p] * g[i,j]
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let g_row = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let db_row = &mut db[p * m..(p + 1) * m];
                            for j in 0..m {
                                db_row[j] += a_ip * g_row[j];
                            }
                        }
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddRowBias { a, bias } => {
                let c = self.shape(*bias)[0];
                let mut db = vec![0.0; c];
                for (i, gv) in g.iter().enumerate() {
                    db[i % c] += gv;
                }
                vec![(*a, g.to_vec()), (*bias, db)]
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g.iter().zip(self.data(*b)).map(|(gv, bv)| gv * bv).collect();
                let db: Vec<f64> = g.iter().zip(self.data(*a)).map(|(gv, av)| gv * av).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { a, k } => vec![(*a, g.iter().map(|gv| gv * k).collect())],
            Op::Relu { a } => {
                let da = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*a, da)]
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let da = g.iter().zip(y).map(|(gv, &yv)| gv * yv * (1.0 - yv)).collect();
                vec![(*a, da)]
            }
            Op::Transpose { a } => {
                let sa = self.shape(*a);
                let (r, c) = (sa[0], sa[1]);
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*a, da)]
            }
            Op::SliceCols { a, start, len } => {
                let sa = self.shape(*a);
                let (r, c) = (sa[0], sa[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..*len {
                        da[i * c + start + j] = g[i * len + j];
                    }
                }
                vec![(*a, da)]
            }
            Op::ConcatCols { parts } => {
                let r = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut out = Vec::new();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = vec![0.0; r * c];
                        for i in 0..r {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        out.push((p, dp));
                    }
                    offset += c;
                }
                out
            }
            Op::Stack2 { a, b } => {
                let half = g.len() / 2;
                vec![(*a, g[..half].to_vec()), (*b, g[half..].to_vec())]
            }
            Op::Unstack2 { a, idx } => {
                let full = self.data(*a).len();
                let half = full / 2;
                let mut da = vec![0.0; full];
                da[idx * half..(idx + 1) * half].copy_from_slice(g);
                vec![(*a, da)]
            }
            Op::Softmax { a, axis } => {
                let sa = self.shape(*a);
                let (outer, n, inner) = lane_split(sa, *axis);
                let s = node.value.data();
                let mut da = vec![0.0; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| o * n * inner + t * inner + i;
                        let mut dot = 0.0;
                        for t in 0..n {
                            dot += g[at(t)] * s[at(t)];
                        }
                        for t in 0..n {
                            da[at(t)] = s[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
                vec![(*a, da)]
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = *self.shape(*x).last().unwrap();
                let src = self.data(*x);
                let gd = self.data(*gain);
                let rows = src.len() / d;
                let mut dx = vec![0.0; src.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let g_row = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + LN_EPS).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = g_row[j] * gd[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += g_row[j] * xhat;
                        dbias[j] += g_row[j];
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = g_row[j] * gd[j];
                        dx[r * d + j] = inv_std
                            * (dxhat - sum_dxhat / d as f64 - xhat * sum_dxhat_xhat / d as f64);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::SumRows { a } => {
                let sa = self.shape(*a);
                let (r, c) = (sa[0], sa[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c..(i + 1) * c].copy_from_slice(g);
                }
                vec![(*a, da)]
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.data(*a).len()];
                vec![(*a, da)]
            }
            Op::Bce { p, target } => {
                let src = self.data(*p);
                let n = src.len() as f64;
                let da = src
                    .iter()
                    .zip(target)
                    .map(|(&pv, &yv)| {
                        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pv) {
                            g[0] * (pv - yv) / (pv * (1.0 - pv)) / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*p, da)]
            }
            Op::KlDiv { teacher, student } => {
                let sd = self.data(*student);
                let da = teacher
                    .iter()
                    .zip(sd)
                    .map(|(&qt, &qs)| if qt > 0.0 { -g[0] * qt / qs.max(1e-12) } else { 0.0 })
                    .collect();
                vec![(*student, da)]
            }
        }
    }
}

/// Splits a shape at `axis` into (outer, lane length, inner).
fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn validate_prob_rows(data: &[f64], cols: usize, what: &str) -> Result<()> {
    for (r, row) in data.chunks_exact(cols).enumerate() {
        let mut sum = 0.0;
        for &v in row {
            if v < -1e-9 {
                return Err(Error::Validation(format!("{what}: negative probability {v} in row {r}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > KL_ROW_TOL {
            return Err(Error::Validation(format!("{what}: row {r} sums to {sum}, expected 1")));
        }
    }
    Ok(())
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameter handles for one attention block: query/key/value projections
/// without bias, output projection with bias.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
}

/// Scaled dot-product attention with `heads` heads over rank-2 inputs:
/// queries [Tq, d], keys/values [Tk, d]. Scores are scaled by 1/sqrt(d/heads)
/// and soft-maxed over keys.
pub fn multi_head_attention(
    g: &mut Graph,
    query: TensorId,
    key: TensorId,
    value: TensorId,
    heads: usize,
    p: &AttnParams,
) -> Result<TensorId> {
    let d = {
        let sw = g.value(p.wq).shape();
        if sw.len() != 2 || sw[0] != sw[1] {
            return Err(Error::dim("multi_head_attention", "square wq [d,d]", format!("{sw:?}")));
        }
        sw[1]
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention heads {heads} must divide model dim {d}"
        )));
    }
    for (name, id) in [("query", query), ("key", key), ("value", value)] {
        let s = g.value(id).shape();
        if s.len() != 2 || s[1] != d {
            return Err(Error::dim("multi_head_attention", format!("{name} [T, {d}]"), format!("{s:?}")));
        }
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q_proj = g.matmul(query, p.wq)?;
    let k_proj = g.matmul(key, p.wk)?;
    let v_proj = g.matmul(value, p.wv)?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q_proj, h * dh, dh)?;
        let kh = g.slice_cols(k_proj, h * dh, dh)?;
        let vh = g.slice_cols(v_proj, h * dh, dh)?;
        let kht = g.transpose(kh)?;
        let scores = g.matmul(qh, kht)?;
        let scaled = g.scale(scores, scale);
        let attn = g.softmax(scaled, 1)?;
        head_outs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat_cols(&head_outs)?;
    let projected = g.matmul(merged, p.wo)?;
    g.add_row_bias(projected, p.bo)
}
