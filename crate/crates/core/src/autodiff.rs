//! Reverse-mode differentiation over a static graph of matrix primitives.
//!
//! A [`Tape`] is built once (leaves and ops, with shapes inferred at build
//! time), then evaluated any number of times with fresh leaf values. The last
//! evaluation is cached so [`Tape::backward`] can propagate adjoints from the
//! scalar output back to every leaf. Leaves declared constant behave like a
//! detached tensor: they always receive an all-zero gradient.

use crate::error::{ActError, Result};
use crate::linalg::{fixed_dot, fixed_sum, project_into_shell, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Parameter,
    Constant,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { slot: usize, kind: LeafKind },
    /// `a · b`
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`, the shape of a dense layer applied to a row batch.
    MatMulBt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Adds a `1 × c` row to every row of an `r × c` matrix.
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    /// Radially maps each row into the shell `b1 ≤ ‖row‖ ≤ b2`.
    ProjectRows { input: NodeId, b1: f64, b2: f64 },
    /// Column-wise `(x − mean) / std` with the unbiased std.
    StandardizeCols(NodeId),
    Sum(NodeId),
    SumSquares(NodeId),
    FrobeniusInner(NodeId, NodeId),
    /// Identity in the forward pass, blocks gradient flow.
    Detach(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
}

/// Per-node values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Row norms before projection.
    Norms(Vec<f64>),
    /// Column standard deviations and the standardized output, transposed.
    Standardized { stds: Vec<f64>, z_t: Matrix },
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
    output: Option<NodeId>,
    values: Option<Vec<Matrix>>,
    aux: Vec<Aux>,
}

/// Outcome of a central finite-difference comparison against the tape's
/// reverse-mode gradient for one leaf.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// `max |(f(p+h) − f(p−h))/(2h) − g| / (|g| + 1e-12)` over checked entries.
    pub max_rel_error: f64,
    /// `Σ (fd − g)²` over checked entries.
    pub diff_sq: f64,
    /// `Σ g²` over checked entries.
    pub grad_sq: f64,
    pub checked: usize,
    /// Entries whose ±h probe flipped a ReLU or projection regime, where the
    /// central difference straddles a kink and is not a derivative estimate.
    pub skipped_kinks: usize,
}

impl FdReport {
    /// `‖fd − g‖₂ / ‖g‖₂` over the checked entries.
    pub fn normwise_rel_error(&self) -> f64 {
        if self.grad_sq == 0.0 {
            if self.diff_sq == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            (self.diff_sq / self.grad_sq).sqrt()
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaves in declaration order; `evaluate` takes one input per leaf.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node { op, rows, cols });
        self.values = None;
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, msg: String) -> ActError {
        ActError::Graph { node: self.nodes.len(), msg }
    }

    fn check(&self, id: NodeId) -> Result<(usize, usize)> {
        if id.0 >= self.nodes.len() {
            return Err(self.shape_err(format!("input node {} does not exist", id.0)));
        }
        Ok(self.shape(id))
    }

    pub fn parameter(&mut self, rows: usize, cols: usize) -> NodeId {
        self.leaf(rows, cols, LeafKind::Parameter)
    }

    pub fn constant(&mut self, rows: usize, cols: usize) -> NodeId {
        self.leaf(rows, cols, LeafKind::Constant)
    }

    fn leaf(&mut self, rows: usize, cols: usize, kind: LeafKind) -> NodeId {
        let slot = self.leaves.len();
        let id = self.push(Op::Leaf { slot, kind }, rows, cols);
        self.leaves.push(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.check(a)?;
        let (br, bc) = self.check(b)?;
        if ac != br {
            return Err(self.shape_err(format!("matmul {ar}x{ac} by {br}x{bc}")));
        }
        Ok(self.push(Op::MatMul(a, b), ar, bc))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.check(a)?;
        let (br, bc) = self.check(b)?;
        if ac != bc {
            return Err(self.shape_err(format!("matmul {ar}x{ac} by transpose of {br}x{bc}")));
        }
        Ok(self.push(Op::MatMulBt(a, b), ar, br))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.check(a)?;
        Ok(self.push(Op::Transpose(a), c, r))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s.0, s.1))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s.0, s.1))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(usize, usize)> {
        let sa = self.check(a)?;
        let sb = self.check(b)?;
        if sa != sb {
            return Err(self.shape_err(format!(
                "{what} of {}x{} and {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(sa)
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.check(m)?;
        let (rr, rc) = self.check(row)?;
        if rr != 1 || rc != c {
            return Err(self.shape_err(format!("row broadcast of {rr}x{rc} onto {r}x{c}")));
        }
        Ok(self.push(Op::AddRow(m, row), r, c))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.check(a)?;
        Ok(self.push(Op::Relu(a), r, c))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let (r, cols) = self.check(a)?;
        Ok(self.push(Op::Scale(a, c), r, cols))
    }

    /// Rows with norm below `b1` are scaled up to `b1`, above `b2` down to
    /// `b2`. A zero row becomes `b1·e₁`.
    pub fn project_rows(&mut self, input: NodeId, b1: f64, b2: f64) -> Result<NodeId> {
        let (r, c) = self.check(input)?;
        if !(0.0 <= b1 && b1 <= b2 && b2 > 0.0) {
            return Err(self.shape_err(format!("invalid norm shell [{b1}, {b2}]")));
        }
        Ok(self.push(Op::ProjectRows { input, b1, b2 }, r, c))
    }

    pub fn standardize_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.check(a)?;
        if r < 2 {
            return Err(self.shape_err("standardization needs at least 2 rows".into()));
        }
        Ok(self.push(Op::StandardizeCols(a), r, c))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a), 1, 1))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::SumSquares(a), 1, 1))
    }

    pub fn frobenius_inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "frobenius inner product")?;
        Ok(self.push(Op::FrobeniusInner(a, b), 1, 1))
    }

    /// A copy of `a` treated as a constant by `backward`.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.check(a)?;
        Ok(self.push(Op::Detach(a), r, c))
    }

    /// Marks the scalar node whose value `evaluate` returns.
    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        if self.check(id)? != (1, 1) {
            return Err(ActError::Graph { node: id.0, msg: "output must be 1x1".into() });
        }
        self.output = Some(id);
        Ok(())
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Value of any node from the last evaluation.
    pub fn value(&self, id: NodeId) -> Option<&Matrix> {
        self.values.as_ref().map(|v| &v[id.0])
    }

    /// Forward pass. `inputs` holds one matrix per leaf, in declaration order.
    pub fn evaluate(&mut self, inputs: &[Matrix]) -> Result<f64> {
        let out = self.output.ok_or_else(|| ActError::Graph {
            node: self.nodes.len(),
            msg: "no output node set".into(),
        })?;
        if inputs.len() != self.leaves.len() {
            return Err(ActError::Shape(format!(
                "{} inputs supplied for {} leaves",
                inputs.len(),
                self.leaves.len()
            )));
        }
        self.values = None;
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let (value, extra) = forward_node(idx, node, &values, inputs)?;
            values.push(value);
            aux.push(extra);
        }
        let result = values[out.0].get(0, 0);
        self.values = Some(values);
        self.aux = aux;
        Ok(result)
    }

    /// Gradient of the output with respect to every leaf, in declaration
    /// order. Constant leaves get zeros.
    pub fn backward(&self) -> Result<Vec<Matrix>> {
        let values = self.values.as_ref().ok_or_else(|| ActError::Graph {
            node: self.output.map_or(0, |o| o.0),
            msg: "backward called before evaluate".into(),
        })?;
        let out = self.output.expect("evaluate requires an output");
        let needs = self.requires_grad();

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=out.0).rev() {
            if !needs[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf { .. } = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contribution) in backward_node(node, &g, values, &self.aux[idx], &needs) {
                accumulate(&mut grads[input.0], contribution);
            }
        }

        Ok(self
            .leaves
            .iter()
            .map(|&leaf| {
                let (r, c) = self.shape(leaf);
                match (&self.nodes[leaf.0].op, grads[leaf.0].take()) {
                    (Op::Leaf { kind: LeafKind::Parameter, .. }, Some(g)) => g,
                    _ => Matrix::zeros(r, c),
                }
            })
            .collect())
    }

    fn requires_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            needs[idx] = match node.op {
                Op::Leaf { kind, .. } => kind == LeafKind::Parameter,
                Op::MatMul(a, b)
                | Op::MatMulBt(a, b)
                | Op::Add(a, b)
                | Op::Sub(a, b)
                | Op::AddRow(a, b)
                | Op::FrobeniusInner(a, b) => needs[a.0] || needs[b.0],
                Op::Transpose(a)
                | Op::Relu(a)
                | Op::Scale(a, _)
                | Op::StandardizeCols(a)
                | Op::Sum(a)
                | Op::SumSquares(a)
                | Op::ProjectRows { input: a, .. } => needs[a.0],
                Op::Detach(_) => false,
            };
        }
        needs
    }

    /// Fingerprint of every piecewise regime in the last evaluation: ReLU
    /// active sets and projection branches.
    fn regime_signature(&self) -> Vec<u8> {
        let Some(values) = &self.values else { return Vec::new() };
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => sig.extend(values[a.0].data().iter().map(|&x| u8::from(x > 0.0))),
                Op::ProjectRows { input, b1, b2 } => {
                    let m = &values[input.0];
                    for r in 0..m.rows() {
                        let n = crate::linalg::norm2(m.row(r));
                        sig.push(if n == 0.0 {
                            0
                        } else if n < b1 {
                            1
                        } else if n > b2 {
                            2
                        } else {
                            3
                        });
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Compares the reverse-mode gradient of leaf `leaf_slot` against central
    /// differences with step `h`, re-evaluating the tape per entry.
    pub fn finite_difference_check(
        &mut self,
        inputs: &[Matrix],
        leaf_slot: usize,
        h: f64,
    ) -> Result<FdReport> {
        if !(h > 0.0) {
            return Err(ActError::InvalidArgument(format!("finite-difference step {h}")));
        }
        if leaf_slot >= self.leaves.len() {
            return Err(ActError::InvalidArgument(format!("no leaf {leaf_slot}")));
        }
        self.evaluate(inputs)?;
        let base_sig = self.regime_signature();
        let grad = self.backward()?.swap_remove(leaf_slot);

        let mut probe = inputs.to_vec();
        let mut report = FdReport { max_rel_error: 0.0, diff_sq: 0.0, grad_sq: 0.0, checked: 0, skipped_kinks: 0 };
        for i in 0..grad.data().len() {
            let orig = inputs[leaf_slot].data()[i];
            probe[leaf_slot].data_mut()[i] = orig + h;
            let plus = self.evaluate(&probe)?;
            let same_plus = self.regime_signature() == base_sig;
            probe[leaf_slot].data_mut()[i] = orig - h;
            let minus = self.evaluate(&probe)?;
            let same_minus = self.regime_signature() == base_sig;
            probe[leaf_slot].data_mut()[i] = orig;
            if !(same_plus && same_minus) {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * h);
            let g = grad.data()[i];
            let rel = (fd - g).abs() / (g.abs() + 1e-12);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.diff_sq += (fd - g) * (fd - g);
            report.grad_sq += g * g;
            report.checked += 1;
        }
        // Leave the cache consistent with the caller's inputs.
        self.evaluate(inputs)?;
        Ok(report)
    }
}

fn accumulate(slot: &mut Option<Matrix>, contribution: Matrix) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn forward_node(
    idx: usize,
    node: &Node,
    values: &[Matrix],
    inputs: &[Matrix],
) -> Result<(Matrix, Aux)> {
    let v = |id: NodeId| &values[id.0];
    let value = match node.op {
        Op::Leaf { slot, .. } => {
            let input = &inputs[slot];
            if input.shape() != (node.rows, node.cols) {
                return Err(ActError::Graph {
                    node: idx,
                    msg: format!(
                        "leaf expects {}x{}, got {}x{}",
                        node.rows,
                        node.cols,
                        input.rows(),
                        input.cols()
                    ),
                });
            }
            input.clone()
        }
        Op::MatMul(a, b) => v(a).matmul_transposed(&v(b).transpose()),
        Op::MatMulBt(a, b) => v(a).matmul_transposed(v(b)),
        Op::Transpose(a) => v(a).transpose(),
        Op::Add(a, b) => v(a).add(v(b))?,
        Op::Sub(a, b) => v(a).sub(v(b))?,
        Op::AddRow(m, row) => {
            let mut out = v(m).clone();
            let row = v(row).data();
            for r in 0..out.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(row) {
                    *o += b;
                }
            }
            out
        }
        Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Scale(a, c) => v(a).scale(c),
        Op::ProjectRows { input, b1, b2 } => {
            let x = v(input);
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                norms.push(crate::linalg::norm2(x.row(r)));
                project_into_shell(out.row_mut(r), b1, b2);
            }
            return Ok((out, Aux::Norms(norms)));
        }
        Op::StandardizeCols(a) => {
            let x = v(a);
            let n = x.rows() as f64;
            let xt = x.transpose();
            let mut out_t = xt.clone();
            let mut stds = Vec::with_capacity(x.cols());
            for c in 0..x.cols() {
                let col = xt.row(c);
                let mean = fixed_sum(col) / n;
                let centered: Vec<f64> = col.iter().map(|e| e - mean).collect();
                let std = (fixed_dot(&centered, &centered) / (n - 1.0)).sqrt();
                if !(std > 1e-12) {
                    return Err(ActError::ZeroVariance { dimension: c });
                }
                for (o, e) in out_t.row_mut(c).iter_mut().zip(&centered) {
                    *o = e / std;
                }
                stds.push(std);
            }
            let out = out_t.transpose();
            return Ok((out, Aux::Standardized { stds, z_t: out_t }));
        }
        Op::Sum(a) => Matrix::scalar(fixed_sum(v(a).data())),
        Op::SumSquares(a) => Matrix::scalar(fixed_dot(v(a).data(), v(a).data())),
        Op::FrobeniusInner(a, b) => Matrix::scalar(fixed_dot(v(a).data(), v(b).data())),
        Op::Detach(a) => v(a).clone(),
    };
    if !value.is_finite() {
        return Err(ActError::NonFinite(format!("node {idx} produced a non-finite value")));
    }
    Ok((value, Aux::None))
}

/// Adjoint contributions of one node to its inputs.
fn backward_node(
    node: &Node,
    g: &Matrix,
    values: &[Matrix],
    aux: &Aux,
    needs: &[bool],
) -> Vec<(NodeId, Matrix)> {
    let v = |id: NodeId| &values[id.0];
    let mut out = Vec::with_capacity(2);
    match node.op {
        Op::Leaf { .. } | Op::Detach(_) => {}
        Op::MatMul(a, b) => {
            // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
            if needs[a.0] {
                out.push((a, g.matmul_transposed(v(b))));
            }
            if needs[b.0] {
                out.push((b, v(a).transpose().matmul_transposed(&g.transpose())));
            }
        }
        Op::MatMulBt(a, b) => {
            // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
            if needs[a.0] {
                out.push((a, g.matmul_transposed(&v(b).transpose())));
            }
            if needs[b.0] {
                out.push((b, g.transpose().matmul_transposed(&v(a).transpose())));
            }
        }
        Op::Transpose(a) => out.push((a, g.transpose())),
        Op::Add(a, b) => {
            if needs[a.0] {
                out.push((a, g.clone()));
            }
            if needs[b.0] {
                out.push((b, g.clone()));
            }
        }
        Op::Sub(a, b) => {
            if needs[a.0] {
                out.push((a, g.clone()));
            }
            if needs[b.0] {
                out.push((b, g.scale(-1.0)));
            }
        }
        Op::AddRow(m, row) => {
            if needs[m.0] {
                out.push((m, g.clone()));
            }
            if needs[row.0] {
                let gt = g.transpose();
                let sums: Vec<f64> = (0..gt.rows()).map(|c| fixed_sum(gt.row(c))).collect();
                out.push((row, Matrix::from_raw(1, sums.len(), sums)));
            }
        }
        Op::Relu(a) => {
            let x = v(a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                .collect();
            out.push((a, Matrix::from_raw(x.rows(), x.cols(), data)));
        }
        Op::Scale(a, c) => out.push((a, g.scale(c))),
        Op::ProjectRows { input, b1, b2 } => {
            let x = v(input);
            let Aux::Norms(norms) = aux else { unreachable!("projection caches norms") };
            let mut dx = g.clone();
            for (r, &n) in norms.iter().enumerate() {
                let target = if n == 0.0 {
                    dx.row_mut(r).iter_mut().for_each(|e| *e = 0.0);
                    continue;
                } else if n < b1 {
                    b1
                } else if n > b2 {
                    b2
                } else {
                    continue;
                };
                // y = t·x/‖x‖  ⇒  dx = (t/‖x‖)(g − x̂ ⟨x̂, g⟩)
                let xr = x.row(r);
                let radial = fixed_dot(xr, g.row(r)) / (n * n);
                for (d, (&xi, &gi)) in dx.row_mut(r).iter_mut().zip(xr.iter().zip(g.row(r))) {
                    *d = target / n * (gi - xi * radial);
                }
            }
            out.push((input, dx));
        }
        Op::StandardizeCols(a) => {
            let Aux::Standardized { stds, z_t } = aux else {
                unreachable!("standardization caches its output")
            };
            let gt = g.transpose();
            let n = gt.cols() as f64;
            let mut dx_t = Matrix::zeros(gt.rows(), gt.cols());
            for c in 0..gt.rows() {
                let gc = gt.row(c);
                let zc = z_t.row(c);
                let g_mean = fixed_sum(gc) / n;
                let gz = fixed_dot(gc, zc) / (n - 1.0);
                for (d, (&gi, &zi)) in dx_t.row_mut(c).iter_mut().zip(gc.iter().zip(zc)) {
                    *d = (gi - g_mean - zi * gz) / stds[c];
                }
            }
            out.push((a, dx_t.transpose()));
        }
        Op::Sum(a) => {
            let (r, c) = v(a).shape();
            out.push((a, Matrix::from_raw(r, c, vec![g.get(0, 0); r * c])));
        }
        Op::SumSquares(a) => {
            let s = 2.0 * g.get(0, 0);
            out.push((a, v(a).scale(s)));
        }
        Op::FrobeniusInner(a, b) => {
            let s = g.get(0, 0);
            if needs[a.0] {
                out.push((a, v(b).scale(s)));
            }
            if needs[b.0] {
                out.push((b, v(a).scale(s)));
            }
        }
    }
    out
}
