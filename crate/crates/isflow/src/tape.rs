//! Reverse-mode differentiation over matrix-valued expressions.
//!
//! The tape is a Wengert list of eagerly evaluated matrix operations. Calling
//! [`Tape::grad`] does not run a numeric backward sweep directly; instead it
//! *emits the adjoint computation as new tape nodes*. Gradients are therefore
//! ordinary tape expressions and can be differentiated again, which is what
//! the training objective needs: the penalty term depends on the gradient of
//! the log-density with respect to the inputs, and its parameter gradient is
//! obtained by a second reverse sweep over the first one.
//!
//! All reductions are ordinary ndarray folds with a fixed summation order, so
//! results are reproducible run to run.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Clone)]
enum Op {
    /// Input, parameter, or constant. Not differentiated further.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product of same-shaped matrices.
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    /// 1 - x^2 (the tanh derivative factor).
    OneMinusSq(NodeId),
    Square(NodeId),
    Recip(NodeId),
    /// log|x|, elementwise.
    LogAbs(NodeId),
    Scale(NodeId, f64),
    /// (r x k) * (1 x k), row vector broadcast over rows.
    MulRow(NodeId, NodeId),
    /// (r x k) + (1 x k).
    AddRow(NodeId, NodeId),
    /// (r x k) -> (1 x k).
    ColSum(NodeId),
    /// (r x k) -> (r x 1).
    RowSum(NodeId),
    /// (r x k) -> (1 x 1).
    SumAll(NodeId),
    /// (r x 1) -> (r x k).
    RepeatCols(NodeId),
    /// (1 x k) -> (r x k).
    RepeatRows(NodeId),
    /// (1 x 1) -> (r x k).
    BroadcastAll(NodeId),
    /// Select columns by index list.
    GatherCols(NodeId, Arc<Vec<usize>>),
    /// Place columns at the given indices of a wider zero matrix.
    ScatterCols(NodeId, Arc<Vec<usize>>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Eagerly evaluated computation graph.
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    fn zeros_like(&mut self, id: NodeId) -> NodeId {
        let dim = self.nodes[id].value.raw_dim();
        self.leaf(Array2::zeros(dim))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a].value.dim(),
            self.nodes[b].value.dim(),
            "elementwise mul needs equal shapes"
        );
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = parallel_matmul(&self.nodes[a].value, &self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -&self.nodes[a].value;
        self.push(v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn one_minus_sq(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| 1.0 - x * x);
        self.push(v, Op::OneMinusSq(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn log_abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.abs().ln());
        self.push(v, Op::LogAbs(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, k) = self.nodes[a].value.dim();
        assert_eq!(self.nodes[row].value.dim(), (1, k), "row broadcast shape");
        let v = &self.nodes[a].value * &self.nodes[row].value.row(0);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, k) = self.nodes[a].value.dim();
        assert_eq!(self.nodes[row].value.dim(), (1, k), "row broadcast shape");
        let v = &self.nodes[a].value + &self.nodes[row].value.row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::ColSum(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn repeat_cols(&mut self, a: NodeId, k: usize) -> NodeId {
        let (r, c) = self.nodes[a].value.dim();
        assert_eq!(c, 1, "repeat_cols expects a column");
        let col = self.nodes[a].value.column(0).to_owned();
        let mut v = Array2::zeros((r, k));
        for mut out_col in v.columns_mut() {
            out_col.assign(&col);
        }
        self.push(v, Op::RepeatCols(a))
    }

    pub fn repeat_rows(&mut self, a: NodeId, r: usize) -> NodeId {
        let (rows, k) = self.nodes[a].value.dim();
        assert_eq!(rows, 1, "repeat_rows expects a row");
        let row = self.nodes[a].value.row(0).to_owned();
        let mut v = Array2::zeros((r, k));
        for mut out_row in v.rows_mut() {
            out_row.assign(&row);
        }
        self.push(v, Op::RepeatRows(a))
    }

    pub fn broadcast_all(&mut self, a: NodeId, r: usize, k: usize) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), (1, 1));
        let v = Array2::from_elem((r, k), self.nodes[a].value[(0, 0)]);
        self.push(v, Op::BroadcastAll(a))
    }

    pub fn gather_cols(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let src = &self.nodes[a].value;
        let r = src.nrows();
        let mut v = Array2::zeros((r, idx.len()));
        for (j, &col) in idx.iter().enumerate() {
            v.column_mut(j).assign(&src.column(col));
        }
        self.push(v, Op::GatherCols(a, idx))
    }

    pub fn scatter_cols(&mut self, a: NodeId, idx: Arc<Vec<usize>>, width: usize) -> NodeId {
        let src = &self.nodes[a].value;
        assert_eq!(src.ncols(), idx.len());
        let r = src.nrows();
        let mut v = Array2::zeros((r, width));
        for (j, &col) in idx.iter().enumerate() {
            v.column_mut(col).assign(&src.column(j));
        }
        self.push(v, Op::ScatterCols(a, idx))
    }

    /// Gather a contiguous column range.
    pub fn slice_cols(&mut self, a: NodeId, range: std::ops::Range<usize>) -> NodeId {
        let idx: Vec<usize> = range.collect();
        self.gather_cols(a, Arc::new(idx))
    }

    /// Emit the adjoint graph of `root` and return gradient nodes for `wrt`.
    ///
    /// `root` must be a 1x1 node. Nodes that do not influence `root` get a
    /// zero gradient of the right shape. Because contributions are emitted as
    /// tape nodes, the returned gradients can themselves be differentiated by
    /// a further `grad` call.
    pub fn grad(&mut self, root: NodeId, wrt: &[NodeId]) -> Vec<NodeId> {
        assert_eq!(
            self.nodes[root].value.dim(),
            (1, 1),
            "grad root must be scalar"
        );
        let mut adjoint: Vec<Option<NodeId>> = vec![None; root + 1];
        adjoint[root] = Some(self.scalar(1.0));

        for id in (0..=root).rev() {
            let Some(out_grad) = adjoint[id] else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoint, a, out_grad);
                    self.accumulate(&mut adjoint, b, out_grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoint, a, out_grad);
                    let gb = self.neg(out_grad);
                    self.accumulate(&mut adjoint, b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(out_grad, b);
                    self.accumulate(&mut adjoint, a, ga);
                    let gb = self.mul(out_grad, a);
                    self.accumulate(&mut adjoint, b, gb);
                }
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b);
                    let ga = self.matmul(out_grad, bt);
                    self.accumulate(&mut adjoint, a, ga);
                    let at = self.transpose(a);
                    let gb = self.matmul(at, out_grad);
                    self.accumulate(&mut adjoint, b, gb);
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(out_grad);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::Neg(a) => {
                    let ga = self.neg(out_grad);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(out_grad, id);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::Tanh(a) => {
                    let d = self.one_minus_sq(id);
                    let ga = self.mul(out_grad, d);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::OneMinusSq(a) => {
                    let d = self.scale(a, -2.0);
                    let ga = self.mul(out_grad, d);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::Square(a) => {
                    let d = self.scale(a, 2.0);
                    let ga = self.mul(out_grad, d);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::Recip(a) => {
                    let sq = self.square(id);
                    let d = self.neg(sq);
                    let ga = self.mul(out_grad, d);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::LogAbs(a) => {
                    let d = self.recip(a);
                    let ga = self.mul(out_grad, d);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(out_grad, c);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::MulRow(a, row) => {
                    let ga = self.mul_row(out_grad, row);
                    self.accumulate(&mut adjoint, a, ga);
                    let prod = self.mul(out_grad, a);
                    let grow = self.col_sum(prod);
                    self.accumulate(&mut adjoint, row, grow);
                }
                Op::AddRow(a, row) => {
                    self.accumulate(&mut adjoint, a, out_grad);
                    let grow = self.col_sum(out_grad);
                    self.accumulate(&mut adjoint, row, grow);
                }
                Op::ColSum(a) => {
                    let r = self.nodes[a].value.nrows();
                    let ga = self.repeat_rows(out_grad, r);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::RowSum(a) => {
                    let k = self.nodes[a].value.ncols();
                    let ga = self.repeat_cols(out_grad, k);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::SumAll(a) => {
                    let (r, k) = self.nodes[a].value.dim();
                    let ga = self.broadcast_all(out_grad, r, k);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::RepeatCols(a) => {
                    let ga = self.row_sum(out_grad);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::RepeatRows(a) => {
                    let ga = self.col_sum(out_grad);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::BroadcastAll(a) => {
                    let ga = self.sum_all(out_grad);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::GatherCols(a, idx) => {
                    let width = self.nodes[a].value.ncols();
                    let ga = self.scatter_cols(out_grad, idx, width);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::ScatterCols(a, idx) => {
                    let ga = self.gather_cols(out_grad, idx);
                    self.accumulate(&mut adjoint, a, ga);
                }
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w).copied().flatten() {
                Some(g) => g,
                None => self.zeros_like(w),
            })
            .collect()
    }

    fn accumulate(&mut self, adjoint: &mut [Option<NodeId>], target: NodeId, contribution: NodeId) {
        adjoint[target] = Some(match adjoint[target] {
            Some(existing) => self.add(existing, contribution),
            None => contribution,
        });
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Row-split matrix product. Output blocks are disjoint and each block is a
/// plain serial product, so the result is identical to the serial one.
pub fn parallel_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (r, k) = a.dim();
    let (k2, c) = b.dim();
    assert_eq!(k, k2, "matmul inner dimensions differ");
    if r * k * c < 1 << 20 || r < 2 {
        return a.dot(b);
    }
    let mut out = Array2::zeros((r, c));
    let half = r / 2;
    let (top_a, bot_a) = a.view().split_at(Axis(0), half);
    let (mut top_o, mut bot_o) = out.view_mut().split_at(Axis(0), half);
    rayon::join(
        || top_o.assign(&top_a.dot(b)),
        || bot_o.assign(&bot_a.dot(b)),
    );
    out
}

/// Numeric (non-graph) slice of columns, used by tests.
pub fn as_columns(m: &Array2<f64>, range: std::ops::Range<usize>) -> Array2<f64> {
    m.slice(s![.., range]).to_owned()
}
