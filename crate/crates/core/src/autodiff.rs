//! Reverse-mode autodiff over dense f64 matrices.
//!
//! A `Graph` is a flat tape of nodes. Forward values are computed eagerly as
//! ops are recorded; `backward` walks the tape once in reverse and
//! accumulates gradients. The op set is exactly what the training loss
//! needs; every op's backward is checked against central differences in the
//! unit tests below.

use ndarray::{Array1, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    /// a @ b.T
    MatMulBt(VarId, VarId),
    Add(VarId, VarId),
    /// matrix + row broadcast over rows; row has shape 1 x d
    AddRow(VarId, VarId),
    /// tile a 1 x d row into n x d
    TileRows(VarId, usize),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    Silu(VarId),
    /// row-wise softmax; entries with a false mask flag are exactly zero
    SoftmaxRows(VarId, Option<Array2<bool>>),
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: f64,
    },
    RowNorm {
        x: VarId,
        eps: f64,
    },
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    SliceRows {
        x: VarId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: VarId,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: VarId,
        idx: Vec<usize>,
    },
    SumAll(VarId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last `backward` call; zero if the loss
    /// does not depend on this node.
    pub fn grad(&self, id: VarId) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[id.0].value.dim()),
        }
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_row(&mut self, value: Array1<f64>) -> VarId {
        let row = value.insert_axis(Axis(0));
        self.push(row, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> VarId {
        self.push(Array2::from_elem((1, 1), v), Op::Leaf)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// a @ b.T without materializing the transpose as a node.
    pub fn matmul_bt(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let mut v = self.nodes[a.0].value.clone();
        let r = self.nodes[row.0].value.row(0).to_owned();
        for mut vr in v.rows_mut() {
            vr += &r;
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn tile_rows(&mut self, row: VarId, n: usize) -> VarId {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let r = self.nodes[row.0].value.row(0).to_owned();
        let mut v = Array2::zeros((n, r.len()));
        for mut vr in v.rows_mut() {
            vr.assign(&r);
        }
        self.push(v, Op::TileRows(row, n))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| x / (1.0 + (-x).exp()));
        self.push(v, Op::Silu(a))
    }

    /// Row-wise masked softmax. `allowed[i][j] == false` pins entry (i, j)
    /// to exactly zero; the row max is taken over allowed entries only so
    /// the result matches the inference-path implementation bit for bit.
    pub fn softmax_rows(&mut self, a: VarId, allowed: Option<Array2<bool>>) -> VarId {
        let x = &self.nodes[a.0].value;
        if let Some(m) = &allowed {
            debug_assert_eq!(m.dim(), x.dim());
        }
        let mut y = Array2::zeros(x.dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                let ok = allowed.as_ref().map_or(true, |m| m[[i, j]]);
                if ok && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for (j, v) in row.iter().enumerate() {
                let ok = allowed.as_ref().map_or(true, |m| m[[i, j]]);
                if ok {
                    let e = (*v - max).exp();
                    y[[i, j]] = e;
                    sum += e;
                }
            }
            for j in 0..row.len() {
                y[[i, j]] /= sum;
            }
        }
        self.push(y, Op::SoftmaxRows(a, allowed))
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> VarId {
        let g = self.nodes[gain.0].value.row(0).to_owned();
        let b = self.nodes[bias.0].value.row(0).to_owned();
        let mut y = normalize_rows(&self.nodes[x.0].value, eps);
        for mut row in y.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * g[i] + b[i];
            }
        }
        self.push(y, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn row_norm(&mut self, x: VarId, eps: f64) -> VarId {
        let y = normalize_rows(&self.nodes[x.0].value, eps);
        self.push(y, Op::RowNorm { x, eps })
    }

    pub fn concat_rows(&mut self, parts: Vec<VarId>) -> VarId {
        let cols = self.nodes[parts[0].0].value.ncols();
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in &parts {
            let pv = &self.nodes[p.0].value;
            v.slice_mut(ndarray::s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        self.push(v, Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<VarId>) -> VarId {
        let rows = self.nodes[parts[0].0].value.nrows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in &parts {
            let pv = &self.nodes[p.0].value;
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let v = self.nodes[x.0]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let v = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn gather_rows(&mut self, x: VarId, idx: Vec<usize>) -> VarId {
        let xv = &self.nodes[x.0].value;
        let mut v = Array2::zeros((idx.len(), xv.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&xv.row(r));
        }
        self.push(v, Op::GatherRows { x, idx })
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s = self.nodes[x.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x))
    }

    /// Sum of squared entries, as a 1x1 node.
    pub fn sq_norm(&mut self, x: VarId) -> VarId {
        let sq = self.mul(x, x);
        self.sum_all(sq)
    }

    /// Run reverse-mode accumulation from a 1x1 loss node.
    pub fn backward(&mut self, loss: VarId) {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward expects a scalar loss node"
        );
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // put it back for callers that read grads after backward
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value);
                    let db = g.t().dot(&self.nodes[a.0].value);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(a, g.clone());
                    self.accumulate(row, dr);
                }
                Op::TileRows(row, _) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(row, dr);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, g.mapv(|v| v * c));
                }
                Op::Silu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = ndarray::Zip::from(&g).and(x).map_collect(|&gv, &xv| {
                        let s = 1.0 / (1.0 + (-xv).exp());
                        gv * s * (1.0 + xv * (1.0 - s))
                    });
                    self.accumulate(a, da);
                }
                Op::SoftmaxRows(a, _) => {
                    let y = &self.nodes[i].value;
                    let mut da = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            da[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = self.nodes[x.0].value.clone();
                    let gv = self.nodes[gain.0].value.row(0).to_owned();
                    let xhat = normalize_rows(&xv, eps);
                    let mut dg = Array2::zeros((1, xv.ncols()));
                    let mut db = Array2::zeros((1, xv.ncols()));
                    for r in 0..xv.nrows() {
                        for c in 0..xv.ncols() {
                            dg[[0, c]] += g[[r, c]] * xhat[[r, c]];
                            db[[0, c]] += g[[r, c]];
                        }
                    }
                    let mut dxhat = g.clone();
                    for r in 0..dxhat.nrows() {
                        for c in 0..dxhat.ncols() {
                            dxhat[[r, c]] *= gv[c];
                        }
                    }
                    let dx = normalize_backward(&xv, &xhat, &dxhat, eps);
                    self.accumulate(x, dx);
                    self.accumulate(gain, dg);
                    self.accumulate(bias, db);
                }
                Op::RowNorm { x, eps } => {
                    let xv = self.nodes[x.0].value.clone();
                    let xhat = normalize_rows(&xv, eps);
                    let dx = normalize_backward(&xv, &xhat, &g, eps);
                    self.accumulate(x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.nrows();
                        let slice = g.slice(ndarray::s![at..at + n, ..]).to_owned();
                        self.accumulate(p, slice);
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.ncols();
                        let slice = g.slice(ndarray::s![.., at..at + n]).to_owned();
                        self.accumulate(p, slice);
                        at += n;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    dx.slice_mut(ndarray::s![start..start + len, ..]).assign(&g);
                    self.accumulate(x, dx);
                }
                Op::SliceCols { x, start, len } => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    dx.slice_mut(ndarray::s![.., start..start + len]).assign(&g);
                    self.accumulate(x, dx);
                }
                Op::GatherRows { x, idx } => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    for (i_row, &r) in idx.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &g.row(i_row);
                    }
                    self.accumulate(x, dx);
                }
                Op::SumAll(x) => {
                    let s = g[[0, 0]];
                    let dx = Array2::from_elem(self.nodes[x.0].value.dim(), s);
                    self.accumulate(x, dx);
                }
            }
            self.grads[i] = Some(g);
        }
    }

    fn accumulate(&mut self, id: VarId, delta: Array2<f64>) {
        match &mut self.grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

fn normalize_rows(x: &Array2<f64>, eps: f64) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let denom = (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
    y
}

/// Backward through per-row zero-mean/unit-variance normalization given the
/// gradient w.r.t. the normalized output.
fn normalize_backward(
    x: &Array2<f64>,
    xhat: &Array2<f64>,
    dxhat: &Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        let row = x.row(r);
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        let m1: f64 = (0..x.ncols()).map(|c| dxhat[[r, c]]).sum::<f64>() / d;
        let m2: f64 = (0..x.ncols())
            .map(|c| dxhat[[r, c]] * xhat[[r, c]])
            .sum::<f64>()
            / d;
        for c in 0..x.ncols() {
            dx[[r, c]] = inv * (dxhat[[r, c]] - m1 - xhat[[r, c]] * m2);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Central-difference gradient of `f` w.r.t. the entries of `x0`.
    fn numeric_grad(
        f: &dyn Fn(&Array2<f64>) -> f64,
        x0: &Array2<f64>,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x0.dim());
        let mut x = x0.clone();
        for r in 0..x0.nrows() {
            for c in 0..x0.ncols() {
                let keep = x[[r, c]];
                x[[r, c]] = keep + h;
                let hi = f(&x);
                x[[r, c]] = keep - h;
                let lo = f(&x);
                x[[r, c]] = keep;
                g[[r, c]] = (hi - lo) / (2.0 * h);
            }
        }
        g
    }

    fn assert_grad_close(analytic: &Array2<f64>, numeric: &Array2<f64>, tol: f64) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() / denom < tol,
                "grad mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    /// Build-and-check harness: `build` records a scalar loss from one leaf.
    fn check_input_grad(build: &dyn Fn(&mut Graph, VarId) -> VarId, x0: &Array2<f64>) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = build(&mut g, x);
        g.backward(loss);
        let analytic = g.grad(x);
        let numeric = numeric_grad(
            &|xv: &Array2<f64>| {
                let mut g2 = Graph::new();
                let x2 = g2.leaf(xv.clone());
                let l = build(&mut g2, x2);
                g2.value(l)[[0, 0]]
            },
            x0,
            1e-6,
        );
        assert_grad_close(&analytic, &numeric, 1e-6);
    }

    fn random(rows: usize, cols: usize, label: &str) -> Array2<f64> {
        let mut r = rng::stream(11, label);
        rng::normal_matrix(&mut r, rows, cols)
    }

    #[test]
    fn matmul_grads() {
        let w = random(4, 3, "w");
        check_input_grad(
            &|g, x| {
                let wv = g.leaf(w.clone());
                let y = g.matmul(x, wv);
                g.sq_norm(y)
            },
            &random(2, 4, "x"),
        );
    }

    #[test]
    fn matmul_bt_grads() {
        let b = random(5, 3, "b");
        check_input_grad(
            &|g, x| {
                let bv = g.leaf(b.clone());
                let y = g.matmul_bt(x, bv);
                g.sq_norm(y)
            },
            &random(2, 3, "x2"),
        );
    }

    #[test]
    fn add_row_and_tile_grads() {
        check_input_grad(
            &|g, x| {
                let t = g.tile_rows(x, 5);
                let y = g.silu(t);
                g.sq_norm(y)
            },
            &random(1, 4, "row"),
        );
        let row = random(1, 4, "bias");
        check_input_grad(
            &|g, x| {
                let r = g.leaf(row.clone());
                let y = g.add_row(x, r);
                g.sq_norm(y)
            },
            &random(3, 4, "base"),
        );
    }

    #[test]
    fn softmax_grads_with_mask() {
        let mut allowed = Array2::from_elem((3, 4), true);
        allowed[[0, 2]] = false;
        allowed[[2, 0]] = false;
        let weights = random(4, 2, "sm-w");
        check_input_grad(
            &|g, x| {
                let sm = g.softmax_rows(x, Some(allowed.clone()));
                let wv = g.leaf(weights.clone());
                let y = g.matmul(sm, wv);
                g.sq_norm(y)
            },
            &random(3, 4, "sm-x"),
        );
    }

    #[test]
    fn layer_norm_grads_all_inputs() {
        let x0 = random(3, 6, "ln-x");
        let g0 = random(1, 6, "ln-g");
        let b0 = random(1, 6, "ln-b");
        // w.r.t. x
        check_input_grad(
            &|g, x| {
                let gv = g.leaf(g0.clone());
                let bv = g.leaf(b0.clone());
                let y = g.layer_norm(x, gv, bv, 1e-6);
                g.sq_norm(y)
            },
            &x0,
        );
        // w.r.t. gain
        check_input_grad(
            &|g, gain| {
                let xv = g.leaf(x0.clone());
                let bv = g.leaf(b0.clone());
                let y = g.layer_norm(xv, gain, bv, 1e-6);
                g.sq_norm(y)
            },
            &g0,
        );
        // w.r.t. bias
        check_input_grad(
            &|g, bias| {
                let xv = g.leaf(x0.clone());
                let gv = g.leaf(g0.clone());
                let y = g.layer_norm(xv, gv, bias, 1e-6);
                g.sq_norm(y)
            },
            &b0,
        );
    }

    #[test]
    fn row_norm_grads() {
        check_input_grad(
            &|g, x| {
                let y = g.row_norm(x, 1e-6);
                let z = g.silu(y);
                g.sq_norm(z)
            },
            &random(3, 5, "rn-x"),
        );
    }

    #[test]
    fn concat_slice_gather_grads() {
        let other = random(2, 4, "cat-b");
        check_input_grad(
            &|g, x| {
                let o = g.leaf(other.clone());
                let cat = g.concat_rows(vec![x, o]);
                let sl = g.slice_rows(cat, 1, 3);
                let gat = g.gather_rows(sl, vec![0, 2, 2]);
                g.sq_norm(gat)
            },
            &random(3, 4, "cat-a"),
        );
        let right = random(3, 2, "cc-b");
        check_input_grad(
            &|g, x| {
                let o = g.leaf(right.clone());
                let cat = g.concat_cols(vec![x, o]);
                let sl = g.slice_cols(cat, 1, 3);
                g.sq_norm(sl)
            },
            &random(3, 3, "cc-a"),
        );
    }

    #[test]
    fn mul_scale_silu_grads() {
        let other = random(3, 3, "mul-b");
        check_input_grad(
            &|g, x| {
                let o = g.leaf(other.clone());
                let m = g.mul(x, o);
                let s = g.scale(m, 0.7);
                let y = g.silu(s);
                g.sq_norm(y)
            },
            &random(3, 3, "mul-a"),
        );
    }

    #[test]
    fn shared_parent_accumulates() {
        // loss = sum((x*x)^2) exercises the same parent on both mul inputs
        check_input_grad(
            &|g, x| {
                let m = g.mul(x, x);
                g.sq_norm(m)
            },
            &random(2, 3, "sq"),
        );
    }

    #[test]
    fn grad_of_unused_leaf_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(random(2, 2, "used"));
        let unused = g.leaf(random(2, 2, "unused"));
        let loss = g.sq_norm(x);
        g.backward(loss);
        assert_eq!(g.grad(unused), Array2::zeros((2, 2)));
    }
}
