//! Dense row-major matrices and a reverse-mode tape covering the operations
//! the scorer needs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Mat { rows, cols, data }
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Mat::from_vec(1, n, data)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `self · other`
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, a) in self.row(i).iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, a) in self.row(k).iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, bv) in orow.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.data.len(), other.data.len(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Rows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Sigmoid(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records a forward computation over a fixed parameter list and replays it
/// backwards to accumulate parameter gradients.
pub struct Tape<'p> {
    params: &'p [Mat],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => &self.params[id],
            _ => &node.value,
        }
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.push(Mat::zeros(0, 0), Op::Param(id))
    }

    /// Rows `ids` of parameter table `table`.
    pub fn gather(&mut self, table: usize, ids: &[usize]) -> Var {
        let t = &self.params[table];
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(*id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        let bias = self.value(b);
        assert_eq!(bias.rows, 1);
        assert_eq!(bias.cols, v.cols);
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&bias.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            v.row_mut(r).copy_from_slice(&softmax(x.row(r)));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = xv.cols as f64;
        let mut xhat = Mat::zeros(xv.rows, xv.cols);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..xv.cols {
                let h = (row[c] - mean) * is;
                xhat.data[r * xv.cols + c] = h;
                out.data[r * xv.cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|v| gelu(*v)).collect());
        self.push(v, Op::Gelu(a))
    }

    pub fn rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(idx.len(), x.cols);
        for (r, i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(x.row(*i));
        }
        self.push(v, Op::Rows(a, idx.to_vec()))
    }

    /// Horizontal concatenation of single-row matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows, 1, "concat_cols expects row vectors");
            data.extend_from_slice(&m.data);
        }
        self.push(Mat::row_vec(data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|v| sigmoid(*v)).collect());
        self.push(v, Op::Sigmoid(a))
    }

    /// Back-propagates `seed` (same shape as `out`) and adds parameter
    /// gradients into `grads`, which is indexed like the parameter list.
    pub fn backward(&self, out: Var, seed: Mat, grads: &mut [Mat]) {
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads[*id].add_assign(&g),
                Op::Gather { table, ids } => {
                    let t = &mut grads[*table];
                    for (r, id) in ids.iter().enumerate() {
                        for (dst, src) in t.row_mut(*id).iter_mut().zip(g.row(r)) {
                            *dst += src;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut adj, *b, db);
                    accumulate(&mut adj, *a, g);
                }
                Op::Scale(a, c) => {
                    let mut da = g;
                    da.scale(*c);
                    accumulate(&mut adj, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let n = xhat.cols as f64;
                    let mut dx = Mat::zeros(xhat.rows, xhat.cols);
                    let mut dgain = Mat::zeros(1, xhat.cols);
                    let mut dbias = Mat::zeros(1, xhat.cols);
                    for r in 0..xhat.rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let dh: Vec<f64> = gr.iter().zip(&gv.data).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for c in 0..xhat.cols {
                            dgain.data[c] += gr[c] * hr[c];
                            dbias.data[c] += gr[c];
                            dx.data[r * xhat.cols + c] =
                                inv_std[r] / n * (n * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    accumulate(&mut adj, *gain, dgain);
                    accumulate(&mut adj, *bias, dbias);
                    accumulate(&mut adj, *x, dx);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let da = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&x.data)
                            .map(|(d, v)| d * gelu_grad(*v))
                            .collect(),
                    );
                    accumulate(&mut adj, *a, da);
                }
                Op::Rows(a, idx) => {
                    let src = self.value(*a);
                    let mut da = Mat::zeros(src.rows, src.cols);
                    for (r, i) in idx.iter().enumerate() {
                        for (d, x) in da.row_mut(*i).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        accumulate(&mut adj, *p, Mat::row_vec(g.data[off..off + w].to_vec()));
                        off += w;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&y.data)
                            .map(|(d, s)| d * s * (1.0 - s))
                            .collect(),
                    );
                    accumulate(&mut adj, *a, da);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(params: &mut [Mat], id: usize, f: &dyn Fn(&[Mat]) -> f64) -> Mat {
        let h = 1e-5;
        let mut out = Mat::zeros(params[id].rows, params[id].cols);
        for i in 0..params[id].data.len() {
            let orig = params[id].data[i];
            params[id].data[i] = orig + h;
            let up = f(params);
            params[id].data[i] = orig - h;
            let down = f(params);
            params[id].data[i] = orig;
            out.data[i] = (up - down) / (2.0 * h);
        }
        out
    }

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i as f64 + 1.0) * 0.7391 + salt).sin())
            .collect()
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::from_vec(2, 3, pseudo(6, 0.1));
        let b = Mat::from_vec(3, 4, pseudo(12, 0.2));
        let c = a.matmul(&b);
        let mut bt = Mat::zeros(4, 3);
        for i in 0..3 {
            for j in 0..4 {
                bt.data[j * 3 + i] = b.at(i, j);
            }
        }
        let c2 = a.matmul_t(&bt);
        for (x, y) in c.data.iter().zip(&c2.data) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut at = Mat::zeros(3, 2);
        for i in 0..2 {
            for j in 0..3 {
                at.data[j * 2 + i] = a.at(i, j);
            }
        }
        let c3 = at.t_matmul(&b);
        for (x, y) in c.data.iter().zip(&c3.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        // every op on one small graph
        let mut params = vec![
            Mat::from_vec(5, 3, pseudo(15, 0.3)), // table
            Mat::from_vec(3, 3, pseudo(9, 0.5)),  // w
            Mat::from_vec(1, 3, pseudo(3, 0.9)),  // bias
            Mat::from_vec(1, 3, pseudo(3, 1.3)),  // gain
            Mat::from_vec(6, 1, pseudo(6, 1.7)),  // head
        ];
        let f = |ps: &[Mat]| -> (f64, Vec<Mat>) {
            let mut t = Tape::new(ps);
            let x = t.gather(0, &[1, 4, 1, 2]);
            let w = t.param(1);
            let b = t.param(2);
            let g = t.param(3);
            let h = t.matmul(x, w);
            let h = t.add_row(h, b);
            let h = t.layer_norm(h, g, b);
            let s = t.matmul_t(h, x);
            let s = t.scale(s, 0.5);
            let s = t.softmax_rows(s);
            let y = t.matmul(s, x);
            let y = t.add(y, h);
            let y = t.gelu(y);
            let r0 = t.rows(y, &[0]);
            let r2 = t.rows(y, &[2, 3]);
            let r2 = t.rows(r2, &[1]);
            let c = t.concat_cols(&[r0, r2]);
            let hd = t.param(4);
            let o = t.matmul(c, hd);
            let o = t.sigmoid(o);
            let val = t.value(o).data[0];
            let mut grads: Vec<Mat> = ps.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
            t.backward(o, Mat::from_vec(1, 1, vec![1.0]), &mut grads);
            (val, grads)
        };
        let (_, analytic) = f(&params);
        for id in 0..params.len() {
            let num = numeric_grad(&mut params, id, &|ps| f(ps).0);
            for (a, n) in analytic[id].data.iter().zip(&num.data) {
                assert!(
                    (a - n).abs() < 1e-7 * (1.0 + a.abs()),
                    "param {id}: {a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn sigmoid_bounds() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
