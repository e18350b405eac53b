//! Dense row-major matrices and a reverse-mode tape over the handful of ops
//! the denoisers need.


use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    /// `self · bᵀ`
    pub fn matmul_t(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols, "matmul_t inner dimension");
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..b.rows {
                out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `selfᵀ · b`
    pub fn t_matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows, "t_matmul inner dimension");
        let mut out = Mat::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = b.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    fn add_assign(&mut self, o: &Mat) {
        debug_assert_eq!(self.shape(), o.shape());
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Row-wise softmax where `mask[i * cols + j] == false` entries get weight
/// exactly zero. Every row must keep at least one entry.
pub fn masked_softmax_rows(scores: &Mat, mask: &[bool]) -> Mat {
    assert_eq!(mask.len(), scores.data.len(), "mask shape");
    let mut out = Mat::zeros(scores.rows, scores.cols);
    for i in 0..scores.rows {
        let r = i * scores.cols..(i + 1) * scores.cols;
        let (s, m) = (&scores.data[r.clone()], &mask[r.clone()]);
        let max = s
            .iter()
            .zip(m)
            .filter(|(_, &keep)| keep)
            .fold(f64::NEG_INFINITY, |a, (&v, _)| a.max(v));
        assert!(max.is_finite(), "attention row {i} has no unmasked key");
        let o = &mut out.data[r];
        let mut sum = 0.0;
        for ((ov, &sv), &keep) in o.iter_mut().zip(s).zip(m) {
            if keep {
                *ov = (sv - max).exp();
                sum += *ov;
            }
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleVar(Var, Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records values and ops in evaluation order; gradients are accumulated in
/// reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    /// A leaf whose gradient is reported under parameter index `idx`.
    pub fn param(&mut self, idx: usize, m: &Mat) -> Var {
        self.push(m.clone(), Op::Param(idx))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), self.value(b).shape(), "add shape");
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// `a + b` with the single row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(bv.rows == 1 && bv.cols == av.cols, "add_row shape");
        let mut v = av.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                *v.at_mut(r, c) += bv.data[c];
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let v = Mat::from_vec(av.rows, av.cols, data);
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// `a * s` for a 1×1 node `s`.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "scale_var expects a scalar");
        let k = sv.data[0];
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::ScaleVar(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// Masked row softmax. Masked entries are exactly zero in the output.
    pub fn softmax(&mut self, a: Var, mask: &[bool]) -> Var {
        let v = masked_softmax_rows(self.value(a), mask);
        self.push(v, Op::Softmax(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut v = Mat::zeros(av.rows, av.cols);
        let mut rstd = Vec::with_capacity(av.rows);
        let n = av.cols as f64;
        for r in 0..av.rows {
            let row = av.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for (c, x) in row.iter().enumerate() {
                *v.at_mut(r, c) = (x - mean) * rs;
            }
            rstd.push(rs);
        }
        self.push(v, Op::LayerNorm(a, rstd))
    }

    /// Selects rows of `a` by index (rows may repeat).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut v = Mat::zeros(idx.len(), av.cols);
        for (r, &i) in idx.iter().enumerate() {
            v.data[r * av.cols..(r + 1) * av.cols].copy_from_slice(av.row(i));
        }
        self.push(v, Op::Gather(a, idx.to_vec()))
    }

    /// Back-propagates `seed` (shaped like `out`) and returns the gradient of
    /// every parameter leaf as `(param index, gradient)` pairs.
    pub fn backward(&self, out: Var, seed: &Mat) -> Vec<(usize, Mat)> {
        assert_eq!(self.value(out).shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Mat>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.clone());
        let mut params = Vec::new();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => params.push((*p, g)),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] += g.at(r, c);
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::ScaleVar(a, s) => {
                    let k = self.value(*s).data[0];
                    let dk: f64 = g.data.iter().zip(&self.value(*a).data).map(|(x, y)| x * y).sum();
                    acc(&mut grads, *s, Mat::from_vec(1, 1, vec![dk]));
                    acc(&mut grads, *a, g.map(|x| x * k));
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        })
                        .collect();
                    acc(&mut grads, *a, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..g.cols {
                            *ga.at_mut(r, c) = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, rstd) => {
                    let y = &node.value;
                    let n = g.cols as f64;
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..g.cols {
                            *ga.at_mut(r, c) = rstd[r] * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..av.cols {
                            *ga.at_mut(i, c) += g.at(r, c);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        params
    }
}
