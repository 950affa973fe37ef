//! Matrix-level reverse-mode differentiation.
//!
//! Tracker and network code is written once against [`Graph`]. [`Eval`]
//! runs it on plain matrices; [`Tape`] runs the identical forward
//! arithmetic while recording each operation so that [`Tape::backward`] can
//! propagate adjoints into parameter nodes.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Solves above this (Cholesky-estimated) condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Geometry of a 2D convolution stage over a `channels × (height·width)`
/// row-major feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn source_index(&self, patch_row: usize, out_pos: usize) -> Option<usize> {
        let k = self.kernel;
        let c = patch_row / (k * k);
        let ki = (patch_row / k) % k;
        let kj = patch_row % k;
        let oi = out_pos / self.out_width();
        let oj = out_pos % self.out_width();
        let i = (oi * self.stride + ki) as isize - self.padding as isize;
        let j = (oj * self.stride + kj) as isize - self.padding as isize;
        if i < 0 || j < 0 || i >= self.height as isize || j >= self.width as isize {
            return None;
        }
        Some(c * self.height * self.width + i as usize * self.width + j as usize)
    }
}

/// Unfolds `x` (channels × height·width) into a
/// `patch_len × out_h·out_w` matrix of zero-padded patches.
pub fn im2col(x: &Mat, geo: &ConvGeometry) -> Mat {
    let cols = geo.out_height() * geo.out_width();
    let flat = x.data();
    Mat::from_fn(geo.patch_len(), cols, |r, c| {
        geo.source_index(r, c).map_or(0.0, |idx| flat[idx])
    })
}

fn col2im(g: &Mat, geo: &ConvGeometry) -> Mat {
    let mut out = Mat::zeros(geo.channels, geo.height * geo.width);
    let data = out.data_mut();
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            if let Some(idx) = geo.source_index(r, c) {
                data[idx] += g.get(r, c);
            }
        }
    }
    out
}

/// Solves `S X = B` for symmetric positive-definite `S` (lower triangle
/// read). Returns the solution and the Cholesky factor.
pub fn spd_solve(s: &Mat, b: &Mat) -> Result<(Mat, Mat)> {
    if s.rows() != s.cols() || b.rows() != s.rows() {
        return Err(Error::Shape(format!(
            "spd_solve: {:?} \\ {:?}",
            s.shape(),
            b.shape()
        )));
    }
    let l = s
        .cholesky()
        .ok_or_else(|| Error::DegenerateCovariance("matrix is not positive definite".into()))?;
    let diag = l.diagonal();
    let max = diag.iter().cloned().fold(f64::MIN, f64::max);
    let min = diag.iter().cloned().fold(f64::MAX, f64::min);
    let cond = (max / min).powi(2);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::DegenerateCovariance(format!(
            "condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}"
        )));
    }
    Ok((Mat::cholesky_solve(&l, b), l))
}

/// The operation set shared by plain evaluation and taped evaluation.
pub trait Graph {
    type Node: Clone;

    fn constant(&mut self, m: Mat) -> Self::Node;
    fn value<'a>(&'a self, n: &'a Self::Node) -> &'a Mat;

    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node;
    fn sub(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node;
    fn scale(&mut self, a: &Self::Node, s: f64) -> Self::Node;
    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node;
    fn transpose(&mut self, a: &Self::Node) -> Self::Node;
    fn slice(&mut self, a: &Self::Node, rows: Range<usize>, cols: Range<usize>) -> Self::Node;
    fn hstack(&mut self, parts: &[Self::Node]) -> Self::Node;
    fn vstack(&mut self, parts: &[Self::Node]) -> Self::Node;
    fn reshape(&mut self, a: &Self::Node, rows: usize, cols: usize) -> Self::Node;
    fn square(&mut self, a: &Self::Node) -> Self::Node;
    fn sqrt(&mut self, a: &Self::Node) -> Self::Node;
    fn relu(&mut self, a: &Self::Node) -> Self::Node;
    /// `max(a, floor)` element-wise; the gradient is cut where the floor wins.
    fn floor(&mut self, a: &Self::Node, floor: f64) -> Self::Node;
    fn add_row_broadcast(&mut self, a: &Self::Node, row: &Self::Node) -> Self::Node;
    fn add_col_broadcast(&mut self, a: &Self::Node, col: &Self::Node) -> Self::Node;
    /// Vector (n×1 or 1×n) to n×n diagonal matrix.
    fn diag(&mut self, v: &Self::Node) -> Self::Node;
    fn sum(&mut self, a: &Self::Node) -> Self::Node;
    fn im2col(&mut self, a: &Self::Node, geo: ConvGeometry) -> Self::Node;
    fn spd_solve(&mut self, s: &Self::Node, b: &Self::Node) -> Result<Self::Node>;

    /// `x W + b` with a 1×out bias row.
    fn linear(&mut self, x: &Self::Node, w: &Self::Node, b: &Self::Node) -> Self::Node {
        let xw = self.matmul(x, w);
        self.add_row_broadcast(&xw, b)
    }

    /// Convolution stage: `W · im2col(x) + b` with a out_channels×1 bias.
    fn conv(
        &mut self,
        x: &Self::Node,
        w: &Self::Node,
        b: &Self::Node,
        geo: ConvGeometry,
    ) -> Self::Node {
        let cols = self.im2col(x, geo);
        let y = self.matmul(w, &cols);
        self.add_col_broadcast(&y, b)
    }

    fn spd_inverse(&mut self, s: &Self::Node) -> Result<Self::Node> {
        let n = self.value(s).rows();
        let eye = self.constant(Mat::identity(n));
        self.spd_solve(s, &eye)
    }

    fn scalar(&self, n: &Self::Node) -> f64 {
        let v = self.value(n);
        debug_assert_eq!(v.len(), 1);
        v.data()[0]
    }
}

/// Plain evaluation: nodes are the matrices themselves.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Graph for Eval {
    type Node = Mat;

    fn constant(&mut self, m: Mat) -> Mat {
        m
    }
    fn value<'a>(&'a self, n: &'a Mat) -> &'a Mat {
        n
    }
    fn add(&mut self, a: &Mat, b: &Mat) -> Mat {
        a.add(b)
    }
    fn sub(&mut self, a: &Mat, b: &Mat) -> Mat {
        a.sub(b)
    }
    fn scale(&mut self, a: &Mat, s: f64) -> Mat {
        a.scale(s)
    }
    fn matmul(&mut self, a: &Mat, b: &Mat) -> Mat {
        a.matmul(b)
    }
    fn transpose(&mut self, a: &Mat) -> Mat {
        a.transpose()
    }
    fn slice(&mut self, a: &Mat, rows: Range<usize>, cols: Range<usize>) -> Mat {
        a.slice(rows, cols)
    }
    fn hstack(&mut self, parts: &[Mat]) -> Mat {
        Mat::hstack(&parts.iter().collect::<Vec<_>>())
    }
    fn vstack(&mut self, parts: &[Mat]) -> Mat {
        Mat::vstack(&parts.iter().collect::<Vec<_>>())
    }
    fn reshape(&mut self, a: &Mat, rows: usize, cols: usize) -> Mat {
        a.reshape(rows, cols)
    }
    fn square(&mut self, a: &Mat) -> Mat {
        a.map(|v| v * v)
    }
    fn sqrt(&mut self, a: &Mat) -> Mat {
        a.map(f64::sqrt)
    }
    fn relu(&mut self, a: &Mat) -> Mat {
        a.map(relu)
    }
    fn floor(&mut self, a: &Mat, floor: f64) -> Mat {
        a.map(|v| floor_value(v, floor))
    }
    fn add_row_broadcast(&mut self, a: &Mat, row: &Mat) -> Mat {
        a.add_row_broadcast(row)
    }
    fn add_col_broadcast(&mut self, a: &Mat, col: &Mat) -> Mat {
        a.add_col_broadcast(col)
    }
    fn diag(&mut self, v: &Mat) -> Mat {
        Mat::diag(v.data())
    }
    fn sum(&mut self, a: &Mat) -> Mat {
        Mat::from_vec(1, 1, vec![a.sum()])
    }
    fn im2col(&mut self, a: &Mat, geo: ConvGeometry) -> Mat {
        im2col(a, &geo)
    }
    fn spd_solve(&mut self, s: &Mat, b: &Mat) -> Result<Mat> {
        spd_solve(s, b).map(|(x, _)| x)
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[inline]
fn floor_value(v: f64, floor: f64) -> f64 {
    if v > floor {
        v
    } else {
        floor
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Slice(usize, Range<usize>, Range<usize>),
    HStack(Vec<usize>),
    VStack(Vec<usize>),
    Reshape(usize),
    Square(usize),
    Sqrt(usize),
    Relu(usize),
    Floor(usize, f64),
    AddRow(usize, usize),
    AddCol(usize, usize),
    Diag(usize),
    Sum(usize),
    Im2Col(usize, ConvGeometry),
    SpdSolve { s: usize, b: usize, chol: Mat },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records primal operations for one backward pass. Single-threaded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, m: Mat) -> Var {
        self.push(m, Op::Param, true)
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|i| self.nodes[*i].needs_grad)
    }

    fn val(&self, v: &Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        if shapes[loss.0] != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                shapes[loss.0]
            )));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || g.scale(-1.0));
                }
                Op::Scale(a, s) => self.accumulate(&mut grads, *a, || g.scale(*s)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    self.accumulate(&mut grads, *a, || g.matmul(&bv.transpose()));
                    self.accumulate(&mut grads, *b, || av.transpose().matmul(&g));
                }
                Op::Transpose(a) => self.accumulate(&mut grads, *a, || g.transpose()),
                Op::Slice(a, rows, cols) => {
                    let (r, c) = shapes[*a];
                    self.accumulate(&mut grads, *a, || {
                        let mut full = Mat::zeros(r, c);
                        full.add_block(rows.start, cols.start, &g);
                        full
                    });
                }
                Op::HStack(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let (r, c) = shapes[*p];
                        self.accumulate(&mut grads, *p, || g.slice(0..r, c0..c0 + c));
                        c0 += c;
                    }
                }
                Op::VStack(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let (r, c) = shapes[*p];
                        self.accumulate(&mut grads, *p, || g.slice(r0..r0 + r, 0..c));
                        r0 += r;
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = shapes[*a];
                    self.accumulate(&mut grads, *a, || g.reshape(r, c));
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    self.accumulate(&mut grads, *a, || g.hadamard(&x.scale(2.0)));
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    self.accumulate(&mut grads, *a, || {
                        let mut out = g.clone();
                        for (o, yv) in out.data_mut().iter_mut().zip(y.data()) {
                            *o = if *yv > 0.0 { *o / (2.0 * yv) } else { 0.0 };
                        }
                        out
                    });
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    self.accumulate(&mut grads, *a, || mask(&g, x, 0.0));
                }
                Op::Floor(a, f) => {
                    let x = &self.nodes[*a].value;
                    self.accumulate(&mut grads, *a, || mask(&g, x, *f));
                }
                Op::AddRow(a, b) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || {
                        Mat::from_fn(1, g.cols(), |_, j| (0..g.rows()).map(|i| g.get(i, j)).sum())
                    });
                }
                Op::AddCol(a, b) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || {
                        Mat::from_fn(g.rows(), 1, |i, _| (0..g.cols()).map(|j| g.get(i, j)).sum())
                    });
                }
                Op::Diag(a) => {
                    let (r, c) = shapes[*a];
                    self.accumulate(&mut grads, *a, || Mat::from_vec(r, c, g.diagonal()));
                }
                Op::Sum(a) => {
                    let (r, c) = shapes[*a];
                    let s = g.data()[0];
                    self.accumulate(&mut grads, *a, || Mat::from_vec(r, c, vec![s; r * c]));
                }
                Op::Im2Col(a, geo) => self.accumulate(&mut grads, *a, || col2im(&g, geo)),
                Op::SpdSolve { s, b, chol } => {
                    // X = S⁻¹B:  B̄ = S⁻¹X̄,  S̄ = -B̄Xᵀ folded onto the lower triangle
                    let gb = Mat::cholesky_solve(chol, &g);
                    if self.nodes[*s].needs_grad {
                        let full = gb.matmul(&node.value.transpose()).scale(-1.0);
                        let n = full.rows();
                        let lower = Mat::from_fn(n, n, |i, j| match i.cmp(&j) {
                            std::cmp::Ordering::Greater => full.get(i, j) + full.get(j, i),
                            std::cmp::Ordering::Equal => full.get(i, i),
                            std::cmp::Ordering::Less => 0.0,
                        });
                        self.accumulate(&mut grads, *s, || lower);
                    }
                    self.accumulate(&mut grads, *b, || gb);
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], target: usize, g: impl FnOnce() -> Mat) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let g = g();
        match &mut grads[target] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn mask(g: &Mat, x: &Mat, threshold: f64) -> Mat {
    let mut out = g.clone();
    for (o, xv) in out.data_mut().iter_mut().zip(x.data()) {
        if !(*xv > threshold) {
            *o = 0.0;
        }
    }
    out
}

impl Graph for Tape {
    type Node = Var;

    fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Constant, false)
    }
    fn value<'a>(&'a self, n: &'a Var) -> &'a Mat {
        self.val(n)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(a).add(self.val(b));
        let ng = self.ng(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), ng)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(a).sub(self.val(b));
        let ng = self.ng(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }
    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let v = self.val(a).scale(s);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Scale(a.0, s), ng)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(a).matmul(self.val(b));
        let ng = self.ng(&[a.0, b.0]);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }
    fn transpose(&mut self, a: &Var) -> Var {
        let v = self.val(a).transpose();
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Transpose(a.0), ng)
    }
    fn slice(&mut self, a: &Var, rows: Range<usize>, cols: Range<usize>) -> Var {
        let v = self.val(a).slice(rows.clone(), cols.clone());
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Slice(a.0, rows, cols), ng)
    }
    fn hstack(&mut self, parts: &[Var]) -> Var {
        let v = Mat::hstack(&parts.iter().map(|p| self.val(p)).collect::<Vec<_>>());
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        self.push(v, Op::HStack(ids), ng)
    }
    fn vstack(&mut self, parts: &[Var]) -> Var {
        let v = Mat::vstack(&parts.iter().map(|p| self.val(p)).collect::<Vec<_>>());
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        self.push(v, Op::VStack(ids), ng)
    }
    fn reshape(&mut self, a: &Var, rows: usize, cols: usize) -> Var {
        let v = self.val(a).reshape(rows, cols);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Reshape(a.0), ng)
    }
    fn square(&mut self, a: &Var) -> Var {
        let v = self.val(a).map(|x| x * x);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Square(a.0), ng)
    }
    fn sqrt(&mut self, a: &Var) -> Var {
        let v = self.val(a).map(f64::sqrt);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Sqrt(a.0), ng)
    }
    fn relu(&mut self, a: &Var) -> Var {
        let v = self.val(a).map(relu);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Relu(a.0), ng)
    }
    fn floor(&mut self, a: &Var, floor: f64) -> Var {
        let v = self.val(a).map(|x| floor_value(x, floor));
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Floor(a.0, floor), ng)
    }
    fn add_row_broadcast(&mut self, a: &Var, row: &Var) -> Var {
        let v = self.val(a).add_row_broadcast(self.val(row));
        let ng = self.ng(&[a.0, row.0]);
        self.push(v, Op::AddRow(a.0, row.0), ng)
    }
    fn add_col_broadcast(&mut self, a: &Var, col: &Var) -> Var {
        let v = self.val(a).add_col_broadcast(self.val(col));
        let ng = self.ng(&[a.0, col.0]);
        self.push(v, Op::AddCol(a.0, col.0), ng)
    }
    fn diag(&mut self, v: &Var) -> Var {
        let m = Mat::diag(self.val(v).data());
        let ng = self.ng(&[v.0]);
        self.push(m, Op::Diag(v.0), ng)
    }
    fn sum(&mut self, a: &Var) -> Var {
        let v = Mat::from_vec(1, 1, vec![self.val(a).sum()]);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Sum(a.0), ng)
    }
    fn im2col(&mut self, a: &Var, geo: ConvGeometry) -> Var {
        let v = im2col(self.val(a), &geo);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Im2Col(a.0, geo), ng)
    }
    fn spd_solve(&mut self, s: &Var, b: &Var) -> Result<Var> {
        let (x, chol) = spd_solve(self.val(s), self.val(b))?;
        let ng = self.ng(&[s.0, b.0]);
        Ok(self.push(
            x,
            Op::SpdSolve {
                s: s.0,
                b: b.0,
                chol,
            },
            ng,
        ))
    }
}
