//! Wengert-list reverse mode: every op appends a node holding its output
//! value and enough context to map an output gradient to input gradients.
//!
//! Inputs always precede outputs on the tape, so walking the node list in
//! reverse index order is a valid topological order for backward.

use super::kernels::{add_col_sums, col2im, gemm, im2col, ConvGeometry};
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Offset {
        a: Var,
    },
    Sum(Var),
    Mean(Var),
    Variance(Var),
    Covariance(Var, Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LeakyRelu {
        a: Var,
        slope: f64,
    },
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool {
        a: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        a: Var,
        dims: [usize; 4],
        fh: usize,
        fw: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
///
/// Gradients of `requires_grad` leaves accumulate across repeated
/// [`Tape::backward`] calls until [`Tape::zero_grad`] is called.
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.to_vec(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Drops every node recorded after the first `len`; earlier handles stay valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.leaf_grads.truncate(len);
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, op: &'static str) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let value = if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            Tensor {
                shape: ta.shape.clone(),
                data,
            }
        } else if tb.numel() == 1 {
            let y = tb.data[0];
            Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().map(|&x| f(x, y)).collect(),
            }
        } else if ta.numel() == 1 {
            let x = ta.data[0];
            Tensor {
                shape: tb.shape.clone(),
                data: tb.data.iter().map(|&y| f(x, y)).collect(),
            }
        } else {
            return Err(mismatch(op, &ta.shape, &tb.shape));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x * factor).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x + c).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Offset { a }, rg)
    }

    /// `c - a`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    // ---- reductions --------------------------------------------------

    fn nonempty(&self, a: Var, op: &'static str) -> Result<usize> {
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            Err(TensorError::Empty { op })
        } else {
            Ok(n)
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nonempty(a, "mean")?;
        let m = self.nodes[a.0].value.data.iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Population variance (divides by `n`).
    pub fn variance(&mut self, a: Var) -> Result<Var> {
        let n = self.nonempty(a, "variance")?;
        let d = &self.nodes[a.0].value.data;
        let mu = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(var), Op::Variance(a), rg))
    }

    /// Population covariance of two equal-length series.
    pub fn covariance(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.nonempty(a, "covariance")?;
        let (da, db) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if da.numel() != db.numel() {
            return Err(mismatch("covariance", &da.shape, &db.shape));
        }
        let ma = da.data.iter().sum::<f64>() / n as f64;
        let mb = db.data.iter().sum::<f64>() / n as f64;
        let cov = da
            .data
            .iter()
            .zip(&db.data)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(cov), Op::Covariance(a, b), rg))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(mismatch("matmul", &ta.shape, &tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `x[N x n] * w[m x n]^T + b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tx.shape.len() != 2 || tw.shape.len() != 2 || tx.shape[1] != tw.shape[1] {
            return Err(mismatch("linear", &tx.shape, &tw.shape));
        }
        let (rows, n_in, n_out) = (tx.shape[0], tx.shape[1], tw.shape[0]);
        let mut out = vec![0.0; rows * n_out];
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value;
            if tb.numel() != n_out {
                return Err(mismatch("linear bias", &tw.shape, &tb.shape));
            }
            for row in out.chunks_exact_mut(n_out) {
                row.copy_from_slice(&tb.data);
            }
        }
        gemm(rows, n_in, n_out, &tx.data, false, &tw.data, true, &mut out, 1.0);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![rows, n_out],
                data: out,
            },
            Op::Linear { x, w, b },
            rg,
        ))
    }

    // ---- activations -------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// `x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x >= 0.0 { x } else { slope * x }, Op::LeakyRelu { a, slope })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn matrix_dims(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[a.0].value.shape;
        if s.len() != 2 {
            return Err(invalid(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `[N x p] ++ [N x q] -> [N x (p + q)]`, `a`'s columns first.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix_dims(a, "concat_cols")?;
        let (rb, cb) = self.matrix_dims(b, "concat_cols")?;
        if ra != rb {
            return Err(mismatch(
                "concat_cols",
                &self.nodes[a.0].value.shape,
                &self.nodes[b.0].value.shape,
            ));
        }
        let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![ra, ca + cb],
                data: out,
            },
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "slice_cols")?;
        if start + len > cols {
            return Err(invalid(
                "slice_cols",
                format!("columns {start}..{} out of {cols}", start + len),
            ));
        }
        let d = &self.nodes[a.0].value.data;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![rows, len],
                data: out,
            },
            Op::SliceCols { a, start },
            rg,
        ))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let Some(&n) = t.shape.first() else {
            return Err(invalid("gather_rows", "scalar input"));
        };
        let width = t.numel().checked_div(n).unwrap_or(0);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(invalid("gather_rows", format!("row {bad} out of {n}")));
        }
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&t.data[r * width..(r + 1) * width]);
        }
        let mut shape = t.shape.clone();
        shape[0] = rows.len();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::GatherRows { a, rows: rows.to_vec() },
            rg,
        ))
    }

    // ---- convolution -------------------------------------------------

    fn conv_bias(&self, b: Option<Var>, channels: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value;
            if tb.numel() != channels {
                return Err(mismatch(op, &[channels], &tb.shape));
            }
        }
        Ok(())
    }

    fn conv_generic(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, out_shape: Vec<usize>) -> Var {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let cols = im2col(&tx.data, &geom);
        let mut out = vec![0.0; geom.out_len()];
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value.data;
            for row in out.chunks_exact_mut(geom.out_c) {
                row.copy_from_slice(tb);
            }
        }
        gemm(
            geom.positions(),
            geom.patch(),
            geom.out_c,
            &cols,
            false,
            &tw.data,
            false,
            &mut out,
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Conv { x, w, b, geom },
            rg,
        )
    }

    fn conv_transpose_generic(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        out_shape: Vec<usize>,
    ) -> Var {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        // x is [positions x out_c] of the forward conv; w is [patch x out_c].
        let mut cols = vec![0.0; geom.positions() * geom.patch()];
        gemm(
            geom.positions(),
            geom.out_c,
            geom.patch(),
            &tx.data,
            false,
            &tw.data,
            true,
            &mut cols,
            0.0,
        );
        let mut out = col2im(&cols, &geom);
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value.data;
            for row in out.chunks_exact_mut(geom.in_c) {
                row.iter_mut().zip(tb).for_each(|(o, v)| *o += v);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::ConvTranspose { x, w, b, geom },
            rg,
        )
    }

    /// Same-ceil strided cross-correlation.
    ///
    /// `x`: `[N, H, W, Cin]`, `w`: `[kh, kw, Cin, Cout]`, `b`: `[Cout]`;
    /// output `[N, ceil(H/s), ceil(W/s), Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.nodes[x.0].value.shape.clone(), self.nodes[w.0].value.shape.clone());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if sx[3] != sw[2] {
            return Err(invalid(
                "conv2d",
                format!("input has {} channels, kernel expects {}", sx[3], sw[2]),
            ));
        }
        self.conv_bias(b, sw[3], "conv2d bias")?;
        let geom = ConvGeometry::same_ceil(sx[0], sx[1], sx[2], sx[3], sw[0], sw[1], stride, stride, sw[3])?;
        let shape = vec![sx[0], geom.out_h, geom.out_w, geom.out_c];
        Ok(self.conv_generic(x, w, b, geom, shape))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the same
    /// kernel: spatial extents multiply by `stride`.
    ///
    /// `x`: `[N, H, W, Cin]`, `w`: `[kh, kw, Cout, Cin]`, `b`: `[Cout]`;
    /// output `[N, H*s, W*s, Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.nodes[x.0].value.shape.clone(), self.nodes[w.0].value.shape.clone());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(mismatch("conv_transpose2d", &sx, &sw));
        }
        if sx[3] != sw[3] {
            return Err(invalid(
                "conv_transpose2d",
                format!("input has {} channels, kernel expects {}", sx[3], sw[3]),
            ));
        }
        self.conv_bias(b, sw[2], "conv_transpose2d bias")?;
        let geom = ConvGeometry::same_ceil(
            sx[0],
            sx[1] * stride,
            sx[2] * stride,
            sw[2],
            sw[0],
            sw[1],
            stride,
            stride,
            sw[3],
        )?;
        debug_assert_eq!((geom.out_h, geom.out_w), (sx[1], sx[2]));
        let shape = vec![sx[0], geom.in_h, geom.in_w, geom.in_c];
        Ok(self.conv_transpose_generic(x, w, b, geom, shape))
    }

    /// 1D same-ceil convolution. `x`: `[N, L, Cin]`, `w`: `[k, Cin, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.nodes[x.0].value.shape.clone(), self.nodes[w.0].value.shape.clone());
        if sx.len() != 3 || sw.len() != 3 {
            return Err(mismatch("conv1d", &sx, &sw));
        }
        if sx[2] != sw[1] {
            return Err(invalid(
                "conv1d",
                format!("input has {} channels, kernel expects {}", sx[2], sw[1]),
            ));
        }
        self.conv_bias(b, sw[2], "conv1d bias")?;
        let geom = ConvGeometry::same_ceil(sx[0], 1, sx[1], sx[2], 1, sw[0], 1, stride, sw[2])?;
        let shape = vec![sx[0], geom.out_w, geom.out_c];
        Ok(self.conv_generic(x, w, b, geom, shape))
    }

    /// 1D transposed convolution. `x`: `[N, L, Cin]`, `w`: `[k, Cout, Cin]`;
    /// output `[N, L*s, Cout]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.nodes[x.0].value.shape.clone(), self.nodes[w.0].value.shape.clone());
        if sx.len() != 3 || sw.len() != 3 {
            return Err(mismatch("conv_transpose1d", &sx, &sw));
        }
        if sx[2] != sw[2] {
            return Err(invalid(
                "conv_transpose1d",
                format!("input has {} channels, kernel expects {}", sx[2], sw[2]),
            ));
        }
        self.conv_bias(b, sw[1], "conv_transpose1d bias")?;
        let geom = ConvGeometry::same_ceil(sx[0], 1, sx[1] * stride, sw[1], 1, sw[0], 1, stride, sw[2])?;
        let shape = vec![sx[0], geom.in_w, geom.in_c];
        Ok(self.conv_transpose_generic(x, w, b, geom, shape))
    }

    // ---- pooling / resampling -----------------------------------------

    /// Per-channel window maximum over `[N, L, C]`; output length
    /// `(L - window) / stride + 1`. Ties go to the first index.
    pub fn maxpool1d(&mut self, a: Var, window: usize, stride: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape.len() != 3 {
            return Err(invalid("maxpool1d", format!("expected [N, L, C], got {:?}", t.shape)));
        }
        let (n, len, c) = (t.shape[0], t.shape[1], t.shape[2]);
        if window == 0 || stride == 0 {
            return Err(invalid("maxpool1d", "window and stride must be positive"));
        }
        if window > len {
            return Err(invalid("maxpool1d", format!("window {window} exceeds length {len}")));
        }
        let out_len = (len - window) / stride + 1;
        let mut out = Vec::with_capacity(n * out_len * c);
        let mut argmax = Vec::with_capacity(n * out_len * c);
        for b in 0..n {
            for o in 0..out_len {
                for ch in 0..c {
                    let mut best = (b * len + o * stride) * c + ch;
                    for i in 1..window {
                        let idx = (b * len + o * stride + i) * c + ch;
                        if t.data[idx] > t.data[best] {
                            best = idx;
                        }
                    }
                    out.push(t.data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![n, out_len, c],
                data: out,
            },
            Op::MaxPool { a, argmax },
            rg,
        ))
    }

    fn upsample(&mut self, a: Var, dims: [usize; 4], fh: usize, fw: usize, shape: Vec<usize>) -> Var {
        let [n, h, w, c] = dims;
        let t = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(t.numel() * fh * fw);
        for b in 0..n {
            for y in 0..h * fh {
                for x in 0..w * fw {
                    let src = ((b * h + y / fh) * w + x / fw) * c;
                    out.extend_from_slice(&t.data[src..src + c]);
                }
            }
        }
        let rg = self.rg(a);
        self.push(Tensor { shape, data: out }, Op::Upsample { a, dims, fh, fw }, rg)
    }

    /// Nearest-neighbour repetition along the length axis of `[N, L, C]`.
    pub fn upsample1d(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.nodes[a.0].value.shape.clone();
        if s.len() != 3 {
            return Err(invalid("upsample1d", format!("expected [N, L, C], got {s:?}")));
        }
        if factor < 1 {
            return Err(invalid("upsample1d", "factor must be at least 1"));
        }
        Ok(self.upsample(a, [s[0], 1, s[1], s[2]], 1, factor, vec![s[0], s[1] * factor, s[2]]))
    }

    /// Nearest-neighbour repetition along both spatial axes of `[N, H, W, C]`.
    pub fn upsample2d(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.nodes[a.0].value.shape.clone();
        if s.len() != 4 {
            return Err(invalid("upsample2d", format!("expected [N, H, W, C], got {s:?}")));
        }
        if factor < 1 {
            return Err(invalid("upsample2d", "factor must be at least 1"));
        }
        Ok(self.upsample(
            a,
            [s[0], s[1], s[2], s[3]],
            factor,
            factor,
            vec![s[0], s[1] * factor, s[2] * factor, s[3]],
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let n = g.len();
                let av = |j: usize| if ta.numel() == n { ta.data[j] } else { ta.data[0] };
                let bv = |j: usize| if tb.numel() == n { tb.data[j] } else { tb.data[0] };
                let dfa = |j: usize| match kind {
                    BinKind::Add | BinKind::Sub => 1.0,
                    BinKind::Mul => bv(j),
                    BinKind::Div => 1.0 / bv(j),
                };
                let dfb = |j: usize| match kind {
                    BinKind::Add => 1.0,
                    BinKind::Sub => -1.0,
                    BinKind::Mul => av(j),
                    BinKind::Div => -av(j) / (bv(j) * bv(j)),
                };
                let reduce = |t: &Tensor, df: &dyn Fn(usize) -> f64| -> Vec<f64> {
                    if t.numel() == n {
                        (0..n).map(|j| g[j] * df(j)).collect()
                    } else {
                        vec![(0..n).map(|j| g[j] * df(j)).sum()]
                    }
                };
                if rg(*a) {
                    accumulate(grads, *a, reduce(ta, &dfa));
                }
                if rg(*b) {
                    accumulate(grads, *b, reduce(tb, &dfb));
                }
            }
            Op::Scale { a, factor } => {
                accumulate(grads, *a, g.iter().map(|x| x * factor).collect());
            }
            Op::Offset { a } | Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::Sum(a) => accumulate(grads, *a, vec![g[0]; val(*a).numel()]),
            Op::Mean(a) => {
                let n = val(*a).numel();
                accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Variance(a) => {
                let d = &val(*a).data;
                let n = d.len() as f64;
                let mu = d.iter().sum::<f64>() / n;
                accumulate(grads, *a, d.iter().map(|x| g[0] * 2.0 * (x - mu) / n).collect());
            }
            Op::Covariance(a, b) => {
                let (da, db) = (&val(*a).data, &val(*b).data);
                let n = da.len() as f64;
                let ma = da.iter().sum::<f64>() / n;
                let mb = db.iter().sum::<f64>() / n;
                if rg(*a) {
                    accumulate(grads, *a, db.iter().map(|y| g[0] * (y - mb) / n).collect());
                }
                if rg(*b) {
                    accumulate(grads, *b, da.iter().map(|x| g[0] * (x - ma) / n).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &tb.data, true, &mut ga, 0.0);
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &ta.data, true, g, false, &mut gb, 0.0);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (rows, n_in, n_out) = (tx.shape[0], tx.shape[1], tw.shape[0]);
                if rg(*x) {
                    let mut gx = vec![0.0; rows * n_in];
                    gemm(rows, n_out, n_in, g, false, &tw.data, false, &mut gx, 0.0);
                    accumulate(grads, *x, gx);
                }
                if rg(*w) {
                    let mut gw = vec![0.0; n_out * n_in];
                    gemm(n_out, rows, n_in, g, true, &tx.data, false, &mut gw, 0.0);
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    let mut gb = vec![0.0; n_out];
                    add_col_sums(g, n_out, &mut gb);
                    accumulate(grads, b, gb);
                }
            }
            Op::LeakyRelu { a, slope } => {
                let d = &val(*a).data;
                let gx = d
                    .iter()
                    .zip(g)
                    .map(|(x, g)| if *x >= 0.0 { *g } else { slope * g })
                    .collect();
                accumulate(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = out.data.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, gx);
            }
            Op::Tanh(a) => {
                let gx = out.data.iter().zip(g).map(|(y, g)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, gx);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).shape[1], val(*b).shape[1]);
                let rows = val(*a).shape[0];
                let w = ca + cb;
                if rg(*a) {
                    let ga = (0..rows).flat_map(|r| g[r * w..r * w + ca].iter().copied()).collect();
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let gb = (0..rows)
                        .flat_map(|r| g[r * w + ca..(r + 1) * w].iter().copied())
                        .collect();
                    accumulate(grads, *b, gb);
                }
            }
            Op::SliceCols { a, start } => {
                let cols = val(*a).shape[1];
                let len = out.shape[1];
                let mut ga = vec![0.0; val(*a).numel()];
                for (r, gr) in g.chunks_exact(len.max(1)).enumerate() {
                    ga[r * cols + start..r * cols + start + len].copy_from_slice(gr);
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherRows { a, rows } => {
                let ta = val(*a);
                let width = ta.numel().checked_div(ta.shape[0]).unwrap_or(0);
                let mut ga = vec![0.0; ta.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, s) in ga[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&g[k * width..(k + 1) * width])
                    {
                        *d += s;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Conv { x, w, b, geom } => {
                let (tx, tw) = (val(*x), val(*w));
                if rg(*w) || rg(*x) {
                    if rg(*w) {
                        let cols = im2col(&tx.data, geom);
                        let mut gw = vec![0.0; geom.kernel_len()];
                        gemm(
                            geom.patch(),
                            geom.positions(),
                            geom.out_c,
                            &cols,
                            true,
                            g,
                            false,
                            &mut gw,
                            0.0,
                        );
                        accumulate(grads, *w, gw);
                    }
                    if rg(*x) {
                        let mut gcols = vec![0.0; geom.positions() * geom.patch()];
                        gemm(
                            geom.positions(),
                            geom.out_c,
                            geom.patch(),
                            g,
                            false,
                            &tw.data,
                            true,
                            &mut gcols,
                            0.0,
                        );
                        accumulate(grads, *x, col2im(&gcols, geom));
                    }
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    let mut gb = vec![0.0; geom.out_c];
                    add_col_sums(g, geom.out_c, &mut gb);
                    accumulate(grads, b, gb);
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let (tx, tw) = (val(*x), val(*w));
                if rg(*w) || rg(*x) {
                    let gcols = im2col(g, geom);
                    if rg(*x) {
                        let mut gx = vec![0.0; geom.positions() * geom.out_c];
                        gemm(
                            geom.positions(),
                            geom.patch(),
                            geom.out_c,
                            &gcols,
                            false,
                            &tw.data,
                            false,
                            &mut gx,
                            0.0,
                        );
                        accumulate(grads, *x, gx);
                    }
                    if rg(*w) {
                        let mut gw = vec![0.0; geom.kernel_len()];
                        gemm(
                            geom.patch(),
                            geom.positions(),
                            geom.out_c,
                            &gcols,
                            true,
                            &tx.data,
                            false,
                            &mut gw,
                            0.0,
                        );
                        accumulate(grads, *w, gw);
                    }
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    let mut gb = vec![0.0; geom.in_c];
                    add_col_sums(g, geom.in_c, &mut gb);
                    accumulate(grads, b, gb);
                }
            }
            Op::MaxPool { a, argmax } => {
                let mut ga = vec![0.0; val(*a).numel()];
                for (&idx, gv) in argmax.iter().zip(g) {
                    ga[idx] += gv;
                }
                accumulate(grads, *a, ga);
            }
            Op::Upsample { a, dims, fh, fw } => {
                let [n, h, w, c] = *dims;
                let mut ga = vec![0.0; n * h * w * c];
                let mut k = 0;
                for bi in 0..n {
                    for y in 0..h * fh {
                        for x in 0..w * fw {
                            let dst = ((bi * h + y / fh) * w + x / fw) * c;
                            for ch in 0..c {
                                ga[dst + ch] += g[k];
                                k += 1;
                            }
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}
