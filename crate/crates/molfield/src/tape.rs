//! Reverse-mode automatic differentiation over f64 matrices.
//!
//! A [`Tape`] records matrix operations during the forward pass; a single
//! [`Tape::backward`] call then propagates gradients from a scalar root to
//! every recorded node. Vectors are 1×n matrices, scalars 1×1. The op set
//! is exactly what the networks in this crate need: affine maps,
//! sinusoidal/tanh/GELU activations, row softmax, layer norm, pooling,
//! slicing/concatenation for parameter heads, and L1/L2-style losses.
//!
//! The forward value of every node is stored on the tape, so backward
//! rules can reuse cached results. Gradients for leaves that do not affect
//! the root are `None` (exactly zero).

use ndarray::{Array1, Array2, Axis};

use crate::numeric::stable_mean_rows;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    /// (N×d) + broadcast (1×d) row.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sin(Var),
    Gelu(Var),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Array2<f64>,
        inv_std: Array1<f64>,
    },
    MeanRows(Var),
    SumAll(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    /// Elementwise product with a constant mask (dropout, label weights).
    MulConst(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by tape node; `None` means the node does not influence
/// the root, i.e. its gradient is exactly zero.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, materializing zeros for untouched nodes.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "expected scalar node");
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, d) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, d), "add_row shape mismatch");
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, br, "matmul inner dims {ar}x{ac} · {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sin);
        self.push(value, Op::Sin(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise layer norm with learned 1×d scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        assert_eq!(self.value(gamma).dim(), (1, d), "layer_norm gamma shape");
        assert_eq!(self.value(beta).dim(), (1, d), "layer_norm beta shape");
        let mut normed = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                normed[[i, j]] = (xv[[i, j]] - mean) * is;
            }
        }
        let value = &normed * &self.value(gamma).row(0) + &self.value(beta).row(0);
        self.push(value, Op::LayerNorm { x, gamma, beta, normed, inv_std })
    }

    /// Mean over rows, N×d → 1×d. Summation runs in value-sorted order so
    /// the result is bit-identical under row permutations.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let mean = stable_mean_rows(self.value(a));
        let d = mean.len();
        let value = mean.into_shape_with_order((1, d)).expect("row vector");
        self.push(value, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        assert!(start + len <= d, "slice {start}+{len} beyond {d} columns");
        let value = xv.slice(ndarray::s![.., start..start + len]).to_owned();
        let _ = n;
        self.push(value, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Array2::zeros((n, total));
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), n, "concat_cols row mismatch");
            value.slice_mut(ndarray::s![.., offset..offset + pv.ncols()]).assign(pv);
            offset += pv.ncols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape size mismatch");
        // Row-major logical order regardless of the source memory layout.
        let value = Array2::from_shape_vec((rows, cols), av.iter().copied().collect())
            .expect("reshape");
        self.push(value, Op::Reshape(a))
    }

    pub fn mul_const(&mut self, a: Var, mask: Array2<f64>) -> Var {
        assert_eq!(self.value(a).dim(), mask.dim(), "mul_const shape mismatch");
        let value = self.value(a) * &mask;
        self.push(value, Op::MulConst(a, mask))
    }

    /// Backpropagate from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            // Leaves keep their accumulated gradient; interior nodes hand
            // theirs off to their parents and release the buffer.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let row_grad = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, row_grad);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * self.value(*b));
                    accumulate(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Sin(a) => accumulate(&mut grads, *a, &g * &self.value(*a).mapv(f64::cos)),
                Op::Gelu(a) => {
                    accumulate(&mut grads, *a, &g * &self.value(*a).mapv(gelu_prime));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    accumulate(&mut grads, *a, &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Softplus(a) => {
                    accumulate(&mut grads, *a, &g * &self.value(*a).mapv(sigmoid));
                }
                Op::Abs(a) => {
                    let sign = self.value(*a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, &g * &sign);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut gx = &g * y;
                    for i in 0..gx.nrows() {
                        let dot: f64 = gx.row(i).sum();
                        for j in 0..gx.ncols() {
                            gx[[i, j]] -= y[[i, j]] * dot;
                        }
                    }
                    // gx = y ∘ (g − ⟨g, y⟩ per row)
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                    let (n, d) = g.dim();
                    let gamma_row = self.value(*gamma).row(0).to_owned();
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dgamma = (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut dx = Array2::zeros((n, d));
                    for i in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gy = g[[i, j]] * gamma_row[j];
                            m1 += gy;
                            m2 += gy * normed[[i, j]];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gy = g[[i, j]] * gamma_row[j];
                            dx[[i, j]] = inv_std[i] * (gy - m1 - normed[[i, j]] * m2);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::MeanRows(a) => {
                    let (n, d) = self.value(*a).dim();
                    let mut da = Array2::zeros((n, d));
                    for i in 0..n {
                        for j in 0..d {
                            da[[i, j]] = g[[0, j]] / n as f64;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let shape = self.value(*a).dim();
                    accumulate(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::SliceCols { x, start } => {
                    let shape = self.value(*x).dim();
                    let mut dx = Array2::zeros(shape);
                    dx.slice_mut(ndarray::s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let dp = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, p, dp);
                        offset += w;
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).dim();
                    let da = Array2::from_shape_vec(shape, g.iter().copied().collect())
                        .expect("reshape gradient");
                    accumulate(&mut grads, *a, da);
                }
                Op::MulConst(a, mask) => accumulate(&mut grads, *a, &g * mask),
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}
