//! Dense row-major `f64` tensors and the few differentiable operations the
//! VAE and the injection modules need.
//!
//! There is no autograd tape. Every operation `op` comes with an
//! `op_backward` that takes the forward inputs and the upstream gradient and
//! returns input gradients. Forward values are recomputed where a backward
//! pass needs them. Operations over "`[..., d]`" tensors treat all leading
//! axes as rows.

use std::fmt;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::rng::SeededRng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value")]
    NonFiniteValue { op: &'static str },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tensor dump parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFiniteValue { op: "new" });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "dimensions must be positive"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = std * rng.normal());
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    /// Population variance of all entries.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `Σ self ⊙ other`.
    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        same_shape(op, self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape("add_assign", self, other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = dims2("transpose", self)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Permutes the axes of a rank-3 tensor; `perm[i]` is the source axis of
    /// output axis `i`.
    pub fn permute3(&self, perm: [usize; 3]) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(TensorError::InvalidArgument(
                "permute3 needs a rank-3 tensor".into(),
            ));
        }
        let src = [self.shape[0], self.shape[1], self.shape[2]];
        let out_shape = [src[perm[0]], src[perm[1]], src[perm[2]]];
        let src_strides = [src[1] * src[2], src[2], 1];
        let mut data = Vec::with_capacity(self.len());
        for a in 0..out_shape[0] {
            for b in 0..out_shape[1] {
                for c in 0..out_shape[2] {
                    let mut idx = [0usize; 3];
                    idx[perm[0]] = a;
                    idx[perm[1]] = b;
                    idx[perm[2]] = c;
                    data.push(
                        self.data[idx[0] * src_strides[0] + idx[1] * src_strides[1] + idx[2]],
                    );
                }
            }
        }
        Ok(Tensor {
            shape: out_shape.to_vec(),
            data,
        })
    }

    /// Errors if any entry is NaN or infinite.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFiniteValue { op })
        }
    }

    /// Row `i` of a `[rows, d]` view.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[m, n] => Ok((m, n)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        }),
    }
}

fn finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    t.check_finite(op)?;
    Ok(t)
}

/// Trainable value with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate(&mut self, grad: &Tensor) -> Result<()> {
        self.grad.add_assign(grad)
    }
}

// ---------------------------------------------------------------------------
// matmul

/// `[m, k] · [k, n] → [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    finite(
        Tensor {
            shape: vec![m, n],
            data: out,
        },
        "matmul",
    )
}

/// `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(grad_out, b)?, matmul_tn(a, grad_out)?))
}

/// `Aᵀ·B` for `a: [k, m]`, `b: [k, n]` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = dims2("matmul_tn", a)?;
    let (k2, n) = dims2("matmul_tn", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for r in 0..k {
        let b_row = &b.data[r * n..(r + 1) * n];
        for (i, &a_ri) in a.data[r * m..(r + 1) * m].iter().enumerate() {
            if a_ri == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o += a_ri * bv;
            }
        }
    }
    finite(
        Tensor {
            shape: vec![m, n],
            data: out,
        },
        "matmul_tn",
    )
}

/// `A·Bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul_nt", a)?;
    let (n, k2) = dims2("matmul_nt", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            out.push(a_row.iter().zip(b_row).map(|(x, y)| x * y).sum());
        }
    }
    finite(
        Tensor {
            shape: vec![m, n],
            data: out,
        },
        "matmul_nt",
    )
}

/// Adds a `[n]` bias to every row of a `[..., n]` tensor.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.shape != [x.last_dim()] {
        return Err(TensorError::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(bias.len()) {
        row.iter_mut().zip(&bias.data).for_each(|(o, b)| *o += b);
    }
    Ok(out)
}

/// Column sums of a `[..., n]` tensor (the bias gradient).
pub fn sum_rows(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = vec![0.0; n];
    for row in x.data.chunks(n) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    Tensor {
        shape: vec![n],
        data: out,
    }
}

/// `[..., a] · [a, b] → [..., b]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let a = x.last_dim();
    let flat = Tensor {
        shape: vec![x.rows(), a],
        data: x.data.clone(),
    };
    let y = matmul(&flat, w)?;
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = w.shape[1];
    Ok(Tensor {
        shape,
        data: y.data,
    })
}

fn as_matrix(x: &Tensor) -> Tensor {
    Tensor {
        shape: vec![x.rows(), x.last_dim()],
        data: x.data.clone(),
    }
}

// ---------------------------------------------------------------------------
// layer norm

/// Per last-axis slice: `(x − μ) / sqrt(σ² + eps)` with population variance.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument(
            "layer_norm eps must be positive".into(),
        ));
    }
    let d = x.last_dim();
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let (mean, rstd) = row_stats(row, eps);
        row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        #[cfg(feature = "fault-injection")]
        row.iter_mut().for_each(|v| *v += 1e-3);
    }
    finite(out, "layer_norm")
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `dx = rstd·(dy − mean(dy) − x̂·mean(dy ⊙ x̂))` per row.
pub fn layer_norm_backward(x: &Tensor, eps: f64, grad_out: &Tensor) -> Result<Tensor> {
    same_shape("layer_norm_backward", x, grad_out)?;
    let d = x.last_dim();
    let mut dx = vec![0.0; x.len()];
    for ((row, g), out) in x
        .data
        .chunks(d)
        .zip(grad_out.data.chunks(d))
        .zip(dx.chunks_mut(d))
    {
        let (mean, rstd) = row_stats(row, eps);
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
        let g_mean = g.iter().sum::<f64>() / d as f64;
        let gx_mean = g.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            out[i] = rstd * (g[i] - g_mean - xhat[i] * gx_mean);
        }
    }
    finite(
        Tensor {
            shape: x.shape.clone(),
            data: dx,
        },
        "layer_norm_backward",
    )
}

// ---------------------------------------------------------------------------
// GELU and MLP

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// `x·Φ(x)` with `Φ(x) = ½(1 + erf(x/√2))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

/// `Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Weights of a two-layer perceptron `x·W1 + b1 → GELU → ·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub x: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    /// LeCun-normal hidden layer; the output layer starts at zero when
    /// `zero_output` is set.
    pub fn init(
        input: usize,
        hidden: usize,
        output: usize,
        zero_output: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let w2 = if zero_output {
            Tensor::zeros(&[hidden, output])
        } else {
            Tensor::randn(&[hidden, output], 1.0 / (hidden as f64).sqrt(), rng)
        };
        Self {
            w1: Parameter::new(Tensor::randn(
                &[input, hidden],
                1.0 / (input as f64).sqrt(),
                rng,
            )),
            b1: Parameter::new(Tensor::zeros(&[hidden])),
            w2: Parameter::new(w2),
            b2: Parameter::new(Tensor::zeros(&[output])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        mlp_forward(
            x,
            &self.w1.value,
            &self.b1.value,
            &self.w2.value,
            &self.b2.value,
        )
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<MlpGrads> {
        mlp_backward(
            x,
            &self.w1.value,
            &self.b1.value,
            &self.w2.value,
            &self.b2.value,
            grad_out,
        )
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn accumulate(&mut self, g: &MlpGrads) -> Result<()> {
        self.w1.accumulate(&g.w1)?;
        self.b1.accumulate(&g.b1)?;
        self.w2.accumulate(&g.w2)?;
        self.b2.accumulate(&g.b2)
    }
}

pub fn mlp_forward(
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) -> Result<Tensor> {
    check_mlp_shapes(x, w1, b1, w2, b2)?;
    let hidden = add_bias(&linear(x, w1)?, b1)?.map(gelu);
    finite(add_bias(&linear(&hidden, w2)?, b2)?, "mlp_forward")
}

fn check_mlp_shapes(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<()> {
    let ok = w1.shape.len() == 2
        && w2.shape.len() == 2
        && w1.shape[0] == x.last_dim()
        && b1.shape == [w1.shape[1]]
        && w2.shape[0] == w1.shape[1]
        && b2.shape == [w2.shape[1]];
    if !ok {
        return Err(TensorError::ShapeMismatch {
            op: "mlp_forward",
            lhs: x.shape.clone(),
            rhs: [w1.shape.as_slice(), w2.shape.as_slice()].concat(),
        });
    }
    Ok(())
}

pub fn mlp_backward(
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
    grad_out: &Tensor,
) -> Result<MlpGrads> {
    check_mlp_shapes(x, w1, b1, w2, b2)?;
    let pre = as_matrix(&add_bias(&linear(x, w1)?, b1)?);
    let hidden = pre.map(gelu);
    let g_out = as_matrix(grad_out);
    let (d_hidden, dw2) = matmul_backward(&hidden, w2, &g_out)?;
    let db2 = sum_rows(&g_out);
    let d_pre = d_hidden.zip_map(&pre, "mlp_backward", |g, p| g * gelu_grad(p))?;
    let x_mat = as_matrix(x);
    let (dx, dw1) = matmul_backward(&x_mat, w1, &d_pre)?;
    let db1 = sum_rows(&d_pre);
    Ok(MlpGrads {
        x: Tensor {
            shape: x.shape.clone(),
            data: dx.data,
        },
        w1: dw1,
        b1: db1,
        w2: dw2,
        b2: db2,
    })
}

// ---------------------------------------------------------------------------
// attention

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn attention_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, d) = dims2("attention", q)?;
    let (_, dk) = dims2("attention", k)?;
    if d != dk {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: q.shape.clone(),
            rhs: k.shape.clone(),
        });
    }
    Ok(matmul(q, &k.transpose()?)?.scale(1.0 / (d as f64).sqrt()))
}

/// `softmax(q·kᵀ/√d)·v` for `q: [n, d]`, `k: [m, d]`, `v: [m, e]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (m, _) = dims2("attention", v)?;
    if m != k.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: k.shape.clone(),
            rhs: v.shape.clone(),
        });
    }
    let weights = softmax_rows(&attention_scores(q, k)?);
    finite(matmul(&weights, v)?, "attention")
}

pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = q.shape[1];
    let weights = softmax_rows(&attention_scores(q, k)?);
    let (d_weights, dv) = matmul_backward(&weights, v, grad_out)?;
    // Softmax Jacobian per row: dS = P ⊙ (dP − Σ dP⊙P).
    let n = weights.last_dim();
    let mut d_scores = d_weights.clone();
    for (ds, p) in d_scores.data.chunks_mut(n).zip(weights.data.chunks(n)) {
        let dot: f64 = ds.iter().zip(p).map(|(a, b)| a * b).sum();
        ds.iter_mut()
            .zip(p)
            .for_each(|(g, &pv)| *g = pv * (*g - dot));
    }
    let d_scores = d_scores.scale(1.0 / (d as f64).sqrt());
    let (dq, dk_t) = matmul_backward(q, &k.transpose()?, &d_scores)?;
    Ok((dq, dk_t.transpose()?, dv))
}

// ---------------------------------------------------------------------------
// optimizer and gradient checking

/// `value ← value − lr·grad`, then zero the gradients.
pub fn sgd_step(params: &mut [&mut Parameter], lr: f64) {
    for p in params.iter_mut() {
        p.value
            .data
            .iter_mut()
            .zip(&p.grad.data)
            .for_each(|(v, g)| *v -= lr * g);
        p.zero_grad();
    }
}

/// Max relative error between `analytic_grad` and central differences of
/// `f` at `x`. Each coordinate uses `|fd − an| / max(|fd|, |an|, 1e−8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, analytic_grad: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    same_shape("finite_diff_check", x, analytic_grad)?;
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(TensorError::NonFiniteValue {
                op: "finite_diff_check",
            });
        }
        let fd = (plus - minus) / (2.0 * eps);
        let an = analytic_grad.data[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// [`finite_diff_check`] over every tensor of a multi-input function; returns
/// the worst error across all of them.
pub fn finite_diff_check_all<F>(inputs: &[Tensor], grads: &[Tensor], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if inputs.len() != grads.len() {
        return Err(TensorError::InvalidArgument(format!(
            "{} inputs but {} gradients",
            inputs.len(),
            grads.len()
        )));
    }
    let mut worst = 0.0f64;
    for (i, grad) in grads.iter().enumerate() {
        let err = finite_diff_check(
            |x| {
                let mut probe = inputs.to_vec();
                probe[i] = x.clone();
                f(&probe)
            },
            &inputs[i],
            grad,
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// text dump

/// Writes `shape d0 d1 ...` then all values on one line. Values use Rust's
/// shortest round-trip formatting, so reading back is bit-exact.
pub fn write_tensor<W: Write>(t: &Tensor, out: &mut W) -> io::Result<()> {
    write!(out, "shape")?;
    for d in &t.shape {
        write!(out, " {d}")?;
    }
    writeln!(out)?;
    let mut first = true;
    for v in &t.data {
        if !first {
            out.write_all(b" ")?;
        }
        first = false;
        write!(out, "{v:e}")?;
    }
    writeln!(out)
}

pub fn read_tensor<R: BufRead>(input: &mut R) -> Result<Tensor> {
    let mut header = String::new();
    input
        .read_line(&mut header)
        .map_err(|e| TensorError::Parse(e.to_string()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("shape") {
        return Err(TensorError::Parse(format!(
            "expected shape header, got {header:?}"
        )));
    }
    let shape = parts
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| TensorError::Parse(format!("bad dimension {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut body = String::new();
    input
        .read_line(&mut body)
        .map_err(|e| TensorError::Parse(e.to_string()))?;
    let data = body
        .split_whitespace()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| TensorError::Parse(format!("bad value {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data)
}
