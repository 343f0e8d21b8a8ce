//! Temporal attention injection of the pose latent, the two ablation
//! strategies it is compared against, and the diffusion forward math.
//!
//! Temporal features `z_k` have shape `[p, f, d]`: `p` spatial patches, `f`
//! latent frames, `d` features. The pose latent `[l, m, n, 4]` is first
//! aligned to that layout:
//!
//! ```text
//! [l, m, n, 4] → [l, m·n, 4] → MLP 4→d → patch map m·n→p → [p, l, d]
//! ```
//!
//! TAI then computes `γ ⊙ (LN(z_k) + z_p) + β`, with layer norm over `d`,
//! elementwise addition, and `γ`, `β` broadcast over `[p, f]`. With `γ = 1`,
//! `β = 0` and a zero MLP output layer (the defaults) the injection reduces to
//! plain layer norm.
//!
//! Every forward has a hand-written backward returning gradients for all
//! inputs and parameters.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::pose_vae::{load_checkpoint, save_checkpoint, VaeError};
use crate::rng::SeededRng;
use crate::tensor::{
    self, attention, attention_backward, finite_diff_check_all, layer_norm, layer_norm_backward,
    matmul, matmul_backward, sum_rows, Mlp, MlpGrads, Parameter, Tensor, TensorError,
    LAYER_NORM_EPS,
};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const GRAD_CHECK_EPS: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TaiError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("pose latent has {latent} frames but features have {features}")]
    FrameCountMismatch { latent: usize, features: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("step {step} outside schedule of {len} steps")]
    StepOutOfRange { step: usize, len: usize },
    #[error("unknown injection strategy {0:?} (expected tai, concat or cross-attn)")]
    UnknownStrategy(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Checkpoint(#[from] VaeError),
}

pub type Result<T> = std::result::Result<T, TaiError>;

fn dims3(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    t.shape().try_into().map_err(|_| {
        TaiError::ShapeMismatch(format!("{what} must be [p, f, d], got {:?}", t.shape()))
    })
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TaiError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn vector_param(t: &Parameter, d: usize, what: &str) -> Result<()> {
    if t.value.shape() != [d] {
        return Err(TaiError::ShapeMismatch(format!(
            "{what} must be [{d}], got {:?}",
            t.value.shape()
        )));
    }
    Ok(())
}

/// Rows `[i·f, (i+1)·f)` of a `[p, f, d]` tensor as an `[f, d]` matrix.
fn patch(t: &Tensor, i: usize) -> Tensor {
    let [_, f, d] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    Tensor::new(vec![f, d], t.data()[i * f * d..(i + 1) * f * d].to_vec()).expect("patch slice")
}

fn stack_patches(patches: Vec<Tensor>) -> Tensor {
    let (f, d) = (patches[0].shape()[0], patches[0].shape()[1]);
    let p = patches.len();
    let data = patches.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![p, f, d], data).expect("stacked patches")
}

// ---------------------------------------------------------------------------
// parameters

/// Alignment MLP, patch map and the `γ`, `β` of the injection.
#[derive(Debug, Clone, PartialEq)]
pub struct TaiParams {
    /// Channel MLP `4 → hidden → d`.
    pub align: Mlp,
    /// `[p, p_c]`; row `i` mixes the `p_c` latent patches into feature patch `i`.
    pub patch_map: Parameter,
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl TaiParams {
    /// No-op initialization: zero MLP output layer, `γ = 1`, `β = 0`. The patch
    /// map is the identity when `p == p_c` and LeCun-normal otherwise.
    pub fn init(p_c: usize, p: usize, d: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let align = Mlp::init(LATENT_IN, hidden, d, true, &mut rng);
        let patch_map = if p == p_c {
            Tensor::eye(p)
        } else {
            Tensor::randn(&[p, p_c], 1.0 / (p_c as f64).sqrt(), &mut rng)
        };
        Self {
            align,
            patch_map: Parameter::new(patch_map),
            gamma: Parameter::new(Tensor::full(&[d], 1.0)),
            beta: Parameter::new(Tensor::zeros(&[d])),
        }
    }

    /// Every parameter random and non-zero, for gradient checks.
    pub fn random(p_c: usize, p: usize, d: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let mut align = Mlp::init(LATENT_IN, hidden, d, false, rng);
        align.b1.value = Tensor::randn(&[hidden], 0.1, rng);
        align.b2.value = Tensor::randn(&[d], 0.1, rng);
        Self {
            align,
            patch_map: Parameter::new(Tensor::randn(&[p, p_c], 1.0 / (p_c as f64).sqrt(), rng)),
            gamma: Parameter::new(Tensor::randn(&[d], 0.1, rng).map(|g| 1.0 + g)),
            beta: Parameter::new(Tensor::randn(&[d], 0.1, rng)),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn patches(&self) -> usize {
        self.patch_map.value.shape()[0]
    }

    pub fn latent_patches(&self) -> usize {
        self.patch_map.value.shape()[1]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.align.params_mut().into_iter().collect();
        out.extend([&mut self.patch_map, &mut self.gamma, &mut self.beta]);
        out
    }

    fn named(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("align_w1", &self.align.w1.value),
            ("align_b1", &self.align.b1.value),
            ("align_w2", &self.align.w2.value),
            ("align_b2", &self.align.b2.value),
            ("patch_map", &self.patch_map.value),
            ("gamma", &self.gamma.value),
            ("beta", &self.beta.value),
        ]
    }

    pub fn save<W: Write>(&self, out: &mut W) -> io::Result<()> {
        save_checkpoint(out, "tai", &self.named())
    }

    pub fn load<R: BufRead>(input: &mut R) -> Result<Self> {
        let entries = load_checkpoint(input, "tai")?;
        let take = |name: &str| -> Result<Parameter> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| Parameter::new(t.clone()))
                .ok_or_else(|| TaiError::ShapeMismatch(format!("checkpoint lacks {name}")))
        };
        let params = Self {
            align: Mlp {
                w1: take("align_w1")?,
                b1: take("align_b1")?,
                w2: take("align_w2")?,
                b2: take("align_b2")?,
            },
            patch_map: take("patch_map")?,
            gamma: take("gamma")?,
            beta: take("beta")?,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        let a = &self.align;
        let hidden = a.b1.value.len();
        let ok = a.w1.value.shape() == [LATENT_IN, hidden]
            && a.w2.value.shape() == [hidden, d]
            && a.b2.value.shape() == [d]
            && self.patch_map.value.shape().len() == 2;
        if !ok {
            return Err(TaiError::ShapeMismatch(
                "inconsistent TAI parameter shapes".into(),
            ));
        }
        vector_param(&self.beta, d, "beta")
    }
}

const LATENT_IN: usize = crate::pose_vae::LATENT_CHANNELS;

#[derive(Debug, Clone, PartialEq)]
pub struct TaiGrads {
    pub z_k: Tensor,
    pub z_p_aligned: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignGrads {
    pub z_p: Tensor,
    pub mlp: MlpGrads,
    pub patch_map: Tensor,
}

// ---------------------------------------------------------------------------
// alignment

fn latent_dims(z_p: &Tensor) -> Result<[usize; 4]> {
    let dims: [usize; 4] = z_p.shape().try_into().map_err(|_| {
        TaiError::ShapeMismatch(format!(
            "pose latent must be [l, m, n, 4], got {:?}",
            z_p.shape()
        ))
    })?;
    if dims[3] != LATENT_IN {
        return Err(TaiError::ShapeMismatch(format!(
            "pose latent has {} channels, expected 4",
            dims[3]
        )));
    }
    Ok(dims)
}

fn align_inputs(
    z_p: &Tensor,
    params: &TaiParams,
    target_frames: usize,
) -> Result<(usize, usize, Tensor)> {
    let [l, m, n, _] = latent_dims(z_p)?;
    if l != target_frames {
        return Err(TaiError::FrameCountMismatch {
            latent: l,
            features: target_frames,
        });
    }
    let p_c = m * n;
    if params.latent_patches() != p_c {
        return Err(TaiError::ShapeMismatch(format!(
            "patch map expects {} latent patches, latent has {p_c}",
            params.latent_patches()
        )));
    }
    Ok((l, p_c, z_p.clone().reshape(&[l * p_c, LATENT_IN])?))
}

/// `[l, m, n, 4]` → `[p, l, d]`; `target_frames` is the feature frame count
/// `f`, which must equal `l`.
pub fn align_pose_latent(z_p: &Tensor, params: &TaiParams, target_frames: usize) -> Result<Tensor> {
    let (l, p_c, x) = align_inputs(z_p, params, target_frames)?;
    let h = params.align.forward(&x)?;
    let d = h.last_dim();
    let mut frames = Vec::with_capacity(l * params.patches() * d);
    for t in 0..l {
        let h_t = Tensor::new(
            vec![p_c, d],
            h.data()[t * p_c * d..(t + 1) * p_c * d].to_vec(),
        )?;
        frames.extend(matmul(&params.patch_map.value, &h_t)?.into_data());
    }
    Ok(Tensor::new(vec![l, params.patches(), d], frames)?.permute3([1, 0, 2])?)
}

pub fn align_pose_latent_backward(
    z_p: &Tensor,
    params: &TaiParams,
    grad_out: &Tensor,
) -> Result<AlignGrads> {
    let (l, p_c, x) = align_inputs(z_p, params, grad_out.shape().get(1).copied().unwrap_or(0))?;
    let h = params.align.forward(&x)?;
    let d = h.last_dim();
    let p = params.patches();
    if grad_out.shape() != [p, l, d] {
        return Err(TaiError::ShapeMismatch(format!(
            "gradient {:?} vs [{p}, {l}, {d}]",
            grad_out.shape()
        )));
    }
    let g = grad_out.permute3([1, 0, 2])?;
    let mut d_patch = Tensor::zeros(&[p, p_c]);
    let mut d_h = Vec::with_capacity(h.len());
    for t in 0..l {
        let h_t = Tensor::new(
            vec![p_c, d],
            h.data()[t * p_c * d..(t + 1) * p_c * d].to_vec(),
        )?;
        let g_t = Tensor::new(vec![p, d], g.data()[t * p * d..(t + 1) * p * d].to_vec())?;
        let (dp, dh) = matmul_backward(&params.patch_map.value, &h_t, &g_t)?;
        d_patch.add_assign(&dp)?;
        d_h.extend(dh.into_data());
    }
    let d_h = Tensor::new(vec![l * p_c, d], d_h)?;
    let mut mlp = params.align.backward(&x, &d_h)?;
    let z_p_grad = std::mem::replace(&mut mlp.x, Tensor::zeros(&[1])).reshape(z_p.shape())?;
    mlp.x = z_p_grad.clone();
    Ok(AlignGrads {
        z_p: z_p_grad,
        mlp,
        patch_map: d_patch,
    })
}

// ---------------------------------------------------------------------------
// TAI

fn check_inject_inputs(z_k: &Tensor, z_p: &Tensor) -> Result<[usize; 3]> {
    let dims = dims3(z_k, "temporal features")?;
    same_shape(z_k, z_p, "aligned pose latent")?;
    Ok(dims)
}

/// `γ ⊙ (LN(z_k) + z_p) + β`.
pub fn tai_inject(z_k: &Tensor, z_p_aligned: &Tensor, params: &TaiParams) -> Result<Tensor> {
    let [_, _, d] = check_inject_inputs(z_k, z_p_aligned)?;
    vector_param(&params.gamma, d, "gamma")?;
    vector_param(&params.beta, d, "beta")?;
    let all = layer_norm(z_k, LAYER_NORM_EPS)?.add(z_p_aligned)?;
    let mut out = all;
    let (g, b) = (params.gamma.value.data(), params.beta.value.data());
    for row in out.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] = g[j] * row[j] + b[j];
        }
    }
    Ok(out)
}

pub fn tai_inject_backward(
    z_k: &Tensor,
    z_p_aligned: &Tensor,
    params: &TaiParams,
    grad_out: &Tensor,
) -> Result<TaiGrads> {
    let [_, _, d] = check_inject_inputs(z_k, z_p_aligned)?;
    same_shape(z_k, grad_out, "gradient")?;
    let all = layer_norm(z_k, LAYER_NORM_EPS)?.add(z_p_aligned)?;
    let gamma = &params.gamma.value;
    let d_gamma = sum_rows(&grad_out.mul(&all)?);
    let d_beta = sum_rows(grad_out);
    let mut d_all = grad_out.clone();
    for row in d_all.data_mut().chunks_mut(d) {
        row.iter_mut().zip(gamma.data()).for_each(|(v, g)| *v *= g);
    }
    Ok(TaiGrads {
        z_k: layer_norm_backward(z_k, LAYER_NORM_EPS, &d_all)?,
        z_p_aligned: d_all,
        gamma: d_gamma,
        beta: d_beta,
    })
}

// ---------------------------------------------------------------------------
// concat ablation

/// Projection `[2d, d]` + bias `[d]` applied to `z_k ‖ z_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatParams {
    pub w: Parameter,
    pub b: Parameter,
}

impl ConcatParams {
    /// `[I; 0]`: passes `z_k` through and ignores the pose.
    pub fn identity(d: usize) -> Self {
        let mut w = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        Self {
            w: Parameter::new(w),
            b: Parameter::new(Tensor::zeros(&[d])),
        }
    }

    pub fn random(d: usize, rng: &mut SeededRng) -> Self {
        Self {
            w: Parameter::new(Tensor::randn(
                &[2 * d, d],
                1.0 / (2.0 * d as f64).sqrt(),
                rng,
            )),
            b: Parameter::new(Tensor::randn(&[d], 0.1, rng)),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcatGrads {
    pub z_k: Tensor,
    pub z_p_aligned: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

fn concat_last(a: &Tensor, b: &Tensor, d: usize) -> Result<Tensor> {
    let rows = a.rows();
    let mut data = Vec::with_capacity(2 * a.len());
    for r in 0..rows {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Ok(Tensor::new(vec![rows, 2 * d], data)?)
}

fn check_concat(z_k: &Tensor, z_p: &Tensor, params: &ConcatParams) -> Result<[usize; 3]> {
    let dims = check_inject_inputs(z_k, z_p)?;
    let d = dims[2];
    if params.w.value.shape() != [2 * d, d] {
        return Err(TaiError::ShapeMismatch(format!(
            "projection must be [{}, {d}], got {:?}",
            2 * d,
            params.w.value.shape()
        )));
    }
    vector_param(&params.b, d, "projection bias")?;
    Ok(dims)
}

/// `(z_k ‖ z_p)·W + b`, concatenating along `d`.
pub fn concat_inject(z_k: &Tensor, z_p_aligned: &Tensor, params: &ConcatParams) -> Result<Tensor> {
    let dims = check_concat(z_k, z_p_aligned, params)?;
    let cat = concat_last(z_k, z_p_aligned, dims[2])?;
    Ok(tensor::add_bias(&matmul(&cat, &params.w.value)?, &params.b.value)?.reshape(&dims)?)
}

pub fn concat_inject_backward(
    z_k: &Tensor,
    z_p_aligned: &Tensor,
    params: &ConcatParams,
    grad_out: &Tensor,
) -> Result<ConcatGrads> {
    let dims = check_concat(z_k, z_p_aligned, params)?;
    same_shape(z_k, grad_out, "gradient")?;
    let d = dims[2];
    let cat = concat_last(z_k, z_p_aligned, d)?;
    let g = grad_out.clone().reshape(&[cat.rows(), d])?;
    let (d_cat, d_w) = matmul_backward(&cat, &params.w.value, &g)?;
    let mut d_zk = Vec::with_capacity(z_k.len());
    let mut d_zp = Vec::with_capacity(z_k.len());
    for row in d_cat.data().chunks(2 * d) {
        d_zk.extend_from_slice(&row[..d]);
        d_zp.extend_from_slice(&row[d..]);
    }
    Ok(ConcatGrads {
        z_k: Tensor::new(dims.to_vec(), d_zk)?,
        z_p_aligned: Tensor::new(dims.to_vec(), d_zp)?,
        w: d_w,
        b: sum_rows(&g),
    })
}

// ---------------------------------------------------------------------------
// attention projections shared by cross-attention and the host block

/// `wq`, `wk`, `wv`, each `[d, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
}

impl AttnParams {
    pub fn identity(d: usize) -> Self {
        Self {
            wq: Parameter::new(Tensor::eye(d)),
            wk: Parameter::new(Tensor::eye(d)),
            wv: Parameter::new(Tensor::eye(d)),
        }
    }

    pub fn random(d: usize, rng: &mut SeededRng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            wq: Parameter::new(Tensor::randn(&[d, d], std, rng)),
            wk: Parameter::new(Tensor::randn(&[d, d], std, rng)),
            wv: Parameter::new(Tensor::randn(&[d, d], std, rng)),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 3] {
        [&mut self.wq, &mut self.wk, &mut self.wv]
    }

    fn check(&self, d: usize) -> Result<()> {
        for w in [&self.wq, &self.wk, &self.wv] {
            if w.value.shape() != [d, d] {
                return Err(TaiError::ShapeMismatch(format!(
                    "attention projection must be [{d}, {d}], got {:?}",
                    w.value.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnGrads {
    pub z_k: Tensor,
    pub z_p_aligned: Tensor,
    pub attn: AttnGrads,
}

/// Per patch: `z_k + attention(z_k·Wq, z_p·Wk, z_p·Wv)` over the frame axis.
pub fn cross_attn_inject(
    z_k: &Tensor,
    z_p_aligned: &Tensor,
    params: &AttnParams,
) -> Result<Tensor> {
    let [p, _, d] = check_inject_inputs(z_k, z_p_aligned)?;
    params.check(d)?;
    let mut out = Vec::with_capacity(p);
    for i in 0..p {
        let (x, c) = (patch(z_k, i), patch(z_p_aligned, i));
        let q = matmul(&x, &params.wq.value)?;
        let k = matmul(&c, &params.wk.value)?;
        let v = matmul(&c, &params.wv.value)?;
        out.push(x.add(&attention(&q, &k, &v)?)?);
    }
    Ok(stack_patches(out))
}

pub fn cross_attn_inject_backward(
    z_k: &Tensor,
    z_p_aligned: &Tensor,
    params: &AttnParams,
    grad_out: &Tensor,
) -> Result<CrossAttnGrads> {
    let [p, _, d] = check_inject_inputs(z_k, z_p_aligned)?;
    params.check(d)?;
    same_shape(z_k, grad_out, "gradient")?;
    let (wq, wk, wv) = (&params.wq.value, &params.wk.value, &params.wv.value);
    let mut grads = AttnGrads {
        wq: Tensor::zeros(&[d, d]),
        wk: Tensor::zeros(&[d, d]),
        wv: Tensor::zeros(&[d, d]),
    };
    let (mut d_zk, mut d_zp) = (Vec::with_capacity(p), Vec::with_capacity(p));
    for i in 0..p {
        let (x, c, g) = (patch(z_k, i), patch(z_p_aligned, i), patch(grad_out, i));
        let q = matmul(&x, wq)?;
        let k = matmul(&c, wk)?;
        let v = matmul(&c, wv)?;
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &g)?;
        let (dx, dwq) = matmul_backward(&x, wq, &dq)?;
        let (dc_k, dwk) = matmul_backward(&c, wk, &dk)?;
        let (dc_v, dwv) = matmul_backward(&c, wv, &dv)?;
        grads.wq.add_assign(&dwq)?;
        grads.wk.add_assign(&dwk)?;
        grads.wv.add_assign(&dwv)?;
        d_zk.push(g.add(&dx)?);
        d_zp.push(dc_k.add(&dc_v)?);
    }
    Ok(CrossAttnGrads {
        z_k: stack_patches(d_zk),
        z_p_aligned: stack_patches(d_zp),
        attn: grads,
    })
}

// ---------------------------------------------------------------------------
// host block

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub z: Tensor,
    pub attn: AttnGrads,
}

/// Per patch: `z + attention(z·Wq, z·Wk, z·Wv)` over the frame axis.
pub fn temporal_attention_block(z: &Tensor, params: &AttnParams) -> Result<Tensor> {
    let [p, _, d] = dims3(z, "temporal features")?;
    params.check(d)?;
    let mut out = Vec::with_capacity(p);
    for i in 0..p {
        let x = patch(z, i);
        let q = matmul(&x, &params.wq.value)?;
        let k = matmul(&x, &params.wk.value)?;
        let v = matmul(&x, &params.wv.value)?;
        out.push(x.add(&attention(&q, &k, &v)?)?);
    }
    Ok(stack_patches(out))
}

pub fn temporal_attention_block_backward(
    z: &Tensor,
    params: &AttnParams,
    grad_out: &Tensor,
) -> Result<BlockGrads> {
    let [p, _, d] = dims3(z, "temporal features")?;
    params.check(d)?;
    same_shape(z, grad_out, "gradient")?;
    let (wq, wk, wv) = (&params.wq.value, &params.wk.value, &params.wv.value);
    let mut grads = AttnGrads {
        wq: Tensor::zeros(&[d, d]),
        wk: Tensor::zeros(&[d, d]),
        wv: Tensor::zeros(&[d, d]),
    };
    let mut dz = Vec::with_capacity(p);
    for i in 0..p {
        let (x, g) = (patch(z, i), patch(grad_out, i));
        let q = matmul(&x, wq)?;
        let k = matmul(&x, wk)?;
        let v = matmul(&x, wv)?;
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &g)?;
        let (dxq, dwq) = matmul_backward(&x, wq, &dq)?;
        let (dxk, dwk) = matmul_backward(&x, wk, &dk)?;
        let (dxv, dwv) = matmul_backward(&x, wv, &dv)?;
        grads.wq.add_assign(&dwq)?;
        grads.wk.add_assign(&dwk)?;
        grads.wv.add_assign(&dwv)?;
        dz.push(g.add(&dxq)?.add(&dxk)?.add(&dxv)?);
    }
    Ok(BlockGrads {
        z: stack_patches(dz),
        attn: grads,
    })
}

// ---------------------------------------------------------------------------
// diffusion math

/// `α_t` per step and the running products `ᾱ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `α_t = 1 − β_t` with `β_t` linear from `1e−4` to `0.02`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(TaiError::InvalidConfig(
                "schedule needs at least one step".into(),
            ));
        }
        let (lo, hi) = (1e-4, 0.02);
        let alpha = (0..steps)
            .map(|t| {
                let frac = if steps == 1 {
                    0.0
                } else {
                    t as f64 / (steps - 1) as f64
                };
                1.0 - (lo + (hi - lo) * frac)
            })
            .collect();
        Self::from_alphas(alpha)
    }

    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(TaiError::InvalidConfig(
                "every alpha must lie in (0, 1]".into(),
            ));
        }
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { alpha, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TRAIN_STEPS).expect("non-empty schedule")
    }
}

/// `√ᾱ·z0 + √(1−ᾱ)·ε`.
pub fn q_sample(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(TaiError::InvalidConfig(format!(
            "alpha_bar {alpha_bar} outside [0, 1]"
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z0.zip_map(eps, "q_sample", |z, e| a * z + b * e)?)
}

/// Noised latent at 0-based step `t`.
pub fn noise_forward(z0: &Tensor, eps: &Tensor, sched: &NoiseSchedule, t: usize) -> Result<Tensor> {
    let alpha_bar = *sched.alpha_bar.get(t).ok_or(TaiError::StepOutOfRange {
        step: t,
        len: sched.len(),
    })?;
    q_sample(z0, eps, alpha_bar)
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<f64> {
    Ok(eps_pred.sub(eps)?.data().iter().map(|d| d * d).sum::<f64>() / eps.len() as f64)
}

/// `2(ε̂ − ε)/N`.
pub fn diffusion_loss_grad(eps_pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok(eps_pred.sub(eps)?.scale(2.0 / eps.len() as f64))
}

// ---------------------------------------------------------------------------
// ablation harness

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InjectionStrategy {
    Tai,
    Concat,
    CrossAttn,
}

impl InjectionStrategy {
    pub const ALL: [InjectionStrategy; 3] = [Self::Tai, Self::Concat, Self::CrossAttn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tai => "tai",
            Self::Concat => "concat",
            Self::CrossAttn => "cross-attn",
        }
    }
}

impl fmt::Display for InjectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InjectionStrategy {
    type Err = TaiError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TaiError::UnknownStrategy(s.to_string()))
    }
}

/// Sizes and seed of one injection demo run.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub patches: usize,
    pub frames: usize,
    pub features: usize,
    pub latent_rows: usize,
    pub latent_cols: usize,
    pub hidden: usize,
    pub seed: u64,
    pub zero_pose: bool,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            patches: 6,
            frames: 4,
            features: 8,
            latent_rows: 2,
            latent_cols: 3,
            hidden: 16,
            seed: 0,
            zero_pose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    pub strategy: String,
    pub seed: u64,
    pub zero_pose: bool,
    pub input_shape: Vec<usize>,
    /// FNV-1a over the bits of `z_k` and `z_p`; equal across strategies for
    /// one config.
    pub input_fingerprint: String,
    pub output_shape: Vec<usize>,
    pub output_mean: f64,
    pub output_variance: f64,
    pub grad_check_max_rel_err: f64,
    pub grad_check_passed: bool,
    /// Max abs difference from `layer_norm(z_k)`; TAI only.
    pub layer_norm_baseline_diff: Option<f64>,
}

/// Everything a demo run differentiates through, in a fixed order.
#[derive(Debug, Clone)]
struct DemoModel {
    strategy: InjectionStrategy,
    z_k: Tensor,
    z_p: Tensor,
    block: AttnParams,
    tai: TaiParams,
    concat: ConcatParams,
    cross: AttnParams,
    readout: Tensor,
}

impl DemoModel {
    fn build(strategy: InjectionStrategy, cfg: &DemoConfig) -> Result<Self> {
        let (p, f, d) = (cfg.patches, cfg.frames, cfg.features);
        if [p, f, d, cfg.latent_rows, cfg.latent_cols, cfg.hidden].contains(&0) {
            return Err(TaiError::InvalidConfig(
                "all demo dimensions must be positive".into(),
            ));
        }
        let p_c = cfg.latent_rows * cfg.latent_cols;
        let mut rng = SeededRng::new(cfg.seed);
        let z_k = Tensor::randn(&[p, f, d], 1.0, &mut rng);
        let z_p = Tensor::randn(
            &[f, cfg.latent_rows, cfg.latent_cols, LATENT_IN],
            1.0,
            &mut rng,
        );
        let block = AttnParams::random(d, &mut rng);
        let mut tai = TaiParams::random(p_c, p, d, cfg.hidden, &mut rng);
        let concat = ConcatParams::random(d, &mut rng);
        let cross = AttnParams::random(d, &mut rng);
        let readout = Tensor::randn(&[p, f, d], 1.0, &mut rng);
        let z_p = if cfg.zero_pose {
            tai.align.b1.value = Tensor::zeros(&[cfg.hidden]);
            tai.align.b2.value = Tensor::zeros(&[d]);
            tai.gamma.value = Tensor::full(&[d], 1.0);
            tai.beta.value = Tensor::zeros(&[d]);
            Tensor::zeros(z_p.shape())
        } else {
            z_p
        };
        Ok(Self {
            strategy,
            z_k,
            z_p,
            block,
            tai,
            concat,
            cross,
            readout,
        })
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut out = vec![
            self.z_k.clone(),
            self.z_p.clone(),
            self.block.wq.value.clone(),
            self.block.wk.value.clone(),
            self.block.wv.value.clone(),
            self.tai.align.w1.value.clone(),
            self.tai.align.b1.value.clone(),
            self.tai.align.w2.value.clone(),
            self.tai.align.b2.value.clone(),
            self.tai.patch_map.value.clone(),
        ];
        match self.strategy {
            InjectionStrategy::Tai => {
                out.extend([self.tai.gamma.value.clone(), self.tai.beta.value.clone()])
            }
            InjectionStrategy::Concat => {
                out.extend([self.concat.w.value.clone(), self.concat.b.value.clone()])
            }
            InjectionStrategy::CrossAttn => out.extend([
                self.cross.wq.value.clone(),
                self.cross.wk.value.clone(),
                self.cross.wv.value.clone(),
            ]),
        }
        out
    }

    fn with_tensors(&self, t: &[Tensor]) -> Self {
        let mut m = self.clone();
        m.z_k = t[0].clone();
        m.z_p = t[1].clone();
        m.block.wq.value = t[2].clone();
        m.block.wk.value = t[3].clone();
        m.block.wv.value = t[4].clone();
        m.tai.align.w1.value = t[5].clone();
        m.tai.align.b1.value = t[6].clone();
        m.tai.align.w2.value = t[7].clone();
        m.tai.align.b2.value = t[8].clone();
        m.tai.patch_map.value = t[9].clone();
        match m.strategy {
            InjectionStrategy::Tai => {
                m.tai.gamma.value = t[10].clone();
                m.tai.beta.value = t[11].clone();
            }
            InjectionStrategy::Concat => {
                m.concat.w.value = t[10].clone();
                m.concat.b.value = t[11].clone();
            }
            InjectionStrategy::CrossAttn => {
                m.cross.wq.value = t[10].clone();
                m.cross.wk.value = t[11].clone();
                m.cross.wv.value = t[12].clone();
            }
        }
        m
    }

    fn forward(&self) -> Result<(Tensor, Tensor, Tensor)> {
        let h = temporal_attention_block(&self.z_k, &self.block)?;
        let aligned = align_pose_latent(&self.z_p, &self.tai, self.z_k.shape()[1])?;
        let out = inject(self.strategy, &h, &aligned, self)?;
        Ok((h, aligned, out))
    }

    fn loss(&self) -> Result<f64> {
        Ok(self.forward()?.2.dot(&self.readout))
    }

    fn grads(&self) -> Result<Vec<Tensor>> {
        let (h, aligned, _) = self.forward()?;
        let g = &self.readout;
        let (dh, da, tail) = match self.strategy {
            InjectionStrategy::Tai => {
                let gr = tai_inject_backward(&h, &aligned, &self.tai, g)?;
                (gr.z_k, gr.z_p_aligned, vec![gr.gamma, gr.beta])
            }
            InjectionStrategy::Concat => {
                let gr = concat_inject_backward(&h, &aligned, &self.concat, g)?;
                (gr.z_k, gr.z_p_aligned, vec![gr.w, gr.b])
            }
            InjectionStrategy::CrossAttn => {
                let gr = cross_attn_inject_backward(&h, &aligned, &self.cross, g)?;
                (
                    gr.z_k,
                    gr.z_p_aligned,
                    vec![gr.attn.wq, gr.attn.wk, gr.attn.wv],
                )
            }
        };
        let ga = align_pose_latent_backward(&self.z_p, &self.tai, &da)?;
        let gb = temporal_attention_block_backward(&self.z_k, &self.block, &dh)?;
        let mut out = vec![
            gb.z,
            ga.z_p,
            gb.attn.wq,
            gb.attn.wk,
            gb.attn.wv,
            ga.mlp.w1,
            ga.mlp.b1,
            ga.mlp.w2,
            ga.mlp.b2,
            ga.patch_map,
        ];
        out.extend(tail);
        Ok(out)
    }
}

fn inject(
    strategy: InjectionStrategy,
    h: &Tensor,
    aligned: &Tensor,
    m: &DemoModel,
) -> Result<Tensor> {
    match strategy {
        InjectionStrategy::Tai => tai_inject(h, aligned, &m.tai),
        InjectionStrategy::Concat => concat_inject(h, aligned, &m.concat),
        InjectionStrategy::CrossAttn => cross_attn_inject(h, aligned, &m.cross),
    }
}

/// Runs host block, alignment and one injection strategy on seeded random
/// inputs, then checks gradients of `Σ out ⊙ R` (fixed random `R`) for every
/// input and parameter by central differences. All strategies see identical
/// `z_k`, `z_p`, block and alignment weights for the same config.
pub fn run_injection_demo(strategy: InjectionStrategy, cfg: &DemoConfig) -> Result<DemoReport> {
    let model = DemoModel::build(strategy, cfg)?;
    let (h, _, out) = model.forward()?;
    let tensors = model.tensors();
    let grads = model.grads()?;
    let err = finite_diff_check_all(
        &tensors,
        &grads,
        |t| model.with_tensors(t).loss().map_err(into_tensor_error),
        GRAD_CHECK_EPS,
    )?;
    let baseline = match strategy {
        InjectionStrategy::Tai => Some(out.max_abs_diff(&layer_norm(&h, LAYER_NORM_EPS)?)),
        _ => None,
    };
    Ok(DemoReport {
        strategy: strategy.name().to_string(),
        seed: cfg.seed,
        zero_pose: cfg.zero_pose,
        input_shape: model.z_k.shape().to_vec(),
        input_fingerprint: fingerprint(&[&model.z_k, &model.z_p]),
        output_shape: out.shape().to_vec(),
        output_mean: out.mean(),
        output_variance: out.variance(),
        grad_check_max_rel_err: err,
        grad_check_passed: err < GRAD_CHECK_TOLERANCE,
        layer_norm_baseline_diff: baseline.filter(|_| cfg.zero_pose),
    })
}

fn fingerprint(tensors: &[&Tensor]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tensors
        .iter()
        .flat_map(|t| t.data())
        .flat_map(|v| v.to_bits().to_le_bytes())
    {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn into_tensor_error(e: TaiError) -> TensorError {
    match e {
        TaiError::Tensor(t) => t,
        other => TensorError::InvalidArgument(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> SeededRng {
        SeededRng::new(seed)
    }

    #[test]
    fn zero_mlp_aligns_to_zero() {
        let params = TaiParams::init(6, 10, 8, 16, 1);
        let z_p = Tensor::randn(&[4, 2, 3, 4], 1.0, &mut rng(2));
        let a = align_pose_latent(&z_p, &params, 4).unwrap();
        assert_eq!(a.shape(), &[10, 4, 8]);
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    // hidden = [x, −x], output = [I; −I] gives GELU(x) − GELU(−x) = x.
    #[test]
    fn identity_configuration_passes_latent_through() {
        let (l, m, n, d) = (2, 2, 2, 6);
        let mut params = TaiParams::init(m * n, m * n, d, 8, 0);
        let mut w1 = Tensor::zeros(&[4, 8]);
        let mut w2 = Tensor::zeros(&[8, d]);
        for c in 0..4 {
            w1.data_mut()[c * 8 + c] = 1.0;
            w1.data_mut()[c * 8 + c + 4] = -1.0;
            w2.data_mut()[c * d + c] = 1.0;
            w2.data_mut()[(c + 4) * d + c] = -1.0;
        }
        params.align.w1.value = w1;
        params.align.b1.value = Tensor::zeros(&[8]);
        params.align.w2.value = w2;
        let z_p = Tensor::randn(&[l, m, n, 4], 1.0, &mut rng(3));
        let a = align_pose_latent(&z_p, &params, l).unwrap();
        for t in 0..l {
            for pc in 0..m * n {
                for j in 0..d {
                    let got = a.data()[(pc * l + t) * d + j];
                    let want = if j < 4 {
                        z_p.data()[(t * m * n + pc) * 4 + j]
                    } else {
                        0.0
                    };
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn align_rejects_frame_mismatch() {
        let params = TaiParams::init(6, 6, 8, 16, 1);
        let z_p = Tensor::zeros(&[4, 2, 3, 4]);
        assert!(matches!(
            align_pose_latent(&z_p, &params, 5),
            Err(TaiError::FrameCountMismatch {
                latent: 4,
                features: 5
            })
        ));
        assert!(matches!(
            align_pose_latent(&Tensor::zeros(&[4, 3, 3, 4]), &params, 4),
            Err(TaiError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tai_reduces_to_layer_norm() {
        let z_k = Tensor::randn(&[5, 4, 8], 2.0, &mut rng(5));
        let params = TaiParams::init(6, 5, 8, 16, 0);
        let out = tai_inject(&z_k, &Tensor::zeros(&[5, 4, 8]), &params).unwrap();
        assert!(out.max_abs_diff(&layer_norm(&z_k, LAYER_NORM_EPS).unwrap()) < 1e-12);
    }

    #[test]
    fn tai_constant_slice_gives_beta() {
        let z_k = Tensor::full(&[2, 3, 4], 3.5);
        let mut params = TaiParams::init(1, 2, 4, 4, 0);
        params.beta.value = Tensor::full(&[4], 5.0);
        let out = tai_inject(&z_k, &Tensor::zeros(&[2, 3, 4]), &params).unwrap();
        assert!(out.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn normalized_statistics() {
        let z_k = Tensor::randn(&[3, 4, 16], 3.0, &mut rng(6));
        let z = layer_norm(&z_k, LAYER_NORM_EPS).unwrap();
        for r in 0..z.rows() {
            let row = z.row(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((1.0 - 1e-3..=1.0).contains(&var));
        }
    }

    #[test]
    fn concat_examples() {
        let z_k = Tensor::randn(&[3, 2, 4], 1.0, &mut rng(7));
        let zero = Tensor::zeros(&[3, 2, 4]);
        let out = concat_inject(&z_k, &zero, &ConcatParams::identity(4)).unwrap();
        assert_eq!(out, z_k);
        let mut p = ConcatParams::identity(4);
        p.w.value = Tensor::zeros(&[8, 4]);
        let z_p = Tensor::randn(&[3, 2, 4], 1.0, &mut rng(8));
        assert!(concat_inject(&z_k, &z_p, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn cross_attention_examples() {
        let z_k = Tensor::randn(&[3, 1, 4], 1.0, &mut rng(9));
        let z_p = Tensor::randn(&[3, 1, 4], 1.0, &mut rng(10));
        let out = cross_attn_inject(&z_k, &z_p, &AttnParams::identity(4)).unwrap();
        assert!(out.max_abs_diff(&z_k.add(&z_p).unwrap()) < 1e-12);

        // Identical key rows: attention returns that row for any query.
        let row = [0.3, -1.0, 2.0, 0.5];
        let z_p = Tensor::new(vec![2, 3, 4], row.repeat(6)).unwrap();
        let z_k = Tensor::randn(&[2, 3, 4], 1.0, &mut rng(11));
        let out = cross_attn_inject(&z_k, &z_p, &AttnParams::identity(4)).unwrap();
        let diff = out.sub(&z_k).unwrap();
        for r in 0..diff.rows() {
            for (a, b) in diff.row(r).iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_single_frame_adds_value_projection() {
        let z = Tensor::randn(&[3, 1, 4], 1.0, &mut rng(12));
        let params = AttnParams::random(4, &mut rng(13));
        let out = temporal_attention_block(&z, &params).unwrap();
        let v = tensor::linear(&z, &params.wv.value).unwrap();
        assert!(out.max_abs_diff(&z.add(&v).unwrap()) < 1e-12);
    }

    #[test]
    fn block_is_patch_equivariant() {
        let z = Tensor::randn(&[4, 3, 4], 1.0, &mut rng(14));
        let params = AttnParams::random(4, &mut rng(15));
        let perm = [2, 0, 3, 1];
        let permuted = stack_patches(perm.iter().map(|&i| patch(&z, i)).collect());
        let out = temporal_attention_block(&z, &params).unwrap();
        let out_perm = temporal_attention_block(&permuted, &params).unwrap();
        let expected = stack_patches(perm.iter().map(|&i| patch(&out, i)).collect());
        assert_eq!(out_perm, expected);
    }

    #[test]
    fn shapes_must_match() {
        let a = Tensor::zeros(&[2, 3, 4]);
        let b = Tensor::zeros(&[2, 3, 5]);
        let params = TaiParams::init(1, 2, 4, 4, 0);
        assert!(tai_inject(&a, &b, &params).is_err());
        assert!(concat_inject(&a, &b, &ConcatParams::identity(4)).is_err());
        assert!(cross_attn_inject(&a, &b, &AttnParams::identity(4)).is_err());
        assert!(
            temporal_attention_block(&Tensor::zeros(&[2, 3]), &AttnParams::identity(3)).is_err()
        );
    }

    #[test]
    fn schedule_examples() {
        let z0 = Tensor::randn(&[10], 1.0, &mut rng(16));
        let eps = Tensor::randn(&[10], 1.0, &mut rng(17));
        let keep = NoiseSchedule::from_alphas(vec![1.0]).unwrap();
        assert_eq!(noise_forward(&z0, &eps, &keep, 0).unwrap(), z0);
        assert_eq!(q_sample(&z0, &eps, 0.0).unwrap(), eps);
        assert!(matches!(
            noise_forward(&z0, &eps, &keep, 1),
            Err(TaiError::StepOutOfRange { step: 1, len: 1 })
        ));
        let sched = NoiseSchedule::default();
        assert_eq!(sched.len(), 1000);
        assert!(sched.alpha_bar().windows(2).all(|w| w[1] <= w[0]));
        assert!(sched.alpha_bar()[0] <= 1.0);
        assert!(NoiseSchedule::from_alphas(vec![0.0]).is_err());
    }

    #[test]
    fn diffusion_loss_examples() {
        let eps = Tensor::randn(&[3, 4], 1.0, &mut rng(18));
        assert_eq!(diffusion_loss(&eps, &eps).unwrap(), 0.0);
        let shifted = eps.map(|v| v + 1.0);
        assert!((diffusion_loss(&shifted, &eps).unwrap() - 1.0).abs() < 1e-12);
        assert!(diffusion_loss(&eps, &Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in InjectionStrategy::ALL {
            assert_eq!(s.name().parse::<InjectionStrategy>().unwrap(), s);
        }
        assert!(matches!(
            "bogus".parse::<InjectionStrategy>(),
            Err(TaiError::UnknownStrategy(_))
        ));
    }

    #[test]
    fn demo_runs_every_strategy() {
        for s in InjectionStrategy::ALL {
            let report = run_injection_demo(s, &DemoConfig::default()).unwrap();
            assert_eq!(report.output_shape, report.input_shape);
            assert!(
                report.grad_check_passed,
                "{s}: {}",
                report.grad_check_max_rel_err
            );
        }
    }

    #[test]
    fn demo_zero_pose_matches_layer_norm() {
        let cfg = DemoConfig {
            zero_pose: true,
            ..DemoConfig::default()
        };
        let report = run_injection_demo(InjectionStrategy::Tai, &cfg).unwrap();
        assert!(report.layer_norm_baseline_diff.unwrap() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = TaiParams::random(6, 10, 8, 16, &mut rng(19));
        let mut buf = Vec::new();
        params.save(&mut buf).unwrap();
        assert_eq!(TaiParams::load(&mut buf.as_slice()).unwrap(), params);
    }
}
