//! Forward and backward kernels for every layer type the networks use.
//!
//! Kernels are free functions over tensors. Anything a backward pass needs
//! from its forward pass is handed back explicitly (pooling argmax, batch
//! statistics, dropout mask) rather than kept in hidden state. Activations are
//! NCHW; dense inputs are `[batch, features]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor, TensorError};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Inference,
}

/// Execution mode plus the random stream used by dropout.
#[derive(Debug, Clone)]
pub struct KernelContext {
    pub mode: Mode,
    pub rng: ChaCha8Rng,
}

impl KernelContext {
    pub fn new(mode: Mode, seed: u64) -> Self {
        KernelContext {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self::new(Mode::Train, seed)
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference, 0)
    }
}

fn dims4(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 4], TensorError> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::shape(
            op,
            format!("expected a 4-d tensor, got shape {:?}", t.shape()),
        )),
    }
}

fn dims2(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 2], TensorError> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        _ => Err(TensorError::shape(
            op,
            format!("expected a 2-d tensor, got shape {:?}", t.shape()),
        )),
    }
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernels: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn conv_geometry<S: Scalar>(input: &Tensor<S>, kernels: &Tensor<S>, bias: &Tensor<S>) -> Result<ConvGeom, TensorError> {
    const OP: &str = "conv2d";
    let [batch, channels, height, width] = dims4(OP, input)?;
    let [k, kc, kh, kw] = dims4(OP, kernels)?;
    if kc != channels {
        return Err(TensorError::shape(
            OP,
            format!("channel dimension: input has {channels}, kernels expect {kc}"),
        ));
    }
    if kh > height {
        return Err(TensorError::shape(
            OP,
            format!("height dimension: kernel {kh} exceeds input {height}"),
        ));
    }
    if kw > width {
        return Err(TensorError::shape(
            OP,
            format!("width dimension: kernel {kw} exceeds input {width}"),
        ));
    }
    if bias.shape() != [k] {
        return Err(TensorError::shape(
            OP,
            format!("bias dimension: expected [{k}], got {:?}", bias.shape()),
        ));
    }
    Ok(ConvGeom {
        batch,
        channels,
        height,
        width,
        kernels: k,
        kh,
        kw,
        out_h: height - kh + 1,
        out_w: width - kw + 1,
    })
}

/// Unrolls one sample into a `[C*R*S, OH*OW]` patch matrix.
fn im2col<S: Scalar>(g: &ConvGeom, sample: &[S], col: &mut [S]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for r in 0..g.kh {
            for s in 0..g.kw {
                let dst = &mut col[row * p..(row + 1) * p];
                for y in 0..g.out_h {
                    let src = &plane[(y + r) * g.width + s..(y + r) * g.width + s + g.out_w];
                    dst[y * g.out_w..(y + 1) * g.out_w].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<S: Scalar>(g: &ConvGeom, col: &[S], sample: &mut [S]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for r in 0..g.kh {
            for s in 0..g.kw {
                let src = &col[row * p..(row + 1) * p];
                for y in 0..g.out_h {
                    let dst = &mut plane[(y + r) * g.width + s..(y + r) * g.width + s + g.out_w];
                    for (d, &v) in dst.iter_mut().zip(&src[y * g.out_w..(y + 1) * g.out_w]) {
                        *d = *d + v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Valid, stride-1 convolution (cross-correlation).
///
/// `out[b,k,y,x] = bias[k] + sum_{c,r,s} input[b,c,y+r,x+s] * kernels[k,c,r,s]`
pub fn conv2d<S: Scalar>(input: &Tensor<S>, kernels: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let g = conv_geometry(input, kernels, bias)?;
    let (patch, p) = (g.patch(), g.positions());
    let in_stride = g.channels * g.height * g.width;
    let out_stride = g.kernels * p;
    let mut out = vec![S::zero(); g.batch * out_stride];
    let mut col = vec![S::zero(); patch * p];
    let w = kernels.data();
    for b in 0..g.batch {
        im2col(&g, &input.data()[b * in_stride..(b + 1) * in_stride], &mut col);
        let dst = &mut out[b * out_stride..(b + 1) * out_stride];
        for (k, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias.data()[k]);
        }
        // SAFETY: w is K x patch, col is patch x P, dst is K x P; all row-major.
        unsafe {
            S::gemm(
                g.kernels,
                patch,
                p,
                S::one(),
                w.as_ptr(),
                patch as isize,
                1,
                col.as_ptr(),
                p as isize,
                1,
                S::one(),
                dst.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    Tensor::new(vec![g.batch, g.kernels, g.out_h, g.out_w], out)?.ensure_finite("conv2d")
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<S> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<S>>,
    pub kernels: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    grad_out: &Tensor<S>,
    want_input_grad: bool,
) -> Result<Conv2dGrads<S>, TensorError> {
    let g = conv_geometry(input, kernels, bias)?;
    let expected = [g.batch, g.kernels, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(TensorError::shape(
            "conv2d_backward",
            format!("upstream gradient {:?}, expected {expected:?}", grad_out.shape()),
        ));
    }
    let (patch, p) = (g.patch(), g.positions());
    let in_stride = g.channels * g.height * g.width;
    let out_stride = g.kernels * p;
    let w = kernels.data();
    let mut gw = vec![S::zero(); g.kernels * patch];
    let mut gb = vec![S::zero(); g.kernels];
    let mut gin = if want_input_grad {
        vec![S::zero(); input.len()]
    } else {
        Vec::new()
    };
    let mut col = vec![S::zero(); patch * p];
    let mut gcol = vec![S::zero(); if want_input_grad { patch * p } else { 0 }];
    for b in 0..g.batch {
        let go = &grad_out.data()[b * out_stride..(b + 1) * out_stride];
        for (k, row) in go.chunks(p).enumerate() {
            gb[k] = gb[k] + row.iter().copied().sum::<S>();
        }
        im2col(&g, &input.data()[b * in_stride..(b + 1) * in_stride], &mut col);
        // SAFETY: go is K x P, col^T is P x patch (row stride 1, col stride P), gw is K x patch.
        unsafe {
            S::gemm(
                g.kernels,
                p,
                patch,
                S::one(),
                go.as_ptr(),
                p as isize,
                1,
                col.as_ptr(),
                1,
                p as isize,
                S::one(),
                gw.as_mut_ptr(),
                patch as isize,
                1,
            );
        }
        if want_input_grad {
            // SAFETY: w^T is patch x K (row stride 1, col stride patch), go is K x P.
            unsafe {
                S::gemm(
                    patch,
                    g.kernels,
                    p,
                    S::one(),
                    w.as_ptr(),
                    1,
                    patch as isize,
                    go.as_ptr(),
                    p as isize,
                    1,
                    S::zero(),
                    gcol.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            col2im_add(&g, &gcol, &mut gin[b * in_stride..(b + 1) * in_stride]);
        }
    }
    Ok(Conv2dGrads {
        input: if want_input_grad {
            Some(Tensor::new(input.shape().to_vec(), gin)?)
        } else {
            None
        },
        kernels: Tensor::new(kernels.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.kernels], gb)?,
    })
}

// ---------------------------------------------------------------------------
// maxpool2

/// Flat input index of the maximum of each 2x2 window.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Non-overlapping 2x2 max pooling. Ties go to the first element in
/// row-major order.
pub fn maxpool2<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, PoolIndices), TensorError> {
    const OP: &str = "maxpool2";
    let [b, c, h, w] = dims4(OP, input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::shape(OP, format!("spatial extent {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let i0 = base + 2 * y * w + 2 * xo;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let out = Tensor::new(vec![b, c, oh, ow], out)?.ensure_finite(OP)?;
    Ok((
        out,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<S: Scalar>(indices: &PoolIndices, grad_out: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    if grad_out.len() != indices.argmax.len() {
        return Err(TensorError::shape(
            "maxpool2_backward",
            format!(
                "upstream gradient has {} elements, expected {}",
                grad_out.len(),
                indices.argmax.len()
            ),
        ));
    }
    let mut g = Tensor::zeros(indices.input_shape.clone());
    let gd = g.data_mut();
    for (&i, &v) in indices.argmax.iter().zip(grad_out.data()) {
        gd[i] = gd[i] + v;
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// relu

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Passes the gradient where `input > 0`; the subgradient at 0 is 0.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    if input.shape() != grad_out.shape() {
        return Err(TensorError::shape(
            "relu_backward",
            format!("input {:?} vs gradient {:?}", input.shape(), grad_out.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// dense

/// Affine map `x * W + b` with `x: [B, F]`, `W: [F, O]`, `b: [O]`.
pub fn dense<S: Scalar>(input: &Tensor<S>, weights: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    const OP: &str = "dense";
    let [b, f] = dims2(OP, input)?;
    let [wf, o] = dims2(OP, weights)?;
    if wf != f {
        return Err(TensorError::shape(
            OP,
            format!("inner dimension: input has {f} features, weights expect {wf}"),
        ));
    }
    if bias.shape() != [o] {
        return Err(TensorError::shape(
            OP,
            format!("bias dimension: expected [{o}], got {:?}", bias.shape()),
        ));
    }
    let mut out = Vec::with_capacity(b * o);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    // SAFETY: input B x F, weights F x O, out B x O; row-major.
    unsafe {
        S::gemm(
            b,
            f,
            o,
            S::one(),
            input.data().as_ptr(),
            f as isize,
            1,
            weights.data().as_ptr(),
            o as isize,
            1,
            S::one(),
            out.as_mut_ptr(),
            o as isize,
            1,
        );
    }
    Tensor::new(vec![b, o], out)?.ensure_finite(OP)
}

#[derive(Debug, Clone)]
pub struct DenseGrads<S> {
    pub input: Option<Tensor<S>>,
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn dense_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    grad_out: &Tensor<S>,
    want_input_grad: bool,
) -> Result<DenseGrads<S>, TensorError> {
    const OP: &str = "dense_backward";
    let [b, f] = dims2(OP, input)?;
    let [wf, o] = dims2(OP, weights)?;
    if wf != f || grad_out.shape() != [b, o] {
        return Err(TensorError::shape(
            OP,
            format!(
                "input {:?}, weights {:?}, gradient {:?}",
                input.shape(),
                weights.shape(),
                grad_out.shape()
            ),
        ));
    }
    let go = grad_out.data();
    let mut gw = vec![S::zero(); f * o];
    // SAFETY: input^T is F x B (row stride 1, col stride F), go is B x O, gw is F x O.
    unsafe {
        S::gemm(
            f,
            b,
            o,
            S::one(),
            input.data().as_ptr(),
            1,
            f as isize,
            go.as_ptr(),
            o as isize,
            1,
            S::zero(),
            gw.as_mut_ptr(),
            o as isize,
            1,
        );
    }
    let mut gb = vec![S::zero(); o];
    for row in go.chunks(o) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    let gin = if want_input_grad {
        let mut gi = vec![S::zero(); b * f];
        // SAFETY: go is B x O, weights^T is O x F (row stride 1, col stride O), gi is B x F.
        unsafe {
            S::gemm(
                b,
                o,
                f,
                S::one(),
                go.as_ptr(),
                o as isize,
                1,
                weights.data().as_ptr(),
                1,
                o as isize,
                S::zero(),
                gi.as_mut_ptr(),
                f as isize,
                1,
            );
        }
        Some(Tensor::new(vec![b, f], gi)?)
    } else {
        None
    };
    Ok(DenseGrads {
        input: gin,
        weights: Tensor::new(vec![f, o], gw)?,
        bias: Tensor::new(vec![o], gb)?,
    })
}

// ---------------------------------------------------------------------------
// batchnorm

/// Exponential moving averages of per-channel batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<S> {
    normalized: Tensor<S>,
    inv_std: Vec<S>,
    mode: Mode,
}

/// `[B, C, H, W]` normalizes per channel over `B*H*W`; `[B, F]` per feature over `B`.
fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h * w)),
        [b, f] => Ok((b, f, 1)),
        _ => Err(TensorError::shape(
            "batchnorm",
            format!("expected 2-d or 4-d input, got {shape:?}"),
        )),
    }
}

pub fn batchnorm<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running: &mut RunningStats<S>,
    ctx: &KernelContext,
) -> Result<(Tensor<S>, BatchNormCache<S>), TensorError> {
    const OP: &str = "batchnorm";
    let (b, c, l) = bn_layout(input.shape())?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running mean", &running.mean),
        ("running var", &running.var),
    ] {
        if t.shape() != [c] {
            return Err(TensorError::shape(
                OP,
                format!("{name} dimension: expected [{c}], got {:?}", t.shape()),
            ));
        }
    }
    let eps = S::from_f64_lossy(BATCHNORM_EPS);
    let x = input.data();
    let (mean, var) = match ctx.mode {
        Mode::Train => {
            if b < 2 {
                return Err(TensorError::Invalid {
                    op: OP,
                    detail: format!("train mode needs a batch of at least 2, got {b}"),
                });
            }
            let m = S::from_usize(b * l).expect("count fits");
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ch in 0..c {
                let mut s = S::zero();
                for bi in 0..b {
                    let base = (bi * c + ch) * l;
                    s = s + x[base..base + l].iter().copied().sum::<S>();
                }
                let mu = s / m;
                let mut v = S::zero();
                for bi in 0..b {
                    let base = (bi * c + ch) * l;
                    for &xv in &x[base..base + l] {
                        v = v + (xv - mu) * (xv - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = v / m;
            }
            let mom = S::from_f64_lossy(BATCHNORM_MOMENTUM);
            let unbias = m / (m - S::one());
            for ch in 0..c {
                let rm = &mut running.mean.data_mut()[ch];
                *rm = mom * *rm + (S::one() - mom) * mean[ch];
                let rv = &mut running.var.data_mut()[ch];
                *rv = mom * *rv + (S::one() - mom) * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Inference => (running.mean.data().to_vec(), running.var.data().to_vec()),
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut norm = vec![S::zero(); x.len()];
    let mut out = vec![S::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * l;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + l {
                let n = (x[i] - mu) * is;
                norm[i] = n;
                out[i] = ga * n + be;
            }
        }
    }
    let out = Tensor::new(input.shape().to_vec(), out)?.ensure_finite(OP)?;
    Ok((
        out,
        BatchNormCache {
            normalized: Tensor::new(input.shape().to_vec(), norm)?,
            inv_std,
            mode: ctx.mode,
        },
    ))
}

/// Inference-mode batch norm that only reads the running statistics.
pub fn batchnorm_inference<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running: &RunningStats<S>,
) -> Result<(Tensor<S>, BatchNormCache<S>), TensorError> {
    let mut stats = running.clone();
    batchnorm(input, gamma, beta, &mut stats, &KernelContext::inference())
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<S> {
    pub input: Tensor<S>,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

pub fn batchnorm_backward<S: Scalar>(
    cache: &BatchNormCache<S>,
    gamma: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<BatchNormGrads<S>, TensorError> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(TensorError::shape(
            "batchnorm_backward",
            format!(
                "upstream gradient {:?}, expected {:?}",
                grad_out.shape(),
                cache.normalized.shape()
            ),
        ));
    }
    let (b, c, l) = bn_layout(grad_out.shape())?;
    let xh = cache.normalized.data();
    let dy = grad_out.data();
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * l;
            for i in base..base + l {
                dgamma[ch] = dgamma[ch] + dy[i] * xh[i];
                dbeta[ch] = dbeta[ch] + dy[i];
            }
        }
    }
    let mut dx = vec![S::zero(); dy.len()];
    match cache.mode {
        Mode::Train => {
            let m = S::from_usize(b * l).expect("count fits");
            for ch in 0..c {
                // dxhat = dy * gamma; sums of dxhat and dxhat * xhat are gamma * dbeta, gamma * dgamma.
                let ga = gamma.data()[ch];
                let k = ga * cache.inv_std[ch] / m;
                for bi in 0..b {
                    let base = (bi * c + ch) * l;
                    for i in base..base + l {
                        dx[i] = k * (m * dy[i] - dbeta[ch] - xh[i] * dgamma[ch]);
                    }
                }
            }
        }
        Mode::Inference => {
            for bi in 0..b {
                for ch in 0..c {
                    let k = gamma.data()[ch] * cache.inv_std[ch];
                    let base = (bi * c + ch) * l;
                    for i in base..base + l {
                        dx[i] = k * dy[i];
                    }
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.shape().to_vec(), dx)?,
        gamma: Tensor::new(vec![c], dgamma)?,
        beta: Tensor::new(vec![c], dbeta)?,
    })
}

// ---------------------------------------------------------------------------
// dropout

/// Per-element scale applied by inverted dropout (`0` or `1/keep_prob`).
/// `None` means the layer acted as the identity.
#[derive(Debug, Clone)]
pub struct DropoutMask<S>(Option<Vec<S>>);

impl<S: Scalar> DropoutMask<S> {
    pub fn identity() -> Self {
        DropoutMask(None)
    }

    pub fn from_scales(scales: Vec<S>) -> Self {
        DropoutMask(Some(scales))
    }
}

/// Inverted dropout: survivors are scaled by `1/keep_prob` at train time so
/// inference is the identity.
pub fn dropout<S: Scalar>(
    input: &Tensor<S>,
    keep_prob: f64,
    ctx: &mut KernelContext,
) -> Result<(Tensor<S>, DropoutMask<S>), TensorError> {
    check_keep_prob(keep_prob)?;
    if ctx.mode == Mode::Inference || keep_prob == 1.0 {
        return Ok((input.clone(), DropoutMask(None)));
    }
    let scale = S::from_f64_lossy(1.0 / keep_prob);
    let scales: Vec<S> = (0..input.len())
        .map(|_| {
            if ctx.rng.gen::<f64>() < keep_prob {
                scale
            } else {
                S::zero()
            }
        })
        .collect();
    let out = apply_dropout_mask(input, &DropoutMask(Some(scales.clone())))?;
    Ok((out, DropoutMask(Some(scales))))
}

pub fn check_keep_prob(keep_prob: f64) -> Result<(), TensorError> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(TensorError::Invalid {
            op: "dropout",
            detail: format!("keep probability {keep_prob} outside (0, 1]"),
        })
    }
}

/// Forward and backward of dropout are the same multiplication by the mask.
pub fn apply_dropout_mask<S: Scalar>(t: &Tensor<S>, mask: &DropoutMask<S>) -> Result<Tensor<S>, TensorError> {
    match &mask.0 {
        None => Ok(t.clone()),
        Some(scales) => {
            if scales.len() != t.len() {
                return Err(TensorError::shape(
                    "dropout",
                    format!("mask has {} elements, tensor {}", scales.len(), t.len()),
                ));
            }
            let data = t.data().iter().zip(scales).map(|(&v, &s)| v * s).collect();
            Tensor::new(t.shape().to_vec(), data)
        }
    }
}

// ---------------------------------------------------------------------------
// softmax + categorical cross-entropy

/// Mean categorical cross-entropy of max-shifted softmax probabilities.
pub fn softmax_xent<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>), TensorError> {
    const OP: &str = "softmax_xent";
    let [b, c] = dims2(OP, logits)?;
    if labels.len() != b {
        return Err(TensorError::shape(
            OP,
            format!("batch dimension: {b} rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::Invalid {
            op: OP,
            detail: format!("label {bad} out of range for {c} classes"),
        });
    }
    let mut probs = Vec::with_capacity(b * c);
    let mut loss = S::zero();
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let denom: S = row.iter().map(|&z| (z - max).exp()).sum();
        let log_denom = denom.ln();
        loss = loss - (row[label] - max - log_denom);
        probs.extend(row.iter().map(|&z| (z - max).exp() / denom));
    }
    let loss = loss / S::from_usize(b).expect("batch fits");
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: OP });
    }
    Ok((loss, Tensor::new(vec![b, c], probs)?.ensure_finite(OP)?))
}

/// Gradient of the mean loss w.r.t. the logits: `(probs - onehot) / B`.
pub fn softmax_xent_backward<S: Scalar>(probs: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>, TensorError> {
    let [b, c] = dims2("softmax_xent_backward", probs)?;
    let inv_b = S::one() / S::from_usize(b).expect("batch fits");
    let mut g = probs.data().to_vec();
    for (i, &l) in labels.iter().enumerate() {
        g[i * c + l] = g[i * c + l] - S::one();
    }
    for v in &mut g {
        *v = *v * inv_b;
    }
    Tensor::new(vec![b, c], g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let k = Tensor::<f64>::ones(vec![1, 1, 2, 2]);
        let out = conv2d(&x, &k, &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(vec![2, 1, 5, 4], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::ones(vec![1, 1, 1, 1]);
        let out = conv2d(&x, &k, &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let k = Tensor::<f64>::zeros(vec![3, 1, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(vec![3])).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
        let k = Tensor::<f64>::zeros(vec![3, 2, 5, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(vec![3])).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let k = Tensor::<f64>::zeros(vec![3, 2, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(vec![2])).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn maxpool_single_window_and_constant() {
        let (out, _) = maxpool2(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let (out, _) = maxpool2(&Tensor::<f64>::full(vec![2, 3, 4, 6], 0.25)).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        assert!(maxpool2(&Tensor::<f64>::zeros(vec![1, 1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let x = Tensor::<f64>::full(vec![1, 1, 2, 2], 1.0);
        let (_, idx) = maxpool2(&x).unwrap();
        let g = maxpool2_backward(&idx, &t(&[1, 1, 1, 1], &[5.0])).unwrap();
        assert_eq!(g.data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let neg = Tensor::<f64>::full(vec![4], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_identity_and_zero_input() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let eye = Tensor::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(dense(&x, &eye, &Tensor::zeros(vec![3])).unwrap(), x);
        let b = t(&[2], &[0.5, -1.5]);
        let w = Tensor::<f64>::ones(vec![3, 2]);
        let out = dense(&Tensor::zeros(vec![4, 3]), &w, &b).unwrap();
        for row in out.data().chunks(2) {
            assert_eq!(row, b.data());
        }
        assert!(dense(&x, &Tensor::<f64>::zeros(vec![2, 2]), &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn batchnorm_standardized_batch_is_unchanged() {
        // per-feature mean 0, biased variance 1
        let x = t(&[2, 2], &[1.0, -1.0, -1.0, 1.0]);
        let mut rs = RunningStats::new(2);
        let ctx = KernelContext::train(0);
        let (out, _) = batchnorm(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![2]), &mut rs, &ctx).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(vec![3, 2, 2, 2], -2.0, 2.0, &mut rng);
        let beta = t(&[2], &[0.3, -0.7]);
        let mut rs = RunningStats::new(2);
        let (out, _) = batchnorm(&x, &Tensor::zeros(vec![2]), &beta, &mut rs, &KernelContext::train(0)).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, beta.data()[(i / 4) % 2]);
        }
    }

    #[test]
    fn batchnorm_rejects_single_sample_in_train_mode() {
        let x = Tensor::<f64>::zeros(vec![1, 3]);
        let mut rs = RunningStats::new(3);
        let g = Tensor::ones(vec![3]);
        let b = Tensor::zeros(vec![3]);
        assert!(batchnorm(&x, &g, &b, &mut rs, &KernelContext::train(0)).is_err());
        assert!(batchnorm(&x, &g, &b, &mut rs, &KernelContext::inference()).is_ok());
    }

    #[test]
    fn batchnorm_running_stats_move_toward_batch() {
        let x = t(&[2, 1], &[2.0, 4.0]);
        let mut rs = RunningStats::new(1);
        batchnorm(
            &x,
            &Tensor::ones(vec![1]),
            &Tensor::zeros(vec![1]),
            &mut rs,
            &KernelContext::train(0),
        )
        .unwrap();
        // mean 3, unbiased variance 2
        assert!((rs.mean.data()[0] - 0.3).abs() < 1e-12);
        assert!((rs.var.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(vec![4, 5], -1.0, 1.0, &mut rng);
        let mut train = KernelContext::train(3);
        assert_eq!(dropout(&x, 1.0, &mut train).unwrap().0, x);
        let mut inf = KernelContext::inference();
        assert_eq!(dropout(&x, 0.5, &mut inf).unwrap().0, x);
        assert!(dropout(&x, 0.0, &mut train).is_err());
        assert!(dropout(&x, 1.5, &mut train).is_err());
    }

    #[test]
    fn softmax_uniform_and_confident() {
        let (loss, probs) = softmax_xent(&Tensor::<f64>::zeros(vec![2, 5]), &[0, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        for row in probs.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let logits = t(&[1, 3], &[0.0, 1000.0, 0.0]);
        let (loss, _) = softmax_xent(&logits, &[1]).unwrap();
        assert!(loss < 1e-6);
        assert!(softmax_xent(&logits, &[3]).is_err());
    }
}
