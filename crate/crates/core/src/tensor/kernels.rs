//! Forward and backward kernels on plain tensors.
//!
//! All reductions run in a fixed sequential order so repeated calls are
//! bit-identical.

use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Dot product with eight fixed accumulator lanes.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `A[m×k] · B[k×n]`.
pub(crate) fn mm<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != F::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    c
}

/// `A[m×k] · B[n×k]ᵀ`.
pub(crate) fn mm_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `A[k×m]ᵀ · B[k×n]`.
pub(crate) fn mm_tn<F: Real>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api != F::zero() {
                axpy(api, br, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
    c
}

fn matrix_dims<F: Real>(t: &Tensor<F>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err!("{what} must be 2-D, got {:?}", s)),
    }
}

pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return Err(shape_err!("matmul inner extents differ: {:?} x {:?}", a.shape(), b.shape()));
    }
    Tensor::new([m, n], mm(a.data(), b.data(), m, k, n))
}

/// Returns `(dA, dB)` for `C = A·B`.
pub fn matmul_backward<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let da = mm_nt(grad_out.data(), b.data(), m, n, k);
    let db = mm_tn(a.data(), grad_out.data(), m, k, n);
    (Tensor { shape: vec![m, k], data: da }, Tensor { shape: vec![k, n], data: db })
}

/// Geometry of a valid (unpadded) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new<F: Real>(input: &Tensor<F>, kernel: &Tensor<F>, bias: &Tensor<F>, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let [b, c, h, w] = *input.shape() else {
            return Err(shape_err!("conv2d input must be B×C×H×W, got {:?}", input.shape()));
        };
        let [d, kc, kh, kw] = *kernel.shape() else {
            return Err(shape_err!("conv2d kernel must be D×C×k×k, got {:?}", kernel.shape()));
        };
        if kc != c || kh != kw {
            return Err(shape_err!(
                "conv2d kernel {:?} incompatible with input {:?}",
                kernel.shape(),
                input.shape()
            ));
        }
        if kh > h || kw > w {
            return Err(shape_err!("conv2d kernel {:?} larger than input {:?}", kernel.shape(), input.shape()));
        }
        if bias.shape() != [d] {
            return Err(shape_err!("conv2d bias must be [{}], got {:?}", d, bias.shape()));
        }
        Ok(Self {
            batch: b,
            in_ch: c,
            height: h,
            width: w,
            out_ch: d,
            kernel: kh,
            stride,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn cols(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// Unfolds input patches into a `rows × (C·k·k)` matrix, rows ordered (b, oy, ox).
fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let (k, q) = (g.kernel, g.cols());
    let mut col = vec![F::zero(); g.rows() * q];
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut col[r * q..(r + 1) * q];
                let mut j = 0;
                for c in 0..g.in_ch {
                    let plane = (b * g.in_ch + c) * g.height * g.width;
                    for ky in 0..k {
                        let src = plane + (oy * g.stride + ky) * g.width + ox * g.stride;
                        dst[j..j + k].copy_from_slice(&x[src..src + k]);
                        j += k;
                    }
                }
                r += 1;
            }
        }
    }
    col
}

fn col2im<F: Real>(col: &[F], g: &ConvGeom) -> Vec<F> {
    let (k, q) = (g.kernel, g.cols());
    let mut x = vec![F::zero(); g.batch * g.in_ch * g.height * g.width];
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &col[r * q..(r + 1) * q];
                let mut j = 0;
                for c in 0..g.in_ch {
                    let plane = (b * g.in_ch + c) * g.height * g.width;
                    for ky in 0..k {
                        let dst = plane + (oy * g.stride + ky) * g.width + ox * g.stride;
                        for kx in 0..k {
                            x[dst + kx] += src[j + kx];
                        }
                        j += k;
                    }
                }
                r += 1;
            }
        }
    }
    x
}

/// Valid 2-D convolution: `B×C×H×W ⊛ D×C×k×k + bias → B×D×H′×W′`.
pub fn conv2d<F: Real>(input: &Tensor<F>, kernel: &Tensor<F>, bias: &Tensor<F>, stride: usize) -> Result<Tensor<F>> {
    let g = ConvGeom::new(input, kernel, bias, stride)?;
    let col = im2col(input.data(), &g);
    let (rows, q, d) = (g.rows(), g.cols(), g.out_ch);
    let out_mat = mm_nt(&col, kernel.data(), rows, q, d);
    let hw = g.out_h * g.out_w;
    let mut out = vec![F::zero(); g.batch * d * hw];
    for b in 0..g.batch {
        for p in 0..hw {
            let r = b * hw + p;
            for di in 0..d {
                out[(b * d + di) * hw + p] = out_mat[r * d + di] + bias.data()[di];
            }
        }
    }
    Tensor::new([g.batch, d, g.out_h, g.out_w], out)
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward<F: Real>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
    stride: usize,
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let g = ConvGeom::new(input, kernel, bias, stride)?;
    let (rows, q, d) = (g.rows(), g.cols(), g.out_ch);
    let hw = g.out_h * g.out_w;
    let mut gmat = vec![F::zero(); rows * d];
    let mut dbias = vec![F::zero(); d];
    for b in 0..g.batch {
        for di in 0..d {
            let src = &grad_out.data()[(b * d + di) * hw..(b * d + di + 1) * hw];
            for (p, &v) in src.iter().enumerate() {
                gmat[(b * hw + p) * d + di] = v;
            }
        }
    }
    for r in 0..rows {
        for di in 0..d {
            dbias[di] += gmat[r * d + di];
        }
    }
    let col = im2col(input.data(), &g);
    // Q×D
    let dkt = mm_tn(&col, &gmat, rows, q, d);
    let mut dk = vec![F::zero(); d * q];
    for qi in 0..q {
        for di in 0..d {
            dk[di * q + qi] = dkt[qi * d + di];
        }
    }
    let dcol = mm(&gmat, kernel.data(), rows, d, q);
    let dx = col2im(&dcol, &g);
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new([d], dbias)?,
    ))
}

fn last_dim<F: Real>(x: &Tensor<F>) -> usize {
    *x.shape().last().expect("tensor has at least one axis")
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let d = last_dim(x);
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut s = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Tensor { shape: x.shape().to_vec(), data: out }
}

pub fn softmax_backward<F: Real>(y: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let d = last_dim(y);
    let mut dx = vec![F::zero(); y.numel()];
    for ((yr, gr), dr) in y
        .data()
        .chunks_exact(d)
        .zip(grad_out.data().chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let s = dot(yr, gr);
        for i in 0..d {
            dr[i] = yr[i] * (gr[i] - s);
        }
    }
    Tensor { shape: y.shape().to_vec(), data: dx }
}

/// Normalized activations and per-row inverse standard deviations kept for backward.
#[derive(Clone, Debug)]
pub struct LayerNormCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    shift: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let d = last_dim(x);
    if gain.shape() != [d] || shift.shape() != [d] {
        return Err(shape_err!(
            "layer_norm affine params {:?}/{:?} do not match last extent {}",
            gain.shape(),
            shift.shape(),
            d
        ));
    }
    if !(eps > F::zero()) {
        return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
    }
    let n = F::from_usize(d).unwrap();
    let rows = x.numel() / d;
    let mut xhat = vec![F::zero(); x.numel()];
    let mut inv_std = vec![F::zero(); rows];
    let mut y = vec![F::zero(); x.numel()];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mean = xr.iter().copied().fold(F::zero(), |a, b| a + b) / n;
        let var = xr.iter().fold(F::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for i in 0..d {
            let h = (xr[i] - mean) * inv;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gain.data()[i] + shift.data()[i];
        }
    }
    Ok((Tensor { shape: x.shape().to_vec(), data: y }, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, d_gain, d_shift)`.
pub fn layer_norm_backward<F: Real>(
    cache: &LayerNormCache<F>,
    gain: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let d = gain.numel();
    let n = F::from_usize(d).unwrap();
    let rows = grad_out.numel() / d;
    let mut dx = vec![F::zero(); grad_out.numel()];
    let mut dg = vec![F::zero(); d];
    let mut db = vec![F::zero(); d];
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let gr = &grad_out.data()[r * d..(r + 1) * d];
        let hr = &cache.xhat[r * d..(r + 1) * d];
        for i in 0..d {
            dg[i] += gr[i] * hr[i];
            db[i] += gr[i];
            dxhat[i] = gr[i] * gain.data()[i];
        }
        let s1 = dxhat.iter().copied().fold(F::zero(), |a, b| a + b);
        let s2 = dot(&dxhat, hr);
        let scale = cache.inv_std[r] / n;
        for i in 0..d {
            dx[r * d + i] = scale * (n * dxhat[i] - s1 - hr[i] * s2);
        }
    }
    (
        Tensor { shape: grad_out.shape().to_vec(), data: dx },
        Tensor { shape: vec![d], data: dg },
        Tensor { shape: vec![d], data: db },
    )
}

const GELU_CUBIC: f64 = 0.044715;

/// Tanh-approximation GELU.
pub fn gelu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(GELU_CUBIC);
    let half = F::lit(0.5);
    x.map(|v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<F: Real>(x: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(GELU_CUBIC);
    let half = F::lit(0.5);
    let three_a = F::lit(3.0 * GELU_CUBIC);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let d = half * (F::one() + t) + half * v * (F::one() - t * t) * c * (F::one() + three_a * v * v);
            g * d
        })
        .collect();
    Tensor { shape: x.shape().to_vec(), data }
}

/// Output extent `⌈scale·n⌉`, robust to representation error in `scale·n`.
pub fn scaled_extent(n: usize, scale: f64) -> usize {
    let v = scale * n as f64;
    ((v - 1e-9).ceil() as usize).max(1)
}

/// Per-output-index source taps `(i0, i1, weight of i1)` for align-corners-false resampling.
fn interp_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn resize_dims<F: Real>(x: &Tensor<F>, scale: f64) -> Result<(usize, usize, usize, usize, usize)> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidArgument(format!("resize scale must lie in (0, 1], got {scale}")));
    }
    let [b, c, h, w] = *x.shape() else {
        return Err(shape_err!("bilinear_resize expects B×C×H×W, got {:?}", x.shape()));
    };
    Ok((b * c, h, w, scaled_extent(h, scale), scaled_extent(w, scale)))
}

/// Align-corners-false bilinear resize of a `B×C×H×W` tensor to `⌈sH⌉×⌈sW⌉`.
pub fn bilinear_resize<F: Real>(x: &Tensor<F>, scale: f64) -> Result<Tensor<F>> {
    let (planes, h, w, oh, ow) = resize_dims(x, scale)?;
    if oh == h && ow == w {
        return Ok(x.clone());
    }
    let ty = interp_taps(h, oh);
    let tx = interp_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            let ly = F::lit(ly);
            for &(x0, x1, lx) in &tx {
                let lx = F::lit(lx);
                let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
                let (c, d) = (src[y1 * w + x0], src[y1 * w + x1]);
                let top = a + lx * (b - a);
                let bot = c + lx * (d - c);
                out.push(top + ly * (bot - top));
            }
        }
    }
    let s = x.shape();
    Tensor::new([s[0], s[1], oh, ow], out)
}

pub fn bilinear_resize_backward<F: Real>(x_shape: &[usize], scale: f64, grad_out: &Tensor<F>) -> Tensor<F> {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (scaled_extent(h, scale), scaled_extent(w, scale));
    if oh == h && ow == w {
        return grad_out.clone();
    }
    let ty = interp_taps(h, oh);
    let tx = interp_taps(w, ow);
    let mut dx = vec![F::zero(); b * c * h * w];
    for p in 0..b * c {
        let g = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = F::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = F::lit(lx);
                let gv = g[oy * ow + ox];
                let top = gv * (F::one() - ly);
                let bot = gv * ly;
                dst[y0 * w + x0] += top * (F::one() - lx);
                dst[y0 * w + x1] += top * lx;
                dst[y1 * w + x0] += bot * (F::one() - lx);
                dst[y1 * w + x1] += bot * lx;
            }
        }
    }
    Tensor { shape: x_shape.to_vec(), data: dx }
}
