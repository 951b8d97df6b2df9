//! Raw numeric kernels: forward and backward rules over plain slices.
//!
//! Everything here is single-threaded and allocation-disciplined; callers
//! (the tape, the benchmark) decide where parallelism happens. Matrix
//! products go through `matrixmultiply`; all other loops are hand-rolled.

use super::scalar::Scalar;
use super::Tensor;

// ---------------------------------------------------------------------------
// Dense matrix product
// ---------------------------------------------------------------------------

/// c = a[m,k] · b[k,n], overwriting c.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            S::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c += alpha · op_a(a) · op_b(b) where each operand is optionally transposed.
///
/// `a` is m×k after transposition, `b` is k×n after transposition.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc<S: Scalar>(
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    c: &mut [S],
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    beta: S,
) {
    // Strides for a stored row-major with logical shape m×k (or k×m if transposed).
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution (via im2col)
// ---------------------------------------------------------------------------

pub fn conv2d_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [S],
) {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(w, kw, stride, pad);
    debug_assert_eq!(col.len(), cin * kh * kw * oh * ow);
    let mut r = 0usize;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[r * oh * ow..(r + 1) * oh * ow];
                r += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc<S: Scalar>(
    col: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [S],
) {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(w, kw, stride, pad);
    let mut r = 0usize;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[r * oh * ow..(r + 1) * oh * ow];
                r += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding: out[Cout,OH,OW].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: Option<&[S]>,
    cin: usize,
    h: usize,
    wdt: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<S> {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(wdt, kw, stride, pad);
    let kdim = cin * kh * kw;
    let mut col = vec![S::zero(); kdim * oh * ow];
    im2col(x, cin, h, wdt, kh, kw, stride, pad, &mut col);
    let mut out = vec![S::zero(); cout * oh * ow];
    matmul(w, &col, &mut out, cout, kdim, oh * ow);
    if let Some(b) = bias {
        for co in 0..cout {
            let bv = b[co];
            for o in &mut out[co * oh * ow..(co + 1) * oh * ow] {
                *o += bv;
            }
        }
    }
    out
}

/// Accumulates gradients for input, weights and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dout: &[S],
    cin: usize,
    h: usize,
    wdt: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    dbias: Option<&mut [S]>,
) {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(wdt, kw, stride, pad);
    let kdim = cin * kh * kw;
    let npix = oh * ow;
    if let Some(dw) = dw {
        let mut col = vec![S::zero(); kdim * npix];
        im2col(x, cin, h, wdt, kh, kw, stride, pad, &mut col);
        // dW[cout,kdim] += dOut[cout,npix] · colᵀ[npix,kdim]
        gemm_acc(dout, false, &col, true, dw, cout, npix, kdim, S::one(), S::one());
    }
    if let Some(dx) = dx {
        let mut dcol = vec![S::zero(); kdim * npix];
        // dcol[kdim,npix] = wᵀ[kdim,cout] · dOut[cout,npix]
        gemm_acc(w, true, dout, false, &mut dcol, kdim, cout, npix, S::one(), S::zero());
        col2im_acc(&dcol, cin, h, wdt, kh, kw, stride, pad, dx);
    }
    if let Some(db) = dbias {
        for co in 0..cout {
            let mut s = S::zero();
            for &g in &dout[co * npix..(co + 1) * npix] {
                s += g;
            }
            db[co] += s;
        }
    }
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis of [n,C]
// ---------------------------------------------------------------------------

/// Normalizes one row in place into `out`: (x-mean)/sqrt(var+eps)*gamma + beta.
/// Variance is the biased (population) estimate.
pub fn ln_row_forward<S: Scalar>(x: &[S], gamma: &[S], beta: &[S], eps: S, out: &mut [S]) {
    let c = x.len();
    let cn = S::from_f64(c as f64);
    let mut mu = S::zero();
    for &v in x {
        mu += v;
    }
    mu /= cn;
    let mut var = S::zero();
    for &v in x {
        let d = v - mu;
        var += d * d;
    }
    var /= cn;
    let inv = (var + eps).sqrt().recip();
    for i in 0..c {
        out[i] = (x[i] - mu) * inv * gamma[i] + beta[i];
    }
}

/// Backward of `ln_row_forward`. Accumulates into dx, dgamma, dbeta.
pub fn ln_row_backward<S: Scalar>(
    x: &[S],
    gamma: &[S],
    eps: S,
    dy: &[S],
    dx: &mut [S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) {
    let c = x.len();
    let cn = S::from_f64(c as f64);
    let mut mu = S::zero();
    for &v in x {
        mu += v;
    }
    mu /= cn;
    let mut var = S::zero();
    for &v in x {
        let d = v - mu;
        var += d * d;
    }
    var /= cn;
    let inv = (var + eps).sqrt().recip();

    let mut mean_dxhat = S::zero();
    let mut mean_dxhat_xhat = S::zero();
    for i in 0..c {
        let xhat = (x[i] - mu) * inv;
        let dxhat = dy[i] * gamma[i];
        dgamma[i] += dy[i] * xhat;
        dbeta[i] += dy[i];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat;
    }
    mean_dxhat /= cn;
    mean_dxhat_xhat /= cn;
    for i in 0..c {
        let xhat = (x[i] - mu) * inv;
        let dxhat = dy[i] * gamma[i];
        dx[i] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
}

pub fn layer_norm_forward<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    eps: S,
    n: usize,
    c: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); n * c];
    for i in 0..n {
        ln_row_forward(&x[i * c..(i + 1) * c], gamma, beta, eps, &mut out[i * c..(i + 1) * c]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<S: Scalar>(
    x: &[S],
    gamma: &[S],
    eps: S,
    dy: &[S],
    n: usize,
    c: usize,
    dx: &mut [S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) {
    for i in 0..n {
        ln_row_backward(
            &x[i * c..(i + 1) * c],
            gamma,
            eps,
            &dy[i * c..(i + 1) * c],
            &mut dx[i * c..(i + 1) * c],
            dgamma,
            dbeta,
        );
    }
}

// ---------------------------------------------------------------------------
// Bilinear sampling, warping, resizing
// ---------------------------------------------------------------------------

/// Corner indices and weights for a bilinear tap at (x, y), clamp-to-edge.
/// Returns (x0, x1, y0, y1, fx, fy, x_interior, y_interior); the interior
/// flags mark where the coordinate gradient is nonzero (not clamped).
#[inline]
fn bilinear_setup<S: Scalar>(
    x: S,
    y: S,
    w: usize,
    h: usize,
) -> (usize, usize, usize, usize, S, S, bool, bool) {
    let zero = S::zero();
    let wmax = S::from_f64((w - 1) as f64);
    let hmax = S::from_f64((h - 1) as f64);
    let x_int = x > zero && x < wmax;
    let y_int = y > zero && y < hmax;
    let xc = x.max(zero).min(wmax);
    let yc = y.max(zero).min(hmax);
    let x0f = xc.floor();
    let y0f = yc.floor();
    let fx = xc - x0f;
    let fy = yc - y0f;
    let x0 = x0f.to_f64_() as usize;
    let y0 = y0f.to_f64_() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    (x0, x1, y0, y1, fx, fy, x_int, y_int)
}

/// Bilinear sample of one plane at (x, y), clamp-to-edge.
pub fn bilinear_sample<S: Scalar>(plane: &[S], h: usize, w: usize, x: S, y: S) -> S {
    let (x0, x1, y0, y1, fx, fy, _, _) = bilinear_setup(x, y, w, h);
    let v00 = plane[y0 * w + x0];
    if fx == S::zero() && fy == S::zero() {
        return v00;
    }
    let v01 = plane[y0 * w + x1];
    let v10 = plane[y1 * w + x0];
    let v11 = plane[y1 * w + x1];
    let one = S::one();
    v00 * (one - fx) * (one - fy) + v01 * fx * (one - fy) + v10 * (one - fx) * fy + v11 * fx * fy
}

/// out(c,p) = feat(c, p + flow(p)), bilinear with clamped sample coordinates.
/// flow channel 0 is the x displacement, channel 1 the y displacement.
pub fn warp_forward<S: Scalar>(feat: &[S], flow: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let npix = h * w;
    let mut out = vec![S::zero(); c * npix];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = S::from_f64(x as f64) + flow[p];
            let sy = S::from_f64(y as f64) + flow[npix + p];
            let (x0, x1, y0, y1, fx, fy, _, _) = bilinear_setup(sx, sy, w, h);
            if fx == S::zero() && fy == S::zero() {
                for ci in 0..c {
                    out[ci * npix + p] = feat[ci * npix + y0 * w + x0];
                }
                continue;
            }
            let one = S::one();
            let w00 = (one - fx) * (one - fy);
            let w01 = fx * (one - fy);
            let w10 = (one - fx) * fy;
            let w11 = fx * fy;
            for ci in 0..c {
                let pl = &feat[ci * npix..(ci + 1) * npix];
                out[ci * npix + p] = pl[y0 * w + x0] * w00
                    + pl[y0 * w + x1] * w01
                    + pl[y1 * w + x0] * w10
                    + pl[y1 * w + x1] * w11;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn warp_backward<S: Scalar>(
    feat: &[S],
    flow: &[S],
    dout: &[S],
    c: usize,
    h: usize,
    w: usize,
    dfeat: Option<&mut [S]>,
    dflow: Option<&mut [S]>,
) {
    let npix = h * w;
    let mut dfeat = dfeat;
    let mut dflow = dflow;
    let one = S::one();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = S::from_f64(x as f64) + flow[p];
            let sy = S::from_f64(y as f64) + flow[npix + p];
            let (x0, x1, y0, y1, fx, fy, x_int, y_int) = bilinear_setup(sx, sy, w, h);
            let w00 = (one - fx) * (one - fy);
            let w01 = fx * (one - fy);
            let w10 = (one - fx) * fy;
            let w11 = fx * fy;
            let mut gx = S::zero();
            let mut gy = S::zero();
            for ci in 0..c {
                let g = dout[ci * npix + p];
                if g == S::zero() {
                    continue;
                }
                if let Some(df) = dfeat.as_deref_mut() {
                    let pl = &mut df[ci * npix..(ci + 1) * npix];
                    pl[y0 * w + x0] += g * w00;
                    pl[y0 * w + x1] += g * w01;
                    pl[y1 * w + x0] += g * w10;
                    pl[y1 * w + x1] += g * w11;
                }
                if dflow.is_some() {
                    let pl = &feat[ci * npix..(ci + 1) * npix];
                    let v00 = pl[y0 * w + x0];
                    let v01 = pl[y0 * w + x1];
                    let v10 = pl[y1 * w + x0];
                    let v11 = pl[y1 * w + x1];
                    // d(sample)/dsx and /dsy; zero where the clamp is active.
                    if x_int {
                        gx += g * ((v01 - v00) * (one - fy) + (v11 - v10) * fy);
                    }
                    if y_int {
                        gy += g * ((v10 - v00) * (one - fx) + (v11 - v01) * fx);
                    }
                }
            }
            if let Some(dfl) = dflow.as_deref_mut() {
                dfl[p] += gx;
                dfl[npix + p] += gy;
            }
        }
    }
}

/// Bilinear resize with half-pixel centers (align-corners false), clamp-to-edge.
pub fn resize_forward<S: Scalar>(
    src: &[S],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); c * oh * ow];
    let sy_scale = h as f64 / oh as f64;
    let sx_scale = w as f64 / ow as f64;
    for oy in 0..oh {
        let sy = S::from_f64((oy as f64 + 0.5) * sy_scale - 0.5);
        for ox in 0..ow {
            let sx = S::from_f64((ox as f64 + 0.5) * sx_scale - 0.5);
            let (x0, x1, y0, y1, fx, fy, _, _) = bilinear_setup(sx, sy, w, h);
            let one = S::one();
            let w00 = (one - fx) * (one - fy);
            let w01 = fx * (one - fy);
            let w10 = (one - fx) * fy;
            let w11 = fx * fy;
            for ci in 0..c {
                let pl = &src[ci * h * w..(ci + 1) * h * w];
                out[(ci * oh + oy) * ow + ox] = pl[y0 * w + x0] * w00
                    + pl[y0 * w + x1] * w01
                    + pl[y1 * w + x0] * w10
                    + pl[y1 * w + x1] * w11;
            }
        }
    }
    out
}

pub fn resize_backward<S: Scalar>(
    dout: &[S],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dsrc: &mut [S],
) {
    let sy_scale = h as f64 / oh as f64;
    let sx_scale = w as f64 / ow as f64;
    for oy in 0..oh {
        let sy = S::from_f64((oy as f64 + 0.5) * sy_scale - 0.5);
        for ox in 0..ow {
            let sx = S::from_f64((ox as f64 + 0.5) * sx_scale - 0.5);
            let (x0, x1, y0, y1, fx, fy, _, _) = bilinear_setup(sx, sy, w, h);
            let one = S::one();
            let w00 = (one - fx) * (one - fy);
            let w01 = fx * (one - fy);
            let w10 = (one - fx) * fy;
            let w11 = fx * fy;
            for ci in 0..c {
                let g = dout[(ci * oh + oy) * ow + ox];
                if g == S::zero() {
                    continue;
                }
                let pl = &mut dsrc[ci * h * w..(ci + 1) * h * w];
                pl[y0 * w + x0] += g * w00;
                pl[y0 * w + x1] += g * w01;
                pl[y1 * w + x0] += g * w10;
                pl[y1 * w + x1] += g * w11;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Galerkin attention, fused: z = Q · (L_k(K)ᵀ · L_v(V)) / n
// ---------------------------------------------------------------------------

/// Layer-norm affine parameters applied to K or V rows inside the fused kernel.
#[derive(Clone, Copy)]
pub struct LnParams<'a, S: Scalar> {
    pub gamma: &'a [S],
    pub beta: &'a [S],
    pub eps: S,
}

/// Values saved by the fused forward for the backward pass.
#[derive(Clone, Debug)]
pub struct GalerkinSaved<S: Scalar> {
    /// The C×C factor L_k(K)ᵀ·L_v(V) (unscaled by 1/n).
    pub m: Tensor<S>,
}

const GALERKIN_BLOCK: usize = 64;

fn norm_block<S: Scalar>(src: &[S], rows: usize, c: usize, ln: Option<LnParams<S>>, buf: &mut [S]) {
    match ln {
        Some(p) => {
            for i in 0..rows {
                ln_row_forward(&src[i * c..(i + 1) * c], p.gamma, p.beta, p.eps, &mut buf[i * c..(i + 1) * c]);
            }
        }
        None => buf[..rows * c].copy_from_slice(&src[..rows * c]),
    }
}

/// Fused forward. Auxiliary memory is O(C²) plus two fixed row blocks,
/// independent of n: key/value rows are normalized block-wise and folded
/// straight into the C×C accumulator.
pub fn galerkin_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    n: usize,
    c: usize,
    ln_k: Option<LnParams<S>>,
    ln_v: Option<LnParams<S>>,
) -> (Vec<S>, GalerkinSaved<S>) {
    let mut m = vec![S::zero(); c * c];
    let mut kbuf = vec![S::zero(); GALERKIN_BLOCK * c];
    let mut vbuf = vec![S::zero(); GALERKIN_BLOCK * c];
    let mut i = 0;
    while i < n {
        let rows = GALERKIN_BLOCK.min(n - i);
        norm_block(&k[i * c..(i + rows) * c], rows, c, ln_k, &mut kbuf);
        norm_block(&v[i * c..(i + rows) * c], rows, c, ln_v, &mut vbuf);
        // m += kbufᵀ[c,rows] · vbuf[rows,c]
        gemm_acc(&kbuf[..rows * c], true, &vbuf[..rows * c], false, &mut m, c, rows, c, S::one(), S::one());
        i += rows;
    }
    let mut z = vec![S::zero(); n * c];
    let inv_n = S::from_f64(1.0 / n as f64);
    // z = q · m / n
    gemm_acc(q, false, &m, false, &mut z, n, c, c, inv_n, S::zero());
    let saved = GalerkinSaved {
        m: Tensor::new(vec![c, c], m).expect("c*c elements"),
    };
    (z, saved)
}

/// Gradient sinks for the fused backward; any may be absent.
pub struct GalerkinGrads<'a, S: Scalar> {
    pub dq: Option<&'a mut [S]>,
    pub dk: Option<&'a mut [S]>,
    pub dv: Option<&'a mut [S]>,
    pub dgamma_k: Option<&'a mut [S]>,
    pub dbeta_k: Option<&'a mut [S]>,
    pub dgamma_v: Option<&'a mut [S]>,
    pub dbeta_v: Option<&'a mut [S]>,
}

#[allow(clippy::too_many_arguments)]
pub fn galerkin_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    n: usize,
    c: usize,
    ln_k: Option<LnParams<S>>,
    ln_v: Option<LnParams<S>>,
    saved: &GalerkinSaved<S>,
    dz: &[S],
    grads: GalerkinGrads<S>,
) {
    let inv_n = S::from_f64(1.0 / n as f64);
    let m = saved.m.data();
    if let Some(dq) = grads.dq {
        // dQ += dZ · mᵀ / n
        gemm_acc(dz, false, m, true, dq, n, c, c, inv_n, S::one());
    }
    let need_kv = grads.dk.is_some()
        || grads.dv.is_some()
        || grads.dgamma_k.is_some()
        || grads.dgamma_v.is_some();
    if !need_kv {
        return;
    }
    // dM = Qᵀ · dZ / n
    let mut dm = vec![S::zero(); c * c];
    gemm_acc(q, true, dz, false, &mut dm, c, n, c, inv_n, S::zero());

    let mut dk_sink = grads.dk;
    let mut dv_sink = grads.dv;
    let mut dgk = grads.dgamma_k;
    let mut dbk = grads.dbeta_k;
    let mut dgv = grads.dgamma_v;
    let mut dbv = grads.dbeta_v;

    let mut kbuf = vec![S::zero(); GALERKIN_BLOCK * c];
    let mut vbuf = vec![S::zero(); GALERKIN_BLOCK * c];
    let mut dabuf = vec![S::zero(); GALERKIN_BLOCK * c];
    let mut dbbuf = vec![S::zero(); GALERKIN_BLOCK * c];
    let mut i = 0;
    while i < n {
        let rows = GALERKIN_BLOCK.min(n - i);
        let ks = &k[i * c..(i + rows) * c];
        let vs = &v[i * c..(i + rows) * c];
        norm_block(ks, rows, c, ln_k, &mut kbuf);
        norm_block(vs, rows, c, ln_v, &mut vbuf);
        // M = AᵀB with A = normed K rows, B = normed V rows:
        //   dA = B · dMᵀ, dB = A · dM
        gemm_acc(&vbuf[..rows * c], false, &dm, true, &mut dabuf[..rows * c], rows, c, c, S::one(), S::zero());
        gemm_acc(&kbuf[..rows * c], false, &dm, false, &mut dbbuf[..rows * c], rows, c, c, S::one(), S::zero());
        for r in 0..rows {
            let row = i + r;
            let da = &dabuf[r * c..(r + 1) * c];
            match ln_k {
                Some(p) => {
                    if let (Some(dk), Some(dg), Some(db)) =
                        (dk_sink.as_deref_mut(), dgk.as_deref_mut(), dbk.as_deref_mut())
                    {
                        ln_row_backward(&ks[r * c..(r + 1) * c], p.gamma, p.eps, da, &mut dk[row * c..(row + 1) * c], dg, db);
                    }
                }
                None => {
                    if let Some(dk) = dk_sink.as_deref_mut() {
                        for j in 0..c {
                            dk[row * c + j] += da[j];
                        }
                    }
                }
            }
            let dbr = &dbbuf[r * c..(r + 1) * c];
            match ln_v {
                Some(p) => {
                    if let (Some(dv), Some(dg), Some(db)) =
                        (dv_sink.as_deref_mut(), dgv.as_deref_mut(), dbv.as_deref_mut())
                    {
                        ln_row_backward(&vs[r * c..(r + 1) * c], p.gamma, p.eps, dbr, &mut dv[row * c..(row + 1) * c], dg, db);
                    }
                }
                None => {
                    if let Some(dv) = dv_sink.as_deref_mut() {
                        for j in 0..c {
                            dv[row * c + j] += dbr[j];
                        }
                    }
                }
            }
        }
        i += rows;
    }
}
