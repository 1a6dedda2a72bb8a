//! Slice-level numeric routines shared by the graph's forward and backward passes.
//!
//! Layouts are row-major. Rank-3 activations are `[B, T, D]`, matrices `[K, N]`.

use crate::tensor::Real;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `tanh(x) * sigmoid(x)`.
#[inline]
pub fn gate<T: Real>(x: T) -> T {
    x.tanh() * sigmoid(x)
}

#[inline]
pub fn gate_grad<T: Real>(x: T) -> T {
    let th = x.tanh();
    let s = sigmoid(x);
    (T::one() - th * th) * s + th * s * (T::one() - s)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[inline]
pub fn smooth_l1<T: Real>(diff: T, beta: T) -> T {
    let ad = diff.abs();
    if ad < beta {
        T::lit(0.5) * diff * diff / beta
    } else {
        ad - T::lit(0.5) * beta
    }
}

#[inline]
pub fn smooth_l1_grad<T: Real>(diff: T, beta: T) -> T {
    if diff.abs() < beta {
        diff / beta
    } else if diff > T::zero() {
        T::one()
    } else if diff < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `out[M,N] = x[M,K] @ w[K,N]`.
pub fn matmul<T: Real>(x: &[T], w: &[T], k: usize, n: usize) -> Vec<T> {
    let m = x.len() / k;
    let mut out = vec![T::zero(); m * n];
    for (xr, or) in x.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (i, &xi) in xr.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let wr = &w[i * n..(i + 1) * n];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xi * wv;
            }
        }
    }
    out
}

/// `dx += dy @ w^T`.
pub fn matmul_grad_x<T: Real>(dy: &[T], w: &[T], k: usize, n: usize, dx: &mut [T]) {
    for (dyr, dxr) in dy.chunks_exact(n).zip(dx.chunks_exact_mut(k)) {
        for (i, d) in dxr.iter_mut().enumerate() {
            let wr = &w[i * n..(i + 1) * n];
            let mut acc = T::zero();
            for (&a, &b) in dyr.iter().zip(wr) {
                acc += a * b;
            }
            *d += acc;
        }
    }
}

/// `dw += x^T @ dy`.
pub fn matmul_grad_w<T: Real>(x: &[T], dy: &[T], k: usize, n: usize, dw: &mut [T]) {
    for (xr, dyr) in x.chunks_exact(k).zip(dy.chunks_exact(n)) {
        for (i, &xi) in xr.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let dwr = &mut dw[i * n..(i + 1) * n];
            for (d, &g) in dwr.iter_mut().zip(dyr) {
                *d += xi * g;
            }
        }
    }
}

/// Temporal convolution with explicit tap offsets.
///
/// `out[b,t,:] = sum_k x[b, t + offsets[k], :] @ w[k]`, taps falling outside
/// `[0, T)` read zeros. `w` is `[K, Din, Dout]`.
pub fn conv_forward<T: Real>(
    x: &[T],
    w: &[T],
    offsets: &[isize],
    (b, t, din): (usize, usize, usize),
    dout: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); b * t * dout];
    let tap = din * dout;
    for bi in 0..b {
        for ti in 0..t {
            let orow = &mut out[(bi * t + ti) * dout..(bi * t + ti + 1) * dout];
            for (kk, &off) in offsets.iter().enumerate() {
                let src = ti as isize + off;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &x[(bi * t + src as usize) * din..(bi * t + src as usize + 1) * din];
                let wk = &w[kk * tap..(kk + 1) * tap];
                for (i, &xi) in xrow.iter().enumerate() {
                    if xi == T::zero() {
                        continue;
                    }
                    let wr = &wk[i * dout..(i + 1) * dout];
                    for (o, &wv) in orow.iter_mut().zip(wr) {
                        *o += xi * wv;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    offsets: &[isize],
    (b, t, din): (usize, usize, usize),
    dout: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let tap = din * dout;
    for bi in 0..b {
        for ti in 0..t {
            let dyr = &dy[(bi * t + ti) * dout..(bi * t + ti + 1) * dout];
            for (kk, &off) in offsets.iter().enumerate() {
                let src = ti as isize + off;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let base = (bi * t + src as usize) * din;
                let wk = &w[kk * tap..(kk + 1) * tap];
                if let Some(dx) = dx.as_deref_mut() {
                    let dxr = &mut dx[base..base + din];
                    for (i, d) in dxr.iter_mut().enumerate() {
                        let wr = &wk[i * dout..(i + 1) * dout];
                        let mut acc = T::zero();
                        for (&g, &wv) in dyr.iter().zip(wr) {
                            acc += g * wv;
                        }
                        *d += acc;
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    let xrow = &x[base..base + din];
                    let dwk = &mut dw[kk * tap..(kk + 1) * tap];
                    for (i, &xi) in xrow.iter().enumerate() {
                        if xi == T::zero() {
                            continue;
                        }
                        let dwr = &mut dwk[i * dout..(i + 1) * dout];
                        for (d, &g) in dwr.iter_mut().zip(dyr) {
                            *d += xi * g;
                        }
                    }
                }
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Returns `(y, xhat, rstd)` for layer normalization over the last dimension.
pub fn layer_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let dn = T::lit(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gamma[i] + beta[i];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    d: usize,
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let rows = dy.len() / d;
    let dn = T::lit(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        if let Some(dg) = dgamma.as_deref_mut() {
            for i in 0..d {
                dg[i] += dyr[i] * hr[i];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for i in 0..d {
                db[i] += dyr[i];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for i in 0..d {
                dxhat[i] = dyr[i] * gamma[i];
                m1 += dxhat[i];
                m2 += dxhat[i] * hr[i];
            }
            m1 = m1 / dn;
            m2 = m2 / dn;
            for i in 0..d {
                dx[r * d + i] += rstd[r] * (dxhat[i] - m1 - hr[i] * m2);
            }
        }
    }
}

/// Shape bookkeeping for multi-head scaled dot-product attention.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnDims {
    fn dh(&self) -> usize {
        self.d / self.heads
    }
}

/// Returns `(out [B,Tq,D], probs [B,H,Tq,Tk])`.
pub fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], dims: AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        tq,
        tk,
        d,
        heads,
    } = dims;
    let dh = dims.dh();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut probs = vec![T::zero(); batch * heads * tq * tk];
    let mut out = vec![T::zero(); batch * tq * d];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qi = &q[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                let prow = &mut probs[((b * heads + h) * tq + i) * tk..((b * heads + h) * tq + i + 1) * tk];
                let mut mx = T::neg_infinity();
                for (j, p) in prow.iter_mut().enumerate() {
                    let kj = &k[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    *p = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut z = T::zero();
                for p in prow.iter_mut() {
                    *p = (*p - mx).exp();
                    z += *p;
                }
                for p in prow.iter_mut() {
                    *p = *p / z;
                }
                let orow = &mut out[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &v[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Accumulates gradients of attention w.r.t. `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dims: AttnDims,
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let AttnDims {
        batch,
        tq,
        tk,
        d,
        heads,
    } = dims;
    let dh = dims.dh();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dp = vec![T::zero(); tk];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let prow = &probs[((b * heads + h) * tq + i) * tk..((b * heads + h) * tq + i + 1) * tk];
                let dor = &dout[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                // dP = dO . V ; dV += P^T dO
                let mut dot = T::zero();
                for j in 0..tk {
                    let vj = &v[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                    dp[j] = dor.iter().zip(vj).map(|(&a, &c)| a * c).sum::<T>();
                    dot += dp[j] * prow[j];
                    if let Some(dv) = dv.as_deref_mut() {
                        let dvr = &mut dv[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        for (o, &g) in dvr.iter_mut().zip(dor) {
                            *o += prow[j] * g;
                        }
                    }
                }
                // dS = P * (dP - <dP, P>)
                for j in 0..tk {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    if let Some(dq) = dq.as_deref_mut() {
                        let kj = &k[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        let dqr = &mut dq[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                        for (o, &kv) in dqr.iter_mut().zip(kj) {
                            *o += ds * kv;
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        let qi = &q[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                        let dkr = &mut dk[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        for (o, &qv) in dkr.iter_mut().zip(qi) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
    }
}
