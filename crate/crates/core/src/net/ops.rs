//! Dense primitives over row-major `positions × channels` buffers.

use std::borrow::Cow;
use rand::Rng;
use rand_distr::StandardNormal;

/// `C = beta·C + op(A)·op(B)` with `op(A)` of shape `m×k` and `op(B)` of
/// shape `k×n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reachable from the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Zero every row whose mask entry is zero.
pub fn mask_rows(x: &mut [f64], mask: &[f64], c: usize) {
    for (row, m) in x.chunks_exact_mut(c).zip(mask) {
        if *m == 0.0 {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// `mask ⊙ silu(x)`.
pub fn masked_silu(x: &[f64], mask: &[f64], c: usize) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().map(|v| silu(*v)).collect();
    mask_rows(&mut out, mask, c);
    out
}

/// Backward of [`masked_silu`].
pub fn masked_silu_backward(x: &[f64], dy: &[f64], mask: &[f64], c: usize) -> Vec<f64> {
    let mut dx: Vec<f64> = x.iter().zip(dy).map(|(x, d)| d * silu_grad(*x)).collect();
    mask_rows(&mut dx, mask, c);
    dx
}

/// Parameter slot allocator: hands out contiguous ranges of the flat
/// parameter vector and records how to initialize them.
#[derive(Debug, Default, Clone)]
pub struct ParamAlloc {
    pub len: usize,
    inits: Vec<(usize, usize, Init)>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal { fan_in: usize },
    Zero,
    One,
}

impl ParamAlloc {
    pub fn take(&mut self, n: usize, init: Init) -> usize {
        let off = self.len;
        self.inits.push((off, n, init));
        self.len += n;
        off
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.len];
        for &(off, n, init) in &self.inits {
            let dst = &mut p[off..off + n];
            match init {
                Init::Normal { fan_in } => {
                    let s = 1.0 / (fan_in as f64).sqrt();
                    for v in dst {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = s * z;
                    }
                }
                Init::Zero => dst.iter_mut().for_each(|v| *v = 0.0),
                Init::One => dst.iter_mut().for_each(|v| *v = 1.0),
            }
        }
        p
    }
}

/// Smoothing term in the weight norm so all-zero weights stay differentiable.
const NORM_EPS: f64 = 1e-8;

/// 1D convolution with zero padding `k/2`, weights stored `(k·c_in) × c_out`.
///
/// With `normalized` set the layer uses `w/‖w‖` per output channel, so
/// unit-variance inputs give unit-variance outputs whatever the stored
/// scale, and [`Conv::renormalize`] resets the stored columns to RMS 1 after
/// each optimizer step. That keeps Adam's step size fixed relative to the
/// weights. Otherwise weights are used as stored, initialised N(0, 1/fan_in).
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub normalized: bool,
}

impl Conv {
    pub fn new(alloc: &mut ParamAlloc, c_in: usize, c_out: usize, k: usize, stride: usize, normalized: bool) -> Self {
        let fan_in = if normalized { 1 } else { k * c_in };
        let w = alloc.take(k * c_in * c_out, Init::Normal { fan_in });
        let b = alloc.take(c_out, Init::Zero);
        Self { w, b, c_in, c_out, k, stride, normalized }
    }

    fn raw<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.k * self.c_in * self.c_out]
    }

    /// `1/√(‖w_o‖² + ε²)` per output channel.
    fn inv_norms(&self, p: &[f64]) -> Vec<f64> {
        let mut sq = vec![0.0; self.c_out];
        for row in self.raw(p).chunks_exact(self.c_out) {
            for (s, v) in sq.iter_mut().zip(row) {
                *s += v * v;
            }
        }
        sq.iter().map(|s| 1.0 / (s + NORM_EPS * NORM_EPS).sqrt()).collect()
    }

    /// Effective weights.
    pub fn weights<'a>(&self, p: &'a [f64]) -> Cow<'a, [f64]> {
        if !self.normalized {
            return Cow::Borrowed(self.raw(p));
        }
        let inv = self.inv_norms(p);
        let mut w = self.raw(p).to_vec();
        for row in w.chunks_exact_mut(self.c_out) {
            for (v, s) in row.iter_mut().zip(&inv) {
                *v *= s;
            }
        }
        Cow::Owned(w)
    }

    /// Rescale each stored column to RMS 1. Leaves the layer's function
    /// unchanged up to the smoothing term. No-op for plain layers.
    pub fn renormalize(&self, p: &mut [f64]) {
        if !self.normalized {
            return;
        }
        let inv = self.inv_norms(p);
        let target = ((self.k * self.c_in) as f64).sqrt();
        let range = self.w..self.w + self.k * self.c_in * self.c_out;
        for row in p[range].chunks_exact_mut(self.c_out) {
            for (v, s) in row.iter_mut().zip(&inv) {
                *v *= s * target;
            }
        }
    }

    pub fn l_out(&self, l_in: usize) -> usize {
        l_in.div_ceil(self.stride)
    }

    /// Returns the output and the unfolded input kept for backward.
    pub fn forward(&self, p: &[f64], x: &[f64], l_in: usize) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), l_in * self.c_in);
        let lo = self.l_out(l_in);
        let kc = self.k * self.c_in;
        let cols = if self.k == 1 && self.stride == 1 {
            x.to_vec()
        } else {
            let mut cols = vec![0.0; lo * kc];
            let half = (self.k / 2) as isize;
            for j in 0..lo {
                for kk in 0..self.k {
                    let src = (self.stride * j + kk) as isize - half;
                    if src >= 0 && (src as usize) < l_in {
                        let s = src as usize * self.c_in;
                        let d = j * kc + kk * self.c_in;
                        cols[d..d + self.c_in].copy_from_slice(&x[s..s + self.c_in]);
                    }
                }
            }
            cols
        };
        let bias = &p[self.b..self.b + self.c_out];
        let mut y = Vec::with_capacity(lo * self.c_out);
        for _ in 0..lo {
            y.extend_from_slice(bias);
        }
        gemm(lo, kc, self.c_out, &cols, false, &self.weights(p), false, &mut y, 1.0);
        (y, cols)
    }

    /// Weight gradient through `w/s`: `d(w/s)/dw = I/s − w·wᵀ/s³` per column.
    fn project_grad(&self, p: &[f64], g: &mut [f64], cols: &[f64], dy: &[f64], lo: usize) {
        let kc = self.k * self.c_in;
        let mut gw = vec![0.0; kc * self.c_out];
        gemm(kc, lo, self.c_out, cols, true, dy, false, &mut gw, 0.0);
        let inv = self.inv_norms(p);
        let raw = self.raw(p);
        let mut dots = vec![0.0; self.c_out];
        for (wr, gr) in raw.chunks_exact(self.c_out).zip(gw.chunks_exact(self.c_out)) {
            for o in 0..self.c_out {
                dots[o] += wr[o] * gr[o];
            }
        }
        let dst = &mut g[self.w..self.w + kc * self.c_out];
        for ((d, wr), gr) in dst.chunks_exact_mut(self.c_out).zip(raw.chunks_exact(self.c_out)).zip(gw.chunks_exact(self.c_out)) {
            for o in 0..self.c_out {
                d[o] += inv[o] * gr[o] - wr[o] * dots[o] * inv[o].powi(3);
            }
        }
    }

    /// Accumulates parameter gradients into `g` and returns `∂/∂x`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], cols: &[f64], dy: &[f64], l_in: usize) -> Vec<f64> {
        let lo = self.l_out(l_in);
        let kc = self.k * self.c_in;
        if !self.normalized {
            gemm(kc, lo, self.c_out, cols, true, dy, false, &mut g[self.w..self.w + kc * self.c_out], 1.0);
        } else {
            self.project_grad(p, g, cols, dy, lo);
        }
        let weights = self.weights(p);
        let gb = &mut g[self.b..self.b + self.c_out];
        for row in dy.chunks_exact(self.c_out) {
            for (a, d) in gb.iter_mut().zip(row) {
                *a += d;
            }
        }
        let mut dcols = vec![0.0; lo * kc];
        gemm(lo, self.c_out, kc, dy, false, &weights, true, &mut dcols, 0.0);
        if self.k == 1 && self.stride == 1 {
            return dcols;
        }
        let mut dx = vec![0.0; l_in * self.c_in];
        let half = (self.k / 2) as isize;
        for j in 0..lo {
            for kk in 0..self.k {
                let src = (self.stride * j + kk) as isize - half;
                if src >= 0 && (src as usize) < l_in {
                    let s = src as usize * self.c_in;
                    let d = j * kc + kk * self.c_in;
                    for (a, b) in dx[s..s + self.c_in].iter_mut().zip(&dcols[d..d + self.c_in]) {
                        *a += b;
                    }
                }
            }
        }
        dx
    }
}

/// Fixed random Fourier features `√2·cos(2π(f·c + φ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBank {
    pub freqs: Vec<f64>,
    pub phases: Vec<f64>,
}

impl FourierBank {
    /// Values are rounded through `f32` so a checkpoint round trip is exact.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, size: usize, scale: f64) -> Self {
        let mut freqs = Vec::with_capacity(size);
        let mut phases = Vec::with_capacity(size);
        for _ in 0..size {
            let z: f64 = rng.sample(StandardNormal);
            freqs.push((scale * z) as f32 as f64);
            phases.push(rng.random::<f64>() as f32 as f64);
        }
        Self { freqs, phases }
    }

    pub fn features(&self, c: f64) -> Vec<f64> {
        let tau = std::f64::consts::TAU;
        self.freqs
            .iter()
            .zip(&self.phases)
            .map(|(f, p)| std::f64::consts::SQRT_2 * (tau * (f * c + p)).cos())
            .collect()
    }
}
