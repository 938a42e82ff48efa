//! Two-level residual 1D U-Net over padded frame sequences.

use serde::{Deserialize, Serialize};

use super::ops::{gemm, mask_rows, masked_silu, masked_silu_backward, silu, silu_grad, Conv, FourierBank, Init, ParamAlloc};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub channels: usize,
    pub blocks_per_level: usize,
    pub attention: bool,
    pub fourier_scale: f64,
    /// Column-normalized convolutions, re-projected after each step.
    pub weight_norm: bool,
    /// Per-column temporal filter from input to output with a noise-dependent
    /// gain, so every feature column gets its own path past the channel
    /// bottleneck.
    pub column_path: bool,
}

const COLUMN_TAPS: usize = 5;

impl Default for NetConfig {
    fn default() -> Self {
        Self { channels: 64, blocks_per_level: 2, attention: false, fourier_scale: 1.0, weight_norm: false, column_path: true }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidConfig("channels must be positive".into()));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::InvalidConfig("blocks_per_level must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    inject: Conv,
}

impl ResBlock {
    fn new(alloc: &mut ParamAlloc, c: usize, wn: bool) -> Self {
        Self {
            conv1: Conv::new(alloc, c, c, 3, 1, wn),
            conv2: Conv::new(alloc, c, c, 3, 1, wn),
            inject: Conv::new(alloc, c, 2 * c, 1, 1, wn),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Conv,
    k: Conv,
    v: Conv,
    o: Conv,
}

#[derive(Debug, Clone, Copy)]
struct ColumnPath {
    filter: usize,
    gain: Conv,
}

impl ColumnPath {
    /// `z[t,i] = Σ_k w[i,k]·x[t+k-h, i]` with zeros outside the sequence.
    fn filter(&self, p: &[f64], x: &[f64], l: usize, n: usize) -> Vec<f64> {
        let w = &p[self.filter..self.filter + n * COLUMN_TAPS];
        let h = COLUMN_TAPS / 2;
        let mut z = vec![0.0; l * n];
        for t in 0..l {
            for k in 0..COLUMN_TAPS {
                let Some(s) = (t + k).checked_sub(h).filter(|s| *s < l) else { continue };
                for i in 0..n {
                    z[t * n + i] += w[i * COLUMN_TAPS + k] * x[s * n + i];
                }
            }
        }
        z
    }
}

struct ColumnTape {
    xin: Vec<f64>,
    z: Vec<f64>,
    gain: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Plan {
    input: Conv,
    embed: Conv,
    enc: Vec<ResBlock>,
    down: Conv,
    mid: Vec<ResBlock>,
    attn: Option<Attention>,
    dec: Vec<ResBlock>,
    output: Conv,
    gain: usize,
    column: Option<ColumnPath>,
    alloc: ParamAlloc,
}

impl Plan {
    fn new(cfg: &NetConfig, n: usize) -> Self {
        let c = cfg.channels;
        let wn = cfg.weight_norm;
        let mut alloc = ParamAlloc::default();
        let input = Conv::new(&mut alloc, n, c, 1, 1, wn);
        let embed = Conv::new(&mut alloc, c, c, 1, 1, wn);
        let enc = (0..cfg.blocks_per_level).map(|_| ResBlock::new(&mut alloc, c, wn)).collect();
        let down = Conv::new(&mut alloc, c, c, 3, 2, wn);
        let mid = (0..cfg.blocks_per_level).map(|_| ResBlock::new(&mut alloc, c, wn)).collect();
        let attn = cfg.attention.then(|| Attention {
            q: Conv::new(&mut alloc, c, c, 1, 1, wn),
            k: Conv::new(&mut alloc, c, c, 1, 1, wn),
            v: Conv::new(&mut alloc, c, c, 1, 1, wn),
            o: Conv::new(&mut alloc, c, c, 1, 1, wn),
        });
        let dec = (0..cfg.blocks_per_level).map(|_| ResBlock::new(&mut alloc, c, wn)).collect();
        let output = Conv::new(&mut alloc, c, n, 1, 1, wn);
        let gain = alloc.take(1, Init::One);
        let column = cfg.column_path.then(|| ColumnPath {
            filter: alloc.take(n * COLUMN_TAPS, Init::Normal { fan_in: COLUMN_TAPS }),
            gain: Conv::new(&mut alloc, c, n, 1, 1, wn),
        });
        Self { input, embed, enc, down, mid, attn, dec, output, gain, column, alloc }
    }

    fn convs(&self) -> Vec<Conv> {
        let mut out = vec![self.input, self.embed, self.down, self.output];
        for b in self.enc.iter().chain(&self.mid).chain(&self.dec) {
            out.extend([b.conv1, b.conv2, b.inject]);
        }
        if let Some(a) = self.attn {
            out.extend([a.q, a.k, a.v, a.o]);
        }
        out.extend(self.column.map(|cp| cp.gain));
        out
    }
}

/// The denoiser network `F_θ`: maps an `L × N` input and a noise embedding
/// to an `L × N` output. Padded frames never influence valid outputs.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub config: NetConfig,
    pub n: usize,
    pub params: Vec<f64>,
    pub fourier: FourierBank,
    plan: Plan,
}

struct BlockTape {
    h: Vec<f64>,
    cols1: Vec<f64>,
    a_pre: Vec<f64>,
    a: Vec<f64>,
    cols2: Vec<f64>,
}

struct AttnTape {
    xin: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    attn_out: Vec<f64>,
}

/// Intermediates recorded by [`DenoiserNet::forward`]; consumed by
/// [`DenoiserNet::backward`].
pub struct Tape {
    l: usize,
    mask0: Vec<f64>,
    mask1: Vec<f64>,
    in_cols: Vec<f64>,
    phi: Vec<f64>,
    e_pre: Vec<f64>,
    emb: Vec<f64>,
    enc: Vec<BlockTape>,
    down_cols: Vec<f64>,
    mid: Vec<BlockTape>,
    attn: Option<AttnTape>,
    dec: Vec<BlockTape>,
    out_h: Vec<f64>,
    out_cols: Vec<f64>,
    out_raw: Vec<f64>,
    column: Option<ColumnTape>,
}

/// Frame mask of length `l`: ones for the first `valid` frames.
pub fn frame_mask(l: usize, valid: usize) -> Vec<f64> {
    (0..l).map(|i| if i < valid { 1.0 } else { 0.0 }).collect()
}

impl DenoiserNet {
    pub fn new(config: NetConfig, n: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n == 0 {
            return Err(Error::InvalidConfig("feature width must be positive".into()));
        }
        let plan = Plan::new(&config, n);
        let mut rng = seeding::stream(seed, &[seeding::tag::INIT, 0]);
        let params = plan.alloc.init(&mut rng);
        let fourier = FourierBank::new(&mut rng, config.channels, config.fourier_scale);
        Ok(Self { config, n, params, fourier, plan })
    }

    /// Rebuild from stored parts, checking the parameter count.
    pub fn from_parts(config: NetConfig, n: usize, params: Vec<f64>, fourier: FourierBank) -> Result<Self> {
        config.validate()?;
        let plan = Plan::new(&config, n);
        if params.len() != plan.alloc.len {
            return Err(Error::WeightCount { expected: plan.alloc.len, got: params.len() });
        }
        if fourier.freqs.len() != config.channels || fourier.phases.len() != config.channels {
            return Err(Error::WeightCount { expected: config.channels, got: fourier.freqs.len() });
        }
        Ok(Self { config, n, params, fourier, plan })
    }

    /// Resets every convolution's stored weights to RMS 1; call after each
    /// optimizer step.
    pub fn renormalize(&mut self) {
        for c in self.plan.convs() {
            c.renormalize(&mut self.params);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn gain(&self) -> f64 {
        self.params[self.plan.gain]
    }

    pub fn set_gain(&mut self, g: f64) {
        self.params[self.plan.gain] = g;
    }

    /// Sum of all output values for a fixed probe input, used as a
    /// reproducibility fingerprint.
    pub fn checksum(&self, l: usize) -> f64 {
        let x: Vec<f64> = (0..l * self.n).map(|i| ((i as f64) * 0.618_033_988_7).sin()).collect();
        let (y, _) = self.forward(&x, l, l, 0.1).expect("valid probe shape");
        y.iter().sum()
    }

    fn block_forward(&self, b: &ResBlock, h: Vec<f64>, emb: &[f64], mask: &[f64], l: usize) -> (Vec<f64>, BlockTape) {
        let c = self.config.channels;
        let p = &self.params;
        let s1 = masked_silu(&h, mask, c);
        let (a_pre, cols1) = b.conv1.forward(p, &s1, l);
        // noise-level modulation: a = a_pre·(1 + scale) + shift
        let (inj, _) = b.inject.forward(p, emb, 1);
        let (scale, shift) = inj.split_at(c);
        let mut a = a_pre.clone();
        for row in a.chunks_exact_mut(c) {
            for ((v, s), t) in row.iter_mut().zip(scale).zip(shift) {
                *v = *v * (1.0 + s) + t;
            }
        }
        let s2 = masked_silu(&a, mask, c);
        let (r, cols2) = b.conv2.forward(p, &s2, l);
        let out = h.iter().zip(&r).map(|(x, y)| x + y).collect();
        (out, BlockTape { h, cols1, a_pre, a, cols2 })
    }

    fn block_backward(
        &self,
        b: &ResBlock,
        t: &BlockTape,
        dout: Vec<f64>,
        emb: &[f64],
        demb: &mut [f64],
        mask: &[f64],
        l: usize,
        g: &mut [f64],
    ) -> Vec<f64> {
        let c = self.config.channels;
        let p = &self.params;
        let ds2 = b.conv2.backward(p, g, &t.cols2, &dout, l);
        let da = masked_silu_backward(&t.a, &ds2, mask, c);
        let (inj, _) = b.inject.forward(p, emb, 1);
        let scale = &inj[..c];
        let mut dinj = vec![0.0; 2 * c];
        let mut da_pre = da.clone();
        for ((row, pre), dpre) in da.chunks_exact(c).zip(t.a_pre.chunks_exact(c)).zip(da_pre.chunks_exact_mut(c)) {
            for j in 0..c {
                dinj[j] += row[j] * pre[j];
                dinj[c + j] += row[j];
                dpre[j] = row[j] * (1.0 + scale[j]);
            }
        }
        let de = b.inject.backward(p, g, emb, &dinj, 1);
        for (s, v) in demb.iter_mut().zip(&de) {
            *s += v;
        }
        let ds1 = b.conv1.backward(p, g, &t.cols1, &da_pre, l);
        let dh = masked_silu_backward(&t.h, &ds1, mask, c);
        dout.iter().zip(&dh).map(|(a, b)| a + b).collect()
    }

    fn attn_forward(&self, a: &Attention, h: Vec<f64>, mask: &[f64], l: usize) -> (Vec<f64>, AttnTape) {
        let c = self.config.channels;
        let p = &self.params;
        let mut xin = h.clone();
        mask_rows(&mut xin, mask, c);
        let (q, _) = a.q.forward(p, &xin, l);
        let (k, _) = a.k.forward(p, &xin, l);
        let (v, _) = a.v.forward(p, &xin, l);
        let scale = 1.0 / (c as f64).sqrt();
        let mut s = vec![0.0; l * l];
        gemm(l, c, l, &q, false, &k, true, &mut s, 0.0);
        let mut pr = vec![0.0; l * l];
        for i in 0..l {
            let row = &s[i * l..(i + 1) * l];
            let mx = row
                .iter()
                .zip(mask)
                .filter(|(_, m)| **m != 0.0)
                .map(|(v, _)| v * scale)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..l {
                if mask[j] != 0.0 {
                    let e = (row[j] * scale - mx).exp();
                    pr[i * l + j] = e;
                    z += e;
                }
            }
            pr[i * l..(i + 1) * l].iter_mut().for_each(|v| *v /= z);
        }
        let mut attn_out = vec![0.0; l * c];
        gemm(l, l, c, &pr, false, &v, false, &mut attn_out, 0.0);
        let (o, _) = a.o.forward(p, &attn_out, l);
        let out = h.iter().zip(&o).map(|(x, y)| x + y).collect();
        (out, AttnTape { xin, q, k, v, p: pr, attn_out })
    }

    fn attn_backward(&self, a: &Attention, t: &AttnTape, dout: Vec<f64>, mask: &[f64], l: usize, g: &mut [f64]) -> Vec<f64> {
        let c = self.config.channels;
        let p = &self.params;
        let scale = 1.0 / (c as f64).sqrt();
        let d_attn = a.o.backward(p, g, &t.attn_out, &dout, l);
        let mut dp = vec![0.0; l * l];
        gemm(l, c, l, &d_attn, false, &t.v, true, &mut dp, 0.0);
        let mut dv = vec![0.0; l * c];
        gemm(l, l, c, &t.p, true, &d_attn, false, &mut dv, 0.0);
        let mut ds = vec![0.0; l * l];
        for i in 0..l {
            let pr = &t.p[i * l..(i + 1) * l];
            let dr = &dp[i * l..(i + 1) * l];
            let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
            for j in 0..l {
                ds[i * l + j] = pr[j] * (dr[j] - dot) * scale;
            }
        }
        let mut dq = vec![0.0; l * c];
        gemm(l, l, c, &ds, false, &t.k, false, &mut dq, 0.0);
        let mut dk = vec![0.0; l * c];
        gemm(l, l, c, &ds, true, &t.q, false, &mut dk, 0.0);
        let mut dx = a.q.backward(p, g, &t.xin, &dq, l);
        for (conv, d) in [(&a.k, &dk), (&a.v, &dv)] {
            let part = conv.backward(p, g, &t.xin, d, l);
            dx.iter_mut().zip(&part).for_each(|(s, v)| *s += v);
        }
        mask_rows(&mut dx, mask, c);
        dout.iter().zip(&dx).map(|(a, b)| a + b).collect()
    }

    /// `F_θ(x, c_noise)` for one sample of `l` frames of which the first
    /// `valid` are real. `x` is row-major `l × n`. Output rows at padded
    /// frames are zero.
    pub fn forward(&self, x: &[f64], l: usize, valid: usize, c_noise: f64) -> Result<(Vec<f64>, Tape)> {
        let n = self.n;
        let c = self.config.channels;
        if x.len() != l * n {
            return Err(Error::DimensionMismatch { expected: l * n, got: x.len() });
        }
        if valid == 0 || valid > l {
            return Err(Error::AllMasked);
        }
        let p = &self.params;
        let plan = &self.plan;
        let mask0 = frame_mask(l, valid);
        let l1 = l.div_ceil(2);
        let mask1: Vec<f64> = (0..l1).map(|j| if 2 * j < valid { 1.0 } else { 0.0 }).collect();

        let phi = self.fourier.features(c_noise);
        let (e_pre, _) = plan.embed.forward(p, &phi, 1);
        let emb: Vec<f64> = e_pre.iter().map(|v| silu(*v)).collect();

        let mut xin = x.to_vec();
        mask_rows(&mut xin, &mask0, n);
        let (mut h, in_cols) = plan.input.forward(p, &xin, l);

        let mut enc = Vec::with_capacity(plan.enc.len());
        for b in &plan.enc {
            let (o, t) = self.block_forward(b, h, &emb, &mask0, l);
            h = o;
            enc.push(t);
        }
        let skip = h.clone();
        let mut dn = h.clone();
        mask_rows(&mut dn, &mask0, c);
        let (mut h1, down_cols) = plan.down.forward(p, &dn, l);

        let mut mid = Vec::with_capacity(plan.mid.len());
        for b in &plan.mid {
            let (o, t) = self.block_forward(b, h1, &emb, &mask1, l1);
            h1 = o;
            mid.push(t);
        }
        let mut attn = None;
        if let Some(a) = &plan.attn {
            let (o, t) = self.attn_forward(a, h1, &mask1, l1);
            h1 = o;
            attn = Some(t);
        }

        let mut h = skip;
        for i in 0..l {
            let src = &h1[(i / 2) * c..(i / 2 + 1) * c];
            for (v, s) in h[i * c..(i + 1) * c].iter_mut().zip(src) {
                *v += s;
            }
        }
        let mut dec = Vec::with_capacity(plan.dec.len());
        for b in &plan.dec {
            let (o, t) = self.block_forward(b, h, &emb, &mask0, l);
            h = o;
            dec.push(t);
        }
        let s = masked_silu(&h, &mask0, c);
        let (mut out_raw, out_cols) = plan.output.forward(p, &s, l);
        let column = plan.column.map(|cp| {
            let (gain, _) = cp.gain.forward(p, &emb, 1);
            let z = cp.filter(p, &xin, l, n);
            for (o, zr) in out_raw.chunks_exact_mut(n).zip(z.chunks_exact(n)) {
                for i in 0..n {
                    o[i] += zr[i] * (1.0 + gain[i]);
                }
            }
            ColumnTape { xin, z, gain }
        });
        mask_rows(&mut out_raw, &mask0, n);
        let gain = p[plan.gain];
        let y = out_raw.iter().map(|v| gain * v).collect();
        let tape = Tape {
            l,
            mask0,
            mask1,
            in_cols,
            phi,
            e_pre,
            emb,
            enc,
            down_cols,
            mid,
            attn,
            dec,
            out_h: h,
            out_cols,
            out_raw,
            column,
        };
        Ok((y, tape))
    }

    /// Exact reverse pass: returns parameter gradients and `∂/∂x` for the
    /// upstream gradient `dy` on the output.
    pub fn backward(&self, tape: &Tape, dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.n;
        let c = self.config.channels;
        let l = tape.l;
        if dy.len() != l * n {
            return Err(Error::DimensionMismatch { expected: l * n, got: dy.len() });
        }
        let p = &self.params;
        let plan = &self.plan;
        let mut g = vec![0.0; p.len()];
        let l1 = l.div_ceil(2);
        let mut demb = vec![0.0; c];

        let gain = p[plan.gain];
        let mut d_raw: Vec<f64> = dy.iter().map(|v| gain * v).collect();
        mask_rows(&mut d_raw, &tape.mask0, n);
        g[plan.gain] = tape.out_raw.iter().zip(dy).map(|(a, b)| a * b).sum();
        let mut dx_col = None;
        if let (Some(cp), Some(ct)) = (&plan.column, &tape.column) {
            let w = cp.filter;
            let h = COLUMN_TAPS / 2;
            let mut dgain = vec![0.0; n];
            let mut dxc = vec![0.0; l * n];
            for t in 0..l {
                for i in 0..n {
                    let d = d_raw[t * n + i];
                    dgain[i] += d * ct.z[t * n + i];
                    let dz = d * (1.0 + ct.gain[i]);
                    for k in 0..COLUMN_TAPS {
                        let Some(s) = (t + k).checked_sub(h).filter(|s| *s < l) else { continue };
                        g[w + i * COLUMN_TAPS + k] += dz * ct.xin[s * n + i];
                        dxc[s * n + i] += dz * p[w + i * COLUMN_TAPS + k];
                    }
                }
            }
            let de = cp.gain.backward(p, &mut g, &tape.emb, &dgain, 1);
            for (a, b) in demb.iter_mut().zip(&de) {
                *a += b;
            }
            dx_col = Some(dxc);
        }
        let ds = plan.output.backward(p, &mut g, &tape.out_cols, &d_raw, l);
        let mut dh = masked_silu_backward(&tape.out_h, &ds, &tape.mask0, c);

        for (b, t) in plan.dec.iter().zip(&tape.dec).rev() {
            dh = self.block_backward(b, t, dh, &tape.emb, &mut demb, &tape.mask0, l, &mut g);
        }
        let mut dh1 = vec![0.0; l1 * c];
        for i in 0..l {
            let dst = &mut dh1[(i / 2) * c..(i / 2 + 1) * c];
            for (a, b) in dst.iter_mut().zip(&dh[i * c..(i + 1) * c]) {
                *a += b;
            }
        }
        if let (Some(a), Some(t)) = (&plan.attn, &tape.attn) {
            dh1 = self.attn_backward(a, t, dh1, &tape.mask1, l1, &mut g);
        }
        for (b, t) in plan.mid.iter().zip(&tape.mid).rev() {
            dh1 = self.block_backward(b, t, dh1, &tape.emb, &mut demb, &tape.mask1, l1, &mut g);
        }
        let mut ddown = plan.down.backward(p, &mut g, &tape.down_cols, &dh1, l);
        mask_rows(&mut ddown, &tape.mask0, c);
        for (a, b) in dh.iter_mut().zip(&ddown) {
            *a += b;
        }
        for (b, t) in plan.enc.iter().zip(&tape.enc).rev() {
            dh = self.block_backward(b, t, dh, &tape.emb, &mut demb, &tape.mask0, l, &mut g);
        }
        let mut dx = plan.input.backward(p, &mut g, &tape.in_cols, &dh, l);
        if let Some(dxc) = dx_col {
            for (a, b) in dx.iter_mut().zip(&dxc) {
                *a += b;
            }
        }
        mask_rows(&mut dx, &tape.mask0, n);

        let de_pre: Vec<f64> = demb.iter().zip(&tape.e_pre).map(|(d, e)| d * silu_grad(*e)).collect();
        plan.embed.backward(p, &mut g, &tape.phi, &de_pre, 1);
        Ok((g, dx))
    }
}
